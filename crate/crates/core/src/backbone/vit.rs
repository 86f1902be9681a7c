use std::hash::Hasher;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::safetensors::SafeTensors;
use super::{patchify, BackboneSpec, FeatureMap, ImageTensor, RawFeatureMap};
use crate::error::{GazeError, Result};
use crate::nn::{trunc_normal, BilinearResize, HasParams, LayerNorm, Linear, Mlp, MultiHeadAttention};

const DINO_LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitArch {
    Small,
    Base,
    Large,
}

impl VitArch {
    /// `(width, depth, heads)`
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            VitArch::Small => (384, 12, 6),
            VitArch::Base => (768, 12, 12),
            VitArch::Large => (1024, 24, 16),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VitArch::Small => "vits14",
            VitArch::Base => "vitb14",
            VitArch::Large => "vitl14",
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm<f32>,
    attn: MultiHeadAttention<f32>,
    ls1: Array1<f32>,
    norm2: LayerNorm<f32>,
    mlp: Mlp<f32>,
    ls2: Array1<f32>,
}

/// DINOv2-layout vision transformer, inference only.
///
/// Output is the final-layer patch tokens after the closing LayerNorm; the class
/// and register tokens are dropped.
#[derive(Debug, Clone)]
pub struct VitBackbone {
    patch: usize,
    patch_embed: Linear<f32>,
    cls_token: Array1<f32>,
    registers: Array2<f32>,
    /// `(1 + gh·gw, d)`, class position first.
    pos_embed: Array2<f32>,
    pos_grid: (usize, usize),
    blocks: Vec<Block>,
    norm: LayerNorm<f32>,
}

impl VitBackbone {
    /// Frozen weights drawn from a seeded truncated normal.
    pub fn random(spec: &BackboneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.d_f;
        let p = spec.patch_size;
        let g = spec.grid_size();
        let blocks = (0..spec.depth)
            .map(|_| Block {
                norm1: LayerNorm::with_eps(d, DINO_LN_EPS),
                attn: MultiHeadAttention::new(d, spec.num_heads, &mut rng),
                ls1: Array1::from_elem(d, 0.1),
                norm2: LayerNorm::with_eps(d, DINO_LN_EPS),
                mlp: Mlp::new(d, 4 * d, &mut rng),
                ls2: Array1::from_elem(d, 0.1),
            })
            .collect();
        Self {
            patch: p,
            patch_embed: Linear::new(3 * p * p, d, &mut rng),
            cls_token: trunc_normal(d, 0.02, &mut rng),
            registers: trunc_normal((spec.num_registers, d), 0.02, &mut rng),
            pos_embed: trunc_normal((1 + g * g, d), 0.02, &mut rng),
            pos_grid: (g, g),
            blocks,
            norm: LayerNorm::with_eps(d, DINO_LN_EPS),
        }
    }

    /// Loads weights stored with the reference DINOv2 parameter names.
    pub fn from_safetensors(spec: &BackboneSpec, path: &Path) -> Result<Self> {
        let st = SafeTensors::read(path)?;
        let d = spec.d_f;
        let p = spec.patch_size;
        let get2 = |name: &str, shape: (usize, usize)| -> Result<Array2<f32>> {
            let t: ArrayD<f32> = st.get(name)?;
            let n = t.len();
            if n != shape.0 * shape.1 {
                return Err(GazeError::shape("weights tensor", format!("{name} {shape:?}"), format!("{:?}", t.shape())));
            }
            Ok(t.into_shape_with_order(shape).expect("checked length"))
        };
        let get1 = |name: &str, len: usize| -> Result<Array1<f32>> { Ok(get2(name, (1, len))?.row(0).to_owned()) };
        let set_linear = |lin: &mut Linear<f32>, prefix: &str| -> Result<()> {
            let (o, i) = lin.weight.value.dim();
            lin.weight.value = get2(&format!("{prefix}.weight"), (o, i))?;
            lin.bias.value = get1(&format!("{prefix}.bias"), o)?;
            Ok(())
        };
        let set_norm = |ln: &mut LayerNorm<f32>, prefix: &str| -> Result<()> {
            ln.gamma.value = get1(&format!("{prefix}.weight"), d)?;
            ln.beta.value = get1(&format!("{prefix}.bias"), d)?;
            Ok(())
        };

        let mut vit = Self::random(&BackboneSpec {
            seed: 0,
            ..spec.clone()
        });
        set_linear(&mut vit.patch_embed, "patch_embed.proj")?;
        vit.cls_token = get1("cls_token", d)?;
        let pos = st.get("pos_embed")?;
        let n_pos = pos.len() / d;
        let side = ((n_pos - 1) as f64).sqrt().round() as usize;
        if side * side + 1 != n_pos {
            return Err(GazeError::Checkpoint(format!("pos_embed has {n_pos} rows, not 1 + square")));
        }
        vit.pos_embed = get2("pos_embed", (n_pos, d))?;
        vit.pos_grid = (side, side);
        vit.registers = if st.contains("register_tokens") {
            let r = st.get("register_tokens")?;
            let n = r.len() / d;
            get2("register_tokens", (n, d))?
        } else {
            Array2::zeros((0, d))
        };
        for (i, b) in vit.blocks.iter_mut().enumerate() {
            let pre = format!("blocks.{i}");
            set_norm(&mut b.norm1, &format!("{pre}.norm1"))?;
            set_linear(&mut b.attn.qkv, &format!("{pre}.attn.qkv"))?;
            set_linear(&mut b.attn.proj, &format!("{pre}.attn.proj"))?;
            b.ls1 = get1(&format!("{pre}.ls1.gamma"), d)?;
            set_norm(&mut b.norm2, &format!("{pre}.norm2"))?;
            set_linear(&mut b.mlp.fc1, &format!("{pre}.mlp.fc1"))?;
            set_linear(&mut b.mlp.fc2, &format!("{pre}.mlp.fc2"))?;
            b.ls2 = get1(&format!("{pre}.ls2.gamma"), d)?;
        }
        set_norm(&mut vit.norm, "norm")?;
        debug_assert_eq!(vit.patch, p);
        Ok(vit)
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<RawFeatureMap> {
        let (gh, gw) = (image.height() / self.patch, image.width() / self.patch);
        let d = self.cls_token.len();
        let mut patches = self.patch_embed.forward(patchify(&image.data, self.patch).view());
        let grid_pos = self.pos_embed.slice(s![1.., ..]);
        if self.pos_grid == (gh, gw) {
            patches += &grid_pos;
        } else {
            patches += &BilinearResize::new(self.pos_grid, (gh, gw)).forward(grid_pos);
        }
        let cls = (&self.cls_token + &self.pos_embed.row(0)).insert_axis(Axis(0));
        let mut x = concatenate(Axis(0), &[cls.view(), self.registers.view(), patches.view()])
            .expect("token widths agree");
        for b in &self.blocks {
            let (h, _) = b.norm1.forward(x.view());
            let (a, _) = b.attn.forward(h.view(), None);
            x += &(a * &b.ls1);
            let (h, _) = b.norm2.forward(x.view());
            let (m, _) = b.mlp.forward(h.view());
            x += &(m * &b.ls2);
        }
        let (out, _) = self.norm.forward(x.view());
        let skip = 1 + self.registers.nrows();
        debug_assert_eq!(out.ncols(), d);
        FeatureMap::new(out.slice(s![skip.., ..]).to_owned(), gh, gw)
    }

    pub(super) fn hash_weights(&self, h: &mut impl Hasher) {
        let mut bits = Vec::new();
        let mut feed = |_: &str, v: ndarray::ArrayViewD<'_, f32>, _: ndarray::ArrayViewD<'_, f32>| {
            bits.extend(v.iter().map(|x| x.to_bits()));
        };
        self.patch_embed.for_each_param("", &mut feed);
        for b in &self.blocks {
            b.norm1.for_each_param("", &mut feed);
            b.attn.for_each_param("", &mut feed);
            b.norm2.for_each_param("", &mut feed);
            b.mlp.for_each_param("", &mut feed);
            feed("", b.ls1.view().into_dyn(), b.ls1.view().into_dyn());
            feed("", b.ls2.view().into_dyn(), b.ls2.view().into_dyn());
        }
        self.norm.for_each_param("", &mut feed);
        for x in self.cls_token.iter().chain(self.pos_embed.iter()).chain(self.registers.iter()) {
            bits.push(x.to_bits());
        }
        for b in bits {
            h.write_u32(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{safetensors::encode_f32, Backbone, BackboneKind};

    fn tiny_spec() -> BackboneSpec {
        let mut spec = BackboneSpec::vit(BackboneKind::RandomVit, VitArch::Small);
        spec.d_f = 16;
        spec.depth = 2;
        spec.num_heads = 2;
        spec.input_size = 56;
        spec
    }

    #[test]
    fn random_vit_shapes_and_determinism() {
        let bb = Backbone::load(&tiny_spec()).unwrap();
        let mut img = ImageTensor::zeros(56, 56);
        img.data.iter_mut().enumerate().for_each(|(k, v)| *v = (k as f32 * 0.01).sin());
        let a = bb.extract(&img).unwrap();
        assert_eq!((a.height(), a.width(), a.channels()), (4, 4, 16));
        assert!(a.is_finite());
        assert_eq!(a, bb.extract(&img).unwrap());
        // other input sizes reuse the position table by interpolation
        let b = bb.extract(&ImageTensor::zeros(28, 42)).unwrap();
        assert_eq!((b.height(), b.width()), (2, 3));
    }

    #[test]
    fn loads_reference_parameter_names() {
        let spec = tiny_spec();
        let src = VitBackbone::random(&BackboneSpec { seed: 9, ..spec.clone() });
        let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
        let d = spec.d_f;
        let p = spec.patch_size;
        tensors.push((
            "patch_embed.proj.weight".into(),
            src.patch_embed.weight.value.clone().into_shape_with_order((d, 3, p, p)).unwrap().into_dyn(),
        ));
        tensors.push(("patch_embed.proj.bias".into(), src.patch_embed.bias.value.clone().into_dyn()));
        tensors.push(("cls_token".into(), src.cls_token.clone().into_shape_with_order((1, 1, d)).unwrap().into_dyn()));
        let n = src.pos_embed.nrows();
        tensors.push(("pos_embed".into(), src.pos_embed.clone().into_shape_with_order((1, n, d)).unwrap().into_dyn()));
        for (i, b) in src.blocks.iter().enumerate() {
            let mut push = |name: &str, v: ndarray::ArrayViewD<'_, f32>, _: ndarray::ArrayViewD<'_, f32>| {
                tensors.push((name.to_string(), v.to_owned()));
            };
            b.norm1.for_each_param(&format!("blocks.{i}.norm1"), &mut push);
            b.attn.for_each_param(&format!("blocks.{i}.attn"), &mut push);
            b.norm2.for_each_param(&format!("blocks.{i}.norm2"), &mut push);
            b.mlp.for_each_param(&format!("blocks.{i}.mlp"), &mut push);
            tensors.push((format!("blocks.{i}.ls1.gamma"), b.ls1.clone().into_dyn()));
            tensors.push((format!("blocks.{i}.ls2.gamma"), b.ls2.clone().into_dyn()));
        }
        src.norm.for_each_param("norm", &mut |name, v, _| tensors.push((name.to_string(), v.to_owned())));
        let refs: Vec<(&str, &ArrayD<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        std::fs::write(&path, encode_f32(&refs)).unwrap();

        let mut load_spec = spec.clone();
        load_spec.kind = BackboneKind::Dinov2;
        load_spec.weights = Some(path);
        let loaded = Backbone::load(&load_spec).unwrap();
        let mut img = ImageTensor::zeros(56, 56);
        img.data.iter_mut().enumerate().for_each(|(k, v)| *v = (k as f32 * 0.03).cos());
        assert_eq!(loaded.extract(&img).unwrap(), src.forward(&img).unwrap());
    }
}
