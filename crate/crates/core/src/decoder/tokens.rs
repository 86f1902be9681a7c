use std::ops::Range;

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};

use super::embedding::PositionalEmbedding;
use crate::backbone::SceneFeatureMap;
use crate::error::{GazeError, Result};
use crate::real::Real;

/// Token order: optional task token, `H·W` scene tokens row-major, optional
/// position token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub task_token: bool,
    pub position_token: bool,
    pub height: usize,
    pub width: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.height * self.width + usize::from(self.task_token) + usize::from(self.position_token)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scene_range(&self) -> Range<usize> {
        let start = usize::from(self.task_token);
        start..start + self.height * self.width
    }

    pub fn task_index(&self) -> Option<usize> {
        self.task_token.then_some(0)
    }

    pub fn position_index(&self) -> Option<usize> {
        self.position_token.then(|| self.scene_range().end)
    }

    /// Grid cell of the `k`-th scene token.
    pub fn cell_of(&self, k: usize) -> (usize, usize) {
        (k / self.width, k % self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenList<T> {
    pub tokens: Array2<T>,
    pub layout: TokenLayout,
}

impl<T: Real> TokenList<T> {
    pub fn scene(&self) -> ArrayView2<'_, T> {
        self.tokens.slice(s![self.layout.scene_range(), ..])
    }

    /// Scene tokens reshaped back to a feature map.
    pub fn unflatten(&self) -> SceneFeatureMap<T> {
        SceneFeatureMap::new(self.scene().to_owned(), self.layout.height, self.layout.width)
            .expect("layout matches scene token count")
    }
}

/// Builds `[t_in/out?, S + P, t_pos?]`.
pub fn assemble_tokens<T: Real>(
    scene: &SceneFeatureMap<T>,
    pos: &PositionalEmbedding<T>,
    task_token: Option<ArrayView1<'_, T>>,
    position_token: Option<ArrayView1<'_, T>>,
) -> Result<TokenList<T>> {
    if (scene.height(), scene.width(), scene.channels()) != (pos.height(), pos.width(), pos.d_model()) {
        return Err(GazeError::shape(
            "scene tokens vs position embedding",
            format!("{}x{}x{}", pos.d_model(), pos.height(), pos.width()),
            format!("{}x{}x{}", scene.channels(), scene.height(), scene.width()),
        ));
    }
    let d = scene.channels();
    for (name, t) in [("task token", task_token), ("position token", position_token)] {
        if let Some(t) = t {
            if t.len() != d {
                return Err(GazeError::shape(name, d, t.len()));
            }
        }
    }
    let body = &scene.tokens() + &pos.table();
    let mut parts: Vec<ArrayView2<'_, T>> = Vec::with_capacity(3);
    let task = task_token.map(|t| t.insert_axis(Axis(0)));
    let position = position_token.map(|t| t.insert_axis(Axis(0)));
    if let Some(t) = &task {
        parts.push(t.view());
    }
    parts.push(body.view());
    if let Some(t) = &position {
        parts.push(t.view());
    }
    let tokens = concatenate(Axis(0), &parts).expect("equal widths");
    Ok(TokenList {
        tokens,
        layout: TokenLayout {
            task_token: task_token.is_some(),
            position_token: position_token.is_some(),
            height: scene.height(),
            width: scene.width(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_scene(h: usize, w: usize, d: usize, seed: u64) -> SceneFeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SceneFeatureMap::new(crate::nn::trunc_normal((h * w, d), 1.0, &mut rng), h, w).unwrap()
    }

    #[test]
    fn lengths_follow_layout() {
        let s = SceneFeatureMap::new(Array2::<f32>::zeros((1024, 8)), 32, 32).unwrap();
        let p = PositionalEmbedding::sinusoidal(8, 32, 32).unwrap();
        let t = Array1::zeros(8);
        assert_eq!(assemble_tokens(&s, &p, Some(t.view()), None).unwrap().tokens.nrows(), 1025);
        let list = assemble_tokens(&s, &p, None, Some(t.view())).unwrap();
        assert_eq!(list.tokens.nrows(), 1025);
        assert_eq!(list.layout.position_index(), Some(1024));
        assert_eq!(assemble_tokens(&s, &p, None, None).unwrap().tokens.nrows(), 1024);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let s = random_scene(5, 7, 8, 1);
        let p = PositionalEmbedding::sinusoidal(8, 5, 7).unwrap();
        let t = Array1::from_elem(8, 3.0);
        let list = assemble_tokens(&s, &p, Some(t.view()), None).unwrap();
        let back = list.unflatten();
        for k in 0..35 {
            let (i, j) = list.layout.cell_of(k);
            assert_eq!(back.at(i, j), list.tokens.row(k + 1));
            let expect = &s.at(i, j) + &p.at(i, j);
            assert_eq!(list.tokens.row(k + 1), expect);
        }
        assert_eq!(list.tokens.row(0), t);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let s = random_scene(4, 4, 8, 2);
        let p = PositionalEmbedding::sinusoidal(8, 4, 5).unwrap();
        assert!(assemble_tokens(&s, &p, None, None).is_err());
    }
}
