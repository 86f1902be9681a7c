//! Adam, the cosine schedule and name-pattern parameter groups.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::nn::HasParams;

/// `lr_init · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64) -> Result<f64> {
    if step > total_steps {
        return Err(GazeError::OutOfRange(format!("step {step} beyond total {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr_init);
    }
    Ok(lr_init * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// Learning rate for every parameter whose name matches one of `patterns`
/// and none of `exclude`. Patterns are globs where `*` matches any run of
/// characters, dots included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGroup {
    pub name: String,
    pub patterns: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
    pub lr: f64,
}

impl ParamGroup {
    pub fn all(lr: f64) -> Self {
        Self {
            name: "all".into(),
            patterns: vec!["*".into()],
            exclude: Vec::new(),
            lr,
        }
    }

    pub fn matches(&self, param: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p, param)) && !self.exclude.iter().any(|p| glob_match(p, param))
    }
}

/// In/out parameters versus the rest of the decoder.
pub fn inout_split_groups(inout_lr: f64, rest_lr: f64) -> Vec<ParamGroup> {
    let inout: Vec<String> = vec!["task_token".into(), "inout_head.*".into()];
    vec![
        ParamGroup {
            name: "inout".into(),
            patterns: inout.clone(),
            exclude: Vec::new(),
            lr: inout_lr,
        },
        ParamGroup {
            name: "decoder".into(),
            patterns: vec!["*".into()],
            exclude: inout,
            lr: rest_lr,
        },
    ]
}

pub fn glob_match(pattern: &str, text: &str) -> bool {
    let (p, t) = (pattern.as_bytes(), text.as_bytes());
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

/// Group index for each parameter name, requiring exactly one match.
pub fn resolve_groups(names: &[String], groups: &[ParamGroup]) -> Result<Vec<usize>> {
    if groups.is_empty() {
        return Err(GazeError::InvalidConfig("at least one parameter group is required".into()));
    }
    for g in groups {
        if !(g.lr > 0.0 && g.lr.is_finite()) {
            return Err(GazeError::InvalidConfig(format!("group `{}` lr must be positive", g.name)));
        }
    }
    names
        .iter()
        .map(|n| {
            let hits: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].matches(n)).collect();
            match hits.as_slice() {
                [g] => Ok(*g),
                [] => Err(GazeError::UnmatchedParameter(n.clone())),
                _ => Err(GazeError::AmbiguousParameter(n.clone())),
            }
        })
        .collect()
}

/// Adam with bias correction and no weight decay. Moments are kept per
/// parameter in traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_state(&mut self, model: &impl HasParams<f32>) -> Result<()> {
        if self.names.is_empty() {
            model.for_each_param("", &mut |name, v, _| {
                self.names.push(name.to_string());
                self.m.push(ArrayD::zeros(v.shape()));
                self.v.push(ArrayD::zeros(v.shape()));
            });
            return Ok(());
        }
        let mut k = 0;
        let mut bad = None;
        model.for_each_param("", &mut |name, v, _| {
            if bad.is_none() && (self.names.get(k).map(String::as_str) != Some(name) || self.m[k].shape() != v.shape()) {
                bad = Some(name.to_string());
            }
            k += 1;
        });
        match bad {
            Some(name) => Err(GazeError::Checkpoint(format!("optimizer state does not match parameter `{name}`"))),
            None if k != self.names.len() => Err(GazeError::Checkpoint("optimizer state has extra parameters".into())),
            None => Ok(()),
        }
    }

    /// One update with a learning rate per parameter (traversal order).
    pub fn step(&mut self, model: &mut impl HasParams<f32>, lrs: &[f64]) -> Result<()> {
        self.ensure_state(model)?;
        if lrs.len() != self.names.len() {
            return Err(GazeError::shape("learning rates", self.names.len(), lrs.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let eps = self.eps;
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_param_mut("", &mut |_, mut value, grad| {
            let lr = lrs[k];
            ndarray::Zip::from(&mut value)
                .and(&grad)
                .and(&mut ms[k])
                .and(&mut vs[k])
                .for_each(|w, &g, m, v| {
                    let g = g as f64;
                    let m1 = b1 * *m as f64 + (1.0 - b1) * g;
                    let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
                    *m = m1 as f32;
                    *v = v1 as f32;
                    let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
                    *w = (*w as f64 - update) as f32;
                });
            k += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{arr1, Ix1};

    use super::*;
    use crate::nn::Param;

    #[test]
    fn cosine_closed_form() {
        assert_eq!(cosine_lr(0, 100, 1e-3).unwrap(), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3).unwrap() - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-3).is_err());
        for s in 0..=37 {
            let want = 2e-4 * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / 37.0).cos());
            assert_eq!(cosine_lr(s, 37, 2e-4).unwrap(), want);
        }
    }

    #[test]
    fn globbing() {
        assert!(glob_match("*", "layers.0.attn.qkv.weight"));
        assert!(glob_match("inout_head.*", "inout_head.fc1.bias"));
        assert!(!glob_match("inout_head.*", "heatmap_head.conv.bias"));
        assert!(glob_match("layers.*.mlp.*", "layers.2.mlp.fc1.weight"));
        assert!(!glob_match("task_token", "task_token2"));
    }

    #[test]
    fn groups_need_exactly_one_match() {
        let names: Vec<String> = ["task_token", "inout_head.fc1.weight", "layers.0.norm1.weight"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(resolve_groups(&names, &inout_split_groups(1e-2, 1e-5)).unwrap(), vec![0, 0, 1]);
        let overlapping = vec![ParamGroup::all(1e-3), ParamGroup::all(1e-4)];
        assert!(matches!(resolve_groups(&names, &overlapping), Err(GazeError::AmbiguousParameter(_))));
        let partial = vec![ParamGroup {
            name: "layers".into(),
            patterns: vec!["layers.*".into()],
            exclude: vec![],
            lr: 1e-3,
        }];
        assert!(matches!(resolve_groups(&names, &partial), Err(GazeError::UnmatchedParameter(n)) if n == "task_token"));
    }

    struct One(Param<f32, Ix1>);

    impl HasParams<f32> for One {
        fn for_each_param(&self, p: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f32>, ndarray::ArrayViewD<'_, f32>)) {
            self.0.visit(&crate::nn::join(p, "w"), f);
        }
        fn for_each_param_mut(
            &mut self,
            p: &str,
            f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f32>, ndarray::ArrayViewMutD<'_, f32>),
        ) {
            self.0.visit_mut(&crate::nn::join(p, "w"), f);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_and_zero_grad_is_still() {
        let mut m = One(Param::new(arr1(&[1.0f32, 2.0, 3.0])));
        m.0.grad = arr1(&[0.5, -2.0, 0.0]);
        let mut opt = Adam::new();
        opt.step(&mut m, &[0.1]).unwrap();
        assert!((m.0.value[0] - 0.9).abs() < 1e-6);
        assert!((m.0.value[1] - 2.1).abs() < 1e-6);
        assert_eq!(m.0.value[2], 3.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut m = One(Param::new(arr1(&[3.0f32, -4.0])));
        let mut opt = Adam::new();
        for _ in 0..2000 {
            m.0.grad = m.0.value.mapv(|w| 2.0 * (w - 1.0));
            opt.step(&mut m, &[0.01]).unwrap();
        }
        assert!(m.0.value.iter().all(|&w| (w - 1.0).abs() < 1e-2));
    }
}
