//! Adan and Adam with decoupled weight decay.
//!
//! Adan keeps three moments: of the gradient `m`, of the gradient
//! difference `v`, and of the squared look-ahead gradient `n`:
//!
//! ```text
//! Δ = g − g_prev                 (0 on the first step)
//! m = β₁m + (1 − β₁)g
//! v = β₂v + (1 − β₂)Δ
//! n = β₃n + (1 − β₃)(g + β₂Δ)²
//! θ ← θ(1 − λ·wd) − λ·(m̂ + β₂v̂)/(√n̂ + ε)
//! ```
//!
//! with hats denoting bias-corrected moments.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
    #[error("gradient has {got} entries, parameters have {expected}")]
    Shape { expected: usize, got: usize },
    #[error("optimizer state does not match `{0:?}`")]
    StateMismatch(OptimizerKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adan,
    Adam,
}

impl OptimizerKind {
    pub fn tag(self) -> u8 {
        match self {
            Self::Adan => 0,
            Self::Adam => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Adan),
            1 => Some(Self::Adam),
            _ => None,
        }
    }

    /// Number of per-parameter state vectors.
    pub fn n_vectors(self) -> usize {
        match self {
            Self::Adan => 4,
            Self::Adam => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Adan uses all three; Adam uses the first two as (β₁, β₂).
    pub betas: [f64; 3],
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adan,
            learning_rate: 5e-3,
            weight_decay: 2e-5,
            betas: [0.98, 0.92, 0.99],
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self { kind: OptimizerKind::Adam, betas: [0.9, 0.999, 0.0], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight_decay must be non-negative".into());
        }
        let n_betas = match self.kind {
            OptimizerKind::Adan => 3,
            OptimizerKind::Adam => 2,
        };
        let used = &self.betas[..n_betas];
        if used.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return Err("eps must be positive".into());
        }
        Ok(())
    }
}

/// Moment buffers. Adan: `[m, v, n, g_prev]`; Adam: `[m, v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub vectors: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self { kind, step: 0, vectors: vec![vec![0.0; n_params]; kind.n_vectors()] }
    }
}

/// One update of `params` in place.
pub fn optimizer_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::Shape { expected: params.len(), got: grads.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient(i));
    }
    if state.kind != config.kind
        || state.vectors.len() != config.kind.n_vectors()
        || state.vectors.iter().any(|v| v.len() != params.len())
    {
        return Err(OptimError::StateMismatch(config.kind));
    }
    state.step += 1;
    let k = state.step as i32;
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;
    let [b1, b2, b3] = config.betas;
    let eps = config.eps;
    match config.kind {
        OptimizerKind::Adan => {
            let (bc1, bc2, bc3) = (1.0 - b1.powi(k), 1.0 - b2.powi(k), 1.0 - b3.powi(k));
            let first = state.step == 1;
            let [m, v, n, prev] = &mut state.vectors[..] else { unreachable!("checked above") };
            for i in 0..params.len() {
                let g = grads[i] as f64;
                let diff = if first { 0.0 } else { g - prev[i] as f64 };
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * diff;
                let look = g + b2 * diff;
                let ni = b3 * n[i] as f64 + (1.0 - b3) * look * look;
                let update = (mi / bc1 + b2 * vi / bc2) / ((ni / bc3).sqrt() + eps);
                params[i] = (params[i] as f64 * decay - lr * update) as f32;
                m[i] = mi as f32;
                v[i] = vi as f32;
                n[i] = ni as f32;
                prev[i] = grads[i];
            }
        }
        OptimizerKind::Adam => {
            let (bc1, bc2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
            let [m, v] = &mut state.vectors[..] else { unreachable!("checked above") };
            for i in 0..params.len() {
                let g = grads[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                params[i] = (params[i] as f64 * decay - lr * update) as f32;
                m[i] = mi as f32;
                v[i] = vi as f32;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(kind: OptimizerKind, wd: f64, grads: &[f32], steps: usize) -> (Vec<f32>, Vec<f32>) {
        let cfg = match kind {
            OptimizerKind::Adan => OptimizerConfig { weight_decay: wd, ..Default::default() },
            OptimizerKind::Adam => OptimizerConfig { weight_decay: wd, ..OptimizerConfig::adam() },
        };
        let mut params = vec![1.0f32; grads.len()];
        let mut state = OptimizerState::new(kind, grads.len());
        let mut last = params.clone();
        for _ in 0..steps {
            last = params.clone();
            optimizer_step(&mut params, grads, &mut state, &cfg).unwrap();
        }
        (last, params)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        for kind in [OptimizerKind::Adan, OptimizerKind::Adam] {
            let (_, p) = run(kind, 0.0, &[0.0; 4], 10);
            assert_eq!(p, vec![1.0; 4]);
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_geometrically() {
        let wd = 0.1;
        let (_, p) = run(OptimizerKind::Adan, wd, &[0.0; 2], 5);
        let expected = (1.0f64 - 5e-3 * wd).powi(5);
        assert!((p[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        // Fixed point of the moment recurrences: m̂ → g, v̂ → 0, n̂ → g².
        let (before, after) = run(OptimizerKind::Adan, 0.0, &[0.3, -2.0], 2000);
        for (b, a, s) in [(before[0], after[0], -1.0), (before[1], after[1], 1.0)] {
            let step = (a - b) as f64;
            assert!((step - s * 5e-3).abs() < 1e-5, "step {step}");
        }
        let (before, after) = run(OptimizerKind::Adam, 0.0, &[0.3], 2000);
        assert!(((after[0] - before[0]) as f64 + 5e-3).abs() < 1e-5);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = vec![0.0f32; 2];
        let mut s = OptimizerState::new(OptimizerKind::Adan, 2);
        let err = optimizer_step(&mut p, &[0.0, f32::NAN], &mut s, &OptimizerConfig::default());
        assert_eq!(err, Err(OptimError::NonFiniteGradient(1)));
        assert_eq!(s.step, 0);
    }
}
