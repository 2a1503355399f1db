//! Domain discrepancy generator: projected sign-gradient ascent on the
//! transfer loss inside an L∞ ball around each target image.
//!
//! Each step moves every pixel by `η·sign(∇ₓ ℓ_trans)` and projects back
//! onto `B∞(x_t, δ) ∩ [0,1]`. With `η > 2δ` every step lands on a corner of
//! the ball, so two steps suffice to reach the worst edge points.

use crate::error::{Error, Result};
use crate::losses::TransferLoss;
use crate::nn::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdgConfig {
    /// L∞ radius.
    pub delta: f64,
    /// Step size.
    pub eta: f64,
    /// Number of ascent steps.
    pub steps: usize,
    /// Start from a uniform point in the ball instead of the clean image.
    pub random_start: bool,
}

impl Default for DdgConfig {
    fn default() -> Self {
        let delta = 60.0 / 255.0;
        DdgConfig {
            delta,
            eta: edge_step(delta),
            steps: 2,
            random_start: false,
        }
    }
}

/// Smallest step above `2δ` on the 1/255 grid: one step always reaches the
/// opposite face of the ball.
pub fn edge_step(delta: f64) -> f64 {
    2.0 * delta + 1.0 / 255.0
}

impl DdgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.eta > 0.0) || self.steps == 0 {
            return Err(Error::invalid(format!(
                "DDG needs delta > 0, eta > 0, steps >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DdgBatch {
    pub originals: Tensor,
    pub generated: Tensor,
    pub trans_loss_before: f64,
    pub trans_loss_after: f64,
}

/// `ℓ_trans(zs_source, f(x))` for a fixed set of source features.
pub fn trans_loss_at(model: &Model, trans: &TransferLoss, x: &Tensor, zs_source: &Tensor) -> Result<f64> {
    let zt = model.forward_features(x)?;
    Ok(trans.evaluate(zs_source, &zt)?.value)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clip to the δ-ball around `origin`, then to `[0,1]`.
fn project(x: &mut [f64], origin: &[f64], delta: f64) {
    for (v, &o) in x.iter_mut().zip(origin) {
        *v = v.clamp(o - delta, o + delta).clamp(0.0, 1.0);
    }
}

/// Worst-case inputs for `student` near `x_t`. Only the input moves; the
/// source features are held fixed and the model is not modified.
pub fn generate(
    student: &Model,
    trans: &TransferLoss,
    x_t: &Tensor,
    zs_source: &Tensor,
    cfg: &DdgConfig,
    rng: &mut Rng,
) -> Result<DdgBatch> {
    cfg.validate()?;
    if zs_source.rank() != 2 || zs_source.shape()[1] != student.feature_dim() {
        return Err(Error::shape(zs_source.shape(), &[0, student.feature_dim()]));
    }
    if let Some(v) = x_t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
    }

    let mut x = x_t.clone();
    let mut trans_loss_before = None;
    if cfg.random_start {
        trans_loss_before = Some(trans_loss_at(student, trans, x_t, zs_source)?);
        for (v, &o) in x.data_mut().iter_mut().zip(x_t.data()) {
            *v = o + rng.uniform_range(-cfg.delta, cfg.delta);
        }
        project(x.data_mut(), x_t.data(), cfg.delta);
    }

    for _ in 0..cfg.steps {
        let pass = student.forward(&x)?;
        let eval = trans.evaluate(zs_source, &pass.features)?;
        trans_loss_before.get_or_insert(eval.value);
        let grad = student.input_gradient(&pass, &eval.grad_target)?;
        if !grad.all_finite() {
            return Err(Error::NonFinite("DDG input gradient".into()));
        }
        for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v += cfg.eta * sign(g);
        }
        project(x.data_mut(), x_t.data(), cfg.delta);
    }

    let trans_loss_after = trans_loss_at(student, trans, &x, zs_source)?;
    Ok(DdgBatch {
        originals: x_t.clone(),
        generated: x,
        trans_loss_before: trans_loss_before.expect("at least one step"),
        trans_loss_after,
    })
}

/// Fraction of pixels moved by at least `0.99·δ`.
pub fn edge_fraction(batch: &DdgBatch, cfg: &DdgConfig) -> f64 {
    let hits = batch
        .generated
        .data()
        .iter()
        .zip(batch.originals.data())
        .filter(|(g, o)| (*g - *o).abs() >= 0.99 * cfg.delta)
        .count();
    hits as f64 / batch.generated.len() as f64
}

/// A uniformly random corner of the δ-ball (clipped to `[0,1]`).
pub fn random_corner(x_t: &Tensor, delta: f64, rng: &mut Rng) -> Tensor {
    let mut x = x_t.clone();
    for (v, &o) in x.data_mut().iter_mut().zip(x_t.data()) {
        let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        *v = (o + s * delta).clamp(0.0, 1.0);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Role};

    fn student(seed: u64) -> Model {
        Model::new(Architecture::reference(3, 8, 8, 3), Role::Student, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn default_config_steps_past_the_diameter() {
        let c = DdgConfig::default();
        assert_eq!(c.delta, 60.0 / 255.0);
        assert!(c.eta > 2.0 * c.delta);
        assert_eq!(c.steps, 2);
        assert!(!c.random_start);
        assert!(DdgConfig { steps: 0, ..c }.validate().is_err());
    }

    #[test]
    fn constant_extractor_leaves_inputs_unchanged() {
        let mut m = student(1);
        for p in m.params_mut() {
            if p.rank() == 4 {
                *p = Tensor::zeros_like(p);
            }
        }
        let x = Tensor::uniform(&mut Rng::new(2), &[4, 3, 8, 8], 0.0, 1.0);
        let zs = m.forward_features(&Tensor::uniform(&mut Rng::new(3), &[4, 3, 8, 8], 0.0, 1.0)).unwrap();
        let b = generate(&m, &TransferLoss::default(), &x, &zs, &DdgConfig::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(b.generated, x);
        assert_eq!(edge_fraction(&b, &DdgConfig::default()), 0.0);
    }

    #[test]
    fn projection_binds_at_the_edge() {
        let delta = 60.0 / 255.0;
        let mut x = vec![0.5 + 1.0];
        project(&mut x, &[0.5], delta);
        assert_eq!(x[0], 0.5 + delta);
        let mut y = vec![0.05 - 1.0];
        project(&mut y, &[0.05], delta);
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn generated_stays_in_ball_and_range() {
        let m = student(4);
        let x = Tensor::uniform(&mut Rng::new(5), &[3, 3, 8, 8], 0.0, 1.0);
        let zs = m.forward_features(&Tensor::uniform(&mut Rng::new(6), &[3, 3, 8, 8], 0.0, 1.0)).unwrap();
        for random_start in [false, true] {
            let cfg = DdgConfig {
                random_start,
                ..DdgConfig::default()
            };
            let b = generate(&m, &TransferLoss::default(), &x, &zs, &cfg, &mut Rng::new(7)).unwrap();
            assert!(b.generated.max_abs_diff(&x).unwrap() <= cfg.delta + 1e-9);
            assert!(b.generated.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_does_not_touch_the_model() {
        let m = student(8);
        let before = m.param_hash();
        let x = Tensor::uniform(&mut Rng::new(9), &[2, 3, 8, 8], 0.0, 1.0);
        let zs = m.forward_features(&x).unwrap();
        generate(&m, &TransferLoss::default(), &x, &zs, &DdgConfig::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(m.param_hash(), before);
    }

    #[test]
    fn rejects_mismatched_source_features() {
        let m = student(1);
        let x = Tensor::uniform(&mut Rng::new(2), &[2, 3, 8, 8], 0.0, 1.0);
        let zs = Tensor::zeros(&[2, 10]);
        assert!(generate(&m, &TransferLoss::default(), &x, &zs, &DdgConfig::default(), &mut Rng::new(0)).is_err());
    }
}
