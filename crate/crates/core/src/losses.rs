//! Scalar objectives and their gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its tensor inputs; parameter gradients are then obtained by feeding those
//! into [`Model::backward`](crate::nn::Model::backward).

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_MMD_SCALES: [f64; 3] = [0.25, 1.0, 4.0];

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cls_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, s) = matrix_dims(logits)?;
    if labels.len() != n {
        return Err(Error::shape(&[n], &[labels.len()]));
    }
    let mut grad = vec![0.0; n * s];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= s {
            return Err(Error::invalid(format!("label {y} out of range for {s} classes")));
        }
        let row = logits.item(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for k in 0..s {
            let p = (row[k] - log_z).exp();
            grad[i * s + k] = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(&[n, s], grad)?))
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(Error::invalid(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median-heuristic RBF precisions: `γ₀ = 1 / median(‖a−b‖²)` over all
/// distinct pairs of the pooled batch, multiplied by each of `scales`.
pub fn median_bandwidths(zs: &Tensor, zt: &Tensor, scales: &[f64]) -> Result<Vec<f64>> {
    let pooled = Tensor::concat(zs, zt)?;
    let n = pooled.shape()[0];
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled.item(i), pooled.item(j)));
        }
    }
    let median = if d.is_empty() {
        0.0
    } else {
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    };
    let base = if median > 1e-12 { 1.0 / median } else { 1.0 };
    Ok(scales.iter().map(|s| s * base).collect())
}

#[derive(Debug, Clone)]
pub struct Mmd {
    pub value: f64,
    pub grad_source: Tensor,
    pub grad_target: Tensor,
}

/// Biased (V-statistic) multi-kernel MMD² with kernels
/// `k(a,b) = Σ_γ exp(−γ‖a−b‖²)`.
pub fn mmd2(zs: &Tensor, zt: &Tensor, gammas: &[f64]) -> Result<Mmd> {
    let (ns, d) = matrix_dims(zs)?;
    let (nt, d2) = matrix_dims(zt)?;
    if d != d2 {
        return Err(Error::shape(zs.shape(), zt.shape()));
    }
    if gammas.is_empty() || gammas.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::invalid(format!("bandwidths must be positive: {gammas:?}")));
    }
    let kernel = |a: &[f64], b: &[f64]| -> (f64, f64) {
        // value and Σ γ·k, the factor in ∂k/∂a = −2(a−b)·Σγk
        let r2 = sq_dist(a, b);
        gammas.iter().fold((0.0, 0.0), |(k, gk), &g| {
            let e = (-g * r2).exp();
            (k + e, gk + g * e)
        })
    };
    let mut gs = vec![0.0; ns * d];
    let mut gt = vec![0.0; nt * d];
    let mut value = 0.0;

    // Each block contributes weight · k(a, b); the gradient w.r.t. a gets
    // weight · (−2 Σγk)(a − b) and symmetrically for b.
    let mut block = |xa: &Tensor, xb: &Tensor, ga: &mut [f64], gb: Option<&mut [f64]>, weight: f64| {
        let (na, nb) = (xa.shape()[0], xb.shape()[0]);
        let mut gb = gb;
        for i in 0..na {
            let a = xa.item(i);
            for j in 0..nb {
                let b = xb.item(j);
                let (k, gk) = kernel(a, b);
                value += weight * k;
                let c = -2.0 * weight * gk;
                for t in 0..d {
                    let diff = a[t] - b[t];
                    ga[i * d + t] += c * diff;
                    match gb.as_deref_mut() {
                        Some(gb) => gb[j * d + t] -= c * diff,
                        // same set: the mirrored pair (j, i) is visited separately
                        None => ga[j * d + t] -= c * diff,
                    }
                }
            }
        }
    };
    block(zs, zs, &mut gs, None, 1.0 / (ns * ns) as f64);
    block(zt, zt, &mut gt, None, 1.0 / (nt * nt) as f64);
    block(zs, zt, &mut gs, Some(&mut gt), -2.0 / (ns * nt) as f64);

    Ok(Mmd {
        value,
        grad_source: Tensor::new(&[ns, d], gs)?,
        grad_target: Tensor::new(&[nt, d], gt)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialMode {
    /// Loss for descending the discriminator.
    TrainDisc,
    /// Same loss; feature gradients are negated (gradient reversal).
    Confuse,
}

#[derive(Debug, Clone)]
pub struct Adversarial {
    pub value: f64,
    pub grad_source: Tensor,
    pub grad_target: Tensor,
    /// Discriminator parameter gradients of the (unreversed) loss.
    pub disc_grads: crate::nn::Gradients,
}

fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - label * logit + (-logit.abs()).exp().ln_1p();
    let p = 1.0 / (1.0 + (-logit).exp());
    (loss, p - label)
}

/// Mean binary cross-entropy of domain discrimination, source labelled 1 and
/// target 0. Under [`AdversarialMode::Confuse`] the feature gradients are
/// multiplied by `-reversal_weight`.
pub fn adversarial_trans(
    zs: &Tensor,
    zt: &Tensor,
    disc: &Model,
    mode: AdversarialMode,
    reversal_weight: f64,
) -> Result<Adversarial> {
    let (ns, d) = matrix_dims(zs)?;
    let (nt, d2) = matrix_dims(zt)?;
    if d != d2 || disc.architecture().input != [d] {
        return Err(Error::shape(&[d], &disc.architecture().input));
    }
    if disc.output_dim() != 1 {
        return Err(Error::invalid("discriminator must have one output"));
    }
    let pooled = Tensor::concat(zs, zt)?;
    let pass = disc.forward(&pooled)?;
    let n = (ns + nt) as f64;
    let mut value = 0.0;
    let mut glog = vec![0.0; ns + nt];
    for (i, &l) in pass.logits.data().iter().enumerate() {
        let label = if i < ns { 1.0 } else { 0.0 };
        let (loss, g) = bce_with_logit(l, label);
        value += loss / n;
        glog[i] = g / n;
    }
    let glog = Tensor::new(&[ns + nt, 1], glog)?;
    let grads = disc.backward(&pass, None, Some(&glog), true)?;
    let mut gin = grads.input.clone().expect("input gradient requested");
    if mode == AdversarialMode::Confuse {
        gin.scale_in_place(-reversal_weight);
    }
    let gin = gin.into_data();
    Ok(Adversarial {
        value,
        grad_source: Tensor::new(&[ns, d], gin[..ns * d].to_vec())?,
        grad_target: Tensor::new(&[nt, d], gin[ns * d..].to_vec())?,
        disc_grads: crate::nn::Gradients {
            params: grads.params,
            input: None,
        },
    })
}

/// The transfer loss `ℓ_trans` between source and target features.
#[derive(Debug, Clone)]
pub enum TransferLoss {
    /// Multi-kernel MMD with median-heuristic bandwidths times `scales`.
    Mmd { scales: Vec<f64> },
    /// Domain discriminator with gradient reversal.
    Adversarial { disc: Model, reversal_weight: f64 },
}

impl Default for TransferLoss {
    fn default() -> Self {
        TransferLoss::Mmd {
            scales: DEFAULT_MMD_SCALES.to_vec(),
        }
    }
}

/// Value and true gradients of `ℓ_trans`; for the adversarial kind also the
/// discriminator's parameter gradients.
#[derive(Debug, Clone)]
pub struct TransferEval {
    pub value: f64,
    pub grad_source: Tensor,
    pub grad_target: Tensor,
    pub disc_grads: Option<crate::nn::Gradients>,
}

impl TransferLoss {
    pub fn name(&self) -> &'static str {
        match self {
            TransferLoss::Mmd { .. } => "mmd",
            TransferLoss::Adversarial { .. } => "adversarial",
        }
    }

    /// Gradients of the loss itself (no reversal).
    pub fn evaluate(&self, zs: &Tensor, zt: &Tensor) -> Result<TransferEval> {
        match self {
            TransferLoss::Mmd { scales } => {
                let gammas = median_bandwidths(zs, zt, scales)?;
                let m = mmd2(zs, zt, &gammas)?;
                Ok(TransferEval {
                    value: m.value,
                    grad_source: m.grad_source,
                    grad_target: m.grad_target,
                    disc_grads: None,
                })
            }
            TransferLoss::Adversarial { disc, .. } => {
                let a = adversarial_trans(zs, zt, disc, AdversarialMode::TrainDisc, 1.0)?;
                Ok(TransferEval {
                    value: a.value,
                    grad_source: a.grad_source,
                    grad_target: a.grad_target,
                    disc_grads: Some(a.disc_grads),
                })
            }
        }
    }

    /// Gradients to apply to the feature extractor when minimising
    /// alignment: the plain gradient for MMD, reversed for the adversarial
    /// kind.
    pub fn feature_objective(&self, zs: &Tensor, zt: &Tensor) -> Result<TransferEval> {
        match self {
            TransferLoss::Mmd { .. } => self.evaluate(zs, zt),
            TransferLoss::Adversarial {
                disc,
                reversal_weight,
            } => {
                let a = adversarial_trans(zs, zt, disc, AdversarialMode::Confuse, *reversal_weight)?;
                Ok(TransferEval {
                    value: a.value,
                    grad_source: a.grad_source,
                    grad_target: a.grad_target,
                    disc_grads: Some(a.disc_grads),
                })
            }
        }
    }
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (row_norm(a) * row_norm(b))
}

/// `−log( exp(sim(zᵢ,zⱼ)/τ) / Σ_{k≠i} exp(sim(zᵢ,z_k)/τ) )` over the rows of
/// `z`, with `sim` the cosine similarity and exclusion by index.
pub fn sim_loss(i: usize, j: usize, z: &Tensor, tau: f64) -> Result<f64> {
    let (n, _) = matrix_dims(z)?;
    if i == j {
        return Err(Error::invalid("anchor and positive must be different rows"));
    }
    if i >= n || j >= n {
        return Err(Error::invalid(format!("row index out of range for {n} rows")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if (0..n).any(|k| row_norm(z.item(k)) == 0.0) {
        return Err(Error::invalid("zero-norm feature vector"));
    }
    let logits: Vec<f64> = (0..n)
        .filter(|&k| k != i)
        .map(|k| cosine(z.item(i), z.item(k)) / tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - cosine(z.item(i), z.item(j)) / tau)
}

/// Symmetric teacher/student contrastive loss
/// `(1/2N) Σᵢ [ℓ_sim(zᵢˢᵗᵘ, zᵢᵗᵉᵃ) + ℓ_sim(zᵢᵗᵉᵃ, zᵢˢᵗᵘ)]` over the pooled
/// rows `Z = Zᵗᵉᵃ ∪ Zˢᵗᵘ`. Only the student rows receive a gradient.
pub fn contrastive_loss(z_stu: &Tensor, z_tea: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    let (n, d) = matrix_dims(z_stu)?;
    if z_tea.shape() != z_stu.shape() {
        return Err(Error::shape(z_stu.shape(), z_tea.shape()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let m = 2 * n;
    // rows 0..n teacher, n..2n student
    let pooled = Tensor::concat(z_tea, z_stu)?;
    let norms: Vec<f64> = (0..m).map(|k| row_norm(pooled.item(k))).collect();
    if norms.contains(&0.0) {
        return Err(Error::invalid("zero-norm feature vector"));
    }
    let unit: Vec<f64> = (0..m)
        .flat_map(|k| pooled.item(k).iter().map(move |v| (k, *v)))
        .map(|(k, v)| v / norms[k])
        .collect();
    let u = |k: usize| &unit[k * d..(k + 1) * d];
    let positive = |a: usize| if a < n { a + n } else { a - n };

    let mut sim = vec![0.0; m * m];
    for a in 0..m {
        for k in a..m {
            let s: f64 = u(a).iter().zip(u(k)).map(|(x, y)| x * y).sum();
            sim[a * m + k] = s;
            sim[k * m + a] = s;
        }
    }

    // dL/dS, one anchor per row
    let mut gsim = vec![0.0; m * m];
    let mut total = 0.0;
    for a in 0..m {
        let p = positive(a);
        let row = &sim[a * m..(a + 1) * m];
        let max = (0..m)
            .filter(|&k| k != a)
            .map(|k| row[k] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m)
            .filter(|&k| k != a)
            .map(|k| (row[k] / tau - max).exp())
            .sum();
        total += max + denom.ln() - row[p] / tau;
        for k in (0..m).filter(|&k| k != a) {
            let prob = (row[k] / tau - max).exp() / denom;
            let ind = if k == p { 1.0 } else { 0.0 };
            gsim[a * m + k] = (prob - ind) / tau;
        }
    }
    let scale = 1.0 / m as f64;

    // dL/dû_r = Σ_k (G[r,k] + G[k,r]) û_k; then through the normalisation.
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let r = n + i;
        let mut gu = vec![0.0; d];
        for k in 0..m {
            let w = gsim[r * m + k] + gsim[k * m + r];
            if w != 0.0 {
                for (g, &v) in gu.iter_mut().zip(u(k)) {
                    *g += w * v;
                }
            }
        }
        let ur = u(r);
        let dot: f64 = gu.iter().zip(ur).map(|(a, b)| a * b).sum();
        for t in 0..d {
            grad[i * d + t] = scale * (gu[t] - ur[t] * dot) / norms[r];
        }
    }
    Ok((total * scale, Tensor::new(&[n, d], grad)?))
}

/// Named loss components of one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub trans: f64,
    pub con: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `ℓ_total = ℓ_cls + ℓ_trans + λ·ℓ_con`. `lambda` must be nonnegative.
pub fn total_loss(cls: f64, trans: f64, con: f64, lambda: f64) -> LossReport {
    debug_assert!(lambda >= 0.0);
    LossReport {
        cls,
        trans,
        con,
        total: cls + trans + lambda * con,
        lambda,
    }
}
