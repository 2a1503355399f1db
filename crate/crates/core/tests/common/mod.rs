//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code path it is used to check.

#![allow(dead_code)]

use crda_core::nn::{Architecture, Gradients, LayerSpec, Model, Role};
use crda_core::{Rng, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this magnitude differences are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|k| {
            let orig = probe.data()[k];
            probe.data_mut()[k] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[k] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[k] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between an analytic gradient and central differences.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Scalar probe `L = Σ r_f·features + Σ r_l·logits` with fixed random weights.
pub struct Probe {
    pub rf: Tensor,
    pub rl: Tensor,
}

impl Probe {
    pub fn new(rng: &mut Rng, n: usize, dim: usize, outputs: usize) -> Self {
        Probe {
            rf: Tensor::gaussian(rng, &[n, dim], 0.0, 1.0).unwrap(),
            rl: Tensor::gaussian(rng, &[n, outputs], 0.0, 1.0).unwrap(),
        }
    }

    pub fn value(&self, model: &Model, x: &Tensor) -> f64 {
        let p = model.forward(x).unwrap();
        dot(&p.features, &self.rf) + dot(&p.logits, &self.rl)
    }

    pub fn grads(&self, model: &Model, x: &Tensor) -> Gradients {
        let p = model.forward(x).unwrap();
        model.backward(&p, Some(&self.rf), Some(&self.rl), true).unwrap()
    }
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error over every parameter and every input coordinate.
pub fn check_model_gradients(model: &Model, x: &Tensor, probe: &Probe) -> f64 {
    let g = probe.grads(model, x);
    let mut worst = 0.0f64;
    for (pi, analytic) in g.params.iter().enumerate() {
        let base = model.params()[pi].clone();
        let numeric = numeric_grad(&base, &mut |p| {
            let mut m = model.clone();
            *m.params_mut()[pi] = p.clone();
            probe.value(&m, x)
        });
        worst = worst.max(max_rel_err(analytic.data(), &numeric));
    }
    let numeric = numeric_grad(x, &mut |xx| probe.value(model, xx));
    worst.max(max_rel_err(g.input.unwrap().data(), &numeric))
}

/// Architectures that isolate each layer kind (plus the affine head).
pub fn single_layer_archs() -> Vec<(&'static str, Architecture)> {
    vec![
        (
            "conv3x3",
            Architecture {
                input: vec![2, 5, 6],
                features: vec![LayerSpec::Conv3x3 { in_ch: 2, out_ch: 3 }, LayerSpec::GlobalAvgPool],
                head_outputs: 2,
            },
        ),
        (
            "affine",
            Architecture {
                input: vec![5],
                features: vec![LayerSpec::Affine { inputs: 5, outputs: 4 }],
                head_outputs: 3,
            },
        ),
        (
            "relu",
            Architecture {
                input: vec![6],
                features: vec![LayerSpec::Relu],
                head_outputs: 2,
            },
        ),
        (
            "maxpool2",
            Architecture {
                input: vec![2, 4, 6],
                features: vec![LayerSpec::MaxPool2, LayerSpec::GlobalAvgPool],
                head_outputs: 2,
            },
        ),
        (
            "global_avg_pool",
            Architecture {
                input: vec![3, 3, 4],
                features: vec![LayerSpec::GlobalAvgPool],
                head_outputs: 2,
            },
        ),
        (
            "l2_normalize",
            Architecture {
                input: vec![5],
                features: vec![LayerSpec::L2Normalize],
                head_outputs: 2,
            },
        ),
        (
            "gain",
            Architecture {
                input: vec![4],
                features: vec![LayerSpec::Gain(2.5)],
                head_outputs: 2,
            },
        ),
        ("reference", Architecture::reference(3, 8, 8, 4)),
    ]
}

pub fn random_model(arch: &Architecture, seed: u64) -> Model {
    let mut m = Model::new(arch.clone(), Role::Teacher, &mut Rng::new(seed)).unwrap();
    // nonzero biases so every path carries gradient
    let mut rng = Rng::new(seed ^ 0xB1A5);
    for p in m.params_mut() {
        if p.rank() == 1 {
            *p = Tensor::gaussian(&mut rng, p.shape(), 0.0, 0.1).unwrap();
        }
    }
    m
}

/// Direct evaluation of the pairwise contrastive term, written without
/// matrices: `−log(exp(cos(zᵢ,zⱼ)/τ) / Σ_{k≠i} exp(cos(zᵢ,z_k)/τ))`.
pub fn brute_sim(rows: &[Vec<f64>], i: usize, j: usize, tau: f64) -> f64 {
    let cos = |a: &Vec<f64>, b: &Vec<f64>| {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for t in 0..a.len() {
            ab += a[t] * b[t];
            aa += a[t] * a[t];
            bb += b[t] * b[t];
        }
        ab / (aa.sqrt() * bb.sqrt())
    };
    let num = (cos(&rows[i], &rows[j]) / tau).exp();
    let mut den = 0.0;
    for (k, r) in rows.iter().enumerate() {
        if k != i {
            den += (cos(&rows[i], r) / tau).exp();
        }
    }
    -(num / den).ln()
}

/// `(1/2N) Σᵢ [ℓ(stuᵢ, teaᵢ) + ℓ(teaᵢ, stuᵢ)]` over `Z = tea ∪ stu`.
pub fn brute_contrastive(stu: &[Vec<f64>], tea: &[Vec<f64>], tau: f64) -> f64 {
    let n = stu.len();
    let mut z: Vec<Vec<f64>> = tea.to_vec();
    z.extend(stu.iter().cloned());
    let mut s = 0.0;
    for i in 0..n {
        s += brute_sim(&z, n + i, i, tau);
        s += brute_sim(&z, i, n + i, tau);
    }
    s / (2 * n) as f64
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.item(i).to_vec()).collect()
}

/// Spearman's ρ by explicit average ranks and Pearson on the ranks.
pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for k in 0..x.len() {
        sxy += (rx[k] - mx) * (ry[k] - my);
        sxx += (rx[k] - mx).powi(2);
        syy += (ry[k] - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
