//! Empirical checks of the monotonicity assumptions behind corruption-agnostic
//! training, the order-invariance study, and DDG hyperparameter sweeps.

use std::fmt::Write as _;

use crate::config::ExperimentConfig;
use crate::corrupt::{self, CorruptionKind, Severity};
use crate::data::{DomainPair, LabeledDataset};
use crate::ddg::DdgConfig;
use crate::error::{Error, Result};
use crate::experiment;
use crate::losses::{self, TransferLoss};
use crate::metrics::{self, ErrorGrid};
use crate::nn::{Gradients, Model, Role, Sgd};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig};

pub const A1_MIN_RHO: f64 = 0.9;
pub const A1_MAX_SHIFT: f64 = 0.30;
pub const A1_MIN_MONOTONE: usize = 13;
pub const A1_MIN_CONTAINED: usize = 12;
pub const A2_MIN_RHO: f64 = 0.8;
pub const A2_MIN_PASS: usize = 12;
pub const A3_MIN_RHO: f64 = 0.8;
pub const A3_MIN_PASS: usize = 11;
pub const A3_MIN_PREMISE: f64 = 0.8;
const MIN_CORPUS: usize = 32;
const A3_BATCH: usize = 32;

/// Average ranks (1-based); ties share the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs equal lengths");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman correlation of a 5-vector with the severities 1..=5.
pub fn rho_vs_severity(values: &[f64; 5]) -> f64 {
    spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindMeasure {
    pub kind: CorruptionKind,
    /// Value at t = 0 (clean).
    pub anchor: f64,
    /// Values at t = 1..=5.
    pub values: [f64; 5],
    pub rho: f64,
    pub monotone: bool,
    /// Assumption 1 only: t = 5 shift within the bound.
    pub contained: bool,
    /// Assumption 3 only: fraction of batches where the t = 5 loss is at
    /// least the clean loss.
    pub premise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub assumption: u8,
    pub quantity: &'static str,
    pub kinds: Vec<KindMeasure>,
    pub monotone_count: usize,
    pub contained_count: usize,
    pub passed: bool,
    /// Set when the measurement is not meaningful, e.g. an untrained model.
    pub note: Option<String>,
}

impl MonotonicityReport {
    pub fn kind(&self, kind: CorruptionKind) -> &KindMeasure {
        &self.kinds[kind.index()]
    }

    /// Overall fraction of batches meeting the corrupted-vs-clean premise.
    pub fn premise_fraction(&self) -> Option<f64> {
        let v: Vec<f64> = self.kinds.iter().filter_map(|k| k.premise).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn require_corpus(corpus: &LabeledDataset) -> Result<()> {
    if corpus.len() < MIN_CORPUS {
        return Err(Error::invalid(format!(
            "corpus has {} images; at least {MIN_CORPUS} are needed",
            corpus.len()
        )));
    }
    Ok(())
}

fn measure(kind: CorruptionKind, anchor: f64, values: [f64; 5], min_rho: f64) -> KindMeasure {
    let rho = rho_vs_severity(&values);
    KindMeasure {
        kind,
        anchor,
        values,
        rho,
        monotone: rho >= min_rho,
        contained: true,
        premise: None,
    }
}

/// Pixel-space shift grows with severity and stays within the bound.
pub fn check_assumption1(corpus: &LabeledDataset, rng: &Rng) -> Result<MonotonicityReport> {
    require_corpus(corpus)?;
    let mut kinds = Vec::with_capacity(15);
    for &kind in &CorruptionKind::ALL {
        let profile = corrupt::shift_profile(kind, corpus, &rng.derive(kind.index() as u64))?;
        let mut m = measure(kind, 0.0, profile, A1_MIN_RHO);
        m.contained = profile[4] <= A1_MAX_SHIFT;
        kinds.push(m);
    }
    let monotone_count = kinds.iter().filter(|k| k.monotone).count();
    let contained_count = kinds.iter().filter(|k| k.contained).count();
    Ok(MonotonicityReport {
        assumption: 1,
        quantity: "average_shift",
        passed: monotone_count >= A1_MIN_MONOTONE && contained_count >= A1_MIN_CONTAINED,
        kinds,
        monotone_count,
        contained_count,
        note: None,
    })
}

fn features_chunked(model: &Model, x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(128) {
        parts.push(model.forward_features(&x.select(chunk)?)?);
    }
    Tensor::concat_all(&parts)
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.shape()[1];
    let n = a.shape()[0];
    a.data()
        .chunks_exact(d)
        .zip(b.data().chunks_exact(d))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

fn chance_note(model: &Model, corpus: &LabeledDataset) -> Result<Option<String>> {
    let acc = metrics::accuracy(model, corpus)?;
    let chance = 1.0 / corpus.class_count() as f64;
    Ok((acc <= chance + 0.05).then(|| {
        format!("model accuracy {acc:.3} is near chance ({chance:.3}); the assumption concerns trained networks")
    }))
}

/// Mean feature distance `‖f(t(x)) − f(x)‖₂` per kind and severity.
pub fn feature_distances(model: &Model, corpus: &LabeledDataset, rng: &Rng) -> Result<Vec<[f64; 5]>> {
    let clean = features_chunked(model, corpus.images())?;
    let mut out = Vec::with_capacity(15);
    for &kind in &CorruptionKind::ALL {
        let mut row = [0.0; 5];
        for t in Severity::scored() {
            let x = corrupt::apply_batch(kind, t, corpus.images(), &metrics::cell_rng(rng, kind, t))?;
            row[t.get() as usize - 1] = mean_row_distance(&features_chunked(model, &x)?, &clean);
        }
        out.push(row);
    }
    Ok(out)
}

/// Feature-space distance grows with severity.
pub fn check_assumption2(model: &Model, corpus: &LabeledDataset, rng: &Rng) -> Result<MonotonicityReport> {
    require_corpus(corpus)?;
    let dists = feature_distances(model, corpus, rng)?;
    let kinds: Vec<KindMeasure> = CorruptionKind::ALL
        .iter()
        .zip(dists)
        .map(|(&k, v)| measure(k, 0.0, v, A2_MIN_RHO))
        .collect();
    let monotone_count = kinds.iter().filter(|k| k.monotone).count();
    Ok(MonotonicityReport {
        assumption: 2,
        quantity: "feature_distance",
        passed: monotone_count >= A2_MIN_PASS,
        contained_count: kinds.len(),
        kinds,
        monotone_count,
        note: chance_note(model, corpus)?,
    })
}

/// Transfer loss between source features and corrupted target features
/// grows with severity.
pub fn check_assumption3(model: &Model, pair: &DomainPair, rng: &Rng) -> Result<MonotonicityReport> {
    require_corpus(&pair.target)?;
    let trans = TransferLoss::default();
    let batches = (pair.target.len().min(pair.source.len()) / A3_BATCH).clamp(1, 8);
    let mut zs = Vec::with_capacity(batches);
    let mut xt = Vec::with_capacity(batches);
    let mut clean = Vec::with_capacity(batches);
    for b in 0..batches {
        let idx: Vec<usize> = (b * A3_BATCH..(b + 1) * A3_BATCH).collect();
        let z = model.forward_features(&pair.source.batch(&idx)?)?;
        let x = pair.target.batch(&idx)?;
        clean.push(trans.evaluate(&z, &model.forward_features(&x)?)?.value);
        zs.push(z);
        xt.push(x);
    }
    let anchor = clean.iter().sum::<f64>() / batches as f64;

    let mut kinds = Vec::with_capacity(15);
    for &kind in &CorruptionKind::ALL {
        let mut values = [0.0; 5];
        let mut premise_hits = 0;
        for t in Severity::scored() {
            let cell = metrics::cell_rng(rng, kind, t);
            let mut sum = 0.0;
            for b in 0..batches {
                let xc = corrupt::apply_batch(kind, t, &xt[b], &cell.derive(b as u64))?;
                let v = trans.evaluate(&zs[b], &model.forward_features(&xc)?)?.value;
                sum += v;
                if t.get() == 5 && v >= clean[b] {
                    premise_hits += 1;
                }
            }
            values[t.get() as usize - 1] = sum / batches as f64;
        }
        let mut m = measure(kind, anchor, values, A3_MIN_RHO);
        m.premise = Some(premise_hits as f64 / batches as f64);
        kinds.push(m);
    }
    let monotone_count = kinds.iter().filter(|k| k.monotone).count();
    Ok(MonotonicityReport {
        assumption: 3,
        quantity: "transfer_loss",
        passed: monotone_count >= A3_MIN_PASS,
        contained_count: kinds.len(),
        kinds,
        monotone_count,
        note: chance_note(model, &pair.target)?,
    })
}

/// `assumption,quantity,kind,t0..t5,rho,monotone,contained,premise` rows.
pub fn assumptions_csv(reports: &[MonotonicityReport]) -> String {
    let mut s = String::from("assumption,quantity,kind,t0,t1,t2,t3,t4,t5,rho,monotone,contained,premise\n");
    for r in reports {
        for k in &r.kinds {
            let v = k.values;
            let premise = k.premise.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{premise}",
                r.assumption,
                r.quantity,
                k.kind.name(),
                k.anchor,
                v[0],
                v[1],
                v[2],
                v[3],
                v[4],
                k.rho,
                k.monotone,
                k.contained
            )
            .unwrap();
        }
    }
    s
}

/// Severity sampling used while training in the order-invariance study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeTag {
    /// Plain supervised training.
    Clean,
    /// Severities drawn from 0..=5.
    AllLevels,
    /// Severities drawn from {0, 5}.
    CleanPlusLevel5,
    /// Severity 5 only.
    Level5,
}

impl RegimeTag {
    pub const ALL: [RegimeTag; 4] = [
        RegimeTag::Clean,
        RegimeTag::AllLevels,
        RegimeTag::CleanPlusLevel5,
        RegimeTag::Level5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeTag::Clean => "clean",
            RegimeTag::AllLevels => "all_levels",
            RegimeTag::CleanPlusLevel5 => "clean_plus_level5",
            RegimeTag::Level5 => "level5",
        }
    }

    fn severities(self) -> &'static [u8] {
        match self {
            RegimeTag::Clean => &[],
            RegimeTag::AllLevels => &[0, 1, 2, 3, 4, 5],
            RegimeTag::CleanPlusLevel5 => &[0, 5],
            RegimeTag::Level5 => &[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeCurve {
    pub regime: RegimeTag,
    /// Mean feature distance at t = 0..=5.
    pub distances: [f64; 6],
    pub rho: f64,
    /// Parameter digest before the first update.
    pub initial_hash: String,
}

/// Trains one model per regime on a single labeled domain and measures how
/// far corrupted features drift from clean ones at each severity. The models
/// share initialization and batch order; only corruption sampling differs.
pub fn order_invariance_study(
    domain: &LabeledDataset,
    kind: CorruptionKind,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<Vec<RegimeCurve>> {
    require_corpus(domain)?;
    cfg.validate()?;
    let arch = train::architecture_for(domain);
    let labels = domain.labels().to_vec();
    let mut curves = Vec::with_capacity(4);
    for regime in RegimeTag::ALL {
        let mut model = Model::new(arch.clone(), Role::Student, &mut Rng::stream(cfg.seed, Stream::Init).derive(0))?;
        let initial_hash = model.param_hash();
        let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
        let levels = regime.severities();
        for epoch in 0..cfg.epochs_reference {
            opt.lr = cfg.lr_at(epoch, cfg.epochs_reference);
            let perm = Rng::stream(cfg.seed, Stream::Shuffle)
                .derive_path(&[9, epoch as u64])
                .permutation(domain.len());
            let steps = (domain.len() / cfg.batch_size).max(1);
            for step in 0..steps {
                let idx: Vec<usize> = (0..cfg.batch_size)
                    .map(|j| perm[(step * cfg.batch_size + j) % domain.len()])
                    .collect();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let x = domain.batch(&idx)?;
                let pass = model.forward(&x)?;
                let (_, g_logits) = losses::cls_loss(&pass.logits, &y)?;
                let mut grads = model.backward(&pass, None, Some(&g_logits), false)?;
                if !levels.is_empty() {
                    let mut r = Rng::stream(cfg.seed, Stream::Corruption).derive_path(&[9, epoch as u64, step as u64]);
                    let mut xc = x.clone();
                    for i in 0..idx.len() {
                        let t = Severity::new(levels[r.below(levels.len())])?;
                        let img = corrupt::apply(kind, t, &x.index(i), &mut r)?;
                        xc.item_mut(i).copy_from_slice(img.data());
                    }
                    let pc = model.forward(&xc)?;
                    let (_, mut g) = losses::contrastive_loss(&pc.features, &pass.features, cfg.tau)?;
                    g.scale_in_place(cfg.lambda);
                    let gc: Gradients = model.backward(&pc, Some(&g), None, false)?;
                    grads.accumulate(&gc, 1.0)?;
                }
                opt.step(&mut model, &grads)?;
            }
        }
        let clean = features_chunked(&model, domain.images())?;
        let mut distances = [0.0; 6];
        for t in Severity::scored() {
            let x = corrupt::apply_batch(kind, t, domain.images(), &metrics::cell_rng(rng, kind, t))?;
            distances[t.get() as usize] = mean_row_distance(&features_chunked(&model, &x)?, &clean);
        }
        let rho = spearman(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &distances);
        curves.push(RegimeCurve {
            regime,
            distances,
            rho,
            initial_hash,
        });
    }
    Ok(curves)
}

pub fn order_invariance_csv(curves: &[RegimeCurve]) -> String {
    let mut s = String::from("regime,t0,t1,t2,t3,t4,t5,rho\n");
    for c in curves {
        let d: Vec<String> = c.distances.iter().map(|v| v.to_string()).collect();
        writeln!(s, "{},{},{}", c.regime.name(), d.join(","), c.rho).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub delta: f64,
    pub eta: f64,
    pub n: usize,
    pub mce: f64,
    pub clean_acc: f64,
}

/// One DDG-mode student per grid point, all from the same reference and
/// teacher, scored against the reference.
pub fn ablation_sweep(pair: &DomainPair, base: &ExperimentConfig, points: &[DdgConfig]) -> Result<Vec<AblationRow>> {
    if points.is_empty() {
        return Err(Error::invalid("empty ablation grid"));
    }
    let cfg = base.train.clone().with_mode(train::StudentMode::Ddg);
    let (reference, teacher) = experiment::train_base(pair, &cfg, base.teacher_init)?;
    let mut students = Vec::with_capacity(points.len());
    for p in points {
        let c = TrainConfig { ddg: *p, ..cfg.clone() };
        students.push(train::train_student(pair, &teacher.model, &c)?.model);
    }
    let target = experiment::eval_set(&pair.target, base.eval_images)?;
    let mut models: Vec<(&str, &Model)> = vec![("reference", &reference.model)];
    let names: Vec<String> = (0..students.len()).map(|i| format!("point{i}")).collect();
    models.extend(names.iter().map(String::as_str).zip(students.iter()));
    let grids = experiment::evaluate(&models, &target, cfg.seed)?;
    ablation_rows(points, &grids[0], &grids[1..])
}

fn ablation_rows(points: &[DdgConfig], reference: &ErrorGrid, grids: &[ErrorGrid]) -> Result<Vec<AblationRow>> {
    points
        .iter()
        .zip(grids)
        .map(|(p, g)| {
            Ok(AblationRow {
                delta: p.delta,
                eta: p.eta,
                n: p.steps,
                mce: metrics::ce(g, reference)?.mce,
                clean_acc: g.clean_accuracy(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("delta,eta,n,mCE,clean_acc\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.delta, r.eta, r.n, r.mce, r.clean_acc).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert_eq!(rho_vs_severity(&[0.1, 0.2, 0.3, 0.4, 0.5]), 1.0);
        assert_eq!(rho_vs_severity(&[0.5, 0.4, 0.3, 0.2, 0.1]), -1.0);
        assert_eq!(rho_vs_severity(&[0.2; 5]), 0.0);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let r = rho_vs_severity(&[0.1, 0.3, 0.2, 0.4, 0.5]);
        assert!((r - 0.9).abs() < 1e-12);
    }

    #[test]
    fn regimes_are_distinct() {
        assert_eq!(RegimeTag::ALL.len(), 4);
        assert!(RegimeTag::Clean.severities().is_empty());
        assert_eq!(RegimeTag::CleanPlusLevel5.severities(), &[0, 5]);
    }

    #[test]
    fn ablation_csv_has_one_row_per_point() {
        let rows = vec![
            AblationRow { delta: 0.2, eta: 0.5, n: 2, mce: 0.7, clean_acc: 0.9 },
            AblationRow { delta: 0.2, eta: 6.0 / 255.0, n: 2, mce: 0.8, clean_acc: 0.9 },
        ];
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("delta,eta,n,mCE,clean_acc\n"));
    }
}
