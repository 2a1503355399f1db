//! Training loops: source-only reference, domain-adaptive teacher, and the
//! student trained against a frozen teacher on generated or corrupted target
//! samples.
//!
//! No function here reads target labels.

use crate::corrupt::{self, CorruptionKind, Severity};
use crate::data::{DomainPair, LabeledDataset};
use crate::ddg::{self, DdgConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, TransferLoss};
use crate::nn::{Architecture, Gradients, Model, Role, Sgd};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentMode {
    /// Contrastive alignment on DDG samples.
    Ddg,
    /// Contrastive alignment on the evaluation corruptions themselves.
    Oracle,
    /// Contrastive alignment on a small fixed augmentation set.
    RandomAug,
    /// No contrastive term.
    None,
}

impl StudentMode {
    pub const ALL: [StudentMode; 4] = [StudentMode::Ddg, StudentMode::Oracle, StudentMode::RandomAug, StudentMode::None];

    pub fn name(self) -> &'static str {
        match self {
            StudentMode::Ddg => "ddg",
            StudentMode::Oracle => "oracle",
            StudentMode::RandomAug => "random_aug",
            StudentMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransKind {
    Mmd,
    Adversarial { hidden: usize, reversal_weight: f64 },
}

impl TransKind {
    pub fn name(self) -> &'static str {
        match self {
            TransKind::Mmd => "mmd",
            TransKind::Adversarial { .. } => "adversarial",
        }
    }
}

/// Corruptions a student may be shown; each sample draws a kind and a
/// severity uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct AugSet {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<Severity>,
}

impl AugSet {
    /// The evaluation corruptions themselves: every kind at every scored
    /// severity.
    pub fn oracle() -> Self {
        AugSet {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: Severity::scored().collect(),
        }
    }

    /// Brightness, Contrast and Pixelate at mild severities.
    pub fn random_aug() -> Self {
        AugSet {
            kinds: vec![CorruptionKind::Brightness, CorruptionKind::Contrast, CorruptionKind::Pixelate],
            severities: (1..=3).map(|t| Severity::new(t).unwrap()).collect(),
        }
    }

    pub fn for_mode(mode: StudentMode) -> Option<Self> {
        match mode {
            StudentMode::Oracle => Some(Self::oracle()),
            StudentMode::RandomAug => Some(Self::random_aug()),
            _ => None,
        }
    }

    fn corrupt(&self, batch: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mut out = batch.clone();
        for i in 0..batch.shape()[0] {
            let kind = self.kinds[rng.below(self.kinds.len())];
            let t = self.severities[rng.below(self.severities.len())];
            let img = corrupt::apply(kind, t, &batch.index(i), rng)?;
            out.item_mut(i).copy_from_slice(img.data());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_reference: usize,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    pub trans: TransKind,
    pub ddg: DdgConfig,
    pub student_mode: StudentMode,
    /// Required for the oracle and random_aug modes.
    pub aug: Option<AugSet>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_reference: 30,
            epochs_teacher: 30,
            epochs_student: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: losses::DEFAULT_LAMBDA,
            tau: losses::DEFAULT_TAU,
            trans: TransKind::Mmd,
            ddg: DdgConfig::default(),
            student_mode: StudentMode::Ddg,
            aug: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Switches the student mode and installs that mode's default
    /// corruption list.
    pub fn with_mode(mut self, mode: StudentMode) -> Self {
        self.student_mode = mode;
        self.aug = AugSet::for_mode(mode);
        self
    }

    /// Cosine-decayed learning rate for `epoch` of a phase lasting `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs_reference", self.epochs_reference),
            ("epochs_teacher", self.epochs_teacher),
            ("epochs_student", self.epochs_student),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr must be > 0, momentum in [0,1), weight_decay >= 0"));
        }
        if !(self.lambda >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::invalid("lambda must be >= 0 and tau > 0"));
        }
        if let TransKind::Adversarial { hidden, reversal_weight } = self.trans {
            if hidden == 0 || !(reversal_weight >= 0.0) {
                return Err(Error::invalid("adversarial transfer needs hidden > 0, reversal_weight >= 0"));
            }
        }
        self.ddg.validate()?;
        if matches!(self.student_mode, StudentMode::Oracle | StudentMode::RandomAug) {
            match &self.aug {
                Some(a) if !a.kinds.is_empty() && !a.severities.is_empty() => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "student mode `{}` needs a non-empty corruption list",
                        self.student_mode.name()
                    )))
                }
            }
        }
        Ok(())
    }
}

/// A trained model and its per-epoch loss averages.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<LossReport>,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Reference = 1,
    Teacher = 2,
    Student = 3,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Reference => "reference",
            Phase::Teacher => "teacher",
            Phase::Student => "student",
        }
    }
}

pub fn architecture_for(ds: &LabeledDataset) -> Architecture {
    let [c, h, w] = ds.image_shape();
    Architecture::reference(c, h, w, ds.class_count())
}

/// Initial weights shared by the reference and teacher networks.
pub fn initial_model(pair: &DomainPair, cfg: &TrainConfig, role: Role) -> Result<Model> {
    let mut rng = Rng::stream(cfg.seed, Stream::Init).derive(0);
    Model::new(architecture_for(&pair.source), role, &mut rng)
}

/// Index batches for one epoch: `max(ns, nt) / bs` steps, each pairing a
/// source batch with a target batch. The smaller domain wraps around.
fn epoch_plan(ns: usize, nt: usize, bs: usize, rng: &mut Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
    let ps = rng.permutation(ns);
    let pt = rng.permutation(nt);
    let steps = (ns.max(nt) / bs).max(1);
    (0..steps)
        .map(|b| {
            let s = (0..bs).map(|j| ps[(b * bs + j) % ns]).collect();
            let t = (0..bs).map(|j| pt[(b * bs + j) % nt]).collect();
            (s, t)
        })
        .collect()
}

fn shuffle_rng(cfg: &TrainConfig, phase: Phase, epoch: usize) -> Rng {
    Rng::stream(cfg.seed, Stream::Shuffle).derive_path(&[phase as u64, epoch as u64])
}

fn check_finite(phase: Phase, epoch: usize, step: usize, r: &LossReport) -> Result<()> {
    if [r.cls, r.trans, r.con, r.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "{} epoch {epoch} step {step}: cls={} trans={} con={}",
            phase.name(),
            r.cls,
            r.trans,
            r.con
        )))
    }
}

/// Running mean of loss components over an epoch.
#[derive(Default)]
struct EpochMeter {
    cls: f64,
    trans: f64,
    con: f64,
    steps: usize,
}

impl EpochMeter {
    fn add(&mut self, cls: f64, trans: f64, con: f64) {
        self.cls += cls;
        self.trans += trans;
        self.con += con;
        self.steps += 1;
    }

    fn report(&self, lambda: f64) -> LossReport {
        let n = self.steps.max(1) as f64;
        losses::total_loss(self.cls / n, self.trans / n, self.con / n, lambda)
    }
}

/// Transfer loss plus, for the adversarial kind, the discriminator's
/// optimizer.
struct Transfer {
    loss: TransferLoss,
    disc_opt: Option<Sgd>,
}

impl Transfer {
    fn new(cfg: &TrainConfig, dim: usize, phase: Phase) -> Result<Self> {
        Ok(match cfg.trans {
            TransKind::Mmd => Transfer {
                loss: TransferLoss::default(),
                disc_opt: None,
            },
            TransKind::Adversarial { hidden, reversal_weight } => {
                let mut rng = Rng::stream(cfg.seed, Stream::Init).derive(100 + phase as u64);
                let disc = Model::new(Architecture::discriminator(dim, hidden), Role::Discriminator, &mut rng)?;
                Transfer {
                    loss: TransferLoss::Adversarial { disc, reversal_weight },
                    disc_opt: Some(Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?),
                }
            }
        })
    }

    fn set_lr(&mut self, lr: f64) {
        if let Some(opt) = &mut self.disc_opt {
            opt.lr = lr;
        }
    }

    fn step_disc(&mut self, grads: Option<&Gradients>) -> Result<()> {
        if let (TransferLoss::Adversarial { disc, .. }, Some(opt), Some(g)) = (&mut self.loss, &mut self.disc_opt, grads) {
            opt.step(disc, g)?;
        }
        Ok(())
    }
}

/// Source-only supervised training. Never touches the target domain.
pub fn train_reference(pair: &DomainPair, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let src = &pair.source;
    let mut model = initial_model(pair, cfg, Role::Reference)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let labels = src.labels().to_vec();
    let mut history = Vec::with_capacity(cfg.epochs_reference);
    for epoch in 0..cfg.epochs_reference {
        opt.lr = cfg.lr_at(epoch, cfg.epochs_reference);
        let mut rng = shuffle_rng(cfg, Phase::Reference, epoch);
        let perm = rng.permutation(src.len());
        let steps = (src.len() / cfg.batch_size).max(1);
        let mut meter = EpochMeter::default();
        for step in 0..steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|j| perm[(step * cfg.batch_size + j) % src.len()]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let pass = model.forward(&src.batch(&idx)?)?;
            let (cls, g_logits) = losses::cls_loss(&pass.logits, &y)?;
            check_finite(Phase::Reference, epoch, step, &losses::total_loss(cls, 0.0, 0.0, 0.0))?;
            let grads = model.backward(&pass, None, Some(&g_logits), false)?;
            opt.step(&mut model, &grads)?;
            meter.add(cls, 0.0, 0.0);
        }
        history.push(meter.report(cfg.lambda));
    }
    Ok(Trained { model, history })
}

/// Supervised source loss plus feature alignment: `ℓ_cls + ℓ_trans`, from
/// fresh weights.
pub fn train_teacher(pair: &DomainPair, cfg: &TrainConfig) -> Result<Trained> {
    train_teacher_from(pair, &initial_model(pair, cfg, Role::Teacher)?, cfg)
}

/// As [`train_teacher`], starting from `init` (typically the source-only
/// reference, playing the role of a pretrained backbone).
pub fn train_teacher_from(pair: &DomainPair, init: &Model, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if init.architecture() != &architecture_for(&pair.source) {
        return Err(Error::ArchitectureMismatch {
            expected: architecture_for(&pair.source).hash(),
            found: init.architecture().hash(),
        });
    }
    let mut model = init.with_role(Role::Teacher);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut transfer = Transfer::new(cfg, model.feature_dim(), Phase::Teacher)?;
    let labels = pair.source.labels().to_vec();
    let mut history = Vec::with_capacity(cfg.epochs_teacher);
    for epoch in 0..cfg.epochs_teacher {
        opt.lr = cfg.lr_at(epoch, cfg.epochs_teacher);
        transfer.set_lr(opt.lr);
        let mut rng = shuffle_rng(cfg, Phase::Teacher, epoch);
        let mut meter = EpochMeter::default();
        for (step, (si, ti)) in epoch_plan(pair.source.len(), pair.target.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let y: Vec<usize> = si.iter().map(|&i| labels[i]).collect();
            let ps = model.forward(&pair.source.batch(&si)?)?;
            let pt = model.forward(&pair.target.batch(&ti)?)?;
            let (cls, g_logits) = losses::cls_loss(&ps.logits, &y)?;
            let tr = transfer.loss.feature_objective(&ps.features, &pt.features)?;
            check_finite(Phase::Teacher, epoch, step, &losses::total_loss(cls, tr.value, 0.0, 0.0))?;

            let mut grads = model.backward(&ps, Some(&tr.grad_source), Some(&g_logits), false)?;
            grads.accumulate(&model.backward(&pt, Some(&tr.grad_target), None, false)?, 1.0)?;
            opt.step(&mut model, &grads)?;
            transfer.step_disc(tr.disc_grads.as_ref())?;
            meter.add(cls, tr.value, 0.0);
        }
        history.push(meter.report(cfg.lambda));
    }
    Ok(Trained { model, history })
}

/// Per-step DDG stream, shared with diagnostics that replay generation.
pub fn ddg_rng(seed: u64, epoch: usize, step: usize) -> Rng {
    Rng::stream(seed, Stream::Ddg).derive_path(&[epoch as u64, step as u64])
}

/// Student training against a frozen teacher:
/// `ℓ_cls + ℓ_trans + λ·ℓ_con`, where the contrastive term pairs the
/// student's features of perturbed target images with the teacher's
/// features of the clean ones. The student starts from the teacher weights.
pub fn train_student(pair: &DomainPair, teacher: &Model, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if teacher.architecture() != &architecture_for(&pair.source) {
        return Err(Error::ArchitectureMismatch {
            expected: architecture_for(&pair.source).hash(),
            found: teacher.architecture().hash(),
        });
    }
    let mut model = teacher.with_role(Role::Student);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut transfer = Transfer::new(cfg, model.feature_dim(), Phase::Student)?;
    let labels = pair.source.labels().to_vec();
    let mut history = Vec::with_capacity(cfg.epochs_student);
    for epoch in 0..cfg.epochs_student {
        opt.lr = cfg.lr_at(epoch, cfg.epochs_student);
        transfer.set_lr(opt.lr);
        let mut rng = shuffle_rng(cfg, Phase::Student, epoch);
        let mut meter = EpochMeter::default();
        for (step, (si, ti)) in epoch_plan(pair.source.len(), pair.target.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let y: Vec<usize> = si.iter().map(|&i| labels[i]).collect();
            let xt = pair.target.batch(&ti)?;
            let ps = model.forward(&pair.source.batch(&si)?)?;
            let pt = model.forward(&xt)?;
            let (cls, g_logits) = losses::cls_loss(&ps.logits, &y)?;
            let tr = transfer.loss.feature_objective(&ps.features, &pt.features)?;

            let perturbed = match cfg.student_mode {
                StudentMode::None => None,
                StudentMode::Ddg => {
                    let mut r = ddg_rng(cfg.seed, epoch, step);
                    let b = ddg::generate(&model, &transfer.loss, &xt, &ps.features, &cfg.ddg, &mut r)?;
                    Some(b.generated)
                }
                StudentMode::Oracle | StudentMode::RandomAug => {
                    let aug = cfg.aug.as_ref().expect("validated");
                    let mut r = Rng::stream(cfg.seed, Stream::Corruption).derive_path(&[epoch as u64, step as u64]);
                    Some(aug.corrupt(&xt, &mut r)?)
                }
            };

            let mut grads = model.backward(&ps, Some(&tr.grad_source), Some(&g_logits), false)?;
            grads.accumulate(&model.backward(&pt, Some(&tr.grad_target), None, false)?, 1.0)?;
            let mut con = 0.0;
            if let Some(xp) = perturbed {
                let z_tea = teacher.forward_features(&xt)?;
                let pa = model.forward(&xp)?;
                let (c, mut g_stu) = losses::contrastive_loss(&pa.features, &z_tea, cfg.tau)?;
                g_stu.scale_in_place(cfg.lambda);
                grads.accumulate(&model.backward(&pa, Some(&g_stu), None, false)?, 1.0)?;
                con = c;
            }
            check_finite(Phase::Student, epoch, step, &losses::total_loss(cls, tr.value, con, cfg.lambda))?;
            opt.step(&mut model, &grads)?;
            transfer.step_disc(tr.disc_grads.as_ref())?;
            meter.add(cls, tr.value, con);
        }
        history.push(meter.report(cfg.lambda));
    }
    Ok(Trained { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_pair, SynthSpec};

    fn tiny_pair() -> DomainPair {
        let spec = SynthSpec {
            classes: 3,
            per_domain: 24,
            height: 16,
            width: 16,
            ..SynthSpec::default()
        };
        generate_synthetic_pair(&Rng::new(11), &spec).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs_reference: 2,
            epochs_teacher: 2,
            epochs_student: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn modes_round_trip_and_need_corruption_lists() {
        for m in StudentMode::ALL {
            assert_eq!(StudentMode::parse(m.name()), Some(m));
        }
        let mut cfg = tiny_cfg().with_mode(StudentMode::Oracle);
        assert!(cfg.validate().is_ok());
        cfg.aug = None;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg().with_mode(StudentMode::RandomAug);
        cfg.aug.as_mut().unwrap().kinds.clear();
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..tiny_cfg() }.validate().is_err());
    }

    #[test]
    fn plan_covers_both_domains() {
        let plan = epoch_plan(10, 7, 4, &mut Rng::new(1));
        assert_eq!(plan.len(), 2);
        assert!(plan.iter().all(|(s, t)| s.len() == 4 && t.len() == 4));
        assert!(plan.iter().flat_map(|(_, t)| t).all(|&i| i < 7));
    }

    #[test]
    fn teacher_never_reads_target_labels_and_student_keeps_teacher_frozen() {
        let pair = tiny_pair();
        let cfg = tiny_cfg();
        pair.target.reset_label_reads();
        let teacher = train_teacher(&pair, &cfg).unwrap().model;
        let hash = teacher.param_hash();
        for mode in StudentMode::ALL {
            let s = train_student(&pair, &teacher, &cfg.clone().with_mode(mode)).unwrap();
            assert_eq!(s.model.role, Role::Student);
            for r in &s.history {
                assert!((r.total - (r.cls + r.trans + r.lambda * r.con)).abs() <= 1e-12);
                if mode == StudentMode::None {
                    assert_eq!(r.con, 0.0);
                }
            }
        }
        assert_eq!(teacher.param_hash(), hash);
        assert_eq!(pair.target.label_reads(), 0);
    }

    #[test]
    fn reference_is_deterministic() {
        let pair = tiny_pair();
        let a = train_reference(&pair, &tiny_cfg()).unwrap();
        let b = train_reference(&pair, &tiny_cfg()).unwrap();
        assert_eq!(a.model.param_hash(), b.model.param_hash());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn adversarial_teacher_trains() {
        let pair = tiny_pair();
        let cfg = TrainConfig {
            trans: TransKind::Adversarial { hidden: 16, reversal_weight: 1.0 },
            ..tiny_cfg()
        };
        let t = train_teacher(&pair, &cfg).unwrap();
        assert_eq!(t.history.len(), 2);
        assert!(t.history.iter().all(|r| r.trans.is_finite()));
    }
}
