//! Experiment configuration files.
//!
//! One `section.key = value` assignment per line; `#` starts a comment.
//! Sections are `data`, `model`, `train`, `ddg` and `eval`. `data.source`
//! and `train.mode` are required; everything else has a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corrupt::{CorruptionKind, Severity};
use crate::data::SynthSpec;
use crate::ddg::{edge_step, DdgConfig};
use crate::error::{Error, Result};
use crate::train::{AugSet, StudentMode, TrainConfig, TransKind};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated by `generate_synthetic_pair` from the run seed.
    Synthetic(SynthSpec),
    /// Two TDS files.
    Files { source: PathBuf, target: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherInit {
    /// Start from the trained source-only reference.
    Reference,
    /// Start from the shared random initialization.
    Scratch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub teacher_init: TeacherInit,
    pub train: TrainConfig,
    /// Evaluate on at most this many target images (the first ones).
    pub eval_images: Option<usize>,
}

const KEYS: &[&str] = &[
    "data.source",
    "data.target",
    "data.classes",
    "data.per_domain",
    "data.height",
    "data.width",
    "model.teacher_init",
    "model.disc_hidden",
    "train.mode",
    "train.seed",
    "train.epochs_reference",
    "train.epochs_teacher",
    "train.epochs_student",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.lambda",
    "train.tau",
    "train.trans",
    "train.reversal_weight",
    "train.aug_kinds",
    "train.aug_severities",
    "ddg.delta",
    "ddg.eta",
    "ddg.steps",
    "ddg.random_start",
    "eval.images",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn required(&self, key: &str) -> Result<(usize, &str)> {
        self.raw(key).ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    fn parse<T>(&self, key: &str, default: T, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => f(v).ok_or_else(|| Error::ConfigSyntax {
                line,
                msg: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }
}

/// Parses a real number, also accepting fractions such as `60/255`.
pub fn parse_real(s: &str) -> Option<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => s.parse::<f64>().ok()?,
    };
    v.is_finite().then_some(v)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| f(p.trim())).collect()
}

fn tokenize(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line,
            msg: format!("expected `section.key = value`, found `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !key.contains('.') {
            return Err(Error::ConfigSyntax {
                line,
                msg: format!("key `{key}` has no section"),
            });
        }
        if !KEYS.contains(&key) {
            return Err(Error::ConfigSyntax {
                line,
                msg: format!("unknown key `{key}`"),
            });
        }
        if let Some((first, _)) = map.insert(key.to_string(), (line, value.to_string())) {
            return Err(Error::ConfigSyntax {
                line,
                msg: format!("`{key}` already set on line {first}"),
            });
        }
    }
    Ok(Entries { map })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let e = tokenize(text)?;
        let d = TrainConfig::default();
        let synth = SynthSpec::default();

        let (_, source) = e.required("data.source")?;
        let data = if source == "synthetic" {
            if let Some((line, _)) = e.raw("data.target") {
                return Err(Error::ConfigSyntax {
                    line,
                    msg: "`data.target` only applies to file sources".into(),
                });
            }
            DataSource::Synthetic(SynthSpec {
                classes: e.parse("data.classes", synth.classes, |v| v.parse().ok())?,
                per_domain: e.parse("data.per_domain", synth.per_domain, |v| v.parse().ok())?,
                height: e.parse("data.height", synth.height, |v| v.parse().ok())?,
                width: e.parse("data.width", synth.width, |v| v.parse().ok())?,
                ..synth
            })
        } else {
            for key in ["data.classes", "data.per_domain", "data.height", "data.width"] {
                if let Some((line, _)) = e.raw(key) {
                    return Err(Error::ConfigSyntax {
                        line,
                        msg: format!("`{key}` only applies to synthetic data"),
                    });
                }
            }
            let (_, target) = e.required("data.target")?;
            DataSource::Files {
                source: PathBuf::from(source),
                target: PathBuf::from(target),
            }
        };

        let (mode_line, mode) = e.required("train.mode")?;
        let mode = StudentMode::parse(mode).ok_or_else(|| Error::ConfigSyntax {
            line: mode_line,
            msg: format!("unknown mode `{mode}` (expected ddg, oracle, random_aug or none)"),
        })?;

        let trans = match e.raw("train.trans") {
            None | Some((_, "mmd")) => TransKind::Mmd,
            Some((_, "adversarial")) => TransKind::Adversarial {
                hidden: e.parse("model.disc_hidden", 32, |v| v.parse().ok())?,
                reversal_weight: e.parse("train.reversal_weight", 1.0, parse_real)?,
            },
            Some((line, v)) => {
                return Err(Error::ConfigSyntax {
                    line,
                    msg: format!("unknown transfer loss `{v}` (expected mmd or adversarial)"),
                })
            }
        };

        let delta = e.parse("ddg.delta", d.ddg.delta, parse_real)?;
        let ddg = DdgConfig {
            delta,
            eta: e.parse("ddg.eta", edge_step(delta), |v| {
                if v == "auto" {
                    Some(edge_step(delta))
                } else {
                    parse_real(v)
                }
            })?,
            steps: e.parse("ddg.steps", d.ddg.steps, |v| v.parse().ok())?,
            random_start: e.parse("ddg.random_start", d.ddg.random_start, parse_bool)?,
        };

        let mut aug = AugSet::for_mode(mode);
        if e.raw("train.aug_kinds").is_some() || e.raw("train.aug_severities").is_some() {
            let base = aug.clone().unwrap_or_else(AugSet::oracle);
            aug = Some(AugSet {
                kinds: e.parse("train.aug_kinds", base.kinds, |v| parse_list(v, CorruptionKind::parse))?,
                severities: e.parse("train.aug_severities", base.severities, |v| {
                    parse_list(v, |t| Severity::new(t.parse().ok()?).ok().filter(|s| s.get() > 0))
                })?,
            });
        }

        let train = TrainConfig {
            epochs_reference: e.parse("train.epochs_reference", d.epochs_reference, |v| v.parse().ok())?,
            epochs_teacher: e.parse("train.epochs_teacher", d.epochs_teacher, |v| v.parse().ok())?,
            epochs_student: e.parse("train.epochs_student", d.epochs_student, |v| v.parse().ok())?,
            batch_size: e.parse("train.batch_size", d.batch_size, |v| v.parse().ok())?,
            lr: e.parse("train.lr", d.lr, parse_real)?,
            momentum: e.parse("train.momentum", d.momentum, parse_real)?,
            weight_decay: e.parse("train.weight_decay", d.weight_decay, parse_real)?,
            lambda: e.parse("train.lambda", d.lambda, parse_real)?,
            tau: e.parse("train.tau", d.tau, parse_real)?,
            trans,
            ddg,
            student_mode: mode,
            aug,
            seed: e.parse("train.seed", d.seed, |v| v.parse().ok())?,
        };
        train.validate()?;

        let teacher_init = match e.raw("model.teacher_init") {
            None | Some((_, "reference")) => TeacherInit::Reference,
            Some((_, "scratch")) => TeacherInit::Scratch,
            Some((line, v)) => {
                return Err(Error::ConfigSyntax {
                    line,
                    msg: format!("unknown teacher init `{v}` (expected reference or scratch)"),
                })
            }
        };
        let eval_images = match e.raw("eval.images") {
            None | Some((_, "all")) => None,
            Some((line, v)) => Some(v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::ConfigSyntax {
                    line,
                    msg: format!("invalid value `{v}` for `eval.images`"),
                }
            })?),
        };

        Ok(ExperimentConfig {
            data,
            teacher_init,
            train,
            eval_images,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The fully resolved configuration in the same file format.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        match &self.data {
            DataSource::Synthetic(spec) => {
                s.push_str("data.source = synthetic\n");
                writeln!(s, "data.classes = {}", spec.classes).unwrap();
                writeln!(s, "data.per_domain = {}", spec.per_domain).unwrap();
                writeln!(s, "data.height = {}", spec.height).unwrap();
                writeln!(s, "data.width = {}", spec.width).unwrap();
            }
            DataSource::Files { source, target } => {
                writeln!(s, "data.source = {}", source.display()).unwrap();
                writeln!(s, "data.target = {}", target.display()).unwrap();
            }
        }
        let init = match self.teacher_init {
            TeacherInit::Reference => "reference",
            TeacherInit::Scratch => "scratch",
        };
        writeln!(s, "model.teacher_init = {init}").unwrap();
        writeln!(s, "train.mode = {}", t.student_mode.name()).unwrap();
        writeln!(s, "train.seed = {}", t.seed).unwrap();
        writeln!(s, "train.epochs_reference = {}", t.epochs_reference).unwrap();
        writeln!(s, "train.epochs_teacher = {}", t.epochs_teacher).unwrap();
        writeln!(s, "train.epochs_student = {}", t.epochs_student).unwrap();
        writeln!(s, "train.batch_size = {}", t.batch_size).unwrap();
        writeln!(s, "train.lr = {:?}", t.lr).unwrap();
        writeln!(s, "train.momentum = {:?}", t.momentum).unwrap();
        writeln!(s, "train.weight_decay = {:?}", t.weight_decay).unwrap();
        writeln!(s, "train.lambda = {:?}", t.lambda).unwrap();
        writeln!(s, "train.tau = {:?}", t.tau).unwrap();
        writeln!(s, "train.trans = {}", t.trans.name()).unwrap();
        if let TransKind::Adversarial { hidden, reversal_weight } = t.trans {
            writeln!(s, "model.disc_hidden = {hidden}").unwrap();
            writeln!(s, "train.reversal_weight = {reversal_weight:?}").unwrap();
        }
        if let Some(aug) = &t.aug {
            let kinds: Vec<&str> = aug.kinds.iter().map(|k| k.name()).collect();
            let sev: Vec<String> = aug.severities.iter().map(|v| v.get().to_string()).collect();
            writeln!(s, "train.aug_kinds = {}", kinds.join(",")).unwrap();
            writeln!(s, "train.aug_severities = {}", sev.join(",")).unwrap();
        }
        writeln!(s, "ddg.delta = {:?}", t.ddg.delta).unwrap();
        writeln!(s, "ddg.eta = {:?}", t.ddg.eta).unwrap();
        writeln!(s, "ddg.steps = {}", t.ddg.steps).unwrap();
        writeln!(s, "ddg.random_start = {}", t.ddg.random_start).unwrap();
        match self.eval_images {
            Some(n) => writeln!(s, "eval.images = {n}").unwrap(),
            None => s.push_str("eval.images = all\n"),
        }
        s
    }
}
