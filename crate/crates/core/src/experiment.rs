//! End-to-end runs: data, reference, teacher, student, evaluation, and the
//! run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::config::{DataSource, ExperimentConfig, TeacherInit};
use crate::data::{generate_synthetic_pair, load_tds, DomainPair, LabeledDataset};
use crate::error::Result;
use crate::losses::LossReport;
use crate::metrics::{self, CeReport, ErrorGrid};
use crate::nn::Model;
use crate::rng::{Rng, Stream};
use crate::train::{self, Trained, TrainConfig};

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub reference: Trained,
    pub teacher: Trained,
    pub student: Trained,
    /// Reference, teacher and student grids, in that order.
    pub grids: Vec<ErrorGrid>,
    /// Teacher and student reports against the reference.
    pub reports: Vec<CeReport>,
    /// Target label reads observed across all training phases.
    pub training_label_reads: usize,
    pub wall_clock: Duration,
}

impl RunRecord {
    pub fn student_report(&self) -> &CeReport {
        &self.reports[1]
    }
}

pub fn load_pair(cfg: &ExperimentConfig) -> Result<DomainPair> {
    match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic_pair(&Rng::stream(cfg.train.seed, Stream::DataGen), spec),
        DataSource::Files { source, target } => DomainPair::new(load_tds(source)?, load_tds(target)?),
    }
}

/// Source-only reference and the domain-adapted teacher.
pub fn train_base(pair: &DomainPair, cfg: &TrainConfig, init: TeacherInit) -> Result<(Trained, Trained)> {
    let reference = train::train_reference(pair, cfg)?;
    let teacher = match init {
        TeacherInit::Reference => train::train_teacher_from(pair, &reference.model, cfg)?,
        TeacherInit::Scratch => train::train_teacher(pair, cfg)?,
    };
    Ok((reference, teacher))
}

/// The target images scored by evaluation.
pub fn eval_set(target: &LabeledDataset, limit: Option<usize>) -> Result<LabeledDataset> {
    match limit {
        Some(n) if n < target.len() => target.subset(&(0..n).collect::<Vec<_>>()),
        _ => Ok(target.clone()),
    }
}

/// Grids for `models` on shared corrupted images drawn from the run seed.
pub fn evaluate(models: &[(&str, &Model)], target: &LabeledDataset, seed: u64) -> Result<Vec<ErrorGrid>> {
    metrics::error_grids(models, target, &Rng::stream(seed, Stream::Eval))
}

pub fn losses_csv(history: &[LossReport]) -> String {
    let mut s = String::from("epoch,cls,trans,con,total\n");
    for (e, r) in history.iter().enumerate() {
        writeln!(s, "{e},{},{},{},{}", r.cls, r.trans, r.con, r.total).unwrap();
    }
    s
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `model,clean_accuracy,mCE` for every grid against `reference`.
pub fn summary_csv(grids: &[ErrorGrid], reference: &ErrorGrid) -> Result<String> {
    let mut s = String::from("model,clean_accuracy,mCE\n");
    for g in grids {
        writeln!(s, "{},{},{}", g.model, g.clean_accuracy(), metrics::ce(g, reference)?.mce).unwrap();
    }
    Ok(s)
}

/// Reference, teacher and student training followed by evaluation. Writes
/// the run directory when `out` is given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.train.validate()?;
    let pair = load_pair(cfg)?;
    pair.target.reset_label_reads();
    let (reference, teacher) = train_base(&pair, &cfg.train, cfg.teacher_init)?;
    let teacher_hash = teacher.model.param_hash();
    let student = train::train_student(&pair, &teacher.model, &cfg.train)?;
    debug_assert_eq!(teacher_hash, teacher.model.param_hash());
    let training_label_reads = pair.target.label_reads();

    let target = eval_set(&pair.target, cfg.eval_images)?;
    let grids = evaluate(
        &[
            ("reference", &reference.model),
            ("teacher", &teacher.model),
            ("student", &student.model),
        ],
        &target,
        cfg.train.seed,
    )?;
    let reports = vec![metrics::ce(&grids[1], &grids[0])?, metrics::ce(&grids[2], &grids[0])?];

    let record = RunRecord {
        config: cfg.clone(),
        reference,
        teacher,
        student,
        grids,
        reports,
        training_label_reads,
        wall_clock: start.elapsed(),
    };
    if let Some(dir) = out {
        write_run_dir(&record, dir)?;
    }
    Ok(record)
}

pub fn run_experiment_file(path: impl AsRef<Path>, out: Option<&Path>) -> Result<RunRecord> {
    run_experiment(&ExperimentConfig::load(path)?, out)
}

/// Lays out a run directory. Everything except `timing.txt` is a function
/// of the configuration alone.
pub fn write_run_dir(record: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    record.reference.model.save(dir.join("reference.ckpt"))?;
    record.teacher.model.save(dir.join("teacher.ckpt"))?;
    record.student.model.save(dir.join("student.ckpt"))?;
    write_atomic(&dir.join("losses.csv"), losses_csv(&record.student.history).as_bytes())?;
    write_atomic(&dir.join("teacher_losses.csv"), losses_csv(&record.teacher.history).as_bytes())?;
    write_atomic(&dir.join("reference_losses.csv"), losses_csv(&record.reference.history).as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), metrics::metrics_csv(&record.reports).as_bytes())?;
    write_atomic(
        &dir.join("summary.csv"),
        summary_csv(&record.grids, &record.grids[0])?.as_bytes(),
    )?;
    let labelled: Vec<(String, ErrorGrid)> = record.grids.iter().map(|g| (g.model.clone(), g.clone())).collect();
    let curves = metrics::severity_curves(&labelled)?;
    write_atomic(&dir.join("errors.csv"), curves.csv.as_bytes())?;
    write_atomic(&dir.join("curves.svg"), curves.svg.as_bytes())?;
    write_atomic(&dir.join("config.echo"), record.config.echo().as_bytes())?;
    write_atomic(
        &dir.join("timing.txt"),
        format!("wall_clock_seconds = {:.3}\n", record.wall_clock.as_secs_f64()).as_bytes(),
    )?;
    Ok(())
}
