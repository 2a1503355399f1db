//! `crda-lab`: data generation, corruption, training, evaluation, DDG dumps,
//! assumption checks, ablations and run reports.
//!
//! stdout carries only `key=value` summaries (training and evaluation end
//! with `mCE=<float>`); everything meant for people goes to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crda_core::config::{parse_real, DataSource, ExperimentConfig};
use crda_core::corrupt::{self, CorruptionKind, Severity};
use crda_core::data::{generate_synthetic_pair, load_tds, save_tds, SynthSpec};
use crda_core::ddg::{self, edge_step, DdgConfig};
use crda_core::experiment::{self, write_atomic};
use crda_core::harness;
use crda_core::losses::TransferLoss;
use crda_core::metrics::{self, ErrorGrid};
use crda_core::nn::{Model, Role};
use crda_core::train::{self, StudentMode, TransKind};
use crda_core::{Rng, Stream};

#[derive(Parser)]
#[command(name = "crda-lab", version, about = "Corruption-robust domain adaptation lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `train.seed` from the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair as TDS files.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_domain: Option<usize>,
        /// Square image side.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Write all 15 x 5 corrupted copies of a TDS file as `<stem>.<kind>.<t>.tds`.
    Corrupt {
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
    },
    /// Train reference, teacher and student, evaluate, and write a run directory.
    Train {
        /// Overrides `train.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Score a checkpoint against a reference checkpoint on the config's target data.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        reference: PathBuf,
    },
    /// Generate one DDG batch with a checkpoint and dump originals and generated images.
    DdgGen {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Check the corruption, feature and transfer-loss monotonicity assumptions.
    ValidateAssumptions {
        /// Trained model for the feature and transfer-loss checks; trains one if absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Also run the order-invariance study on the source domain.
        #[arg(long)]
        order_invariance: bool,
    },
    /// Train one DDG student per (delta, eta, n) grid point.
    Ablate {
        /// Comma-separated radii, e.g. `60/255,100/255`.
        #[arg(long, default_value = "60/255")]
        deltas: String,
        /// Comma-separated step sizes; `auto` means 2*delta + 1/255.
        #[arg(long, default_value = "6/255,15/255,auto")]
        etas: String,
        #[arg(long, default_value = "2")]
        steps: String,
    },
    /// Merge the summaries of several run directories into one CSV and SVG.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Missing or contradictory arguments detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData {
            classes,
            per_domain,
            size,
        } => gen_data(c, *classes, *per_domain, *size),
        Command::Corrupt { input } => corrupt_file(c, input),
        Command::Train { mode } => train_cmd(c, mode.as_deref()),
        Command::Evaluate { checkpoint, reference } => evaluate(c, checkpoint, reference),
        Command::DdgGen { checkpoint, batch } => ddg_gen(c, checkpoint, *batch),
        Command::ValidateAssumptions {
            checkpoint,
            order_invariance,
        } => validate(c, checkpoint.as_deref(), *order_invariance),
        Command::Ablate { deltas, etas, steps } => ablate(c, deltas, etas, steps),
        Command::Report { runs } => report(c, runs),
    }
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    let path = c.config.as_ref().ok_or_else(|| usage("this command needs --config PATH"))?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    let dir = c.out.as_deref().ok_or_else(|| usage("this command needs --out DIR"))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn gen_data(c: &Common, classes: Option<usize>, per_domain: Option<usize>, size: Option<usize>) -> Result<()> {
    let (mut spec, mut seed) = (SynthSpec::default(), 0);
    if c.config.is_some() {
        let cfg = config(c)?;
        seed = cfg.train.seed;
        match cfg.data {
            DataSource::Synthetic(s) => spec = s,
            DataSource::Files { .. } => bail!("gen-data needs a synthetic data source"),
        }
    }
    seed = c.seed.unwrap_or(seed);
    spec.classes = classes.unwrap_or(spec.classes);
    spec.per_domain = per_domain.unwrap_or(spec.per_domain);
    if let Some(s) = size {
        spec.height = s;
        spec.width = s;
    }
    let dir = out_dir(c)?;
    let pair = generate_synthetic_pair(&Rng::stream(seed, Stream::DataGen), &spec)?;
    let (src, tgt) = (dir.join("source.tds"), dir.join("target.tds"));
    save_tds(&pair.source, &src)?;
    save_tds(&pair.target, &tgt)?;
    eprintln!(
        "generated {} classes, {} images per domain, {}x{}",
        spec.classes, spec.per_domain, spec.height, spec.width
    );
    println!("source={}", src.display());
    println!("target={}", tgt.display());
    Ok(())
}

fn corrupt_file(c: &Common, input: &Path) -> Result<()> {
    let dir = out_dir(c)?;
    let ds = load_tds(input).with_context(|| format!("reading {}", input.display()))?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage("--in must name a file"))?;
    let rng = Rng::stream(c.seed.unwrap_or(0), Stream::Corruption);
    let mut count = 0;
    for kind in CorruptionKind::ALL {
        for t in Severity::scored() {
            let images = corrupt::apply_batch(kind, t, ds.images(), &metrics::cell_rng(&rng, kind, t))?;
            save_tds(&ds.with_images(images)?, dir.join(format!("{stem}.{}.{}.tds", kind.name(), t.get())))?;
            count += 1;
        }
    }
    eprintln!("wrote {count} corrupted copies of {} images to {}", ds.len(), dir.display());
    println!("files={count}");
    Ok(())
}

fn train_cmd(c: &Common, mode: Option<&str>) -> Result<()> {
    let mut cfg = config(c)?;
    if let Some(m) = mode {
        let m = StudentMode::parse(m).ok_or_else(|| usage(format!("unknown mode `{m}`")))?;
        cfg.train = cfg.train.with_mode(m);
    }
    let out = match &c.out {
        Some(_) => Some(out_dir(c)?),
        None => None,
    };
    let record = experiment::run_experiment(&cfg, out)?;
    for g in &record.grids {
        eprintln!(
            "{:10} clean_acc={:.4} mCE={:.4}",
            g.model,
            g.clean_accuracy(),
            metrics::ce(g, &record.grids[0])?.mce
        );
    }
    eprintln!("finished in {:.1}s", record.wall_clock.as_secs_f64());
    println!("mCE={}", record.student_report().mce);
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path, role: Role) -> Result<(Model, crda_core::data::DomainPair)> {
    let pair = experiment::load_pair(cfg)?;
    let model = Model::load(train::architecture_for(&pair.source), role, path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((model, pair))
}

fn evaluate(c: &Common, checkpoint: &Path, reference: &Path) -> Result<()> {
    let cfg = config(c)?;
    let (model, pair) = load_model(&cfg, checkpoint, Role::Student)?;
    let refm = Model::load(train::architecture_for(&pair.source), Role::Reference, reference)
        .with_context(|| format!("loading checkpoint {}", reference.display()))?;
    let target = experiment::eval_set(&pair.target, cfg.eval_images)?;
    let grids = experiment::evaluate(&[("reference", &refm), ("model", &model)], &target, cfg.train.seed)?;
    let rep = metrics::ce(&grids[1], &grids[0])?;
    if c.out.is_some() {
        let dir = out_dir(c)?;
        write_atomic(&dir.join("metrics.csv"), metrics::metrics_csv(std::slice::from_ref(&rep)).as_bytes())?;
        write_atomic(&dir.join("summary.csv"), experiment::summary_csv(&grids, &grids[0])?.as_bytes())?;
        let curves = metrics::severity_curves(&labelled(&grids))?;
        write_atomic(&dir.join("errors.csv"), curves.csv.as_bytes())?;
        write_atomic(&dir.join("curves.svg"), curves.svg.as_bytes())?;
    }
    eprintln!("clean accuracy {:.4}", grids[1].clean_accuracy());
    println!("clean_accuracy={}", grids[1].clean_accuracy());
    println!("mCE={}", rep.mce);
    Ok(())
}

fn labelled(grids: &[ErrorGrid]) -> Vec<(String, ErrorGrid)> {
    grids.iter().map(|g| (g.model.clone(), g.clone())).collect()
}

fn ddg_gen(c: &Common, checkpoint: &Path, batch: usize) -> Result<()> {
    let cfg = config(c)?;
    if batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    if !matches!(cfg.train.trans, TransKind::Mmd) {
        bail!("ddg-gen needs the mmd transfer loss; a trained discriminator is not stored in checkpoints");
    }
    let (model, pair) = load_model(&cfg, checkpoint, Role::Student)?;
    let dir = out_dir(c)?;
    let n = batch.min(pair.target.len()).min(pair.source.len());
    let idx: Vec<usize> = (0..n).collect();
    let zs = model.forward_features(&pair.source.batch(&idx)?)?;
    let targets = pair.target.subset(&idx)?;
    let b = ddg::generate(
        &model,
        &TransferLoss::default(),
        targets.images(),
        &zs,
        &cfg.train.ddg,
        &mut train::ddg_rng(cfg.train.seed, 0, 0),
    )?;
    save_tds(&targets, dir.join("ddg_originals.tds"))?;
    save_tds(&targets.with_images(b.generated.clone())?, dir.join("ddg_generated.tds"))?;
    eprintln!("dumped {n} original/generated pairs to {}", dir.display());
    println!("trans_loss_before={}", b.trans_loss_before);
    println!("trans_loss_after={}", b.trans_loss_after);
    println!("edge_fraction={}", ddg::edge_fraction(&b, &cfg.train.ddg));
    Ok(())
}

fn validate(c: &Common, checkpoint: Option<&Path>, order_invariance: bool) -> Result<()> {
    let cfg = config(c)?;
    let pair = experiment::load_pair(&cfg)?;
    let model = match checkpoint {
        Some(p) => Model::load(train::architecture_for(&pair.source), Role::Teacher, p)
            .with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => {
            eprintln!("no --checkpoint given; training reference and teacher");
            experiment::train_base(&pair, &cfg.train, cfg.teacher_init)?.1.model
        }
    };
    let rng = Rng::stream(cfg.train.seed, Stream::Harness);
    let reports = vec![
        harness::check_assumption1(&pair.target, &rng.derive(1))?,
        harness::check_assumption2(&model, &pair.target, &rng.derive(2))?,
        harness::check_assumption3(&model, &pair, &rng.derive(3))?,
    ];
    let dir = c.out.as_ref().map(|_| out_dir(c)).transpose()?;
    if let Some(dir) = dir {
        write_atomic(&dir.join("assumptions.csv"), harness::assumptions_csv(&reports).as_bytes())?;
    }
    for r in &reports {
        if let Some(note) = &r.note {
            eprintln!("assumption {}: {note}", r.assumption);
        }
        println!(
            "assumption{}={} monotone={} contained={}",
            r.assumption,
            if r.passed { "pass" } else { "fail" },
            r.monotone_count,
            r.contained_count
        );
    }
    if order_invariance {
        let curves =
            harness::order_invariance_study(&pair.source, CorruptionKind::GaussianNoise, &cfg.train, &rng.derive(4))?;
        if let Some(dir) = dir {
            write_atomic(
                &dir.join("order_invariance.csv"),
                harness::order_invariance_csv(&curves).as_bytes(),
            )?;
        }
        for cv in &curves {
            println!("regime={} rho={}", cv.regime.name(), cv.rho);
        }
    }
    Ok(())
}

fn list<T>(s: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| f(v.trim()).ok_or_else(|| usage(format!("bad {what} `{v}`"))))
        .collect()
}

fn ablate(c: &Common, deltas: &str, etas: &str, steps: &str) -> Result<()> {
    let cfg = config(c)?;
    let deltas = list(deltas, "delta", parse_real)?;
    let etas = list(etas, "eta", |v| if v == "auto" { Some(None) } else { parse_real(v).map(Some) })?;
    let steps = list(steps, "step count", |v| v.parse::<usize>().ok())?;
    let mut points = Vec::new();
    for &delta in &deltas {
        for eta in &etas {
            for &n in &steps {
                let p = DdgConfig {
                    delta,
                    eta: eta.unwrap_or_else(|| edge_step(delta)),
                    steps: n,
                    random_start: cfg.train.ddg.random_start,
                };
                p.validate().map_err(|e| usage(e.to_string()))?;
                points.push(p);
            }
        }
    }
    eprintln!("training {} students", points.len());
    let pair = experiment::load_pair(&cfg)?;
    let rows = harness::ablation_sweep(&pair, &cfg, &points)?;
    if c.out.is_some() {
        write_atomic(&out_dir(c)?.join("ablation.csv"), harness::ablation_csv(&rows).as_bytes())?;
    }
    for r in &rows {
        println!("delta={} eta={} n={} clean_acc={} mCE={}", r.delta, r.eta, r.n, r.clean_acc, r.mce);
    }
    Ok(())
}

struct SummaryRow {
    run: String,
    model: String,
    clean_accuracy: f64,
    mce: f64,
}

fn read_summary(run: &Path) -> Result<Vec<SummaryRow>> {
    let path = run.join("summary.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let name = run
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string());
    let mut lines = text.lines();
    if lines.next() != Some("model,clean_accuracy,mCE") {
        bail!("{}: unexpected header", path.display());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| anyhow!("{}: bad number `{s}`", path.display()));
            match f.as_slice() {
                [m, a, e] => Ok(SummaryRow {
                    run: name.clone(),
                    model: m.to_string(),
                    clean_accuracy: num(a)?,
                    mce: num(e)?,
                }),
                _ => bail!("{}: malformed row `{l}`", path.display()),
            }
        })
        .collect()
}

fn report_svg(rows: &[SummaryRow]) -> String {
    const COLORS: [&str; 6] = ["#7f7f7f", "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];
    let mut models: Vec<&str> = Vec::new();
    let mut runs: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !runs.contains(&r.run.as_str()) {
            runs.push(&r.run);
        }
    }
    let (bar, gap, plot_h, left, top) = (18.0, 24.0, 200.0, 50.0, 20.0);
    let group_w = bar * models.len() as f64 + gap;
    let width = left + group_w * runs.len() as f64 + 140.0;
    let height = top + plot_h + 60.0;
    let ymax = rows.iter().map(|r| r.mce).fold(1.0_f64, f64::max) * 1.1;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<text x="{left}" y="14">mCE by run and model</text>"#).unwrap();
    writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        width - 140.0,
        top + plot_h
    )
    .unwrap();
    for tick in [0.0, 0.5, 1.0] {
        let y = top + plot_h - tick / ymax * plot_h;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick:.1}</text>"#, left - 4.0, y + 4.0).unwrap();
        writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            width - 140.0
        )
        .unwrap();
    }
    for (ri, run) in runs.iter().enumerate() {
        let x0 = left + gap / 2.0 + group_w * ri as f64;
        for (mi, model) in models.iter().enumerate() {
            if let Some(r) = rows.iter().find(|r| r.run == *run && r.model == *model) {
                let h = r.mce / ymax * plot_h;
                writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{bar}" height="{h}" fill="{}"><title>{} {} mCE={:.4}</title></rect>"#,
                    x0 + bar * mi as f64,
                    top + plot_h - h,
                    COLORS[mi % COLORS.len()],
                    xml(run),
                    xml(model),
                    r.mce
                )
                .unwrap();
            }
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + bar * models.len() as f64 / 2.0,
            top + plot_h + 16.0,
            xml(run)
        )
        .unwrap();
    }
    for (mi, model) in models.iter().enumerate() {
        let y = top + 10.0 + 16.0 * mi as f64;
        let x = width - 130.0;
        writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            COLORS[mi % COLORS.len()],
            x + 14.0,
            y,
            xml(model)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn report(c: &Common, runs: &[PathBuf]) -> Result<()> {
    let dir = out_dir(c)?;
    let mut rows = Vec::new();
    for r in runs {
        rows.extend(read_summary(r)?);
    }
    let mut csv = String::from("run,model,clean_accuracy,mCE\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{}", r.run, r.model, r.clean_accuracy, r.mce).unwrap();
    }
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("report.svg"), report_svg(&rows).as_bytes())?;
    eprintln!("merged {} runs into {}", runs.len(), dir.display());
    print!("{csv}");
    Ok(())
}
