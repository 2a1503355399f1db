//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion with
//! the measured values and exits non-zero if any criterion fails.
//!
//! Runs without the libtest harness so the lines are never captured and a
//! failing criterion does not hide the others. A positional argument
//! restricts the run to criteria whose id contains it (`c7`, `c1`, ...).

mod common;

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use crda_core::config::ExperimentConfig;
use crda_core::corrupt::{self, CorruptionKind, Severity};
use crda_core::data::{DomainPair, LabeledDataset};
use crda_core::ddg::{self, edge_step, DdgConfig};
use crda_core::experiment;
use crda_core::harness::{self, A1_MAX_SHIFT, A1_MIN_CONTAINED, A1_MIN_MONOTONE, A1_MIN_RHO};
use crda_core::losses::{adversarial_trans, cls_loss, contrastive_loss, mmd2, AdversarialMode, TransferLoss};
use crda_core::metrics::{self, ErrorGrid};
use crda_core::nn::{Architecture, Model, Role};
use crda_core::train::{self, AugSet, StudentMode};
use crda_core::{Rng, Stream, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

const C1_CASES: usize = 20;
const C1_BUDGET: Duration = Duration::from_secs(120);
const C2_SIZES: [usize; 4] = [1, 2, 3, 5];
const C2_SETS: usize = 50;
const C2_TOL: f64 = 1e-9;
const C2_LN3_TOL: f64 = 1e-12;
const C3_CASES: u32 = 10_000;
const C3_SLACK: f64 = 1e-9;
const C3_CONSTANT_CASES: usize = 200;
const C4_BATCHES: usize = 200;
const C4_BATCH: usize = 16;
const C4_CORNERS: usize = 8;
const C4_MIN_ASCENT: f64 = 0.95;
const C4_MIN_BEATS_CORNERS: f64 = 0.80;
const C5_IMAGES: usize = 1000;
const C6_TOL: f64 = 1e-12;
const C7_SEEDS: [u64; 3] = [0, 1, 2];
const C7_BUDGET: Duration = Duration::from_secs(45 * 60);
const C7_DA_GAIN: f64 = 0.03;
const C7_CLEAN_SLACK: f64 = 0.02;
const C7_MIN_AUG_LOSSES: usize = 2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn panic_text(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 9] = [
        ("c1", "finite-difference gradients", c1_gradients),
        ("c2", "contrastive loss oracle", c2_contrastive),
        ("c3", "DDG containment", c3_containment),
        ("c4", "DDG efficacy", c4_efficacy),
        ("c5", "corruption range and shift monotonicity", c5_corruptions),
        ("c6", "CE arithmetic", c6_ce),
        ("c7", "desk benchmark", c7_desk),
        ("c8", "ablation ordering", c8_ablation),
        ("c9", "training contracts", c9_contracts),
    ];
    let selected: Vec<_> = criteria
        .iter()
        .filter(|(id, title, _)| filters.is_empty() || filters.iter().any(|f| id.contains(f.as_str()) || title.contains(f.as_str()) || "acceptance".contains(f.as_str())))
        .collect();
    if selected.is_empty() {
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    for (id, title, f) in &selected {
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("panicked: {}", panic_text(e))),
        };
        println!(
            "[{}] {id} {title}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!pass);
    }
    println!("acceptance: {} passed, {failed} failed", selected.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- c1

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut families: Vec<(String, usize, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| match families.iter_mut().find(|f| f.0 == name) {
        Some(f) => {
            f.1 += 1;
            f.2 = f.2.max(err);
        }
        None => families.push((name.to_string(), 1, err)),
    };

    for (name, arch) in single_layer_archs() {
        for case in 0..C1_CASES as u64 {
            let model = random_model(&arch, 1000 + case);
            let mut rng = Rng::new(2000 + case);
            let n = 1 + rng.below(4);
            let mut shape = vec![n];
            shape.extend(&arch.input);
            let x = Tensor::gaussian(&mut rng, &shape, 0.3, 0.5).unwrap();
            let probe = Probe::new(&mut rng, n, model.feature_dim(), model.output_dim());
            record(name, check_model_gradients(&model, &x, &probe));
        }
    }

    for case in 0..C1_CASES as u64 {
        let mut rng = Rng::new(3000 + case);
        let (n, k) = (1 + rng.below(6), 2 + rng.below(5));
        let logits = Tensor::gaussian(&mut rng, &[n, k], 0.0, 2.0).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let (_, g) = cls_loss(&logits, &labels).unwrap();
        let num = numeric_grad(&logits, &mut |l| cls_loss(l, &labels).unwrap().0);
        record("cls", max_rel_err(g.data(), &num));
    }

    for case in 0..C1_CASES as u64 {
        let mut rng = Rng::new(4000 + case);
        let (ns, nt, d) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(6));
        let zs = Tensor::gaussian(&mut rng, &[ns, d], 0.0, 1.0).unwrap();
        let zt = Tensor::gaussian(&mut rng, &[nt, d], 0.4, 1.0).unwrap();
        let gammas: Vec<f64> = (0..1 + rng.below(3)).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let m = mmd2(&zs, &zt, &gammas).unwrap();
        let ns_ = numeric_grad(&zs, &mut |z| mmd2(z, &zt, &gammas).unwrap().value);
        let nt_ = numeric_grad(&zt, &mut |z| mmd2(&zs, z, &gammas).unwrap().value);
        record(
            "mmd2",
            max_rel_err(m.grad_source.data(), &ns_).max(max_rel_err(m.grad_target.data(), &nt_)),
        );
    }

    for mode in [AdversarialMode::TrainDisc, AdversarialMode::Confuse] {
        for case in 0..C1_CASES as u64 {
            let mut rng = Rng::new(5000 + case);
            let (ns, nt, d, h) = (1 + rng.below(4), 1 + rng.below(4), 2 + rng.below(4), 2 + rng.below(5));
            let w = rng.uniform_range(0.25, 2.0);
            let disc = random_model(&Architecture::discriminator(d, h), 6000 + case).with_role(Role::Discriminator);
            let zs = Tensor::gaussian(&mut rng, &[ns, d], 0.0, 1.0).unwrap();
            let zt = Tensor::gaussian(&mut rng, &[nt, d], 0.3, 1.0).unwrap();
            let a = adversarial_trans(&zs, &zt, &disc, mode, w).unwrap();
            // Confuse reverses feature gradients of the same loss.
            let sign = if mode == AdversarialMode::Confuse { -w } else { 1.0 };
            let value = |zs: &Tensor, zt: &Tensor, d: &Model| {
                adversarial_trans(zs, zt, d, AdversarialMode::TrainDisc, 1.0).unwrap().value
            };
            let ns_: Vec<f64> = numeric_grad(&zs, &mut |z| value(z, &zt, &disc)).iter().map(|v| sign * v).collect();
            let nt_: Vec<f64> = numeric_grad(&zt, &mut |z| value(&zs, z, &disc)).iter().map(|v| sign * v).collect();
            let mut err = max_rel_err(a.grad_source.data(), &ns_).max(max_rel_err(a.grad_target.data(), &nt_));
            for (pi, g) in a.disc_grads.params.iter().enumerate() {
                let num = numeric_grad(disc.params()[pi], &mut |p| {
                    let mut dd = disc.clone();
                    *dd.params_mut()[pi] = p.clone();
                    value(&zs, &zt, &dd)
                });
                err = err.max(max_rel_err(g.data(), &num));
            }
            let name = if mode == AdversarialMode::Confuse {
                "adversarial/confuse"
            } else {
                "adversarial/train_disc"
            };
            record(name, err);
        }
    }

    for case in 0..C1_CASES as u64 {
        let mut rng = Rng::new(7000 + case);
        let (n, d) = (1 + rng.below(5), 2 + rng.below(6));
        let tau = [0.1, 0.2, 0.5, 1.0][rng.below(4)];
        let stu = Tensor::gaussian(&mut rng, &[n, d], 0.0, 1.0).unwrap();
        let tea = Tensor::gaussian(&mut rng, &[n, d], 0.0, 1.0).unwrap();
        let (_, g) = contrastive_loss(&stu, &tea, tau).unwrap();
        let num = numeric_grad(&stu, &mut |s| contrastive_loss(s, &tea, tau).unwrap().0);
        record("contrastive", max_rel_err(g.data(), &num));
    }

    let elapsed = start.elapsed();
    let worst = families.iter().map(|f| f.2).fold(0.0, f64::max);
    let enough = families.iter().all(|f| f.1 >= C1_CASES);
    let per_family: Vec<String> = families.iter().map(|f| format!("{}={:.1e}", f.0, f.2)).collect();
    outcome(
        worst <= FD_REL_TOL && enough && elapsed < C1_BUDGET,
        format!(
            "{} families x {C1_CASES} cases, worst rel err {worst:.2e} (tol {FD_REL_TOL:e}), {:.1}s of {}s budget\n    {}",
            families.len(),
            elapsed.as_secs_f64(),
            C1_BUDGET.as_secs(),
            per_family.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- c2

fn c2_contrastive() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(8000);
    for &n in &C2_SIZES {
        for _ in 0..C2_SETS {
            let d = 2 + rng.below(7);
            let tau = rng.uniform_range(0.05, 1.0);
            let stu = Tensor::gaussian(&mut rng, &[n, d], 0.0, 1.0).unwrap();
            let tea = Tensor::gaussian(&mut rng, &[n, d], 0.0, 1.0).unwrap();
            let (v, _) = contrastive_loss(&stu, &tea, tau).unwrap();
            worst = worst.max((v - brute_contrastive(&rows(&stu), &rows(&tea), tau)).abs());
        }
    }
    let mut one_exact = true;
    for _ in 0..C2_SETS {
        let stu = Tensor::gaussian(&mut rng, &[1, 4], 0.0, 1.0).unwrap();
        let tea = Tensor::gaussian(&mut rng, &[1, 4], 0.0, 1.0).unwrap();
        one_exact &= contrastive_loss(&stu, &tea, 0.2).unwrap().0 == 0.0;
    }
    let same = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![0.3, -1.2, 0.5]]).unwrap();
    let ln3_err = (contrastive_loss(&same, &same, 0.2).unwrap().0 - 3f64.ln()).abs();
    outcome(
        worst <= C2_TOL && one_exact && ln3_err <= C2_LN3_TOL,
        format!(
            "N in {C2_SIZES:?} x {C2_SETS} sets: max |impl - brute| {worst:.2e} (tol {C2_TOL:e}); N=1 exactly 0: {one_exact}; identical N=2 |v - ln 3| {ln3_err:.1e} (tol {C2_LN3_TOL:e})"
        ),
    )
}

// ---------------------------------------------------------------- c3

fn c3_containment() -> Outcome {
    let strategy = (
        any::<u64>(),
        1usize..=3,
        4usize..=8,
        4usize..=8,
        1usize..=4,
        0.001f64..0.6,
        0.001f64..1.5,
        1usize..=4,
        any::<bool>(),
        any::<bool>(),
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: C3_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let worst_excess = Cell::new(f64::NEG_INFINITY);
    let cases = Cell::new(0u32);
    let result = runner.run(
        &strategy,
        |(seed, c, h, w, n, delta, eta, steps, random_start, adversarial)| {
            let mut rng = Rng::new(seed);
            let arch = Architecture::reference(c, h, w, 3);
            let model = Model::new(arch, Role::Student, &mut rng).unwrap();
            let mut x = Tensor::uniform(&mut rng, &[n, c, h, w], 0.0, 1.0);
            // pin some pixels to the range ends
            for v in x.data_mut().iter_mut() {
                match rng.below(8) {
                    0 => *v = 0.0,
                    1 => *v = 1.0,
                    _ => {}
                }
            }
            let ns = 1 + rng.below(4);
            let zs = model.forward_features(&Tensor::uniform(&mut rng, &[ns, c, h, w], 0.0, 1.0)).unwrap();
            let trans = if adversarial {
                TransferLoss::Adversarial {
                    disc: Model::new(Architecture::discriminator(model.feature_dim(), 4), Role::Discriminator, &mut rng)
                        .unwrap(),
                    reversal_weight: 1.0,
                }
            } else {
                TransferLoss::default()
            };
            let cfg = DdgConfig {
                delta,
                eta,
                steps,
                random_start,
            };
            let b = ddg::generate(&model, &trans, &x, &zs, &cfg, &mut rng).unwrap();
            let mut excess = f64::NEG_INFINITY;
            for (&g, &o) in b.generated.data().iter().zip(x.data()) {
                prop_assert!((0.0..=1.0).contains(&g), "pixel {g} outside [0,1]");
                excess = excess.max((g - o).abs() - delta);
            }
            prop_assert!(excess <= C3_SLACK, "moved {excess} beyond delta {delta}");
            worst_excess.set(worst_excess.get().max(excess));
            cases.set(cases.get() + 1);
            Ok(())
        },
    );

    let mut constant_ok = 0;
    for case in 0..C3_CONSTANT_CASES as u64 {
        let mut rng = Rng::new(9000 + case);
        let mut model = Model::new(Architecture::reference(3, 6, 6, 3), Role::Student, &mut rng).unwrap();
        for p in model.params_mut() {
            if p.rank() >= 2 {
                *p = Tensor::zeros(p.shape());
            } else {
                *p = Tensor::gaussian(&mut rng, p.shape(), 0.0, 1.0).unwrap();
            }
        }
        let n = 1 + rng.below(4);
        let x = Tensor::uniform(&mut rng, &[n, 3, 6, 6], 0.0, 1.0);
        let zs = Tensor::gaussian(&mut rng, &[3, model.feature_dim()], 0.0, 1.0).unwrap();
        let cfg = DdgConfig {
            delta: rng.uniform_range(0.01, 0.5),
            eta: rng.uniform_range(0.01, 1.5),
            steps: 1 + rng.below(4),
            random_start: false,
        };
        let b = ddg::generate(&model, &TransferLoss::default(), &x, &zs, &cfg, &mut rng).unwrap();
        constant_ok += usize::from(b.generated == b.originals);
    }
    let (worst_excess, cases) = (worst_excess.get(), cases.get());
    let pass = result.is_ok() && cases == C3_CASES && constant_ok == C3_CONSTANT_CASES;
    outcome(
        pass,
        format!(
            "{cases}/{C3_CASES} random cases inside ball and [0,1] (max |x'-x| - delta = {worst_excess:.1e}, slack {C3_SLACK:e}){}; constant extractor unchanged {constant_ok}/{C3_CONSTANT_CASES}",
            match &result {
                Ok(()) => String::new(),
                Err(e) => format!("; counterexample: {e}"),
            }
        ),
    )
}

// ---------------------------------------------------------------- desk

fn desk_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct SeedRun {
    cfg: ExperimentConfig,
    pair: DomainPair,
    ddg_student: Model,
    /// reference, teacher, student (ddg), oracle, random_aug
    grids: Vec<ErrorGrid>,
    teacher_frozen: bool,
    label_reads: usize,
}

struct Desk {
    runs: Vec<SeedRun>,
    elapsed: Duration,
}

impl SeedRun {
    fn mce(&self, i: usize) -> f64 {
        metrics::ce(&self.grids[i], &self.grids[0]).unwrap().mce
    }

    fn heldout_mce(&self, i: usize) -> f64 {
        metrics::ce(&self.grids[i], &self.grids[0])
            .unwrap()
            .mce_excluding(&AugSet::random_aug().kinds)
            .unwrap()
    }

    fn acc(&self, i: usize) -> f64 {
        self.grids[i].clean_accuracy()
    }
}

fn seed_run(base: &ExperimentConfig, seed: u64) -> SeedRun {
    let mut cfg = base.clone();
    cfg.train.seed = seed;
    cfg.train = cfg.train.with_mode(StudentMode::Ddg);
    let pair = experiment::load_pair(&cfg).unwrap();
    pair.target.reset_label_reads();
    let (reference, teacher) = experiment::train_base(&pair, &cfg.train, cfg.teacher_init).unwrap();
    let snapshot: Vec<Vec<f64>> = teacher.model.params().iter().map(|p| p.data().to_vec()).collect();
    let hash = teacher.model.param_hash();
    let students: Vec<Model> = [StudentMode::Ddg, StudentMode::Oracle, StudentMode::RandomAug]
        .into_iter()
        .map(|m| train::train_student(&pair, &teacher.model, &cfg.train.clone().with_mode(m)).unwrap().model)
        .collect();
    let teacher_frozen = teacher.model.param_hash() == hash
        && teacher.model.params().iter().zip(&snapshot).all(|(p, s)| {
            p.data().iter().zip(s).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    let label_reads = pair.target.label_reads();
    let target = experiment::eval_set(&pair.target, cfg.eval_images).unwrap();
    let grids = experiment::evaluate(
        &[
            ("reference", &reference.model),
            ("teacher", &teacher.model),
            ("student", &students[0]),
            ("oracle", &students[1]),
            ("random_aug", &students[2]),
        ],
        &target,
        seed,
    )
    .unwrap();
    SeedRun {
        cfg,
        pair,
        ddg_student: students.into_iter().next().unwrap(),
        grids,
        teacher_frozen,
        label_reads,
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let base = desk_config();
        let start = Instant::now();
        let runs = C7_SEEDS.iter().map(|&s| seed_run(&base, s)).collect();
        Desk {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

// ---------------------------------------------------------------- c4

fn c4_efficacy() -> Outcome {
    let run = &desk().runs[0];
    let cfg = run.cfg.train.ddg;
    let student = &run.ddg_student;
    let trans = TransferLoss::default();
    let mut rng = Rng::stream(run.cfg.train.seed, Stream::Harness).derive(4);
    let (mut ascended, mut beat, mut edge) = (0, 0, 0.0);
    for b in 0..C4_BATCHES {
        let ti: Vec<usize> = rng.permutation(run.pair.target.len())[..C4_BATCH].to_vec();
        let si: Vec<usize> = rng.permutation(run.pair.source.len())[..C4_BATCH].to_vec();
        let xt = run.pair.target.batch(&ti).unwrap();
        let zs = student.forward_features(&run.pair.source.batch(&si).unwrap()).unwrap();
        let batch = ddg::generate(student, &trans, &xt, &zs, &cfg, &mut train::ddg_rng(99, b, 0)).unwrap();
        ascended += usize::from(batch.trans_loss_after >= batch.trans_loss_before);
        let best_corner = (0..C4_CORNERS)
            .map(|_| ddg::trans_loss_at(student, &trans, &ddg::random_corner(&xt, cfg.delta, &mut rng), &zs).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        beat += usize::from(batch.trans_loss_after >= best_corner);
        edge += ddg::edge_fraction(&batch, &cfg);
    }
    let (fa, fb) = (ascended as f64 / C4_BATCHES as f64, beat as f64 / C4_BATCHES as f64);
    outcome(
        fa >= C4_MIN_ASCENT && fb >= C4_MIN_BEATS_CORNERS,
        format!(
            "{C4_BATCHES} batches of {C4_BATCH}: after >= before on {:.1}% (need {:.0}%), beats best of {C4_CORNERS} random corners on {:.1}% (need {:.0}%), mean edge fraction {:.3}",
            100.0 * fa,
            100.0 * C4_MIN_ASCENT,
            100.0 * fb,
            100.0 * C4_MIN_BEATS_CORNERS,
            edge / C4_BATCHES as f64
        ),
    )
}

// ---------------------------------------------------------------- c5

fn c5_corruptions() -> Outcome {
    let pair = experiment::load_pair(&desk_config()).unwrap();
    let images = Tensor::concat(pair.source.images(), pair.target.images()).unwrap();
    let n = images.shape()[0].min(C5_IMAGES);
    let images = images.select(&(0..n).collect::<Vec<_>>()).unwrap();
    let labels = vec![0; n];
    let corpus = LabeledDataset::new(images, labels, pair.source.class_count(), "corpus").unwrap();
    let rng = Rng::stream(0, Stream::Harness).derive(5);
    let mut out_of_range = 0usize;
    for kind in CorruptionKind::ALL {
        for t in Severity::scored() {
            let x = corrupt::apply_batch(kind, t, corpus.images(), &metrics::cell_rng(&rng, kind, t)).unwrap();
            out_of_range += x.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        }
    }
    let report = harness::check_assumption1(&corpus, &rng.derive(1)).unwrap();
    let thresholds = A1_MIN_RHO == 0.9 && A1_MAX_SHIFT == 0.30 && A1_MIN_MONOTONE == 13 && A1_MIN_CONTAINED == 12;
    let failing: Vec<String> = report
        .kinds
        .iter()
        .filter(|k| !(k.monotone && k.contained))
        .map(|k| format!("{}(rho {:.2}, t5 {:.3})", k.kind.name(), k.rho, k.values[4]))
        .collect();
    outcome(
        n == C5_IMAGES && out_of_range == 0 && report.monotone_count >= 13 && report.contained_count >= 12 && thresholds,
        format!(
            "{n} images x 75 cells, {out_of_range} pixels outside [0,1]; rho >= 0.9 on {}/15 (need 13), t5 shift <= 0.30 on {}/15 (need 12){}",
            report.monotone_count,
            report.contained_count,
            if failing.is_empty() { String::new() } else { format!("; short: {}", failing.join(" ")) }
        ),
    )
}

// ---------------------------------------------------------------- c6

fn random_grid(rng: &mut Rng, name: &str) -> ErrorGrid {
    let mut e = [[0.0; 5]; 15];
    for row in e.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.uniform_range(0.01, 1.0);
        }
    }
    ErrorGrid::new(name, e, rng.uniform()).unwrap()
}

fn c6_ce() -> Outcome {
    let mut rng = Rng::new(6006);
    let mut self_ones = true;
    let mut half_err = 0.0f64;
    let mut mean_err = 0.0f64;
    let mut excluded_ok = true;
    for case in 0..100 {
        let r = random_grid(&mut rng, "reference");
        let rep = metrics::ce(&r, &r).unwrap();
        self_ones &= rep.per_kind.iter().all(|(_, c)| *c == Some(1.0)) && rep.mce == 1.0;

        let mut h = r.clone();
        h.errors.iter_mut().flatten().for_each(|v| *v /= 2.0);
        let rep = metrics::ce(&h, &r).unwrap();
        half_err = half_err.max((rep.mce - 0.5).abs());
        for (_, c) in &rep.per_kind {
            half_err = half_err.max((c.unwrap() - 0.5).abs());
        }

        let m = random_grid(&mut rng, "model");
        let mut reference = random_grid(&mut rng, "reference");
        let dropped: Vec<usize> = (0..15).filter(|k| (k + case) % 7 == 0).collect();
        for &k in &dropped {
            reference.errors[k] = [0.0; 5];
        }
        let rep = metrics::ce(&m, &reference).unwrap();
        let mut kept = Vec::new();
        for k in 0..15 {
            let den: f64 = reference.errors[k].iter().sum();
            if den > 0.0 {
                kept.push(m.errors[k].iter().sum::<f64>() / den);
            }
        }
        let expect = kept.iter().sum::<f64>() / kept.len() as f64;
        mean_err = mean_err.max((rep.mce - expect).abs());
        excluded_ok &= rep.excluded.len() == dropped.len()
            && dropped.iter().all(|&k| rep.per_kind[k].1.is_none())
            && metrics::metrics_csv(std::slice::from_ref(&rep)).matches(",excluded").count() == dropped.len();
    }
    let all_zero = ErrorGrid::new("reference", [[0.0; 5]; 15], 0.0).unwrap();
    let rejects_empty = metrics::ce(&all_zero, &all_zero).is_err();
    outcome(
        self_ones && half_err <= C6_TOL && mean_err <= C6_TOL && excluded_ok && rejects_empty,
        format!(
            "ce(g,g)=1 everywhere: {self_ones}; half-error grid max |CE-0.5| {half_err:.1e}; mCE vs mean of per-kind CE {mean_err:.1e} (tol {C6_TOL:e}); zero-reference kinds excluded: {excluded_ok}; all-excluded rejected: {rejects_empty}"
        ),
    )
}

// ---------------------------------------------------------------- c7

fn c7_desk() -> Outcome {
    let d = desk();
    let runs = &d.runs;
    let (ref_i, tea, stu, ora, aug) = (0, 1, 2, 3, 4);
    let a = runs.iter().all(|r| r.acc(tea) >= r.acc(ref_i) + C7_DA_GAIN);
    let b = runs.iter().all(|r| r.mce(stu) < r.mce(tea));
    let c = runs.iter().all(|r| r.acc(stu) >= r.acc(tea) - C7_CLEAN_SLACK);
    let mean = |i: usize| runs.iter().map(|r| r.mce(i)).sum::<f64>() / runs.len() as f64;
    let dd = mean(ora) <= mean(stu) && mean(stu) <= mean(tea);
    let aug_losses = runs.iter().filter(|r| r.heldout_mce(aug) > r.heldout_mce(stu)).count();
    let e = aug_losses >= C7_MIN_AUG_LOSSES;
    let fast = d.elapsed < C7_BUDGET;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: acc ref/tea/ddg {:.3}/{:.3}/{:.3}, mCE tea/ddg/oracle/aug {:.3}/{:.3}/{:.3}/{:.3}, held-out ddg/aug {:.3}/{:.3}",
                r.cfg.train.seed,
                r.acc(ref_i),
                r.acc(tea),
                r.acc(stu),
                r.mce(tea),
                r.mce(stu),
                r.mce(ora),
                r.mce(aug),
                r.heldout_mce(stu),
                r.heldout_mce(aug)
            )
        })
        .collect();
    let flag = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        a && b && c && dd && e && fast,
        format!(
            "(a) DA gain >= {:.0} pts {}; (b) ddg < teacher mCE {}; (c) ddg clean >= teacher - {:.0} pts {}; (d) mean mCE oracle {:.3} <= ddg {:.3} <= teacher {:.3} {}; (e) random_aug worse on held-out kinds {aug_losses}/3 {}; {:.1} min of {} {}\n    {}",
            100.0 * C7_DA_GAIN,
            flag(a),
            flag(b),
            100.0 * C7_CLEAN_SLACK,
            flag(c),
            mean(ora),
            mean(stu),
            mean(tea),
            flag(dd),
            flag(e),
            d.elapsed.as_secs_f64() / 60.0,
            C7_BUDGET.as_secs() / 60,
            flag(fast),
            per_seed.join("\n    ")
        ),
    )
}

// ---------------------------------------------------------------- c8

fn c8_ablation() -> Outcome {
    let run = &desk().runs[0];
    let delta = 60.0 / 255.0;
    let point = |eta: f64| DdgConfig {
        delta,
        eta,
        steps: 2,
        random_start: false,
    };
    let rows = harness::ablation_sweep(&run.pair, &run.cfg, &[point(6.0 / 255.0), point(edge_step(delta))]).unwrap();
    let csv = harness::ablation_csv(&rows);
    let consistent = (rows[1].mce - run.mce(2)).abs() < 1e-12 || run.cfg.train.ddg != point(edge_step(delta));
    outcome(
        rows[1].mce < rows[0].mce && csv.lines().count() == 3 && consistent,
        format!(
            "delta=60/255 n=2: mCE(eta>2delta) {:.4} < mCE(eta=6/255) {:.4}; clean acc {:.3} vs {:.3}; matches desk run: {consistent}",
            rows[1].mce, rows[0].mce, rows[1].clean_acc, rows[0].clean_acc
        ),
    )
}

// ---------------------------------------------------------------- c9

fn c9_contracts() -> Outcome {
    let d = desk();
    let frozen = d.runs.iter().all(|r| r.teacher_frozen);
    let reads: usize = d.runs.iter().map(|r| r.label_reads).sum();
    let run = &d.runs[0];
    let dir = tempfile::tempdir().unwrap();
    let record = experiment::run_experiment(&run.cfg, Some(dir.path())).unwrap();
    let written = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let reports = [
        metrics::ce(&run.grids[1], &run.grids[0]).unwrap(),
        metrics::ce(&run.grids[2], &run.grids[0]).unwrap(),
    ];
    let identical = written == metrics::metrics_csv(&reports);
    outcome(
        frozen && reads == 0 && record.training_label_reads == 0 && identical,
        format!(
            "teacher bitwise unchanged across 3 students x {} seeds: {frozen}; target label reads during training: {reads} + {}; metrics.csv identical across same-seed runs: {identical}",
            d.runs.len(),
            record.training_label_reads
        ),
    )
}
