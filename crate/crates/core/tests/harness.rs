use crda_core::config::ExperimentConfig;
use crda_core::corrupt::CorruptionKind;
use crda_core::data::{generate_synthetic_pair, DomainPair, SynthSpec};
use crda_core::experiment;
use crda_core::harness::{self, RegimeTag};
use crda_core::nn::{Model, Role};
use crda_core::train::{self, TrainConfig};
use crda_core::{Rng, Stream};

fn small_pair(seed: u64) -> DomainPair {
    let spec = SynthSpec {
        classes: 4,
        per_domain: 64,
        height: 16,
        width: 16,
        ..SynthSpec::default()
    };
    generate_synthetic_pair(&Rng::stream(seed, Stream::DataGen), &spec).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs_reference: 3,
        epochs_teacher: 2,
        epochs_student: 1,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn cosine_schedule_starts_at_lr_and_decays() {
    let cfg = quick();
    assert_eq!(cfg.lr_at(0, 10), cfg.lr);
    let lrs: Vec<f64> = (0..10).map(|e| cfg.lr_at(e, 10)).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    assert!((cfg.lr_at(5, 10) - cfg.lr / 2.0).abs() < 1e-15);
    assert!(lrs[9] > 0.0);
}

#[test]
fn assumption_reports_are_consistent() {
    let pair = small_pair(1);
    let model = Model::new(train::architecture_for(&pair.source), Role::Teacher, &mut Rng::new(3)).unwrap();
    let rng = Rng::stream(1, Stream::Harness);
    let a1 = harness::check_assumption1(&pair.target, &rng).unwrap();
    let a2 = harness::check_assumption2(&model, &pair.target, &rng).unwrap();
    let a3 = harness::check_assumption3(&model, &pair, &rng).unwrap();
    for r in [&a1, &a2, &a3] {
        assert_eq!(r.kinds.len(), 15);
        assert_eq!(r.monotone_count, r.kinds.iter().filter(|k| k.monotone).count());
        for (k, m) in CorruptionKind::ALL.iter().zip(&r.kinds) {
            assert_eq!(*k, m.kind);
            assert!(m.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
    assert!(a1.monotone_count >= harness::A1_MIN_MONOTONE, "{a1:?}");
    // shift is a mean absolute pixel difference, zero for the clean image
    assert!(a1.kinds.iter().all(|k| k.anchor == 0.0));
    let premise = a3.premise_fraction().unwrap();
    assert!((0.0..=1.0).contains(&premise));
    assert!(a2.note.is_some(), "an untrained model should be flagged");

    let csv = harness::assumptions_csv(&[a1, a2, a3]);
    assert_eq!(csv.lines().count(), 1 + 45);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,"));
    assert!(csv.lines().last().unwrap().starts_with("3,"));
}

#[test]
fn regimes_share_initialization_and_clean_distance_is_zero() {
    let pair = small_pair(2);
    let curves =
        harness::order_invariance_study(&pair.source, CorruptionKind::GaussianNoise, &quick(), &Rng::stream(2, Stream::Harness))
            .unwrap();
    assert_eq!(curves.iter().map(|c| c.regime).collect::<Vec<_>>(), RegimeTag::ALL);
    assert!(curves.iter().all(|c| c.initial_hash == curves[0].initial_hash));
    for c in &curves {
        assert_eq!(c.distances[0], 0.0);
        assert!(c.distances[1..].iter().all(|d| *d > 0.0));
        assert!((-1.0..=1.0).contains(&c.rho));
    }
    let csv = harness::order_invariance_csv(&curves);
    assert_eq!(csv.lines().next(), Some("regime,t0,t1,t2,t3,t4,t5,rho"));
    assert!(csv.contains("clean_plus_level5,"));
}

const SMALL: &str = "\
data.source = synthetic
data.classes = 4
data.per_domain = 64
data.height = 16
data.width = 16
train.mode = ddg
train.seed = 5
train.epochs_reference = 2
train.epochs_teacher = 2
train.epochs_student = 1
train.batch_size = 16
eval.images = 24
";

#[test]
fn run_directory_is_complete_and_reproducible() {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = experiment::run_experiment(&cfg, Some(a.path())).unwrap();
    let rb = experiment::run_experiment(&cfg, Some(b.path())).unwrap();
    assert_eq!(ra.training_label_reads, 0);
    assert_eq!(ra.grids.len(), 3);
    assert_eq!(ra.student_report().model, "student");
    for f in ["metrics.csv", "summary.csv", "errors.csv", "losses.csv", "student.ckpt", "teacher.ckpt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(ra.student.model.param_hash(), rb.student.model.param_hash());
    let summary = std::fs::read_to_string(a.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("model,clean_accuracy,mCE"));
    assert!(summary.contains("\nreference,") && summary.contains("\nstudent,"));
}

#[test]
fn ablation_point_matching_the_run_reproduces_its_mce() {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    let record = experiment::run_experiment(&cfg, None).unwrap();
    let pair = experiment::load_pair(&cfg).unwrap();
    let rows = harness::ablation_sweep(&pair, &cfg, &[cfg.train.ddg]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mce, record.student_report().mce);
    assert_eq!(rows[0].clean_acc, record.grids[2].clean_accuracy());
}
