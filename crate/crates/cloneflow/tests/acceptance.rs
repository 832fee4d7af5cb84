//! Acceptance gate for the crate: detection quality on the builtin corpus,
//! cascade shape, pruning equivalence, search-space combinatorics, metric
//! and test-statistic oracles, flow numerics, pooling algebra, and byte
//! determinism of full command-line runs.
//!
//! Each test prints one `acceptance <name>: PASS|FAIL` verdict line, visible
//! under `cargo test --test acceptance -- --nocapture`, and asserts the same
//! condition so failures stop the build. Numeric bounds live in the
//! constants below rather than inline, so loosening any of them is a
//! reviewable one-line change.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use cloneflow::corpus::{self, GroundTruth};
use cloneflow::flow::check::gradient_check;
use cloneflow::flow::{fit_matrix, Flow, FlowConfig, FlowModel};
use cloneflow::pipeline::{
    pool, run_detection, static_filter, CloneReport, DetectionConfig, Evaluation, Pooling,
    StageReached,
};
use cloneflow::seed;
use cloneflow::space::{build_candidates, build_links, candidate_count, total_link_space};
use cloneflow::stats::{glrt_decision, ks_two_sample, ConfusionCounts, Metrics};
use cloneflow::trace::{AtomicElement, DataType, ElementRole, ExecutableSchema, TraceDataset};

/// Trigger events generated per executable variant for the end-to-end runs.
const EVENTS: usize = 300;
/// Corpus seeds for the end-to-end runs. Flow training is stochastic across
/// seeds, so the quality bar must hold on at least `MIN_PASSING_SEEDS`.
const SEEDS: [u64; 3] = [1, 2, 3];
const MIN_PASSING_SEEDS: usize = 2;
/// Quality floor for one end-to-end run: no false positives and MCC at
/// least this high against ground truth.
const MCC_FLOOR: f64 = 0.90;
/// Wall-clock ceiling for one full generate-train-detect pass.
const TIME_BUDGET: Duration = Duration::from_secs(300);

/// Reference metric values are published to three decimals, so reproduction
/// is checked to within one unit in the third decimal place.
const METRICS_TOL: f64 = 1e-3;

/// Forward-then-inverse round-trip error ceiling over a fitted flow.
const INVERT_TOL: f64 = 1e-6;
/// Agreement between analytic gradients and central finite differences.
const GRAD_TOL: f64 = 1e-4;
/// Mean NLL a flow fitted on 2-D standard normal draws must reach: the
/// distribution's differential entropy, log(2*pi*e) = 2.8379 to five
/// significant digits.
const NLL_TARGET: f64 = 2.8379;
const NLL_TOL: f64 = 0.1;
/// A freshly initialized model is the identity map, so its log-density at
/// the 2-D origin must equal -log(2*pi) almost exactly.
const ORIGIN_TOL: f64 = 1e-9;

fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {name}: {tag} - {detail}");
    assert!(pass, "acceptance {name} failed: {detail}");
}

struct Fixture {
    datasets: Vec<TraceDataset>,
    models: Vec<FlowModel>,
    truth: GroundTruth,
    /// Time spent generating traces and training models.
    setup: Duration,
}

/// Generates the corpus and trains one model per variant, exactly as the
/// command-line front end wires it: one model per dataset, each trained
/// with a seed derived from the run seed and the executable id. Fixtures
/// are cached so tests sharing a seed train once.
fn fixture(seed_value: u64) -> &'static Fixture {
    static SLOTS: [OnceLock<Fixture>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let slot = SLOTS.get(seed_value as usize - 1).expect("fixture seeds are 1, 2, or 3");
    slot.get_or_init(|| {
        let start = Instant::now();
        let spec = corpus::builtin();
        let datasets =
            corpus::generate_traces(&spec, EVENTS, seed_value).expect("corpus generates");
        let config = FlowConfig::default();
        let models = datasets
            .iter()
            .map(|dataset| {
                let model_seed = seed::derive(seed_value, &["train", &dataset.schema.id]);
                FlowModel::fit(dataset, &config, model_seed).expect("model fits")
            })
            .collect();
        Fixture { truth: corpus::ground_truth(&spec), datasets, models, setup: start.elapsed() }
    })
}

fn detect(seed_value: u64, evaluation: Evaluation) -> CloneReport {
    let fx = fixture(seed_value);
    let config = DetectionConfig { evaluation, seed: seed_value, ..DetectionConfig::default() };
    run_detection(&fx.datasets, &fx.models, &config, Some(&fx.truth)).expect("detection runs")
}

#[test]
fn end_to_end_corpus_detection() {
    let defaults = DetectionConfig::default();
    assert_eq!(defaults.evaluation, Evaluation::Skip);
    assert_eq!(defaults.d_fpr, 0.100);
    assert_eq!(defaults.m_fpr, 0.001);
    assert_eq!(defaults.pooling, Pooling::Soft);
    assert_eq!(defaults.particles, 50);

    let spec = corpus::builtin();
    assert!(spec.classes.len() >= 3, "corpus must span at least 3 classes");
    assert!(spec.variant_count() >= 8, "corpus must span at least 8 variants");

    let mut passing = 0;
    let mut lines = Vec::new();
    for &seed_value in &SEEDS {
        let start = Instant::now();
        let report = detect(seed_value, Evaluation::Skip);
        let elapsed = fixture(seed_value).setup + start.elapsed();
        assert!(report.candidates.len() >= 28, "corpus must span at least 28 candidate pairs");

        let summary = report.truth.expect("ground truth was supplied");
        let fp = summary.counts.false_positives;
        let mcc = summary.metrics.mcc;
        let ok = fp == 0 && mcc >= MCC_FLOOR && elapsed <= TIME_BUDGET;
        if ok {
            passing += 1;
        }
        lines.push(format!(
            "seed {seed_value}: fp {fp}, mcc {mcc:.3}, {:.0}s",
            elapsed.as_secs_f64()
        ));
    }
    let detail = format!("{} ({passing} of {} seeds pass)", lines.join("; "), SEEDS.len());
    verdict("end_to_end_corpus_detection", passing >= MIN_PASSING_SEEDS, &detail);
}

#[test]
fn survivor_counts_shrink_through_the_cascade() {
    let report = detect(1, Evaluation::Exhaustive);
    let s = report.survivors;

    let candidates_monotone = s.candidates_total >= s.candidates_after_static
        && s.candidates_after_static >= s.candidates_after_dynamic
        && s.candidates_after_dynamic >= s.candidates_accepted;
    let links_monotone = s.links_total >= s.links_after_static
        && s.links_after_static >= s.links_after_dynamic
        && s.links_after_dynamic >= s.links_evaluated
        && s.links_evaluated >= s.links_accepted;

    // The static stage must keep exactly the links whose input and output
    // data types match, recomputed here from the schemas alone.
    let fx = fixture(1);
    let schema_of: BTreeMap<&str, &ExecutableSchema> =
        fx.datasets.iter().map(|d| (d.schema.id.as_str(), &d.schema)).collect();
    let mut static_exact = true;
    for record in &report.candidates {
        let sa = schema_of[record.pair.a.as_str()];
        let sb = schema_of[record.pair.b.as_str()];
        let links = build_links(sa, sb);
        let well_typed = links.iter().filter(|l| static_filter(l, sa, sb)).count();
        static_exact &= record.links_total == links.len();
        static_exact &= record.links_after_static == well_typed;
    }

    let rejected_at = |stage: StageReached| {
        report.candidates.iter().filter(|r| r.stage_reached == stage && !r.decision).count()
    };
    let (at_static, at_dynamic, at_model) = (
        rejected_at(StageReached::Static),
        rejected_at(StageReached::Dynamic),
        rejected_at(StageReached::Model),
    );

    let pass = candidates_monotone
        && links_monotone
        && static_exact
        && at_static >= 1
        && at_dynamic >= 1
        && at_model >= 1;
    let detail = format!(
        "candidates {} >= {} >= {} >= {}, links {} >= {} >= {} >= {} >= {}, \
         rejected static/dynamic/model {at_static}/{at_dynamic}/{at_model}",
        s.candidates_total,
        s.candidates_after_static,
        s.candidates_after_dynamic,
        s.candidates_accepted,
        s.links_total,
        s.links_after_static,
        s.links_after_dynamic,
        s.links_evaluated,
        s.links_accepted,
    );
    verdict("survivor_counts_shrink_through_the_cascade", pass, &detail);
}

#[test]
fn skip_matches_exhaustive_partitions() {
    let skip = detect(1, Evaluation::Skip);
    let exhaustive = detect(1, Evaluation::Exhaustive);

    let partitions_equal = skip.clone_classes == exhaustive.clone_classes;
    let has_large_class = fixture(1).truth.classes.values().any(|ids| ids.len() >= 3);
    let skipped = skip.survivors.candidates_skipped;

    let pass = partitions_equal && has_large_class && skipped >= 1;
    let detail = format!(
        "{} classes in both runs, {} candidates skipped, {} link evaluations saved",
        skip.clone_classes.len(),
        skipped,
        skip.survivors.link_evaluations_skipped,
    );
    verdict("skip_matches_exhaustive_partitions", pass, &detail);
}

fn random_schema(index: usize, rng: &mut impl Rng) -> ExecutableSchema {
    let roles = [
        ElementRole::ParameterIn,
        ElementRole::PropertyRead,
        ElementRole::InvocationResultIn,
        ElementRole::ResultOut,
        ElementRole::PropertyWrite,
        ElementRole::ParameterOut,
    ];
    let dtypes = [DataType::Integer, DataType::Float, DataType::Text];
    let elements = (0..rng.gen_range(0..=5))
        .map(|e| AtomicElement {
            name: format!("e{e}"),
            role: roles[rng.gen_range(0..roles.len())],
            dtype: dtypes[rng.gen_range(0..dtypes.len())],
        })
        .collect();
    let id = format!("x{index:02}");
    ExecutableSchema { id: id.clone(), display_name: id, owner_type: None, elements }
}

#[test]
fn search_space_sizes_are_exact() {
    let mut pass = candidate_count(108).unwrap() == 5778;

    // The closed form against a literal pair enumeration, for every small n.
    for n in 2..=50u64 {
        let mut brute = 0u64;
        for i in 0..n {
            brute += n - i - 1;
        }
        let ids: Vec<String> = (0..n).map(|i| format!("x{i:02}")).collect();
        pass &= candidate_count(n).unwrap() == brute;
        pass &= build_candidates(&ids).unwrap().len() as u64 == brute;
    }

    // Link spaces of random schemas against per-pair products.
    let mut rng = seed::rng(9, &["acceptance-schemas"]);
    let mut corpora = 0;
    for _ in 0..30 {
        let n = rng.gen_range(2..=8);
        let schemas: Vec<ExecutableSchema> = (0..n).map(|i| random_schema(i, &mut rng)).collect();
        let mut expected_total = 0u64;
        for i in 0..n {
            for j in i + 1..n {
                let expected = (schemas[i].io_pairs().len() * schemas[j].io_pairs().len()) as u64;
                pass &= build_links(&schemas[i], &schemas[j]).len() as u64 == expected;
                expected_total += expected;
            }
        }
        pass &= total_link_space(&schemas).unwrap() == expected_total;
        corpora += 1;
    }

    let detail = format!("pairs(108) = 5778, n <= 50 enumerated, {corpora} random corpora exact");
    verdict("search_space_sizes_are_exact", pass, &detail);
}

#[test]
fn metrics_reproduce_reference_confusions() {
    let rows = [
        (
            ConfusionCounts {
                true_positives: 437,
                false_positives: 0,
                true_negatives: 5320,
                false_negatives: 21,
            },
            [1.000, 0.954, 0.977, 0.975],
        ),
        (
            ConfusionCounts {
                true_positives: 293,
                false_positives: 0,
                true_negatives: 5320,
                false_negatives: 165,
            },
            [1.000, 0.639, 0.780, 0.787],
        ),
    ];

    let mut pass = true;
    let mut worst = 0.0f64;
    for (counts, expected) in rows {
        let m = Metrics::from_counts(counts);
        for (got, want) in [m.precision, m.recall, m.f1, m.mcc].iter().zip(expected) {
            worst = worst.max((got - want).abs());
            pass &= (got - want).abs() <= METRICS_TOL;
        }
    }
    let detail = format!("2 reference rows, worst deviation {worst:.1e} <= {METRICS_TOL:.0e}");
    verdict("metrics_reproduce_reference_confusions", pass, &detail);
}

fn normal_matrix(rows: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

#[test]
fn flow_numerics_hold() {
    // A fitted flow on 5000 draws of a 2-D standard normal must recover the
    // distribution's entropy, and invert its own forward map pointwise.
    let mut rng = seed::rng(3, &["acceptance-normal"]);
    let matrix = normal_matrix(5000, 2, 1.0, &mut rng);
    let (flow, log) = fit_matrix(&matrix, &FlowConfig::default(), 11).expect("flow fits");
    let nll_gap = (log.final_nll - NLL_TARGET).abs();

    let mut invert_err = 0.0f64;
    for _ in 0..1000 {
        let x = vec![rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let (z, _) = flow.forward(&x);
        let back = flow.inverse(&z);
        for (xi, bi) in x.iter().zip(&back) {
            invert_err = invert_err.max((xi - bi).abs());
        }
    }

    // Analytic gradients against central finite differences on a spread of
    // small architectures and data shapes.
    let mut grad_err = 0.0f64;
    let mut configs = 0;
    for k in 0..20u64 {
        let dim = 2 + (k % 2) as usize;
        let config = FlowConfig {
            layers: 2 + (k % 3) as usize,
            hidden_width: 4,
            epochs: 12,
            batch_size: 16,
            ..FlowConfig::default()
        };
        let rows = 30 + (k % 4) as usize * 10;
        let scale = rng.gen_range(0.5..2.0);
        let data = normal_matrix(rows, dim, scale, &mut rng);
        let report = gradient_check(&data, &config, 1000 + k).expect("gradient check runs");
        grad_err = grad_err.max(report.max_rel_err);
        configs += 1;
    }

    // Freshly initialized flows are the identity map, so the log-density at
    // the origin is the 2-D standard normal's: -log(2*pi).
    let mut origin_gap = 0.0f64;
    for config in
        [FlowConfig::default(), FlowConfig { layers: 6, hidden_width: 8, ..FlowConfig::default() }]
    {
        let fresh = Flow::new(2, &config, 77).expect("flow initializes");
        let density = fresh.log_likelihood(&[0.0, 0.0]);
        origin_gap = origin_gap.max((density + (2.0 * std::f64::consts::PI).ln()).abs());
    }

    let pass = nll_gap <= NLL_TOL
        && invert_err <= INVERT_TOL
        && grad_err <= GRAD_TOL
        && origin_gap <= ORIGIN_TOL;
    let detail = format!(
        "nll {:.4} (target {NLL_TARGET} +- {NLL_TOL}), invert {invert_err:.1e} <= {INVERT_TOL:.0e}, \
         grad {grad_err:.1e} <= {GRAD_TOL:.0e} over {configs} configs, origin {origin_gap:.1e} <= {ORIGIN_TOL:.0e}",
        log.final_nll,
    );
    verdict("flow_numerics_hold", pass, &detail);
}

/// The supremum ECDF distance by direct evaluation at every pooled point.
fn brute_force_ks(a: &[f64], b: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in a.iter().chain(b) {
        let fa = a.iter().filter(|&&v| v <= x).count() as f64 / a.len() as f64;
        let fb = b.iter().filter(|&&v| v <= x).count() as f64 / b.len() as f64;
        best = best.max((fa - fb).abs());
    }
    best
}

#[test]
fn ks_statistic_matches_brute_force() {
    let mut rng = seed::rng(5, &["acceptance-ks"]);
    let mut pass = true;
    for case in 0..100 {
        let na = rng.gen_range(1..=120);
        let nb = rng.gen_range(1..=120);
        // Alternate between tie-heavy integer grids and continuous draws.
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            if case % 2 == 0 {
                rng.gen_range(0..=24) as f64 / 4.0
            } else {
                rng.gen::<f64>()
            }
        };
        let a: Vec<f64> = (0..na).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..nb).map(|_| draw(&mut rng)).collect();
        let got = ks_two_sample(&a, &b).unwrap().statistic;
        pass &= got == brute_force_ks(&a, &b);
    }

    let same: Vec<f64> = (0..60).map(|_| rng.gen::<f64>()).collect();
    let identical = ks_two_sample(&same, &same).unwrap().statistic;
    let shifted: Vec<f64> = same.iter().map(|v| v + 10.0).collect();
    let disjoint = ks_two_sample(&same, &shifted).unwrap().statistic;
    pass &= identical == 0.0 && disjoint == 1.0;

    let detail =
        format!("100 random pairs match exactly, identical = {identical}, disjoint = {disjoint}");
    verdict("ks_statistic_matches_brute_force", pass, &detail);
}

#[test]
fn pooling_respects_decision_algebra() {
    // A soft decision can accept on one strong direction where a hard
    // decision cannot; the reverse never happens.
    assert!(pool(-6.0, 0.0, Pooling::Soft, 0.01));
    assert!(!pool(-6.0, 0.0, Pooling::Hard, 0.01));

    let mut rng = seed::rng(6, &["acceptance-pool"]);
    let mut pass = true;
    let trials = 10_000;
    for _ in 0..trials {
        let lambda_a = rng.gen_range(-12.0..4.0);
        let lambda_b = rng.gen_range(-12.0..4.0);
        let c = rng.gen_range(-9.0..=0.0f64).exp();

        let hard = pool(lambda_a, lambda_b, Pooling::Hard, c);
        let soft = pool(lambda_a, lambda_b, Pooling::Soft, c);
        pass &= !hard || soft;

        let delta = rng.gen_range(0.0..5.0);
        pass &= !glrt_decision(lambda_a, c) || glrt_decision(lambda_a + delta, c);
    }
    let detail = format!("{trials} random triples: hard implies soft, decision monotone");
    verdict("pooling_respects_decision_algebra", pass, &detail);
}

fn cli(dir: &Path, args: &[&str]) {
    let output = Command::new(env!("CARGO_BIN_EXE_cloneflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "cloneflow {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

/// One full command-line pass with fixed seeds and relative paths, so the
/// artifacts embed no run-specific strings.
fn full_run(dir: &Path) {
    cli(dir, &["generate", "--out", "traces", "--invocations", "150", "--seed", "7"]);
    cli(
        dir,
        &["train", "--traces", "traces", "--models", "models", "--epochs", "60", "--seed", "7"],
    );
    cli(
        dir,
        &[
            "detect",
            "--models",
            "models",
            "--traces",
            "traces",
            "--truth",
            "traces/ground_truth.json",
            "--out",
            "report.json",
            "--seed",
            "7",
        ],
    );
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .expect("directory listing")
        .map(|e| e.expect("directory entry").path())
        .collect();
    paths.sort();
    paths
}

#[test]
fn identical_seeds_reproduce_artifacts_bytewise() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    full_run(first.path());
    full_run(second.path());

    let mut pass = true;
    let mut compared = 0;
    for sub in ["traces", "models"] {
        let ours = sorted_files(&first.path().join(sub));
        let theirs = sorted_files(&second.path().join(sub));
        pass &= ours.len() == theirs.len();
        for (x, y) in ours.iter().zip(&theirs) {
            pass &= x.file_name() == y.file_name();
            pass &= std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
            compared += 1;
        }
    }

    // Reports match after dropping the one wall-clock field.
    let strip = |dir: &Path| -> serde_json::Value {
        let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value.as_object_mut().expect("report object").remove("timing");
        value
    };
    pass &= strip(first.path()) == strip(second.path());

    let detail = format!("{compared} artifact files byte-identical, reports identical sans timing");
    verdict("identical_seeds_reproduce_artifacts_bytewise", pass, &detail);
}
