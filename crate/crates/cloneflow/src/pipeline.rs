//! The detection pipeline: a cascade of rejecting filters over candidate
//! pairs.
//!
//! Candidates traverse three stages. The static stage keeps links whose
//! input and output data types match. The dynamic stage keeps links whose
//! encoded input and output samples pass a two-sample distribution test.
//! The model stage cross-evaluates the two trained density models along a
//! link and accepts when the likelihood-ratio decision passes the pooling
//! rule. A candidate is a clone iff at least one link survives all three
//! stages.
//!
//! Positive decisions merge clone classes. Under skip evaluation, a
//! candidate whose executables already share a class is accepted without
//! any stage work (behavioral equality is transitive), and the model stage
//! stops probing links after its first accept. Negative history never skips
//! anything: non-cloneness is not transitive.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroundTruth;
use crate::encoding::{encode_column, encode_column_for_transfer, ColumnEncoder, EncodingError};
use crate::flow::{CondOpt, FlowError, FlowModel};
use crate::seed;
use crate::space::{build_candidates, build_links, CandidatePair, CloneClasses, Link, SpaceError};
use crate::stats::{glrt_decision, ks_two_sample, ConfusionCounts, Metrics, StatsError};
use crate::trace::{ExecutableSchema, TraceDataset};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
    #[error("no trace dataset for executable '{0}'")]
    MissingTrace(String),
    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Whether established clone classes prune the candidate walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evaluation {
    Exhaustive,
    Skip,
}

/// How the two directional ratios of a link combine into one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Hard,
    Soft,
}

/// Tunable knobs of one detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub evaluation: Evaluation,
    /// False-positive rate of the dynamic stage (test alpha).
    pub d_fpr: f64,
    /// False-positive rate of the model stage (ratio-test critical value).
    pub m_fpr: f64,
    pub pooling: Pooling,
    /// Reference sample size drawn per link direction.
    pub particles: usize,
    pub seed: u64,
    /// Conditional-inference settings passed through to the models.
    pub cond: CondOpt,
}

impl Default for DetectionConfig {
    fn default() -> DetectionConfig {
        DetectionConfig {
            evaluation: Evaluation::Skip,
            d_fpr: 0.100,
            m_fpr: 0.001,
            pooling: Pooling::Soft,
            particles: 50,
            seed: 0,
            cond: CondOpt::default(),
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.d_fpr > 0.0 && self.d_fpr < 1.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "d_fpr must be in (0, 1), got {}",
                self.d_fpr
            )));
        }
        if !(self.m_fpr > 0.0 && self.m_fpr < 1.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "m_fpr must be in (0, 1), got {}",
                self.m_fpr
            )));
        }
        if self.particles < 2 {
            return Err(PipelineError::InvalidConfig(format!(
                "particles must be at least 2, got {}",
                self.particles
            )));
        }
        Ok(())
    }
}

/// The last stage a candidate went through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageReached {
    Static,
    Dynamic,
    Model,
    Skipped,
}

/// Model-stage outcome for one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub link: Link,
    /// Ratio with side `a` as the reference model.
    pub lambda_a: f64,
    /// Ratio with side `b` as the reference model.
    pub lambda_b: f64,
    pub accepted: bool,
}

/// Everything the pipeline learned about one candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub pair: CandidatePair,
    pub stage_reached: StageReached,
    pub decision: bool,
    pub links_total: usize,
    pub links_after_static: usize,
    pub links_after_dynamic: usize,
    /// Links actually probed by the model stage.
    pub links_evaluated: usize,
    pub link_results: Vec<LinkResult>,
    pub skip_reason: Option<String>,
}

/// Survivor counts across the cascade, for candidates and for links.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivorCounts {
    pub candidates_total: usize,
    /// Accepted transitively, without stage work.
    pub candidates_skipped: usize,
    pub candidates_evaluated: usize,
    pub candidates_after_static: usize,
    pub candidates_after_dynamic: usize,
    pub candidates_accepted: usize,
    pub links_total: usize,
    pub links_after_static: usize,
    pub links_after_dynamic: usize,
    pub links_evaluated: usize,
    pub links_accepted: usize,
    /// Link evaluations avoided by greedy early exit and candidate skips.
    pub link_evaluations_skipped: usize,
}

/// Wall-clock cost per stage. Stripped before determinism comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub static_ms: f64,
    pub dynamic_ms: f64,
    pub model_ms: f64,
    pub total_ms: f64,
}

/// Confusion counts and summary metrics against supplied ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

/// Full outcome of one detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneReport {
    pub config: DetectionConfig,
    pub candidates: Vec<CandidateRecord>,
    /// Clone classes of size two or more, each sorted, sorted by head id.
    pub clone_classes: Vec<Vec<String>>,
    pub survivors: SurvivorCounts,
    pub timing: StageTiming,
    pub truth: Option<TruthSummary>,
}

/// Type compatibility of one link: both ends must match exactly.
pub fn static_filter(
    link: &Link,
    schema_a: &ExecutableSchema,
    schema_b: &ExecutableSchema,
) -> bool {
    let in_a = schema_a.elements[link.pair_a.input].dtype;
    let in_b = schema_b.elements[link.pair_b.input].dtype;
    let out_a = schema_a.elements[link.pair_a.output].dtype;
    let out_b = schema_b.elements[link.pair_b.output].dtype;
    in_a == in_b && out_a == out_b
}

/// Keeps the type-compatible links of a candidate.
pub fn static_stage(
    links: Vec<Link>,
    schema_a: &ExecutableSchema,
    schema_b: &ExecutableSchema,
) -> Vec<Link> {
    links.into_iter().filter(|link| static_filter(link, schema_a, schema_b)).collect()
}

/// Keeps links whose observed input and output distributions agree.
///
/// Both sides of a linked column pair are encoded through side `a`'s
/// fitted encoder, so the two samples share one frame: a two-sample test
/// between two differently standardized samples would measure the encoder
/// difference, not the distribution difference, and re-mapping values
/// between frames after the fact rounds the exact ties of wide integer
/// columns apart. Side `b`'s text categories unknown to that encoder land
/// past its vocabulary. Dequantization noise comes from a stream derived
/// from `seed_value` and the data column index alone, so equal raw columns
/// at equal indices encode equally and identical datasets are never
/// rejected. A link survives when the test rejects neither the input
/// columns nor the output columns at `alpha = d_fpr`.
pub fn dynamic_stage(
    links: Vec<Link>,
    data_a: &TraceDataset,
    data_b: &TraceDataset,
    encoders_a: &[ColumnEncoder],
    d_fpr: f64,
    seed_value: u64,
) -> Result<Vec<Link>, PipelineError> {
    let mut own: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut carried: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut column_pair = |col_a: usize,
                           col_b: usize|
     -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
        if let Entry::Vacant(slot) = own.entry(col_a) {
            slot.insert(encode_column(data_a, &encoders_a[col_a], col_a, seed_value)?);
        }
        if let Entry::Vacant(slot) = carried.entry((col_a, col_b)) {
            slot.insert(encode_column_for_transfer(data_b, &encoders_a[col_a], col_b, seed_value)?);
        }
        Ok((own[&col_a].clone(), carried[&(col_a, col_b)].clone()))
    };

    let mut survivors = Vec::new();
    for link in links {
        let (in_a, in_b) = column_pair(link.pair_a.input, link.pair_b.input)?;
        let (out_a, out_b) = column_pair(link.pair_a.output, link.pair_b.output)?;
        let inputs = ks_two_sample(&in_a, &in_b)?;
        let outputs = ks_two_sample(&out_a, &out_b)?;
        if !inputs.rejects_at(d_fpr) && !outputs.rejects_at(d_fpr) {
            survivors.push(link);
        }
    }
    Ok(survivors)
}

/// One direction of the cross-model comparison.
///
/// Draws a reference sample from the null model, carries each particle's
/// linked coordinates into the alternative model's space, asks the
/// alternative model for its best completion under those constraints, and
/// returns the mean difference of per-dimension log-densities. When the
/// constraints already cover every schema-backed dimension of the
/// alternative model there is nothing left to infer and the constraint
/// point is evaluated directly.
fn directional_lambda(
    null_model: &FlowModel,
    alt_model: &FlowModel,
    null_pair: crate::trace::IoPair,
    alt_pair: crate::trace::IoPair,
    particles: usize,
    seed_value: u64,
    opt: &CondOpt,
) -> Result<f64, PipelineError> {
    let reference = null_model.sample(particles, seed::derive(seed_value, &["null"]));
    let mut ll_null = 0.0;
    let mut ll_alt = 0.0;
    for (p, row) in reference.values.iter().enumerate() {
        ll_null += null_model.normalized_log_likelihood(row);

        let v_in = null_model.encoders[null_pair.input]
            .transfer_to(&alt_model.encoders[alt_pair.input], row[null_pair.input])?;
        let v_out = null_model.encoders[null_pair.output]
            .transfer_to(&alt_model.encoders[alt_pair.output], row[null_pair.output])?;
        let mut constraints = BTreeMap::new();
        constraints.insert(alt_pair.input, v_in);
        constraints.insert(alt_pair.output, v_out);

        let alt_row = if constraints.len() == alt_model.real_dims() {
            let mut full = vec![0.0; alt_model.dim()];
            for (&i, &v) in &constraints {
                full[i] = v;
            }
            full
        } else {
            let cond_seed = seed::derive(seed_value, &["cond", &p.to_string()]);
            let mut sample = alt_model.conditional_sample(&constraints, 1, cond_seed, opt)?;
            sample.values.remove(0)
        };
        ll_alt += alt_model.normalized_log_likelihood(&alt_row);
    }
    Ok((ll_alt - ll_null) / particles as f64)
}

/// Cross-evaluates two trained models along one link, in both directions.
///
/// `lambda_a` treats side `a` as the reference distribution and asks how
/// well model `b` explains its behavior; `lambda_b` swaps the roles. Both
/// directions matter: a model whose law is a strict widening of the other
/// scores well in one direction only.
pub fn model_link_ratio(
    model_a: &FlowModel,
    model_b: &FlowModel,
    link: &Link,
    particles: usize,
    seed_value: u64,
    opt: &CondOpt,
) -> Result<(f64, f64), PipelineError> {
    let lambda_a = directional_lambda(
        model_a,
        model_b,
        link.pair_a,
        link.pair_b,
        particles,
        seed::derive(seed_value, &["dir-a"]),
        opt,
    )?;
    let lambda_b = directional_lambda(
        model_b,
        model_a,
        link.pair_b,
        link.pair_a,
        particles,
        seed::derive(seed_value, &["dir-b"]),
        opt,
    )?;
    Ok((lambda_a, lambda_b))
}

/// Combines the two directional ratios into one link decision.
///
/// Hard pooling requires each direction to clear half the critical value
/// (in log space); soft pooling requires the mean to clear the full one.
/// Every pair accepted by hard pooling is accepted by soft pooling.
pub fn pool(lambda_a: f64, lambda_b: f64, pooling: Pooling, c: f64) -> bool {
    match pooling {
        Pooling::Hard => glrt_decision(lambda_a, c.sqrt()) && glrt_decision(lambda_b, c.sqrt()),
        Pooling::Soft => glrt_decision(0.5 * (lambda_a + lambda_b), c),
    }
}

/// Model-stage outcome for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStageOutcome {
    pub decision: bool,
    pub link_results: Vec<LinkResult>,
    pub evaluated: usize,
    /// Links left unevaluated by greedy early exit.
    pub skipped: usize,
}

/// Probes the surviving links in order. Under skip evaluation the walk
/// stops at the first accepted link; exhaustive evaluation probes them all.
/// The decision is existential either way.
pub fn model_stage(
    links: &[Link],
    model_a: &FlowModel,
    model_b: &FlowModel,
    config: &DetectionConfig,
    seed_value: u64,
) -> Result<ModelStageOutcome, PipelineError> {
    let mut link_results = Vec::new();
    let mut decision = false;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (li, link) in links.iter().enumerate() {
        let link_seed = seed::derive(seed_value, &["link", &li.to_string()]);
        let (lambda_a, lambda_b) =
            model_link_ratio(model_a, model_b, link, config.particles, link_seed, &config.cond)?;
        let accepted = pool(lambda_a, lambda_b, config.pooling, config.m_fpr);
        evaluated += 1;
        link_results.push(LinkResult { link: *link, lambda_a, lambda_b, accepted });
        if accepted {
            decision = true;
            if config.evaluation == Evaluation::Skip {
                skipped = links.len() - evaluated;
                break;
            }
        }
    }
    Ok(ModelStageOutcome { decision, link_results, evaluated, skipped })
}

struct Side<'a> {
    dataset: &'a TraceDataset,
    model: &'a FlowModel,
}

/// Runs the full cascade over every candidate pair.
///
/// Candidates are processed in lexicographic id order. Positive decisions
/// merge clone classes as they happen; under skip evaluation a candidate
/// already covered by a class is accepted without stage work. When ground
/// truth is supplied, a candidate counts as a true positive iff its two
/// executables share a ground-truth class.
pub fn run_detection(
    datasets: &[TraceDataset],
    models: &[FlowModel],
    config: &DetectionConfig,
    truth: Option<&GroundTruth>,
) -> Result<CloneReport, PipelineError> {
    config.validate()?;
    let sides = index_sides(datasets, models)?;
    let ids: Vec<String> = sides.keys().cloned().collect();
    let candidates = build_candidates(&ids)?;
    let mut classes = CloneClasses::new(ids.iter().cloned())?;

    let mut records = Vec::with_capacity(candidates.len());
    let mut survivors = SurvivorCounts { candidates_total: candidates.len(), ..Default::default() };
    let mut timing = StageTiming::default();
    let mut confusion = ConfusionCounts::default();
    let started = Instant::now();

    for pair in candidates {
        let a = &sides[&pair.a];
        let b = &sides[&pair.b];
        let links_total = build_links(&a.dataset.schema, &b.dataset.schema).len();
        survivors.links_total += links_total;

        if config.evaluation == Evaluation::Skip && classes.same_class(&pair.a, &pair.b)? {
            survivors.candidates_skipped += 1;
            survivors.candidates_accepted += 1;
            survivors.link_evaluations_skipped += links_total;
            record_truth(&mut confusion, truth, &pair, true);
            records.push(CandidateRecord {
                pair,
                stage_reached: StageReached::Skipped,
                decision: true,
                links_total,
                links_after_static: 0,
                links_after_dynamic: 0,
                links_evaluated: 0,
                link_results: Vec::new(),
                skip_reason: Some("already in the same clone class".to_string()),
            });
            continue;
        }

        survivors.candidates_evaluated += 1;
        let pair_seed = seed::derive(config.seed, &["candidate", &pair.a, &pair.b]);

        let stage_start = Instant::now();
        let links = build_links(&a.dataset.schema, &b.dataset.schema);
        let links_static = static_stage(links, &a.dataset.schema, &b.dataset.schema);
        timing.static_ms += elapsed_ms(stage_start);
        survivors.links_after_static += links_static.len();
        if links_static.is_empty() {
            record_truth(&mut confusion, truth, &pair, false);
            records.push(rejected(pair, StageReached::Static, links_total, 0, 0));
            continue;
        }
        survivors.candidates_after_static += 1;

        let stage_start = Instant::now();
        let links_dynamic = dynamic_stage(
            links_static.clone(),
            a.dataset,
            b.dataset,
            &a.model.encoders,
            config.d_fpr,
            seed::derive(pair_seed, &["dynamic"]),
        )?;
        timing.dynamic_ms += elapsed_ms(stage_start);
        survivors.links_after_dynamic += links_dynamic.len();
        if links_dynamic.is_empty() {
            record_truth(&mut confusion, truth, &pair, false);
            records.push(rejected(pair, StageReached::Dynamic, links_total, links_static.len(), 0));
            continue;
        }
        survivors.candidates_after_dynamic += 1;

        let stage_start = Instant::now();
        let outcome = model_stage(
            &links_dynamic,
            a.model,
            b.model,
            config,
            seed::derive(pair_seed, &["model"]),
        )?;
        timing.model_ms += elapsed_ms(stage_start);
        survivors.links_evaluated += outcome.evaluated;
        survivors.links_accepted += outcome.link_results.iter().filter(|r| r.accepted).count();
        survivors.link_evaluations_skipped += outcome.skipped;
        if outcome.decision {
            survivors.candidates_accepted += 1;
            classes.union(&pair.a, &pair.b)?;
        }
        record_truth(&mut confusion, truth, &pair, outcome.decision);
        records.push(CandidateRecord {
            pair,
            stage_reached: StageReached::Model,
            decision: outcome.decision,
            links_total,
            links_after_static: links_static.len(),
            links_after_dynamic: links_dynamic.len(),
            links_evaluated: outcome.evaluated,
            link_results: outcome.link_results,
            skip_reason: None,
        });
    }

    timing.total_ms = elapsed_ms(started);
    let clone_classes: Vec<Vec<String>> =
        classes.classes().into_iter().filter(|c| c.len() >= 2).collect();
    let truth_summary =
        truth.map(|_| TruthSummary { counts: confusion, metrics: Metrics::from_counts(confusion) });
    Ok(CloneReport {
        config: config.clone(),
        candidates: records,
        clone_classes,
        survivors,
        timing,
        truth: truth_summary,
    })
}

fn index_sides<'a>(
    datasets: &'a [TraceDataset],
    models: &'a [FlowModel],
) -> Result<BTreeMap<String, Side<'a>>, PipelineError> {
    let mut by_id: BTreeMap<String, &TraceDataset> = BTreeMap::new();
    for dataset in datasets {
        if by_id.insert(dataset.schema.id.clone(), dataset).is_some() {
            return Err(PipelineError::InconsistentInputs(format!(
                "duplicate trace dataset for '{}'",
                dataset.schema.id
            )));
        }
    }
    let mut sides = BTreeMap::new();
    for model in models {
        let id = &model.schema.id;
        let dataset = by_id.remove(id).ok_or_else(|| PipelineError::MissingTrace(id.clone()))?;
        if dataset.schema != model.schema {
            return Err(PipelineError::InconsistentInputs(format!(
                "schema of '{id}' differs between trace and model"
            )));
        }
        sides.insert(id.clone(), Side { dataset, model });
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(PipelineError::InconsistentInputs(format!(
            "trace dataset '{extra}' has no trained model"
        )));
    }
    Ok(sides)
}

fn rejected(
    pair: CandidatePair,
    stage: StageReached,
    links_total: usize,
    links_after_static: usize,
    links_after_dynamic: usize,
) -> CandidateRecord {
    CandidateRecord {
        pair,
        stage_reached: stage,
        decision: false,
        links_total,
        links_after_static,
        links_after_dynamic,
        links_evaluated: 0,
        link_results: Vec::new(),
        skip_reason: None,
    }
}

fn record_truth(
    confusion: &mut ConfusionCounts,
    truth: Option<&GroundTruth>,
    pair: &CandidatePair,
    decision: bool,
) {
    if let Some(truth) = truth {
        confusion.record(decision, truth.same_class(&pair.a, &pair.b));
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::fit_encoders;
    use crate::flow::FlowConfig;
    use crate::trace::{AtomicElement, DataType, ElementRole, IoPair, Value};

    fn int_schema(id: &str, inputs: &[&str]) -> ExecutableSchema {
        let mut elements: Vec<AtomicElement> = inputs
            .iter()
            .map(|n| AtomicElement {
                name: (*n).to_string(),
                role: ElementRole::ParameterIn,
                dtype: DataType::Integer,
            })
            .collect();
        elements.push(AtomicElement {
            name: "out".to_string(),
            role: ElementRole::ResultOut,
            dtype: DataType::Integer,
        });
        ExecutableSchema {
            id: id.to_string(),
            display_name: id.to_string(),
            owner_type: None,
            elements,
        }
    }

    fn int_dataset(
        id: &str,
        f: impl Fn(i64) -> i64,
        inputs: impl IntoIterator<Item = i64>,
    ) -> TraceDataset {
        let rows = inputs.into_iter().map(|n| vec![Value::Int(n), Value::Int(f(n))]).collect();
        TraceDataset { schema: int_schema(id, &["n"]), rows }
    }

    fn uniform_inputs(n: usize, lo: i64, hi: i64, seed_value: u64) -> Vec<i64> {
        use rand::Rng;
        let mut rng = seed::rng(seed_value, &["test-inputs"]);
        (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
    }

    fn quick_config() -> FlowConfig {
        FlowConfig { epochs: 60, ..FlowConfig::default() }
    }

    #[test]
    fn static_filter_requires_both_ends_to_match() {
        let fa = int_schema("fa", &["n"]);
        let fb = int_schema("fb", &["n"]);
        let link =
            Link { pair_a: IoPair { input: 0, output: 1 }, pair_b: IoPair { input: 0, output: 1 } };
        assert!(static_filter(&link, &fa, &fb));
        assert!(static_filter(&link, &fa, &fa));

        let mut text_in = int_schema("ft", &["guard"]);
        text_in.elements[0].dtype = DataType::Text;
        assert!(!static_filter(&link, &fa, &text_in));
    }

    #[test]
    fn static_stage_keeps_only_the_type_matched_delegate_link() {
        let fa = int_schema("fa", &["n"]);
        let mut fd = int_schema("fd", &["n", "guard"]);
        fd.elements[1].dtype = DataType::Text;
        let links = build_links(&fa, &fd);
        assert_eq!(links.len(), 2);
        let surviving = static_stage(links, &fa, &fd);
        assert_eq!(surviving.len(), 1);
        assert_eq!(surviving[0].pair_b, IoPair { input: 0, output: 2 });
    }

    #[test]
    fn dynamic_stage_passes_identical_datasets() {
        let inputs = uniform_inputs(200, 0, 20, 1);
        let da = int_dataset("a", |n| n * n, inputs.clone());
        let db = TraceDataset { schema: int_schema("b", &["n"]), rows: da.rows.clone() };
        let ea = fit_encoders(&da, 7).unwrap();
        let links = build_links(&da.schema, &db.schema);
        let survivors = dynamic_stage(links.clone(), &da, &db, &ea, 0.1, 99).unwrap();
        assert_eq!(survivors, links);
    }

    #[test]
    fn dynamic_stage_rejects_shifted_trigger_ranges() {
        let fa = int_dataset("fa", factorial, uniform_inputs(200, 0, 4, 2));
        let fb = int_dataset("fb", factorial, uniform_inputs(200, 5, 10, 3));
        let ea = fit_encoders(&fa, 11).unwrap();
        let links = build_links(&fa.schema, &fb.schema);
        let survivors = dynamic_stage(links, &fa, &fb, &ea, 0.1, 99).unwrap();
        assert!(survivors.is_empty());
    }

    #[test]
    fn dynamic_stage_rejects_majority_divergent_outputs() {
        // The delegate returns its guard value -1 for most events, so the
        // output distributions disagree even though inputs match.
        let inputs = uniform_inputs(200, 0, 20, 4);
        let fa = int_dataset("fa", factorial, inputs.clone());
        let fd_rows: Vec<Vec<Value>> = inputs
            .iter()
            .map(|&n| {
                let out = if n <= 12 { -1 } else { factorial(n) };
                vec![Value::Int(n), Value::Int(out)]
            })
            .collect();
        let fd = TraceDataset { schema: int_schema("fd", &["n"]), rows: fd_rows };
        let ea = fit_encoders(&fa, 13).unwrap();
        let links = build_links(&fa.schema, &fd.schema);
        let survivors = dynamic_stage(links, &fa, &fd, &ea, 0.1, 99).unwrap();
        assert!(survivors.is_empty());
    }

    #[test]
    fn dynamic_stage_tolerates_rare_divergence_on_wide_integer_outputs() {
        // Factorial outputs span eighteen orders of magnitude, so most of
        // the dequantization noise underflows and the big atoms encode to
        // exact ties. A handful of diverging rows must still pass the test;
        // the two samples only do so when both sit in one encoder's frame.
        let inputs = uniform_inputs(300, 0, 20, 5);
        let fa = int_dataset("fa", factorial, inputs.clone());
        let fd_rows: Vec<Vec<Value>> = inputs
            .iter()
            .enumerate()
            .filter(|(r, _)| r % 23 != 0)
            .map(|(_, &n)| {
                let out = if n == 0 { -1 } else { factorial(n) };
                vec![Value::Int(n), Value::Int(out)]
            })
            .collect();
        let fd = TraceDataset { schema: int_schema("fd", &["n"]), rows: fd_rows };
        let ea = fit_encoders(&fa, 13).unwrap();
        let links = build_links(&fa.schema, &fd.schema);
        let survivors = dynamic_stage(links.clone(), &fa, &fd, &ea, 0.1, 99).unwrap();
        assert_eq!(survivors, links);
    }

    fn factorial(n: i64) -> i64 {
        (1..=n).product::<i64>().max(1)
    }

    #[test]
    fn self_comparison_ratios_are_near_zero() {
        let inputs = uniform_inputs(300, 0, 20, 5);
        let da = int_dataset("a", |n| 2 * n + 1, inputs.clone());
        let db = TraceDataset { schema: int_schema("b", &["n"]), rows: da.rows.clone() };
        let ma = FlowModel::fit(&da, &quick_config(), 21).unwrap();
        let mb = FlowModel::fit(&db, &quick_config(), 21).unwrap();
        let link =
            Link { pair_a: IoPair { input: 0, output: 1 }, pair_b: IoPair { input: 0, output: 1 } };
        let (la, lb) = model_link_ratio(&ma, &mb, &link, 50, 77, &CondOpt::default()).unwrap();
        assert!(la.abs() < 0.5, "lambda_a = {la}");
        assert!(lb.abs() < 0.5, "lambda_b = {lb}");
    }

    #[test]
    fn divergent_io_laws_produce_strongly_negative_ratios() {
        let inputs = uniform_inputs(300, 0, 20, 6);
        let da = int_dataset("a", factorial, inputs.clone());
        let db = int_dataset("b", |n| 1i64 << n, inputs);
        let ma = FlowModel::fit(&da, &quick_config(), 22).unwrap();
        let mb = FlowModel::fit(&db, &quick_config(), 23).unwrap();
        let link =
            Link { pair_a: IoPair { input: 0, output: 1 }, pair_b: IoPair { input: 0, output: 1 } };
        let (la, lb) = model_link_ratio(&ma, &mb, &link, 50, 78, &CondOpt::default()).unwrap();
        assert!(la.min(lb) < 0.001f64.ln(), "lambda_a = {la}, lambda_b = {lb}");
    }

    #[test]
    fn narrow_alternative_scores_much_lower_than_wide_alternative() {
        use rand_distr::{Distribution, Normal};
        let float_schema = |id: &str| ExecutableSchema {
            id: id.to_string(),
            display_name: id.to_string(),
            owner_type: None,
            elements: vec![
                AtomicElement {
                    name: "x".into(),
                    role: ElementRole::ParameterIn,
                    dtype: DataType::Float,
                },
                AtomicElement {
                    name: "y".into(),
                    role: ElementRole::ResultOut,
                    dtype: DataType::Float,
                },
            ],
        };
        let normal_rows = |sd: f64, seed_value: u64| -> Vec<Vec<Value>> {
            let mut rng = seed::rng(seed_value, &["normal"]);
            let dist = Normal::new(0.0, sd).unwrap();
            (0..400)
                .map(|_| {
                    vec![Value::Float(dist.sample(&mut rng)), Value::Float(dist.sample(&mut rng))]
                })
                .collect()
        };
        let wide = TraceDataset { schema: float_schema("wide"), rows: normal_rows(3.0, 31) };
        let narrow = TraceDataset { schema: float_schema("narrow"), rows: normal_rows(1.0, 32) };
        let mw = FlowModel::fit(&wide, &quick_config(), 24).unwrap();
        let mn = FlowModel::fit(&narrow, &quick_config(), 25).unwrap();
        let link =
            Link { pair_a: IoPair { input: 0, output: 1 }, pair_b: IoPair { input: 0, output: 1 } };
        // lambda_a: wide is the reference, narrow is the alternative.
        let (narrow_as_alt, wide_as_alt) =
            model_link_ratio(&mw, &mn, &link, 50, 79, &CondOpt::default()).unwrap();
        assert!(narrow_as_alt < wide_as_alt - 1.0, "narrow {narrow_as_alt} vs wide {wide_as_alt}");
    }

    #[test]
    fn pooling_examples() {
        assert!(pool(0.0, 0.0, Pooling::Hard, 0.5));
        assert!(pool(0.0, 0.0, Pooling::Soft, 0.5));
        // Soft accepts an asymmetric pair that hard rejects.
        assert!(pool(-6.0, 0.0, Pooling::Soft, 0.01));
        assert!(!pool(-6.0, 0.0, Pooling::Hard, 0.01));
    }

    #[test]
    fn hard_pooling_implies_soft_pooling() {
        use rand::Rng;
        let mut rng = seed::rng(3, &["pool"]);
        for _ in 0..2000 {
            let la = rng.gen_range(-10.0..2.0);
            let lb = rng.gen_range(-10.0..2.0);
            let c = rng.gen_range(1e-6..1.0);
            if pool(la, lb, Pooling::Hard, c) {
                assert!(pool(la, lb, Pooling::Soft, c), "la={la} lb={lb} c={c}");
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_rates() {
        let mut config = DetectionConfig { d_fpr: 0.0, ..DetectionConfig::default() };
        assert!(config.validate().is_err());
        config.d_fpr = 0.1;
        config.m_fpr = 1.0;
        assert!(config.validate().is_err());
        config.m_fpr = 0.001;
        config.particles = 1;
        assert!(config.validate().is_err());
        config.particles = 2;
        assert!(config.validate().is_ok());
    }

    fn clone_trio() -> (Vec<TraceDataset>, Vec<FlowModel>) {
        let inputs = uniform_inputs(250, 0, 20, 8);
        let mk = |id: &str| TraceDataset {
            schema: int_schema(id, &["n"]),
            rows: inputs.iter().map(|&n| vec![Value::Int(n), Value::Int(3 * n - 7)]).collect(),
        };
        let datasets = vec![mk("a"), mk("b"), mk("c")];
        let models = datasets
            .iter()
            .enumerate()
            .map(|(i, d)| FlowModel::fit(d, &quick_config(), 40 + i as u64).unwrap())
            .collect();
        (datasets, models)
    }

    #[test]
    fn identical_behavior_is_detected_and_transitively_skipped() {
        let (datasets, models) = clone_trio();
        let config = DetectionConfig { seed: 9, ..DetectionConfig::default() };
        let report = run_detection(&datasets, &models, &config, None).unwrap();
        assert_eq!(report.candidates.len(), 3);
        assert!(report.candidates.iter().all(|c| c.decision));
        // (a,b) and (a,c) are evaluated; (b,c) is then implied.
        let skipped: Vec<_> =
            report.candidates.iter().filter(|c| c.stage_reached == StageReached::Skipped).collect();
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].pair, CandidatePair::new("b", "c"));
        assert!(skipped[0].skip_reason.is_some());
        assert_eq!(report.clone_classes, vec![vec!["a".to_string(), "b".into(), "c".into()]]);
        assert_eq!(report.survivors.candidates_skipped, 1);
        assert!(report.survivors.link_evaluations_skipped >= 1);
    }

    #[test]
    fn exhaustive_mode_evaluates_every_candidate() {
        let (datasets, models) = clone_trio();
        let config = DetectionConfig {
            evaluation: Evaluation::Exhaustive,
            seed: 9,
            ..DetectionConfig::default()
        };
        let report = run_detection(&datasets, &models, &config, None).unwrap();
        assert!(report.candidates.iter().all(|c| c.stage_reached == StageReached::Model));
        assert!(report.candidates.iter().all(|c| c.decision));
        assert_eq!(report.survivors.candidates_skipped, 0);
    }

    #[test]
    fn truth_summary_counts_candidate_pairs() {
        let (datasets, models) = clone_trio();
        let mut classes = BTreeMap::new();
        classes.insert("trio".to_string(), vec!["a".to_string(), "b".into(), "c".into()]);
        let truth = GroundTruth { classes };
        let config = DetectionConfig { seed: 9, ..DetectionConfig::default() };
        let report = run_detection(&datasets, &models, &config, Some(&truth)).unwrap();
        let summary = report.truth.unwrap();
        assert_eq!(summary.counts.true_positives, 3);
        assert_eq!(summary.counts.false_positives, 0);
        assert_eq!(summary.metrics.recall, 1.0);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (datasets, models) = clone_trio();
        let err =
            run_detection(&datasets[..2], &models, &DetectionConfig::default(), None).unwrap_err();
        assert!(matches!(err, PipelineError::MissingTrace(_)));

        let err =
            run_detection(&datasets, &models[..2], &DetectionConfig::default(), None).unwrap_err();
        assert!(matches!(err, PipelineError::InconsistentInputs(_)));
    }

    #[test]
    fn detection_is_deterministic() {
        let (datasets, models) = clone_trio();
        let config = DetectionConfig { seed: 5, ..DetectionConfig::default() };
        let r1 = run_detection(&datasets, &models, &config, None).unwrap();
        let r2 = run_detection(&datasets, &models, &config, None).unwrap();
        assert_eq!(r1.candidates, r2.candidates);
        assert_eq!(r1.survivors, r2.survivors);
        assert_eq!(r1.clone_classes, r2.clone_classes);
    }
}
