//! Builtin benchmark corpus with known ground truth.
//!
//! The corpus is a set of clone classes. Each class shares one trigger
//! stream per named input element, drawn from the discrete uniform
//! distribution on `{0, ..., 20}`, and every variant in the class is applied
//! to that same stream, so variants of one class see bitwise-identical
//! inputs. Evaluation is pure; an invocation that throws is excluded from
//! the variant's trace (there is no output value to record).
//!
//! Classes are chosen to exercise every pipeline stage:
//!
//! * `factorial` has four variants (for-loop, while-loop, recursion, and a
//!   guarded delegate `fd` whose extra text input selects what happens for
//!   `n < 1`: pass through, return `-1`, or throw). The delegate gives the
//!   corpus a mismatched-signature clone pair and a documented conditional
//!   divergence.
//! * `fibonacci` and the tuple summaries (`sum`, `min`, `max` over a fixed
//!   3-tuple) are int-typed non-clones of factorial; their output
//!   distributions differ, which the dynamic stage must catch.
//! * `half` is float-typed, so every candidate pairing it with an int-typed
//!   executable dies at the static stage.
//! * `ident` returns its input and `complement` returns `20 - input`. Both
//!   have uniform marginals on the same range, indistinguishable to the
//!   dynamic stage; only the model stage can reject the cross pairs, by
//!   noticing that their joint input/output laws disagree.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trace::{AtomicElement, DataType, ElementRole, ExecutableSchema, TraceDataset, Value};

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("event count must be at least 1")]
    NoEvents,
    #[error("every invocation of '{0}' threw; nothing to trace")]
    AllEventsExcluded(String),
    #[error("corpus spec is inconsistent: {0}")]
    BrokenSpec(String),
}

/// How one shared trigger element is drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum TriggerKind {
    /// Uniform over `{0, ..., 20}`, materialized as an integer.
    IntUniform,
    /// Uniform over `{0, ..., 20}`, materialized as a float.
    FloatUniform,
    /// Uniform over a fixed set of categories.
    Choice(Vec<&'static str>),
}

impl TriggerKind {
    fn dtype(&self) -> DataType {
        match self {
            TriggerKind::IntUniform => DataType::Integer,
            TriggerKind::FloatUniform => DataType::Float,
            TriggerKind::Choice(_) => DataType::Text,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Value {
        match self {
            TriggerKind::IntUniform => Value::Int(rng.gen_range(0..=20)),
            TriggerKind::FloatUniform => Value::Float(rng.gen_range(0..=20) as f64),
            TriggerKind::Choice(options) => {
                Value::Text(options[rng.gen_range(0..options.len())].to_string())
            }
        }
    }
}

/// A named trigger element shared by all variants of a class.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerElement {
    pub name: &'static str,
    pub kind: TriggerKind,
}

/// Result of evaluating one variant on one trigger tuple.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Value(Value),
    Threw,
}

/// One executable variant of a clone class.
pub struct Variant {
    pub schema: ExecutableSchema,
    /// Trigger element names this variant consumes, in input order.
    pub consumes: Vec<&'static str>,
    /// Marks a documented conditional divergence (the delegate guard).
    pub conditional: bool,
    pub eval: fn(&[Value]) -> Outcome,
}

/// A clone class: a label, shared triggers, and behaviorally equal variants.
pub struct CloneClassSpec {
    pub label: &'static str,
    pub triggers: Vec<TriggerElement>,
    pub variants: Vec<Variant>,
}

/// The whole benchmark corpus.
pub struct CorpusSpec {
    pub classes: Vec<CloneClassSpec>,
}

impl CorpusSpec {
    pub fn variant_count(&self) -> usize {
        self.classes.iter().map(|c| c.variants.len()).sum()
    }

    /// Checks that every variant's consumed triggers exist in its class and
    /// that the schema's input dtypes agree with the trigger streams.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for class in &self.classes {
            for variant in &class.variants {
                let id = &variant.schema.id;
                let inputs = variant.schema.input_indices();
                if inputs.len() != variant.consumes.len() {
                    return Err(CorpusError::BrokenSpec(format!(
                        "'{id}' consumes {} triggers but declares {} inputs",
                        variant.consumes.len(),
                        inputs.len()
                    )));
                }
                for (&col, name) in inputs.iter().zip(&variant.consumes) {
                    let trigger =
                        class.triggers.iter().find(|t| t.name == *name).ok_or_else(|| {
                            CorpusError::BrokenSpec(format!(
                                "'{id}' consumes unknown trigger '{name}'"
                            ))
                        })?;
                    let declared = variant.schema.elements[col].dtype;
                    if declared != trigger.kind.dtype() {
                        return Err(CorpusError::BrokenSpec(format!(
                            "'{id}' input '{name}' is {declared} but the trigger draws {}",
                            trigger.kind.dtype()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth clone classes, label to sorted executable ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub classes: BTreeMap<String, Vec<String>>,
}

impl GroundTruth {
    /// Whether two ids belong to the same ground-truth class.
    pub fn same_class(&self, a: &str, b: &str) -> bool {
        self.classes.values().any(|ids| ids.iter().any(|i| i == a) && ids.iter().any(|i| i == b))
    }

    pub fn all_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.classes.values().flatten().cloned().collect();
        ids.sort();
        ids
    }

    /// Looks up the class label of an id.
    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.classes
            .iter()
            .find(|(_, ids)| ids.iter().any(|i| i == id))
            .map(|(label, _)| label.as_str())
    }
}

/// Ground truth of a corpus spec.
pub fn ground_truth(spec: &CorpusSpec) -> GroundTruth {
    let mut classes = BTreeMap::new();
    for class in &spec.classes {
        let mut ids: Vec<String> = class.variants.iter().map(|v| v.schema.id.clone()).collect();
        ids.sort();
        classes.insert(class.label.to_string(), ids);
    }
    GroundTruth { classes }
}

/// Generates one trace dataset per variant.
///
/// Each class's trigger elements are drawn once from streams keyed by
/// `(seed, class, element)` and applied to every variant, so the corpus is
/// reproducible and variants of one class share inputs bitwise. Invocations
/// that throw contribute no event.
pub fn generate_traces(
    spec: &CorpusSpec,
    events: usize,
    seed_value: u64,
) -> Result<Vec<TraceDataset>, CorpusError> {
    if events == 0 {
        return Err(CorpusError::NoEvents);
    }
    spec.validate()?;
    let mut datasets = Vec::with_capacity(spec.variant_count());
    for class in &spec.classes {
        let streams = draw_streams(class, events, seed_value);
        for variant in &class.variants {
            let mut rows = Vec::with_capacity(events);
            // t walks several per-name streams in lockstep.
            #[allow(clippy::needless_range_loop)]
            for t in 0..events {
                let inputs: Vec<Value> =
                    variant.consumes.iter().map(|name| streams[*name][t].clone()).collect();
                match (variant.eval)(&inputs) {
                    Outcome::Value(out) => {
                        let mut row = inputs;
                        row.push(out);
                        rows.push(row);
                    }
                    Outcome::Threw => {}
                }
            }
            if rows.is_empty() {
                return Err(CorpusError::AllEventsExcluded(variant.schema.id.clone()));
            }
            datasets.push(TraceDataset { schema: variant.schema.clone(), rows });
        }
    }
    Ok(datasets)
}

fn draw_streams(
    class: &CloneClassSpec,
    events: usize,
    seed_value: u64,
) -> BTreeMap<&'static str, Vec<Value>> {
    class
        .triggers
        .iter()
        .map(|trigger| {
            let mut rng = seed::rng(seed_value, &["trigger", class.label, trigger.name]);
            let stream = (0..events).map(|_| trigger.kind.draw(&mut rng)).collect();
            (trigger.name, stream)
        })
        .collect()
}

/// One behavioral disagreement found by [`differential_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub class: String,
    pub variant_a: String,
    pub variant_b: String,
    pub trigger_index: usize,
    pub detail: String,
    /// True when a participating variant documents conditional behavior.
    pub conditional: bool,
}

/// Differential test report over the whole corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialReport {
    pub events_per_class: usize,
    pub divergences: Vec<Divergence>,
}

impl DifferentialReport {
    /// Divergences not covered by a documented conditional behavior.
    pub fn unexpected(&self) -> Vec<&Divergence> {
        self.divergences.iter().filter(|d| !d.conditional).collect()
    }
}

/// Runs every class's variants against fresh shared triggers and reports
/// every pairwise output disagreement. Divergences are reported, never
/// raised: the caller decides what is acceptable.
pub fn differential_check(spec: &CorpusSpec, events: usize, seed_value: u64) -> DifferentialReport {
    let mut divergences = Vec::new();
    for class in &spec.classes {
        let streams = draw_streams(class, events, seed_value);
        // t walks several per-name streams in lockstep.
        #[allow(clippy::needless_range_loop)]
        for t in 0..events {
            let outcomes: Vec<(&Variant, Outcome)> = class
                .variants
                .iter()
                .map(|variant| {
                    let inputs: Vec<Value> =
                        variant.consumes.iter().map(|name| streams[*name][t].clone()).collect();
                    (variant, (variant.eval)(&inputs))
                })
                .collect();
            for i in 0..outcomes.len() {
                for j in i + 1..outcomes.len() {
                    let (va, oa) = &outcomes[i];
                    let (vb, ob) = &outcomes[j];
                    if oa != ob {
                        divergences.push(Divergence {
                            class: class.label.to_string(),
                            variant_a: va.schema.id.clone(),
                            variant_b: vb.schema.id.clone(),
                            trigger_index: t,
                            detail: format!("{oa:?} vs {ob:?}"),
                            conditional: va.conditional || vb.conditional,
                        });
                    }
                }
            }
        }
    }
    DifferentialReport { events_per_class: events, divergences }
}

fn schema(
    class: &str,
    name: &str,
    inputs: &[(&str, DataType)],
    out_dtype: DataType,
) -> ExecutableSchema {
    let mut elements: Vec<AtomicElement> = inputs
        .iter()
        .map(|(n, dtype)| AtomicElement {
            name: (*n).to_string(),
            role: ElementRole::ParameterIn,
            dtype: *dtype,
        })
        .collect();
    elements.push(AtomicElement {
        name: name.to_string(),
        role: ElementRole::ResultOut,
        dtype: out_dtype,
    });
    ExecutableSchema {
        id: format!("{class}.{name}"),
        display_name: name.to_string(),
        owner_type: None,
        elements,
    }
}

fn int_arg(args: &[Value], i: usize) -> i64 {
    match &args[i] {
        Value::Int(v) => *v,
        other => panic!("corpus variant got {other:?} where an int was expected"),
    }
}

fn float_arg(args: &[Value], i: usize) -> f64 {
    match &args[i] {
        Value::Float(v) => *v,
        other => panic!("corpus variant got {other:?} where a float was expected"),
    }
}

fn text_arg(args: &[Value], i: usize) -> &str {
    match &args[i] {
        Value::Text(v) => v,
        other => panic!("corpus variant got {other:?} where text was expected"),
    }
}

// Factorial variants. The loop forms multiply 1..=n, so n < 1 yields 1.

fn factorial_for(args: &[Value]) -> Outcome {
    let n = int_arg(args, 0);
    let mut acc: i64 = 1;
    for i in 1..=n {
        acc *= i;
    }
    Outcome::Value(Value::Int(acc))
}

fn factorial_while(args: &[Value]) -> Outcome {
    let n = int_arg(args, 0);
    let mut acc: i64 = 1;
    let mut i: i64 = 1;
    while i <= n {
        acc *= i;
        i += 1;
    }
    Outcome::Value(Value::Int(acc))
}

fn factorial_rec_inner(n: i64) -> i64 {
    if n <= 1 {
        1
    } else {
        n * factorial_rec_inner(n - 1)
    }
}

fn factorial_rec(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Int(factorial_rec_inner(int_arg(args, 0))))
}

/// Delegate: guards small inputs, then hands off to the recursive form.
fn factorial_delegate(args: &[Value]) -> Outcome {
    let n = int_arg(args, 0);
    let guard = text_arg(args, 1);
    if n < 1 {
        match guard {
            "val" => return Outcome::Value(Value::Int(-1)),
            "throw" => return Outcome::Threw,
            _ => {}
        }
    }
    Outcome::Value(Value::Int(factorial_rec_inner(n)))
}

// Fibonacci variants, fib(0) = 0.

fn fibonacci_loop(args: &[Value]) -> Outcome {
    let n = int_arg(args, 0);
    let (mut a, mut b) = (0i64, 1i64);
    for _ in 0..n {
        let next = a + b;
        a = b;
        b = next;
    }
    Outcome::Value(Value::Int(a))
}

fn fibonacci_rec_inner(n: i64) -> i64 {
    if n < 2 {
        n
    } else {
        fibonacci_rec_inner(n - 1) + fibonacci_rec_inner(n - 2)
    }
}

fn fibonacci_rec(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Int(fibonacci_rec_inner(int_arg(args, 0))))
}

// Scalar tuple summaries over a fixed 3-tuple.

fn sum3_loop(args: &[Value]) -> Outcome {
    let mut acc = 0i64;
    for i in 0..3 {
        acc += int_arg(args, i);
    }
    Outcome::Value(Value::Int(acc))
}

fn sum3_fold(args: &[Value]) -> Outcome {
    let acc = (0..3).fold(0i64, |acc, i| acc + int_arg(args, i));
    Outcome::Value(Value::Int(acc))
}

fn min3_loop(args: &[Value]) -> Outcome {
    let mut best = int_arg(args, 0);
    for i in 1..3 {
        let v = int_arg(args, i);
        if v < best {
            best = v;
        }
    }
    Outcome::Value(Value::Int(best))
}

fn min3_pair(args: &[Value]) -> Outcome {
    let v = int_arg(args, 0).min(int_arg(args, 1)).min(int_arg(args, 2));
    Outcome::Value(Value::Int(v))
}

fn max3_loop(args: &[Value]) -> Outcome {
    let mut best = int_arg(args, 0);
    for i in 1..3 {
        let v = int_arg(args, i);
        if v > best {
            best = v;
        }
    }
    Outcome::Value(Value::Int(best))
}

fn max3_pair(args: &[Value]) -> Outcome {
    let v = int_arg(args, 0).max(int_arg(args, 1)).max(int_arg(args, 2));
    Outcome::Value(Value::Int(v))
}

// Float halving.

fn half_mul(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Float(float_arg(args, 0) * 0.5))
}

fn half_div(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Float(float_arg(args, 0) / 2.0))
}

// Identity and complement: identical marginals, different joint laws.

fn ident_plain(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Int(int_arg(args, 0)))
}

// The pointless arithmetic is the variant: same function, different shape.
#[allow(clippy::identity_op)]
fn ident_add0(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Int(int_arg(args, 0) + 0))
}

fn compl_sub(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Int(20 - int_arg(args, 0)))
}

fn compl_neg(args: &[Value]) -> Outcome {
    Outcome::Value(Value::Int(-(int_arg(args, 0) - 20)))
}

fn int_trigger(name: &'static str) -> TriggerElement {
    TriggerElement { name, kind: TriggerKind::IntUniform }
}

fn simple_variant(
    class: &'static str,
    name: &'static str,
    consumes: Vec<&'static str>,
    eval: fn(&[Value]) -> Outcome,
) -> Variant {
    let inputs: Vec<(&str, DataType)> = consumes.iter().map(|c| (*c, DataType::Integer)).collect();
    Variant {
        schema: schema(class, name, &inputs, DataType::Integer),
        consumes,
        conditional: false,
        eval,
    }
}

/// The builtin corpus described in the module docs.
pub fn builtin() -> CorpusSpec {
    let factorial = CloneClassSpec {
        label: "factorial",
        triggers: vec![
            int_trigger("n"),
            TriggerElement {
                name: "guard",
                kind: TriggerKind::Choice(vec!["none", "val", "throw"]),
            },
        ],
        variants: vec![
            simple_variant("factorial", "fa", vec!["n"], factorial_for),
            simple_variant("factorial", "fb", vec!["n"], factorial_while),
            simple_variant("factorial", "fc", vec!["n"], factorial_rec),
            Variant {
                schema: schema(
                    "factorial",
                    "fd",
                    &[("n", DataType::Integer), ("guard", DataType::Text)],
                    DataType::Integer,
                ),
                consumes: vec!["n", "guard"],
                conditional: true,
                eval: factorial_delegate,
            },
        ],
    };

    let fibonacci = CloneClassSpec {
        label: "fibonacci",
        triggers: vec![int_trigger("n")],
        variants: vec![
            simple_variant("fibonacci", "fib_loop", vec!["n"], fibonacci_loop),
            simple_variant("fibonacci", "fib_rec", vec!["n"], fibonacci_rec),
        ],
    };

    let tuple_sum = CloneClassSpec {
        label: "tuple_sum",
        triggers: vec![int_trigger("a"), int_trigger("b"), int_trigger("c")],
        variants: vec![
            simple_variant("tuple_sum", "sum3_loop", vec!["a", "b", "c"], sum3_loop),
            simple_variant("tuple_sum", "sum3_fold", vec!["a", "b", "c"], sum3_fold),
        ],
    };

    let tuple_min = CloneClassSpec {
        label: "tuple_min",
        triggers: vec![int_trigger("a"), int_trigger("b"), int_trigger("c")],
        variants: vec![
            simple_variant("tuple_min", "min3_loop", vec!["a", "b", "c"], min3_loop),
            simple_variant("tuple_min", "min3_pair", vec!["a", "b", "c"], min3_pair),
        ],
    };

    let tuple_max = CloneClassSpec {
        label: "tuple_max",
        triggers: vec![int_trigger("a"), int_trigger("b"), int_trigger("c")],
        variants: vec![
            simple_variant("tuple_max", "max3_loop", vec!["a", "b", "c"], max3_loop),
            simple_variant("tuple_max", "max3_pair", vec!["a", "b", "c"], max3_pair),
        ],
    };

    let half = CloneClassSpec {
        label: "half",
        triggers: vec![TriggerElement { name: "x", kind: TriggerKind::FloatUniform }],
        variants: vec![
            Variant {
                schema: schema("half", "half_mul", &[("x", DataType::Float)], DataType::Float),
                consumes: vec!["x"],
                conditional: false,
                eval: half_mul,
            },
            Variant {
                schema: schema("half", "half_div", &[("x", DataType::Float)], DataType::Float),
                consumes: vec!["x"],
                conditional: false,
                eval: half_div,
            },
        ],
    };

    let ident = CloneClassSpec {
        label: "ident",
        triggers: vec![int_trigger("n")],
        variants: vec![
            simple_variant("ident", "ident_plain", vec!["n"], ident_plain),
            simple_variant("ident", "ident_add0", vec!["n"], ident_add0),
        ],
    };

    let complement = CloneClassSpec {
        label: "complement",
        triggers: vec![int_trigger("n")],
        variants: vec![
            simple_variant("complement", "compl_sub", vec!["n"], compl_sub),
            simple_variant("complement", "compl_neg", vec!["n"], compl_neg),
        ],
    };

    CorpusSpec {
        classes: vec![
            factorial, fibonacci, tuple_sum, tuple_min, tuple_max, half, ident, complement,
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_int(f: fn(&[Value]) -> Outcome, n: i64) -> i64 {
        match f(&[Value::Int(n)]) {
            Outcome::Value(Value::Int(v)) => v,
            other => panic!("expected int outcome, got {other:?}"),
        }
    }

    #[test]
    fn factorial_variants_agree_on_reference_values() {
        for f in [factorial_for, factorial_while, factorial_rec] {
            assert_eq!(eval_int(f, 0), 1);
            assert_eq!(eval_int(f, 1), 1);
            assert_eq!(eval_int(f, 4), 24);
            assert_eq!(eval_int(f, 10), 3_628_800);
            assert_eq!(eval_int(f, 20), 2_432_902_008_176_640_000);
        }
    }

    #[test]
    fn delegate_guard_behaviors() {
        let val = factorial_delegate(&[Value::Int(0), Value::Text("val".into())]);
        assert_eq!(val, Outcome::Value(Value::Int(-1)));
        let thrown = factorial_delegate(&[Value::Int(0), Value::Text("throw".into())]);
        assert_eq!(thrown, Outcome::Threw);
        let none = factorial_delegate(&[Value::Int(0), Value::Text("none".into())]);
        assert_eq!(none, Outcome::Value(Value::Int(1)));
        // Guard is irrelevant for n >= 1.
        for guard in ["none", "val", "throw"] {
            let out = factorial_delegate(&[Value::Int(4), Value::Text(guard.into())]);
            assert_eq!(out, Outcome::Value(Value::Int(24)));
        }
    }

    #[test]
    fn fibonacci_variants_agree() {
        for f in [fibonacci_loop, fibonacci_rec] {
            assert_eq!(eval_int(f, 0), 0);
            assert_eq!(eval_int(f, 1), 1);
            assert_eq!(eval_int(f, 10), 55);
            assert_eq!(eval_int(f, 20), 6765);
        }
    }

    #[test]
    fn summaries_agree() {
        let args = [Value::Int(7), Value::Int(2), Value::Int(11)];
        assert_eq!(sum3_loop(&args), sum3_fold(&args));
        assert_eq!(sum3_loop(&args), Outcome::Value(Value::Int(20)));
        assert_eq!(min3_loop(&args), min3_pair(&args));
        assert_eq!(min3_loop(&args), Outcome::Value(Value::Int(2)));
        assert_eq!(max3_loop(&args), max3_pair(&args));
        assert_eq!(max3_loop(&args), Outcome::Value(Value::Int(11)));
    }

    #[test]
    fn corpus_meets_contract_minimums() {
        let spec = builtin();
        assert!(spec.classes.len() >= 3);
        assert!(spec.variant_count() >= 8);
        // A delegate with documented conditional behavior is present.
        assert!(spec.classes.iter().flat_map(|c| &c.variants).any(|v| v.conditional));
        // At least one same-class pair has mismatched signatures.
        let factorial = &spec.classes[0];
        let arities: Vec<usize> = factorial.variants.iter().map(|v| v.consumes.len()).collect();
        assert!(arities.iter().any(|&a| a != arities[0]));
    }

    #[test]
    fn positives_are_a_small_minority() {
        let spec = builtin();
        let n = spec.variant_count() as u64;
        let total = n * (n - 1) / 2;
        let positives: u64 = spec
            .classes
            .iter()
            .map(|c| {
                let k = c.variants.len() as u64;
                k * (k - 1) / 2
            })
            .sum();
        let negatives = total - positives;
        assert!(positives * 2 < negatives, "{positives} positives vs {negatives} negatives");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = builtin();
        let a = generate_traces(&spec, 50, 9).unwrap();
        let b = generate_traces(&spec, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_traces(&spec, 50, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_events_is_an_error() {
        let err = generate_traces(&builtin(), 0, 1).unwrap_err();
        assert_eq!(err, CorpusError::NoEvents);
    }

    #[test]
    fn variants_share_trigger_streams_bitwise() {
        let spec = builtin();
        let datasets = generate_traces(&spec, 120, 3).unwrap();
        let by_id: BTreeMap<String, &TraceDataset> =
            datasets.iter().map(|d| (d.schema.id.clone(), d)).collect();

        // Complete traces of one class have identical input columns.
        let fa = by_id["factorial.fa"];
        let fb = by_id["factorial.fb"];
        let fc = by_id["factorial.fc"];
        assert_eq!(fa.column(0), fb.column(0));
        assert_eq!(fa.column(0), fc.column(0));

        // The delegate's trace is the shared stream minus thrown events.
        let fd = by_id["factorial.fd"];
        assert!(fd.rows.len() <= fa.rows.len());
        let shared = fa.column(0);
        let mut cursor = 0usize;
        for row in &fd.rows {
            while shared[cursor] != row[0] {
                cursor += 1;
            }
            cursor += 1;
        }
    }

    #[test]
    fn delegate_excludes_only_throwing_invocations() {
        let spec = builtin();
        let datasets = generate_traces(&spec, 300, 7).unwrap();
        let fd = datasets.iter().find(|d| d.schema.id == "factorial.fd").unwrap();
        for row in &fd.rows {
            // Surviving rows never have the throwing combination.
            let n = match row[0] {
                Value::Int(v) => v,
                _ => unreachable!(),
            };
            let guard = match &row[1] {
                Value::Text(t) => t.as_str(),
                _ => unreachable!(),
            };
            assert!(!(n < 1 && guard == "throw"));
        }
        assert!(fd.rows.len() < 300, "some invocations should have thrown");
    }

    #[test]
    fn ground_truth_covers_every_variant() {
        let spec = builtin();
        let truth = ground_truth(&spec);
        assert_eq!(truth.all_ids().len(), spec.variant_count());
        assert!(truth.same_class("factorial.fa", "factorial.fd"));
        assert!(!truth.same_class("factorial.fa", "fibonacci.fib_loop"));
        assert_eq!(truth.label_of("ident.ident_plain"), Some("ident"));
        assert_eq!(truth.label_of("nope"), None);
    }

    #[test]
    fn differential_check_flags_only_the_delegate() {
        let spec = builtin();
        let report = differential_check(&spec, 1000, 5);
        assert!(report.unexpected().is_empty(), "unexpected: {:?}", report.unexpected());
        // The guard divergence itself must be observed and attributed.
        assert!(!report.divergences.is_empty());
        for d in &report.divergences {
            assert_eq!(d.class, "factorial");
            assert!(d.variant_a == "factorial.fd" || d.variant_b == "factorial.fd");
            assert!(d.conditional);
        }
    }

    #[test]
    fn delegate_with_guard_none_never_diverges_from_the_loop_form() {
        for n in 0..=20 {
            let delegated = factorial_delegate(&[Value::Int(n), Value::Text("none".into())]);
            let looped = factorial_for(&[Value::Int(n)]);
            assert_eq!(delegated, looped, "n = {n}");
        }
    }

    #[test]
    fn builtin_spec_validates() {
        builtin().validate().unwrap();
    }

    #[test]
    fn validation_catches_dtype_disagreement() {
        let mut spec = builtin();
        spec.classes[0].variants[0].schema.elements[0].dtype = DataType::Float;
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, CorpusError::BrokenSpec(_)));
    }

    #[test]
    fn traces_parse_back_through_the_file_format() {
        let spec = builtin();
        let datasets = generate_traces(&spec, 40, 2).unwrap();
        for dataset in &datasets {
            let mut buf = Vec::new();
            crate::trace::write_trace(dataset, &mut buf).unwrap();
            let reparsed = crate::trace::parse_trace(buf.as_slice()).unwrap();
            assert_eq!(dataset, &reparsed);
        }
    }
}
