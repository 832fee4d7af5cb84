//! Normalizing-flow density models over encoded trace matrices.
//!
//! A [`Flow`] is a stack of affine coupling layers: an invertible map from
//! data space to a standard-normal latent space with a cheap exact Jacobian
//! log-determinant. Exact log-likelihoods come from the change-of-variables
//! identity,
//!
//! ```text
//! log p(x) = log N(f(x); 0, I) + log |det df/dx|
//! ```
//!
//! A [`FlowModel`] binds a flow to one executable: its schema, its fitted
//! column encoders, and a training log. One-column executables are padded
//! with an auxiliary standard-normal column so coupling layers always have
//! two sides to work with; padded dimensions are invisible to callers that
//! speak in schema elements.
//!
//! Sampling inverts the flow on latent draws. Conditional sampling fixes a
//! subset of coordinates and runs gradient ascent on the log-density over
//! the free ones, which turns the generative model into an approximate
//! conditional-mode oracle. Both are deterministic for a fixed seed.

mod net;
mod train;

pub mod check;

pub use net::{CouplingGrads, CouplingLayer, DenseNet};
pub use train::{fit_matrix, FlowConfig, TrainLog};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{self, ColumnEncoder, EncodingError};
use crate::seed;
use crate::trace::{ExecutableSchema, TraceDataset};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error("training needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("flows need at least 2 dimensions, got {0}")]
    TooFewDims(usize),
    #[error("training data contains a non-finite value")]
    NonFiniteInput,
    #[error("training loss became non-finite in epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("conditional sampling requires at least one free coordinate")]
    AllDimsConstrained,
    #[error("constraint index {index} out of range for {dim} constrainable dimensions")]
    ConstraintOutOfRange { index: usize, dim: usize },
    #[error("executable '{0}' has no observed elements to model")]
    NoObservedElements(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

/// Options for the gradient-ascent search inside conditional sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondOpt {
    /// Ascent steps per restart.
    pub steps: usize,
    /// Adam step size in encoded units.
    pub step_size: f64,
    /// Independent restarts; the best final density wins.
    pub restarts: usize,
}

impl Default for CondOpt {
    fn default() -> CondOpt {
        CondOpt { steps: 120, step_size: 0.05, restarts: 2 }
    }
}

/// How a sample matrix was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleOrigin {
    Direct,
    Conditional,
}

/// Row-major samples in encoded model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    pub values: Vec<Vec<f64>>,
    pub origin: SampleOrigin,
}

/// An invertible density model: coupling layers over `dim` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
}

const LN_2PI: f64 = 1.8378770664093453;

impl Flow {
    /// A fresh flow. Output layers start at zero, so this is exactly the
    /// identity map until trained.
    pub fn new(dim: usize, config: &FlowConfig, seed_value: u64) -> Result<Flow, FlowError> {
        config.validate()?;
        if dim < 2 {
            return Err(FlowError::TooFewDims(dim));
        }
        let mut rng = seed::rng(seed_value, &["flow-init"]);
        let layers = (0..config.layers)
            .map(|k| {
                let mask = CouplingLayer::checkerboard_mask(dim, k % 2 == 1);
                CouplingLayer::new(mask, config.hidden_width, config.s_max, &mut rng)
            })
            .collect();
        Ok(Flow { dim, layers })
    }

    /// Data space to latent space; returns `(z, log_det)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(x.len(), self.dim, "input length must equal flow dim");
        let mut v = x.to_vec();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (y, ld, _) = layer.forward(&v);
            v = y;
            log_det += ld;
        }
        (v, log_det)
    }

    /// Latent space back to data space; exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim, "input length must equal flow dim");
        let mut v = z.to_vec();
        for layer in self.layers.iter().rev() {
            v = layer.inverse(&v);
        }
        v
    }

    /// Exact log-density of `x` under the flow.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let (z, log_det) = self.forward(x);
        let sq: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (self.dim as f64) * LN_2PI - 0.5 * sq + log_det
    }

    /// Log-density and its gradient with respect to `x`.
    pub fn log_likelihood_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(x.len(), self.dim, "input length must equal flow dim");
        let mut v = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (y, ld, cache) = layer.forward(&v);
            caches.push(cache);
            v = y;
            log_det += ld;
        }
        let z = v;
        let sq: f64 = z.iter().map(|v| v * v).sum();
        let logp = -0.5 * (self.dim as f64) * LN_2PI - 0.5 * sq + log_det;

        // d(logp)/dz = -z, d(logp)/d(log_det) = 1; push back through layers.
        let mut grad: Vec<f64> = z.iter().map(|&v| -v).collect();
        for (layer, cache) in self.layers.iter().zip(&caches).rev() {
            grad = layer.backward(cache, &grad, 1.0, None);
        }
        (logp, grad)
    }

    /// Draws `n` rows by inverting latent standard-normal draws.
    pub fn sample(&self, n: usize, seed_value: u64) -> SampleMatrix {
        let mut rng = seed::rng(seed_value, &["flow-sample"]);
        let values = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                self.inverse(&z)
            })
            .collect();
        SampleMatrix { values, origin: SampleOrigin::Direct }
    }

    /// Draws `n` rows whose `constraints` coordinates are fixed exactly to
    /// the given targets; free coordinates start from a marginal sample and
    /// are improved by gradient ascent on the log-density.
    pub fn conditional_sample(
        &self,
        constraints: &BTreeMap<usize, f64>,
        n: usize,
        seed_value: u64,
        opt: &CondOpt,
    ) -> Result<SampleMatrix, FlowError> {
        self.validate_constraints(constraints, self.dim)?;
        let mut rng = seed::rng(seed_value, &["flow-cond"]);
        let free: Vec<usize> = (0..self.dim).filter(|i| !constraints.contains_key(i)).collect();
        let values = (0..n)
            .map(|_| {
                let mut best_x: Option<Vec<f64>> = None;
                let mut best_lp = f64::NEG_INFINITY;
                for _ in 0..opt.restarts.max(1) {
                    let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let mut x = self.inverse(&z);
                    for (&i, &target) in constraints {
                        x[i] = target;
                    }
                    let (lp, x) = self.ascend(x, &free, opt);
                    if lp > best_lp || best_x.is_none() {
                        best_lp = lp;
                        best_x = Some(x);
                    }
                }
                best_x.expect("at least one restart")
            })
            .collect();
        Ok(SampleMatrix { values, origin: SampleOrigin::Conditional })
    }

    fn validate_constraints(
        &self,
        constraints: &BTreeMap<usize, f64>,
        constrainable: usize,
    ) -> Result<(), FlowError> {
        for &i in constraints.keys() {
            if i >= constrainable {
                return Err(FlowError::ConstraintOutOfRange { index: i, dim: constrainable });
            }
        }
        if constraints.len() >= self.dim {
            return Err(FlowError::AllDimsConstrained);
        }
        Ok(())
    }

    /// Adam ascent of the log-density over the `free` coordinates.
    fn ascend(&self, mut x: Vec<f64>, free: &[usize], opt: &CondOpt) -> (f64, Vec<f64>) {
        let (mut lp, mut grad) = self.log_likelihood_grad(&x);
        let mut best = (lp, x.clone());
        let mut m = vec![0.0; free.len()];
        let mut v = vec![0.0; free.len()];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for step in 1..=opt.steps {
            for (k, &i) in free.iter().enumerate() {
                let g = grad[i];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let m_hat = m[k] / (1.0 - b1.powi(step as i32));
                let v_hat = v[k] / (1.0 - b2.powi(step as i32));
                x[i] += opt.step_size * m_hat / (v_hat.sqrt() + eps);
            }
            let (next_lp, next_grad) = self.log_likelihood_grad(&x);
            lp = next_lp;
            grad = next_grad;
            if lp > best.0 {
                best = (lp, x.clone());
            }
        }
        best
    }
}

/// A flow bound to one executable: schema, encoders, and the trained net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub schema: ExecutableSchema,
    pub encoders: Vec<ColumnEncoder>,
    pub flow: Flow,
    /// Whether an auxiliary noise column was appended during training.
    pub padded: bool,
    pub train_log: TrainLog,
}

impl FlowModel {
    /// Encodes a dataset, pads one-column matrices, and fits the flow.
    /// Deterministic: the same dataset, config, and seed always produce the
    /// same model.
    pub fn fit(
        dataset: &TraceDataset,
        config: &FlowConfig,
        seed_value: u64,
    ) -> Result<FlowModel, FlowError> {
        config.validate()?;
        if dataset.schema.elements.is_empty() {
            return Err(FlowError::NoObservedElements(dataset.schema.id.clone()));
        }
        let (mut matrix, encoders) =
            encoding::encode_matrix(dataset, seed::derive(seed_value, &["encode"]))?;
        let padded = encoders.len() == 1;
        if padded {
            let mut rng = seed::rng(seed_value, &["pad"]);
            for row in &mut matrix {
                row.push(rng.sample(StandardNormal));
            }
        }
        let (flow, train_log) = fit_matrix(&matrix, config, seed::derive(seed_value, &["fit"]))?;
        Ok(FlowModel { schema: dataset.schema.clone(), encoders, flow, padded, train_log })
    }

    /// Count of schema-backed dimensions, excluding any padding column.
    pub fn real_dims(&self) -> usize {
        self.schema.elements.len()
    }

    pub fn dim(&self) -> usize {
        self.flow.dim
    }

    /// Joint log-density of a full encoded row (including padding, if any).
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.flow.log_likelihood(x)
    }

    /// Log-density divided by the number of schema-backed dimensions.
    ///
    /// Cross-model comparisons use this so executables with different
    /// element counts produce ratios on a common scale.
    pub fn normalized_log_likelihood(&self, x: &[f64]) -> f64 {
        self.flow.log_likelihood(x) / self.real_dims() as f64
    }

    pub fn sample(&self, n: usize, seed_value: u64) -> SampleMatrix {
        self.flow.sample(n, seed_value)
    }

    /// Conditional sampling with constraints on schema-backed dimensions
    /// only; the padding column, when present, always stays free.
    pub fn conditional_sample(
        &self,
        constraints: &BTreeMap<usize, f64>,
        n: usize,
        seed_value: u64,
        opt: &CondOpt,
    ) -> Result<SampleMatrix, FlowError> {
        for &i in constraints.keys() {
            if i >= self.real_dims() {
                return Err(FlowError::ConstraintOutOfRange { index: i, dim: self.real_dims() });
            }
        }
        self.flow.conditional_sample(constraints, n, seed_value, opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{AtomicElement, DataType, ElementRole, Value};
    use approx::assert_relative_eq;

    fn quick_config() -> FlowConfig {
        FlowConfig { epochs: 30, ..FlowConfig::default() }
    }

    fn normal_matrix(n: usize, dim: usize, sd: f64, seed_value: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed_value, &["test-normal"]);
        (0..n)
            .map(|_| (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn fresh_flow_is_identity_with_zero_log_det() {
        let flow = Flow::new(2, &FlowConfig::default(), 9).unwrap();
        let x = [0.7, -2.3];
        let (z, log_det) = flow.forward(&x);
        assert_eq!(z, x.to_vec());
        assert_eq!(log_det, 0.0);
    }

    #[test]
    fn fresh_flow_log_likelihood_is_standard_normal() {
        let flow = Flow::new(2, &FlowConfig::default(), 9).unwrap();
        assert_relative_eq!(flow.log_likelihood(&[0.0, 0.0]), -LN_2PI, epsilon = 1e-12);
        assert_relative_eq!(flow.log_likelihood(&[1.0, 0.0]), -LN_2PI - 0.5, epsilon = 1e-12);
    }

    #[test]
    fn change_of_variables_identity_holds() {
        let data = normal_matrix(200, 2, 1.0, 3);
        let (flow, _) = fit_matrix(&data, &quick_config(), 4).unwrap();
        for row in data.iter().take(50) {
            let (z, log_det) = flow.forward(row);
            let sq: f64 = z.iter().map(|v| v * v).sum();
            let direct = flow.log_likelihood(row);
            let manual = -LN_2PI - 0.5 * sq + log_det;
            assert_relative_eq!(direct, manual, epsilon = 1e-12);
        }
    }

    #[test]
    fn trained_flow_is_invertible() {
        let data = normal_matrix(300, 3, 1.5, 5);
        let (flow, _) = fit_matrix(&data, &quick_config(), 6).unwrap();
        let mut rng = seed::rng(11, &["probe"]);
        let mut max_err = 0.0f64;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let (z, _) = flow.forward(&x);
            let back = flow.inverse(&z);
            for (a, b) in x.iter().zip(&back) {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err <= 1e-6, "round-trip error {max_err}");
    }

    #[test]
    fn forward_is_injective_on_a_grid() {
        let data = normal_matrix(200, 2, 1.0, 8);
        let (flow, _) = fit_matrix(&data, &quick_config(), 9).unwrap();
        let mut images: Vec<Vec<f64>> = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                let x = [-2.0 + 4.0 * (i as f64) / 9.0, -2.0 + 4.0 * (j as f64) / 9.0];
                let (z, _) = flow.forward(&x);
                images.push(z);
            }
        }
        for (i, a) in images.iter().enumerate() {
            for b in images.iter().skip(i + 1) {
                let dist: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                assert!(dist > 1e-9, "two grid points collided in latent space");
            }
        }
    }

    #[test]
    fn sample_moments_of_fresh_flow_are_standard() {
        let flow = Flow::new(2, &FlowConfig::default(), 13).unwrap();
        let sm = flow.sample(10_000, 21);
        assert_eq!(sm.origin, SampleOrigin::Direct);
        for d in 0..2 {
            let col: Vec<f64> = sm.values.iter().map(|r| r[d]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.05, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "dim {d} var {var}");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let flow = Flow::new(2, &FlowConfig::default(), 13).unwrap();
        assert_eq!(flow.sample(5, 3), flow.sample(5, 3));
        assert_ne!(flow.sample(5, 3), flow.sample(5, 4));
    }

    #[test]
    fn single_sample_has_full_width() {
        let flow = Flow::new(4, &FlowConfig::default(), 2).unwrap();
        let sm = flow.sample(1, 1);
        assert_eq!(sm.values.len(), 1);
        assert_eq!(sm.values[0].len(), 4);
    }

    #[test]
    fn conditional_sample_fixes_constraints_exactly() {
        let data = normal_matrix(200, 3, 1.0, 14);
        let (flow, _) = fit_matrix(&data, &quick_config(), 15).unwrap();
        let constraints = BTreeMap::from([(1usize, 0.37)]);
        let sm = flow.conditional_sample(&constraints, 8, 99, &CondOpt::default()).unwrap();
        assert_eq!(sm.origin, SampleOrigin::Conditional);
        for row in &sm.values {
            assert_eq!(row[1], 0.37);
            assert!(flow.log_likelihood(row).is_finite());
        }
    }

    #[test]
    fn conditional_mode_of_fresh_flow_is_zero() {
        let flow = Flow::new(2, &FlowConfig::default(), 16).unwrap();
        let constraints = BTreeMap::from([(0usize, 0.0)]);
        let sm = flow.conditional_sample(&constraints, 4, 5, &CondOpt::default()).unwrap();
        for row in &sm.values {
            assert!(row[1].abs() < 0.05, "free coordinate {} should approach 0", row[1]);
        }
    }

    #[test]
    fn all_dims_constrained_is_an_error() {
        let flow = Flow::new(2, &FlowConfig::default(), 17).unwrap();
        let constraints = BTreeMap::from([(0usize, 1.0), (1usize, 2.0)]);
        match flow.conditional_sample(&constraints, 1, 0, &CondOpt::default()) {
            Err(FlowError::AllDimsConstrained) => {}
            other => panic!("expected AllDimsConstrained, got {other:?}"),
        }
    }

    #[test]
    fn constraint_index_must_be_in_range() {
        let flow = Flow::new(2, &FlowConfig::default(), 17).unwrap();
        let constraints = BTreeMap::from([(5usize, 1.0)]);
        assert!(matches!(
            flow.conditional_sample(&constraints, 1, 0, &CondOpt::default()),
            Err(FlowError::ConstraintOutOfRange { index: 5, dim: 2 })
        ));
    }

    fn one_column_dataset() -> TraceDataset {
        let schema = ExecutableSchema {
            id: "one".into(),
            display_name: "one".into(),
            owner_type: None,
            elements: vec![AtomicElement {
                name: "x".into(),
                role: ElementRole::ParameterIn,
                dtype: DataType::Integer,
            }],
        };
        let rows = (0..60).map(|i| vec![Value::Int(i % 7)]).collect();
        TraceDataset { schema, rows }
    }

    #[test]
    fn one_column_executables_get_padded() {
        let model = FlowModel::fit(&one_column_dataset(), &quick_config(), 3).unwrap();
        assert!(model.padded);
        assert_eq!(model.dim(), 2);
        assert_eq!(model.real_dims(), 1);
        let sm = model.sample(3, 0);
        assert_eq!(sm.values[0].len(), 2);
        // The padding dimension is not constrainable.
        let constraints = BTreeMap::from([(1usize, 0.0)]);
        assert!(matches!(
            model.conditional_sample(&constraints, 1, 0, &CondOpt::default()),
            Err(FlowError::ConstraintOutOfRange { .. })
        ));
    }

    #[test]
    fn model_fit_is_deterministic() {
        let dataset = one_column_dataset();
        let a = FlowModel::fit(&dataset, &quick_config(), 3).unwrap();
        let b = FlowModel::fit(&dataset, &quick_config(), 3).unwrap();
        assert_eq!(a, b);
        let c = FlowModel::fit(&dataset, &quick_config(), 4).unwrap();
        assert_ne!(a, c);
    }
}
