//! Numeric self-checks for the flow implementation.
//!
//! These helpers verify the analytic machinery against slow, independent
//! computations: parameter gradients against central finite differences of
//! the likelihood itself, and total density mass against grid quadrature.
//! The test suites call them; they are exported because they only depend on
//! public behavior and make the numeric guarantees reproducible anywhere.

use super::net::{for_each_param, CouplingGrads};
use super::train::mean_nll;
use super::{fit_matrix, Flow, FlowConfig, FlowError};

/// Outcome of one gradient verification.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative disagreement across all parameters.
    pub max_rel_err: f64,
    /// Number of parameters checked.
    pub params: usize,
}

fn flatten_params(flow: &mut Flow) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &mut flow.layers {
        let zeros = CouplingGrads::zeros_like(layer);
        for_each_param(layer, &zeros, |p, _| out.push(*p));
    }
    out
}

fn assign_params(flow: &mut Flow, values: &[f64]) {
    let mut idx = 0;
    for layer in &mut flow.layers {
        let zeros = CouplingGrads::zeros_like(layer);
        for_each_param(layer, &zeros, |p, _| {
            *p = values[idx];
            idx += 1;
        });
    }
    debug_assert_eq!(idx, values.len());
}

/// Analytic gradient of the mean NLL over `matrix`, flattened in parameter
/// order.
fn analytic_grads(flow: &mut Flow, matrix: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / matrix.len() as f64;
    let mut grads: Vec<CouplingGrads> = flow.layers.iter().map(CouplingGrads::zeros_like).collect();
    for row in matrix {
        let mut v = row.clone();
        let mut caches = Vec::with_capacity(flow.layers.len());
        for layer in &flow.layers {
            let (y, _, cache) = layer.forward(&v);
            caches.push(cache);
            v = y;
        }
        let mut grad: Vec<f64> = v.iter().map(|&z| scale * z).collect();
        for ((layer, cache), layer_grads) in flow.layers.iter().zip(&caches).zip(&mut grads).rev() {
            grad = layer.backward(cache, &grad, -scale, Some(layer_grads));
        }
    }
    let mut flat = Vec::new();
    for (layer, layer_grads) in flow.layers.iter_mut().zip(&grads) {
        for_each_param(layer, layer_grads, |_, g| flat.push(g));
    }
    flat
}

/// Trains a small flow on `matrix`, then compares its analytic parameter
/// gradients with central finite differences of the mean NLL.
///
/// The relative error denominator is floored at `1e-3` so parameters whose
/// true gradient vanishes are compared on an absolute scale instead of
/// dividing by zero.
pub fn gradient_check(
    matrix: &[Vec<f64>],
    config: &FlowConfig,
    seed_value: u64,
) -> Result<GradCheckReport, FlowError> {
    let (mut flow, _) = fit_matrix(matrix, config, seed_value)?;
    let analytic = analytic_grads(&mut flow, matrix);
    let base = flatten_params(&mut flow);

    let h = 1e-5;
    let mut max_rel_err = 0.0f64;
    for i in 0..base.len() {
        let mut params = base.clone();
        params[i] = base[i] + h;
        assign_params(&mut flow, &params);
        let hi = mean_nll(&flow, matrix);
        params[i] = base[i] - h;
        assign_params(&mut flow, &params);
        let lo = mean_nll(&flow, matrix);
        let fd = (hi - lo) / (2.0 * h);

        let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
        let rel = (analytic[i] - fd).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }
    assign_params(&mut flow, &base);
    Ok(GradCheckReport { max_rel_err, params: base.len() })
}

/// Riemann-sum mass of `exp(log_likelihood)` over a square 2-D grid.
///
/// For a well-behaved 2-D flow, the result over a wide enough box should
/// approach 1.
pub fn density_grid_mass(flow: &Flow, lo: f64, hi: f64, steps: usize) -> f64 {
    assert_eq!(flow.dim, 2, "grid quadrature is 2-D only");
    let cell = (hi - lo) / steps as f64;
    let mut mass = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let x = lo + (i as f64 + 0.5) * cell;
            let y = lo + (j as f64 + 0.5) * cell;
            mass += flow.log_likelihood(&[x, y]).exp() * cell * cell;
        }
    }
    mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(n: usize, dim: usize, seed_value: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed_value, &["check-test"]);
        (0..n).map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for trial in 0..4u64 {
            let dim = 2 + (trial as usize % 2);
            let config = FlowConfig {
                layers: 2 + (trial as usize % 3),
                hidden_width: 3 + (trial as usize % 4),
                epochs: 3,
                batch_size: 16,
                ..FlowConfig::default()
            };
            let matrix = random_matrix(40, dim, 50 + trial);
            let report = gradient_check(&matrix, &config, 60 + trial).unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "trial {trial}: max rel err {} over {} params",
                report.max_rel_err,
                report.params
            );
        }
    }

    #[test]
    fn trained_density_integrates_to_one() {
        let matrix = random_matrix(800, 2, 9);
        let config = FlowConfig { epochs: 60, ..FlowConfig::default() };
        let (flow, _) = fit_matrix(&matrix, &config, 10).unwrap();
        let mass = density_grid_mass(&flow, -6.0, 6.0, 160);
        assert!((mass - 1.0).abs() <= 0.05, "grid mass {mass}");
    }

    #[test]
    fn fresh_flow_density_integrates_to_one() {
        let flow = Flow::new(2, &FlowConfig::default(), 0).unwrap();
        let mass = density_grid_mass(&flow, -6.0, 6.0, 160);
        assert!((mass - 1.0).abs() <= 0.01, "grid mass {mass}");
    }
}
