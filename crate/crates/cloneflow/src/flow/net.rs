//! Affine coupling layers and their hand-derived backward pass.
//!
//! One layer splits the vector by its mask: masked coordinates pass through
//! unchanged, the rest are scaled and shifted by amounts computed from the
//! masked part,
//!
//! ```text
//! y_pass  = x_pass
//! y_trans = x_trans * exp(s(x_pass)) + t(x_pass)
//! ```
//!
//! `s` and `t` come from two small one-hidden-layer networks with tanh
//! hidden units. The scale output is squashed through `s_max * tanh(.)`, so
//! a single layer can stretch space by at most `exp(s_max)`; that bound is
//! what keeps training finite on columns whose mass collapses onto a few
//! atoms. The Jacobian of the map is triangular and its log-determinant is
//! just `sum(s)`, which is what makes exact likelihoods cheap.
//!
//! Both output layers start at zero, so a fresh stack of layers is exactly
//! the identity map with zero log-determinant. Hidden layers start at small
//! seeded values; starting them at zero too would freeze the nets, because
//! every parameter gradient upstream of a zero output layer is itself zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// One-hidden-layer perceptron: `out = w2 * tanh(w1 * x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// `hidden_dim x input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output_dim x hidden_dim`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DenseNet {
    /// Zero output layer, Xavier-uniform hidden layer.
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> DenseNet {
        let bound = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let w1 = (0..hidden_dim * input_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        DenseNet {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; output_dim * hidden_dim],
            b2: vec![0.0; output_dim],
        }
    }

    /// Returns `(output, hidden_activations)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.input_dim);
        let mut hidden = vec![0.0; self.hidden_dim];
        for (h, hv) in hidden.iter_mut().enumerate() {
            let mut acc = self.b1[h];
            for (i, &xi) in x.iter().enumerate() {
                acc += self.w1[h * self.input_dim + i] * xi;
            }
            *hv = acc.tanh();
        }
        let mut out = vec![0.0; self.output_dim];
        for (o, ov) in out.iter_mut().enumerate() {
            let mut acc = self.b2[o];
            for (h, &hv) in hidden.iter().enumerate() {
                acc += self.w2[o * self.hidden_dim + h] * hv;
            }
            *ov = acc;
        }
        (out, hidden)
    }

    /// Backward pass. `d_out` is dL/d(output); `x` and `hidden` are the
    /// cached forward values. Returns dL/dx; accumulates parameter
    /// gradients into `grads` when given.
    pub fn backward(
        &self,
        x: &[f64],
        hidden: &[f64],
        d_out: &[f64],
        grads: Option<&mut DenseNetGrads>,
    ) -> Vec<f64> {
        // dL/d(hidden activation), then through tanh to pre-activation.
        let mut d_hidden = vec![0.0; self.hidden_dim];
        for (o, &g) in d_out.iter().enumerate() {
            for (h, dh) in d_hidden.iter_mut().enumerate() {
                *dh += self.w2[o * self.hidden_dim + h] * g;
            }
        }
        let d_pre: Vec<f64> =
            d_hidden.iter().zip(hidden).map(|(&dh, &hv)| dh * (1.0 - hv * hv)).collect();

        if let Some(grads) = grads {
            for (o, &g) in d_out.iter().enumerate() {
                grads.b2[o] += g;
                for (h, &hv) in hidden.iter().enumerate() {
                    grads.w2[o * self.hidden_dim + h] += g * hv;
                }
            }
            for (h, &dp) in d_pre.iter().enumerate() {
                grads.b1[h] += dp;
                for (i, &xi) in x.iter().enumerate() {
                    grads.w1[h * self.input_dim + i] += dp * xi;
                }
            }
        }

        let mut d_x = vec![0.0; self.input_dim];
        for (h, &dp) in d_pre.iter().enumerate() {
            for (i, dx) in d_x.iter_mut().enumerate() {
                *dx += self.w1[h * self.input_dim + i] * dp;
            }
        }
        d_x
    }
}

/// Gradient accumulator with the same shape as a [`DenseNet`].
#[derive(Debug, Clone)]
pub struct DenseNetGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DenseNetGrads {
    pub fn zeros_like(net: &DenseNet) -> DenseNetGrads {
        DenseNetGrads {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
        }
    }
}

/// One affine coupling layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// `true` marks a pass-through coordinate.
    pub mask: Vec<bool>,
    pub scale_net: DenseNet,
    pub translate_net: DenseNet,
    pub s_max: f64,
}

/// Forward cache for one layer and one row, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x_pass: Vec<f64>,
    pub x_trans: Vec<f64>,
    pub s: Vec<f64>,
    pub exp_s: Vec<f64>,
    pub hidden_s: Vec<f64>,
    pub hidden_t: Vec<f64>,
}

impl CouplingLayer {
    /// Checkerboard mask over `dim` coordinates. Even `flip` passes even
    /// indices, odd `flip` passes odd ones; stacking both orientations lets
    /// every coordinate be transformed conditioned on every other.
    pub fn checkerboard_mask(dim: usize, flip: bool) -> Vec<bool> {
        (0..dim).map(|i| (i % 2 == 0) != flip).collect()
    }

    pub fn new<R: Rng>(
        mask: Vec<bool>,
        hidden_dim: usize,
        s_max: f64,
        rng: &mut R,
    ) -> CouplingLayer {
        let pass = mask.iter().filter(|&&m| m).count();
        let trans = mask.len() - pass;
        CouplingLayer {
            mask,
            scale_net: DenseNet::new(pass, hidden_dim, trans, rng),
            translate_net: DenseNet::new(pass, hidden_dim, trans, rng),
            s_max,
        }
    }

    fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pass = Vec::new();
        let mut trans = Vec::new();
        for (&m, &v) in self.mask.iter().zip(x) {
            if m {
                pass.push(v);
            } else {
                trans.push(v);
            }
        }
        (pass, trans)
    }

    fn join(&self, pass: &[f64], trans: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mask.len()];
        let (mut p, mut t) = (0, 0);
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                out[i] = pass[p];
                p += 1;
            } else {
                out[i] = trans[t];
                t += 1;
            }
        }
        out
    }

    fn scale_and_translate(&self, x_pass: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (raw_s, hidden_s) = self.scale_net.forward(x_pass);
        let s: Vec<f64> = raw_s.iter().map(|&u| self.s_max * u.tanh()).collect();
        let (t, hidden_t) = self.translate_net.forward(x_pass);
        (s, t, hidden_s, hidden_t)
    }

    /// Maps data space toward latent space. Returns the output, the layer's
    /// log-determinant contribution, and the cache for backprop.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64, LayerCache) {
        let (x_pass, x_trans) = self.split(x);
        let (s, t, hidden_s, hidden_t) = self.scale_and_translate(&x_pass);
        let exp_s: Vec<f64> = s.iter().map(|&v| v.exp()).collect();
        let y_trans: Vec<f64> =
            x_trans.iter().zip(&exp_s).zip(&t).map(|((&xv, &e), &tv)| xv * e + tv).collect();
        let log_det = s.iter().sum();
        let y = self.join(&x_pass, &y_trans);
        let cache = LayerCache { x_pass, x_trans, s, exp_s, hidden_s, hidden_t };
        (y, log_det, cache)
    }

    /// Exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let (y_pass, y_trans) = self.split(y);
        let (s, t, _, _) = self.scale_and_translate(&y_pass);
        let x_trans: Vec<f64> = y_trans
            .iter()
            .zip(&s)
            .zip(&t)
            .map(|((&yv, &sv), &tv)| (yv - tv) * (-sv).exp())
            .collect();
        self.join(&y_pass, &x_trans)
    }

    /// Backward pass for the loss `L`. `d_y` is dL/d(layer output) and
    /// `d_log_det` is dL/d(this layer's log-determinant); for a negative
    /// log-likelihood loss that coefficient is -1. Returns dL/d(layer
    /// input); accumulates parameter gradients when `grads` is given.
    pub fn backward(
        &self,
        cache: &LayerCache,
        d_y: &[f64],
        d_log_det: f64,
        mut grads: Option<&mut CouplingGrads>,
    ) -> Vec<f64> {
        let (d_y_pass, d_y_trans) = self.split(d_y);

        // y_trans = x_trans * exp(s) + t
        let d_x_trans: Vec<f64> =
            d_y_trans.iter().zip(&cache.exp_s).map(|(&g, &e)| g * e).collect();
        let d_s: Vec<f64> = d_y_trans
            .iter()
            .zip(&cache.x_trans)
            .zip(&cache.exp_s)
            .map(|((&g, &xv), &e)| g * xv * e + d_log_det)
            .collect();
        let d_t = d_y_trans;

        // s = s_max * tanh(u); recover tanh(u) from the cached s.
        let d_raw_s: Vec<f64> = d_s
            .iter()
            .zip(&cache.s)
            .map(|(&ds, &sv)| {
                let th = sv / self.s_max;
                ds * self.s_max * (1.0 - th * th)
            })
            .collect();

        let d_pass_from_s = self.scale_net.backward(
            &cache.x_pass,
            &cache.hidden_s,
            &d_raw_s,
            grads.as_deref_mut().map(|g| &mut g.scale),
        );
        let d_pass_from_t = self.translate_net.backward(
            &cache.x_pass,
            &cache.hidden_t,
            &d_t,
            grads.map(|g| &mut g.translate),
        );

        let d_x_pass: Vec<f64> = d_y_pass
            .iter()
            .zip(&d_pass_from_s)
            .zip(&d_pass_from_t)
            .map(|((&a, &b), &c)| a + b + c)
            .collect();
        self.join(&d_x_pass, &d_x_trans)
    }
}

/// Gradient accumulator for one coupling layer.
#[derive(Debug, Clone)]
pub struct CouplingGrads {
    pub scale: DenseNetGrads,
    pub translate: DenseNetGrads,
}

impl CouplingGrads {
    pub fn zeros_like(layer: &CouplingLayer) -> CouplingGrads {
        CouplingGrads {
            scale: DenseNetGrads::zeros_like(&layer.scale_net),
            translate: DenseNetGrads::zeros_like(&layer.translate_net),
        }
    }
}

/// Visits every parameter of a layer in a fixed order, paired with the
/// matching gradient slot. The optimizer walks this to stay layout-agnostic.
pub fn for_each_param(
    layer: &mut CouplingLayer,
    grads: &CouplingGrads,
    mut f: impl FnMut(&mut f64, f64),
) {
    let nets = [(&mut layer.scale_net, &grads.scale), (&mut layer.translate_net, &grads.translate)];
    for (net, g) in nets {
        for (p, &gv) in net.w1.iter_mut().zip(&g.w1) {
            f(p, gv);
        }
        for (p, &gv) in net.b1.iter_mut().zip(&g.b1) {
            f(p, gv);
        }
        for (p, &gv) in net.w2.iter_mut().zip(&g.w2) {
            f(p, gv);
        }
        for (p, &gv) in net.b2.iter_mut().zip(&g.b2) {
            f(p, gv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(dim: usize, seed: u64) -> CouplingLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer =
            CouplingLayer::new(CouplingLayer::checkerboard_mask(dim, false), 5, 3.0, &mut rng);
        // Give the zero-initialized output layers nontrivial values so the
        // layer is a generic affine coupling, not the identity.
        for w in layer.scale_net.w2.iter_mut().chain(layer.translate_net.w2.iter_mut()) {
            *w = rng.gen_range(-0.8..0.8);
        }
        for b in layer.scale_net.b2.iter_mut().chain(layer.translate_net.b2.iter_mut()) {
            *b = rng.gen_range(-0.5..0.5);
        }
        layer
    }

    #[test]
    fn fresh_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer =
            CouplingLayer::new(CouplingLayer::checkerboard_mask(3, false), 8, 3.0, &mut rng);
        let x = [0.4, -1.2, 2.5];
        let (y, log_det, _) = layer.forward(&x);
        assert_eq!(y, x.to_vec());
        assert_eq!(log_det, 0.0);
    }

    #[test]
    fn masks_alternate() {
        assert_eq!(CouplingLayer::checkerboard_mask(4, false), vec![true, false, true, false]);
        assert_eq!(CouplingLayer::checkerboard_mask(3, true), vec![false, true, false]);
    }

    #[test]
    fn inverse_undoes_forward() {
        for seed in 0..5 {
            let layer = random_layer(3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for _ in 0..50 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let (y, _, _) = layer.forward(&x);
                let back = layer.inverse(&y);
                for (a, b) in x.iter().zip(&back) {
                    assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_det_matches_finite_difference_jacobian() {
        let layer = random_layer(2, 7);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (_, log_det, _) = layer.forward(&x);
            let mut jac = [[0.0f64; 2]; 2];
            for j in 0..2 {
                let mut hi = x.clone();
                let mut lo = x.clone();
                hi[j] += h;
                lo[j] -= h;
                let (yh, _, _) = layer.forward(&hi);
                let (yl, _, _) = layer.forward(&lo);
                for i in 0..2 {
                    jac[i][j] = (yh[i] - yl[i]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            assert_relative_eq!(det.abs().ln(), log_det, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn scale_is_bounded_by_s_max() {
        let mut layer = random_layer(2, 3);
        // Saturate the scale net hard.
        for w in layer.scale_net.w2.iter_mut() {
            *w = 50.0;
        }
        let (_, log_det, cache) = layer.forward(&[1.5, 0.3]);
        for &s in &cache.s {
            assert!(s.abs() <= layer.s_max);
        }
        assert!(log_det.abs() <= layer.s_max * cache.s.len() as f64);
    }

    #[test]
    fn backward_input_grads_match_finite_difference() {
        // Scalar probe L(x) = sum(y) + 2 * log_det exercises both outputs.
        let layer = random_layer(3, 11);
        let x = [0.3, -0.9, 1.4];
        let (_, _, cache) = layer.forward(&x);
        let d_y = [1.0, 1.0, 1.0];
        let analytic = layer.backward(&cache, &d_y, 2.0, None);
        let h = 1e-6;
        for j in 0..3 {
            let mut hi = x;
            let mut lo = x;
            hi[j] += h;
            lo[j] -= h;
            let (yh, ldh, _) = layer.forward(&hi);
            let (yl, ldl, _) = layer.forward(&lo);
            let fd = (yh.iter().sum::<f64>() + 2.0 * ldh - yl.iter().sum::<f64>() - 2.0 * ldl)
                / (2.0 * h);
            assert_relative_eq!(analytic[j], fd, max_relative = 1e-5, epsilon = 1e-8);
        }
    }
}
