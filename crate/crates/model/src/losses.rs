//! Loss terms on the autodiff graph, the composite objective and a value-level ELBO monitor.

use serde::{Deserialize, Serialize};
use specret_core::{Error, Result};
use specret_nn::graph::Graph;
use specret_nn::{ParamStore, Tensor, Var};

use crate::epsnet::{EpsInputs, EpsNet};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean over the batch of 1 − cos(ε̃_k, ε̃̂_k).
pub fn loss_shape(g: &mut Graph, truth: Var, hat: Var) -> Var {
    let c = g.cosine_rows(truth, hat);
    let m = g.mean(c);
    let n = g.neg(m);
    g.add_scalar(n, 1.0)
}

/// Σ squared second differences / (K(J−2)).
pub fn loss_smooth(g: &mut Graph, hat: Var) -> Result<Var> {
    let (k, j) = g.shape(hat);
    if j < 3 {
        return Err(Error::Domain(format!(
            "smoothness needs at least 3 bands, got {j}"
        )));
    }
    let a = g.slice_cols(hat, 0, j - 2);
    let b = g.slice_cols(hat, 1, j - 2);
    let c = g.slice_cols(hat, 2, j - 2);
    let ac = g.add(a, c);
    let b2 = g.scale(b, 2.0);
    let d = g.sub(ac, b2);
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (k * (j - 2)) as f64))
}

/// Batch mean of Σ_cols (hat − truth)².
pub fn loss_sq_err(g: &mut Graph, hat: Var, truth: Var) -> Var {
    let k = g.shape(hat).0;
    let d = g.sub(hat, truth);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / k as f64)
}

/// (1/K)·Σ_k Σ_j [log σ² + (hat − truth)²/σ²].
pub fn loss_hetero_nll(g: &mut Graph, truth: Var, hat: Var, sigma: Var) -> Var {
    let k = g.shape(hat).0;
    let d = g.sub(hat, truth);
    let r = g.div(d, sigma);
    let r2 = g.square(r);
    let ls = g.log(sigma);
    let l2 = g.scale(ls, 2.0);
    let t = g.add(l2, r2);
    let s = g.sum(t);
    g.scale(s, 1.0 / k as f64)
}

/// Mean over the batch of ‖coef⊙ε̂ + offset − target‖₂ (squared when `squared`).
pub fn loss_propagation(
    g: &mut Graph,
    eps_hat: Var,
    coef: Var,
    offset: Var,
    target: Var,
    squared: bool,
) -> Var {
    let p = g.mul(coef, eps_hat);
    let q = g.add(p, offset);
    let d = g.sub(q, target);
    if squared {
        let sq = g.square(d);
        let s = g.sum_cols(sq);
        g.mean(s)
    } else {
        let n = g.norm_rows(d);
        g.mean(n)
    }
}

/// Batch mean of Σ_i ½(μ² + σ² − 1 − log σ²).
pub fn kl_diag_gaussian(g: &mut Graph, mu: Var, sigma: Var) -> Var {
    let k = g.shape(mu).0;
    let m2 = g.square(mu);
    let s2 = g.square(sigma);
    let ls = g.log(sigma);
    let l2 = g.scale(ls, 2.0);
    let a = g.add(m2, s2);
    let b = g.sub(a, l2);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    g.scale(s, 0.5 / k as f64)
}

/// Flow-corrected KL(q_K‖N(0, I)) estimated on the batch draws: the closed-form KL of q0,
/// minus the mean log-determinant, plus the mean of ½‖z_K‖² − ½‖z0‖² (the prior evaluated
/// where the flow moved each draw). The last term vanishes for the identity flow.
pub fn loss_regularization(g: &mut Graph, kl: Var, log_det: Var, z0: Var, zk: Var) -> Var {
    let m = g.mean(log_det);
    let base = g.sub(kl, m);
    if z0 == zk {
        return base;
    }
    let a = g.square(zk);
    let b = g.square(z0);
    let d = g.sub(a, b);
    let s = g.sum_cols(d);
    let sm = g.mean(s);
    let shift = g.scale(sm, 0.5);
    g.add(base, shift)
}

pub fn kl_value(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

/// Σ_j log N(x_j; m_j, s_j²).
pub fn gaussian_loglik(x: &[f64], m: &[f64], s: &[f64]) -> f64 {
    x.iter()
        .zip(m)
        .zip(s)
        .map(|((x, m), s)| -0.5 * (LN_2PI + (s * s).ln() + ((x - m) / s).powi(2)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub shape: f64,
    pub smooth: f64,
    pub sdev: f64,
    pub mean: f64,
    /// Heteroscedastic likelihood of the normalized shape.
    pub hetero: f64,
    pub eps: f64,
    /// Heteroscedastic likelihood of the reconstructed radiance.
    pub radiance: f64,
}

impl LossWeights {
    pub fn with_omegas(omega1: f64, omega2: f64, omega3: f64) -> Self {
        Self {
            omega1,
            omega2,
            omega3,
            shape: 1.0,
            smooth: 1.0,
            sdev: 1.0,
            mean: 1.0,
            hetero: 1.0,
            eps: 1.0,
            radiance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega1,
            self.omega2,
            self.omega3,
            self.shape,
            self.smooth,
            self.sdev,
            self.mean,
            self.hetero,
            self.eps,
            self.radiance,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Domain(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::with_omegas(1.0, 1.0, 1.0)
    }
}

/// Training targets for one batch, in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub eps: Tensor,
    pub eps_norm: Tensor,
    pub eps_mean: Tensor,
    pub eps_sdev: Tensor,
    /// Measured radiance / scale.
    pub measured: Tensor,
    /// ατ(B − L_d)/scale.
    pub coef: Tensor,
    /// (α(τL_d + L_u) + (1−α)bg)/scale.
    pub offset: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub shape: Var,
    pub smooth: Var,
    pub sdev: Var,
    pub mean: Var,
    pub hetero_nll: Var,
    pub eps: Var,
    pub radiance_nll: Var,
    pub propagation: Var,
    pub kl: Var,
    pub log_det: Var,
    pub regularization: Var,
    pub inversion: Var,
    pub composite: Var,
    pub n_bands: usize,
}

/// Itemized loss values; `composite_nonneg` drops the two likelihood terms, which may be negative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub shape: f64,
    pub smooth: f64,
    pub sdev: f64,
    pub mean: f64,
    pub hetero_nll: f64,
    pub eps: f64,
    pub radiance_nll: f64,
    pub propagation: f64,
    pub kl: f64,
    pub log_det: f64,
    pub regularization: f64,
    pub elbo: f64,
    pub inversion: f64,
    pub composite: f64,
    pub composite_nonneg: f64,
}

impl LossBreakdown {
    fn fields_mut(&mut self) -> [&mut f64; 15] {
        [
            &mut self.shape,
            &mut self.smooth,
            &mut self.sdev,
            &mut self.mean,
            &mut self.hetero_nll,
            &mut self.eps,
            &mut self.radiance_nll,
            &mut self.propagation,
            &mut self.kl,
            &mut self.log_det,
            &mut self.regularization,
            &mut self.elbo,
            &mut self.inversion,
            &mut self.composite,
            &mut self.composite_nonneg,
        ]
    }

    /// self += w·other, field by field.
    pub fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        let mut o = *other;
        for (a, b) in self.fields_mut().into_iter().zip(o.fields_mut()) {
            *a += w * *b;
        }
    }

    pub fn scaled(mut self, w: f64) -> Self {
        for a in self.fields_mut() {
            *a *= w;
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        let mut c = *self;
        c.fields_mut().iter().all(|v| v.is_finite())
    }
}

/// Composite objective for one batch: encoder, reparameterized draw, flow (when `use_flow`),
/// decoders and every loss term.
#[allow(clippy::too_many_arguments)]
pub fn composite_forward(
    g: &mut Graph,
    net: &EpsNet,
    store: &ParamStore,
    inputs: &EpsInputs,
    targets: &BatchTargets,
    eta: &Tensor,
    weights: &LossWeights,
    use_flow: bool,
    squared_propagation: bool,
) -> Result<LossVars> {
    let iv = inputs.to_vars(g);
    let enc = net.encode_var(g, store, &iv)?;
    let lat = net.latent_var(g, store, enc.mu, enc.sigma, eta, use_flow)?;
    let dec = net.decode_var(g, store, lat.zk, enc.x1, iv.c_prop, iv.c_bg)?;

    let eps = g.constant(targets.eps.clone());
    let eps_norm = g.constant(targets.eps_norm.clone());
    let eps_mean = g.constant(targets.eps_mean.clone());
    let eps_sdev = g.constant(targets.eps_sdev.clone());
    let measured = g.constant(targets.measured.clone());
    let coef = g.constant(targets.coef.clone());
    let offset = g.constant(targets.offset.clone());

    let shape = loss_shape(g, eps_norm, dec.eps_tilde);
    let smooth = loss_smooth(g, dec.eps_hat)?;
    let sdev = loss_sq_err(g, dec.sigma_eps, eps_sdev);
    let mean = loss_sq_err(g, dec.eps_bar, eps_mean);
    let hetero_nll = loss_hetero_nll(g, eps_norm, dec.eps_tilde, dec.sigma_lambda);
    let eps_l = loss_sq_err(g, dec.eps_hat, eps);
    let radiance_nll = loss_hetero_nll(g, measured, dec.l_hat, dec.sigma_l);
    let propagation = loss_propagation(g, dec.eps_hat, coef, offset, measured, squared_propagation);
    let kl = kl_diag_gaussian(g, enc.mu, enc.sigma);
    let log_det = g.mean(lat.log_det);
    let regularization = loss_regularization(g, kl, lat.log_det, lat.z0, lat.zk);

    let w = weights;
    let terms = [
        (shape, w.shape),
        (smooth, w.smooth),
        (sdev, w.sdev),
        (mean, w.mean),
        (hetero_nll, w.hetero),
        (eps_l, w.eps),
        (radiance_nll, w.radiance),
    ];
    let mut inversion = g.scale(terms[0].0, terms[0].1);
    for &(v, k) in &terms[1..] {
        let s = g.scale(v, k);
        inversion = g.add(inversion, s);
    }
    let a = g.scale(inversion, w.omega1);
    let b = g.scale(propagation, w.omega2);
    let c = g.scale(regularization, w.omega3);
    let ab = g.add(a, b);
    let composite = g.add(ab, c);
    Ok(LossVars {
        shape,
        smooth,
        sdev,
        mean,
        hetero_nll,
        eps: eps_l,
        radiance_nll,
        propagation,
        kl,
        log_det,
        regularization,
        inversion,
        composite,
        n_bands: net.cfg.n_bands,
    })
}

/// Reads every term off an evaluated graph and fills the value-only monitors.
pub fn breakdown(g: &Graph, v: &LossVars, weights: &LossWeights) -> LossBreakdown {
    let x = |var: Var| g.value(var).item();
    let mut b = LossBreakdown {
        shape: x(v.shape),
        smooth: x(v.smooth),
        sdev: x(v.sdev),
        mean: x(v.mean),
        hetero_nll: x(v.hetero_nll),
        eps: x(v.eps),
        radiance_nll: x(v.radiance_nll),
        propagation: x(v.propagation),
        kl: x(v.kl),
        log_det: x(v.log_det),
        regularization: x(v.regularization),
        inversion: x(v.inversion),
        composite: x(v.composite),
        ..Default::default()
    };
    b.elbo = elbo_from_nll(b.hetero_nll, b.radiance_nll, b.regularization, v.n_bands);
    b.composite_nonneg = b.composite
        - weights.omega1 * (weights.hetero * b.hetero_nll + weights.radiance * b.radiance_nll);
    b
}

/// ELBO per example from the two summed heteroscedastic terms: each term equals
/// −2·log-likelihood − r·log 2π.
pub fn elbo_from_nll(
    hetero_nll: f64,
    radiance_nll: f64,
    regularization: f64,
    n_bands: usize,
) -> f64 {
    let c = n_bands as f64 * LN_2PI;
    -0.5 * (hetero_nll + c) - 0.5 * (radiance_nll + c) - regularization
}

/// ELBO from plain values, averaged over the draws: reconstruction log-likelihoods of the shape
/// and radiance branches minus the flow-corrected KL.
pub fn elbo_value(
    shape_truth: &[f64],
    radiance_truth: &[f64],
    mu: &[f64],
    sigma: &[f64],
    draws: &[(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)],
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Domain("ELBO needs at least one draw".into()));
    }
    let n = draws.len() as f64;
    let mut recon = 0.0;
    let mut ld = 0.0;
    for (eps_tilde, sigma_lambda, l_hat, sigma_l, log_det) in draws {
        recon += gaussian_loglik(shape_truth, eps_tilde, sigma_lambda)
            + gaussian_loglik(radiance_truth, l_hat, sigma_l);
        ld += log_det;
    }
    Ok(recon / n - (kl_value(mu, sigma) - ld / n))
}
