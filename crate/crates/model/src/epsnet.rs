//! The conditioned latent-variable emissivity model and its Monte-Carlo posterior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use specret_core::distribution::EmissivityDistribution;
use specret_core::rng::derive_seed;
use specret_core::spectra::softclamp_scalar;
use specret_core::{EmissivitySpectrum, Error, Result};
use specret_nn::graph::Graph;
use specret_nn::layers::geometric_lengths;
use specret_nn::{
    transformed_log_density, Activation, AttentionConfig, CrossAttention, FlowConfig, FlowModel,
    FnoStack, Mlp, MlpConfig, ParamStore, Tensor, Var,
};

use crate::condnets::{SceneEstimate, DEFAULT_RADIANCE_SCALE};

/// Lower bound added to every softplus standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Lower bound of the per-band variance heads, which enter a log-likelihood.
pub const BAND_SIGMA_FLOOR: f64 = 1e-3;
/// Draws per decoder pass when sampling a posterior.
const SAMPLE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsNetConfig {
    pub n_bands: usize,
    pub d_z: usize,
    pub d_prop: usize,
    pub d_bg: usize,
    pub n_blocks: usize,
    pub block_layers: usize,
    pub max_modes: usize,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
    pub scale_hidden: usize,
    pub scale_layers: usize,
    pub variance_hidden: usize,
    pub variance_layers: usize,
    pub flow: FlowConfig,
    pub radiance_scale: f64,
    /// Whitened radiance is divided by this before entering the network.
    pub whitened_scale: f64,
    /// When false, scene curves and codes are replaced by zeros.
    pub conditioned: bool,
    /// Posterior samples add the per-band likelihood noise σ_λ⊙ξ to the decoded shape.
    pub likelihood_noise: bool,
}

impl EpsNetConfig {
    pub fn new(n_bands: usize, d_z: usize) -> Self {
        Self {
            n_bands,
            d_z,
            d_prop: 12,
            d_bg: 12,
            n_blocks: 4,
            block_layers: 4,
            max_modes: 16,
            encoder_activation: Activation::Sigmoid,
            decoder_activation: Activation::Swish,
            scale_hidden: 64,
            scale_layers: 5,
            variance_hidden: 64,
            variance_layers: 5,
            flow: FlowConfig::new(d_z),
            radiance_scale: DEFAULT_RADIANCE_SCALE,
            whitened_scale: 1.0,
            conditioned: true,
            likelihood_noise: true,
        }
    }

    pub fn d_c(&self) -> usize {
        self.d_prop + self.d_bg
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.d_z % 2 != 0 {
            return Err(Error::Domain(format!(
                "latent dimension {} must be even",
                self.d_z
            )));
        }
        if self.flow.d_z != self.d_z {
            return Err(Error::Domain(
                "flow latent dimension differs from d_z".into(),
            ));
        }
        if self.d_prop != self.d_bg {
            return Err(Error::Domain(
                "conditioning codes must share one width to act as attention keys".into(),
            ));
        }
        if self.n_bands < 3 || self.n_blocks == 0 {
            return Err(Error::Domain("need at least 3 bands and one block".into()));
        }
        if !(self.radiance_scale > 0.0 && self.whitened_scale > 0.0) {
            return Err(Error::Domain("input scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpsNet {
    pub cfg: EpsNetConfig,
    pub input_ca: CrossAttention,
    pub encoder: FnoStack,
    pub flow: FlowModel,
    pub latent_ca: CrossAttention,
    pub dec_eps: FnoStack,
    pub dec_l: FnoStack,
    pub scale_net: Mlp,
    pub variance_net: Mlp,
}

#[derive(Debug, Clone)]
pub struct EpsNetModel {
    pub net: EpsNet,
    pub params: ParamStore,
}

/// Network-unit inputs for a batch; 1-row tensors are shared by every row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsInputs {
    pub l: Tensor,
    pub lw: Tensor,
    /// τ, L_u, L_d, B, L̂_bg.
    pub keys: [Tensor; 5],
    pub c_prop: Tensor,
    pub c_bg: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub l: Var,
    pub lw: Var,
    pub keys: [Var; 5],
    pub c_prop: Var,
    pub c_bg: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOut {
    /// Fused input after cross-attention, B×r.
    pub x1: Var,
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LatentOut {
    pub z0: Var,
    pub zk: Var,
    /// Per-row Σ log-det, B×1.
    pub log_det: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOut {
    pub eps_tilde: Var,
    pub sigma_lambda: Var,
    pub eps_bar: Var,
    pub sigma_eps: Var,
    /// softclamp(σ̂·ε̃̂ + ε̄̂, 0, 1).
    pub eps_hat: Var,
    pub l_hat: Var,
    pub sigma_l: Var,
}

/// Scene curves (network units) for the five attention keys.
pub fn scene_keys(scene: &SceneEstimate, radiance_scale: f64) -> [Vec<f64>; 5] {
    let a = &scene.atm_hat;
    let sc = |v: &[f64]| v.iter().map(|x| x / radiance_scale).collect::<Vec<f64>>();
    [
        a.tau.clone(),
        sc(&a.upwelling),
        sc(&a.downwelling),
        sc(&a.blackbody),
        sc(scene.bg_hat.values()),
    ]
}

impl EpsInputs {
    /// One-row inputs for a single pixel; zeroes the scene when the model is unconditioned.
    pub fn single(
        cfg: &EpsNetConfig,
        l: &[f64],
        lw: &[f64],
        scene: &SceneEstimate,
    ) -> Result<Self> {
        Self::batch(cfg, &[l.to_vec()], &[lw.to_vec()], &[scene])
    }

    pub fn batch(
        cfg: &EpsNetConfig,
        l: &[Vec<f64>],
        lw: &[Vec<f64>],
        scenes: &[&SceneEstimate],
    ) -> Result<Self> {
        let b = l.len();
        if lw.len() != b || scenes.len() != b || b == 0 {
            return Err(Error::Shape(
                "batch inputs must share a nonzero row count".into(),
            ));
        }
        let r = cfg.n_bands;
        for row in l.iter().chain(lw) {
            if row.len() != r {
                return Err(Error::Shape(format!(
                    "radiance with {} bands, model expects {r}",
                    row.len()
                )));
            }
        }
        for s in scenes {
            if s.n_bands() != r || s.c_prop.len() != cfg.d_prop || s.c_bg.len() != cfg.d_bg {
                return Err(Error::Shape(
                    "scene estimate does not match the model".into(),
                ));
            }
        }
        let gather = |f: &dyn Fn(usize) -> Vec<f64>, cols: usize| -> Tensor {
            if !cfg.conditioned {
                return Tensor::zeros(b, cols);
            }
            Tensor::new(b, cols, (0..b).flat_map(f).collect())
        };
        let keys_of: Vec<[Vec<f64>; 5]> = scenes
            .iter()
            .map(|s| scene_keys(s, cfg.radiance_scale))
            .collect();
        let keys = std::array::from_fn(|k| gather(&|i| keys_of[i][k].clone(), r));
        let s = cfg.radiance_scale;
        let w = cfg.whitened_scale;
        Ok(Self {
            l: Tensor::new(b, r, l.iter().flatten().map(|v| v / s).collect()),
            lw: Tensor::new(b, r, lw.iter().flatten().map(|v| v / w).collect()),
            keys,
            c_prop: gather(&|i| scenes[i].c_prop.clone(), cfg.d_prop),
            c_bg: gather(&|i| scenes[i].c_bg.clone(), cfg.d_bg),
        })
    }

    pub fn rows(&self) -> usize {
        self.l.rows
    }

    pub fn to_vars(&self, g: &mut Graph) -> InputVars {
        InputVars {
            l: g.constant(self.l.clone()),
            lw: g.constant(self.lw.clone()),
            keys: std::array::from_fn(|k| g.constant(self.keys[k].clone())),
            c_prop: g.constant(self.c_prop.clone()),
            c_bg: g.constant(self.c_bg.clone()),
        }
    }
}

fn positive(g: &mut Graph, x: Var, floor: f64) -> Var {
    let s = g.softplus(x);
    g.add_scalar(s, floor)
}

impl EpsNet {
    pub fn new(store: &mut ParamStore, cfg: EpsNetConfig) -> Result<Self> {
        cfg.validate()?;
        let (r, dz, dc) = (cfg.n_bands, cfg.d_z, cfg.d_c());
        let input_ca = CrossAttention::new(
            store,
            "attention/input",
            AttentionConfig {
                query_dim: r,
                key_dim: r,
                model_dim: r,
                aggregate_mean: true,
            },
        )?;
        let encoder = FnoStack::new(
            store,
            "encoder",
            &geometric_lengths(r, 2 * dz, cfg.n_blocks),
            cfg.max_modes,
            cfg.block_layers,
            cfg.encoder_activation,
        )?;
        let flow = FlowModel::new(store, "flow", cfg.flow)?;
        let latent_ca = CrossAttention::new(
            store,
            "attention/latent",
            AttentionConfig {
                query_dim: dz,
                key_dim: cfg.d_prop,
                model_dim: dz,
                aggregate_mean: false,
            },
        )?;
        let dec_eps = FnoStack::new(
            store,
            "dec_eps",
            &geometric_lengths(dz, r, cfg.n_blocks),
            cfg.max_modes,
            cfg.block_layers,
            cfg.decoder_activation,
        )?;
        let dec_l = FnoStack::new(
            store,
            "dec_L",
            &geometric_lengths(dz, 2 * r, cfg.n_blocks),
            cfg.max_modes,
            cfg.block_layers,
            cfg.decoder_activation,
        )?;
        let scale_net = Mlp::new(
            store,
            "scale_net",
            MlpConfig::new(
                dz + dc,
                cfg.scale_hidden,
                2,
                cfg.scale_layers,
                Activation::Tanh,
            ),
        )?;
        let variance_net = Mlp::new(
            store,
            "variance_net",
            MlpConfig::new(
                r + dz + dc,
                cfg.variance_hidden,
                r,
                cfg.variance_layers,
                Activation::Tanh,
            ),
        )?;
        // both likelihood heads start at σ = softplus(0) instead of wherever the init lands
        dec_l.zero_output(store);
        variance_net.zero_output(store);
        Ok(Self {
            cfg,
            input_ca,
            encoder,
            flow,
            latent_ca,
            dec_eps,
            dec_l,
            scale_net,
            variance_net,
        })
    }

    /// Queries {L, L_w} attend to the scene curves; each query keeps a residual path and the two
    /// results are averaged before the encoder blocks.
    pub fn encode_var(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inp: &InputVars,
    ) -> Result<EncoderOut> {
        let (_, outs) = self
            .input_ca
            .attend(g, store, &[inp.l, inp.lw], &inp.keys)?;
        let a = g.add(inp.l, outs[0]);
        let b = g.add(inp.lw, outs[1]);
        let s = g.add(a, b);
        let x1 = g.scale(s, 0.5);
        let h = self.encoder.forward(g, store, x1)?;
        let dz = self.cfg.d_z;
        let mu = g.slice_cols(h, 0, dz);
        let raw = g.slice_cols(h, dz, dz);
        let sigma = positive(g, raw, SIGMA_FLOOR);
        Ok(EncoderOut { x1, mu, sigma })
    }

    /// z0 = μ + σ⊙η, then the flow when `use_flow` (otherwise z_K = z0 with zero log-det).
    pub fn latent_var(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mu: Var,
        sigma: Var,
        eta: &Tensor,
        use_flow: bool,
    ) -> Result<LatentOut> {
        let e = g.constant(eta.clone());
        let se = g.mul(sigma, e);
        let z0 = g.add(mu, se);
        if use_flow {
            let (zk, log_det) = self.flow.forward(g, store, z0)?;
            Ok(LatentOut { z0, zk, log_det })
        } else {
            let rows = g.shape(z0).0;
            let log_det = g.constant(Tensor::zeros(rows, 1));
            Ok(LatentOut {
                z0,
                zk: z0,
                log_det,
            })
        }
    }

    pub fn decode_var(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        zk: Var,
        x1: Var,
        c_prop: Var,
        c_bg: Var,
    ) -> Result<DecoderOut> {
        let r = self.cfg.n_bands;
        let att = self
            .latent_ca
            .forward_tokens(g, store, &[zk], &[c_prop, c_bg])?;
        let x = g.add(zk, att[0]);
        let eps_tilde = self.dec_eps.forward(g, store, x)?;
        let dl = self.dec_l.forward(g, store, x)?;
        let l_hat = g.slice_cols(dl, 0, r);
        let sl = g.slice_cols(dl, r, r);
        let sigma_l = positive(g, sl, BAND_SIGMA_FLOOR);
        let zc = g.concat_cols(&[zk, c_prop, c_bg]);
        let sc = self.scale_net.forward(g, store, zc)?;
        let eps_bar = g.slice_cols(sc, 0, 1);
        let sraw = g.slice_cols(sc, 1, 1);
        let sigma_eps = positive(g, sraw, SIGMA_FLOOR);
        let vin = g.concat_cols(&[x1, zk, c_prop, c_bg]);
        let v = self.variance_net.forward(g, store, vin)?;
        let sigma_lambda = positive(g, v, BAND_SIGMA_FLOOR);
        let scaled = g.mul(eps_tilde, sigma_eps);
        let shifted = g.add(scaled, eps_bar);
        let eps_hat = g.softclamp(shifted, 0.0, 1.0);
        Ok(DecoderOut {
            eps_tilde,
            sigma_lambda,
            eps_bar,
            sigma_eps,
            eps_hat,
            l_hat,
            sigma_l,
        })
    }
}

/// Latent draws for one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub z0: Vec<f64>,
    pub zk: Vec<f64>,
    pub sum_log_det: f64,
    pub q0_log_density: f64,
}

impl PosteriorDraw {
    pub fn log_density(&self) -> f64 {
        transformed_log_density(self.q0_log_density, self.sum_log_det)
    }
}

/// log N(z; μ, diag σ²).
pub fn diag_gaussian_log_density(z: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| {
            let u = (z - m) / s;
            -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - 0.5 * u * u
        })
        .sum()
}

/// Standard-normal matrix from a seed.
pub fn gaussian_noise(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )
}

/// z0 = μ + σ⊙η with seeded η, before the flow.
pub fn reparameterize(mu: &[f64], sigma: &[f64], seed: u64) -> Result<PosteriorDraw> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape("mu and sigma lengths differ".into()));
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let eta = gaussian_noise(1, mu.len(), seed);
    let z0: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .zip(&eta.data)
        .map(|((m, s), e)| m + s * e)
        .collect();
    let q0 = diag_gaussian_log_density(&z0, mu, sigma);
    Ok(PosteriorDraw {
        zk: z0.clone(),
        z0,
        sum_log_det: 0.0,
        q0_log_density: q0,
    })
}

/// ε̂ = softclamp(σ̂·ε̃̂ + ε̄̂, 0, 1).
pub fn assemble_scaled(
    eps_tilde: &[f64],
    eps_bar: f64,
    sigma_eps: f64,
) -> Result<EmissivitySpectrum> {
    if !(sigma_eps >= 0.0) {
        return Err(Error::Domain(format!(
            "scale sdev {sigma_eps} must be nonnegative"
        )));
    }
    EmissivitySpectrum::new(
        eps_tilde
            .iter()
            .map(|t| softclamp_scalar(sigma_eps * t + eps_bar, 0.0, 1.0))
            .collect(),
    )
}

/// Decoder outputs for one observation and one latent draw, as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedDraw {
    pub eps_tilde: Vec<f64>,
    pub sigma_lambda: Vec<f64>,
    pub eps_bar: f64,
    pub sigma_eps: f64,
    pub l_hat: Vec<f64>,
    pub sigma_l: Vec<f64>,
}

/// Emissivity samples with the draws that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub distribution: EmissivityDistribution,
    pub draws: Vec<PosteriorDraw>,
}

impl EpsNetModel {
    pub fn new(cfg: EpsNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        let net = EpsNet::new(&mut params, cfg)?;
        Ok(Self { net, params })
    }

    pub fn cfg(&self) -> &EpsNetConfig {
        &self.net.cfg
    }

    /// Sets the scale head's output bias so an untrained model predicts level `mean` and spread
    /// `sdev`; keeps early outputs inside the identity band of the final clamp.
    pub fn calibrate_scale_head(&mut self, mean: f64, sdev: f64) -> Result<()> {
        if !(sdev > SIGMA_FLOOR && mean.is_finite()) {
            return Err(Error::Domain(format!(
                "cannot centre the scale head on ({mean}, {sdev})"
            )));
        }
        let last = self
            .net
            .scale_net
            .layers
            .last()
            .expect("scale head has layers");
        let b = last
            .b
            .ok_or_else(|| Error::Domain("scale head has no bias".into()))?;
        let t = self.params.get_mut(b);
        let s = sdev - SIGMA_FLOOR;
        t.data[0] = mean;
        // softplus⁻¹
        t.data[1] = s + (-(-s).exp_m1()).ln();
        Ok(())
    }

    /// (μ_φ, σ_φ) for one pixel.
    pub fn encode(
        &self,
        l: &[f64],
        lw: &[f64],
        scene: &SceneEstimate,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let inp = EpsInputs::single(&self.net.cfg, l, lw, scene)?;
        let mut g = Graph::new();
        let v = inp.to_vars(&mut g);
        let e = self.net.encode_var(&mut g, &self.params, &v)?;
        Ok((g.value(e.mu).data.clone(), g.value(e.sigma).data.clone()))
    }

    /// Pushes a reparameterized draw through the flow.
    pub fn push_forward(&self, draw: &PosteriorDraw) -> Result<PosteriorDraw> {
        let (zk, ld) = self.net.flow.forward_vec(&self.params, &draw.z0)?;
        Ok(PosteriorDraw {
            zk,
            sum_log_det: ld,
            ..draw.clone()
        })
    }

    /// Both decoders for one latent draw of one pixel.
    pub fn decode(
        &self,
        draw: &PosteriorDraw,
        l: &[f64],
        lw: &[f64],
        scene: &SceneEstimate,
    ) -> Result<DecodedDraw> {
        let inp = EpsInputs::single(&self.net.cfg, l, lw, scene)?;
        let mut g = Graph::new();
        let v = inp.to_vars(&mut g);
        let e = self.net.encode_var(&mut g, &self.params, &v)?;
        let zk = g.constant(Tensor::row(&draw.zk));
        let d = self
            .net
            .decode_var(&mut g, &self.params, zk, e.x1, v.c_prop, v.c_bg)?;
        Ok(DecodedDraw {
            eps_tilde: g.value(d.eps_tilde).data.clone(),
            sigma_lambda: g.value(d.sigma_lambda).data.clone(),
            eps_bar: g.value(d.eps_bar).item(),
            sigma_eps: g.value(d.sigma_eps).item(),
            l_hat: g
                .value(d.l_hat)
                .data
                .iter()
                .map(|v| v * self.net.cfg.radiance_scale)
                .collect(),
            sigma_l: g
                .value(d.sigma_l)
                .data
                .iter()
                .map(|v| v * self.net.cfg.radiance_scale)
                .collect(),
        })
    }

    /// n independent draws through encode → reparameterize → flow → decode → assemble.
    pub fn sample_posterior(
        &self,
        l: &[f64],
        lw: &[f64],
        scene: &SceneEstimate,
        n: usize,
        seed: u64,
    ) -> Result<PosteriorSample> {
        if n < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 posterior samples, got {n}"
            )));
        }
        let inp = EpsInputs::single(&self.net.cfg, l, lw, scene)?;
        let dz = self.net.cfg.d_z;
        let mut scaled = Vec::with_capacity(n);
        let mut normalized = Vec::with_capacity(n);
        let mut draws = Vec::with_capacity(n);
        for (ci, start) in (0..n).step_by(SAMPLE_CHUNK).enumerate() {
            let m = SAMPLE_CHUNK.min(n - start);
            let mut g = Graph::new();
            let v = inp.to_vars(&mut g);
            let e = self.net.encode_var(&mut g, &self.params, &v)?;
            let eta = gaussian_noise(m, dz, derive_seed(seed, ci as u64));
            let lat = self
                .net
                .latent_var(&mut g, &self.params, e.mu, e.sigma, &eta, true)?;
            let d = self
                .net
                .decode_var(&mut g, &self.params, lat.zk, e.x1, v.c_prop, v.c_bg)?;
            let (mu, sigma) = (g.value(e.mu).data.clone(), g.value(e.sigma).data.clone());
            let (z0, zk, ld) = (g.value(lat.z0), g.value(lat.zk), g.value(lat.log_det));
            let (et, sl) = (g.value(d.eps_tilde), g.value(d.sigma_lambda));
            let (eb, se) = (g.value(d.eps_bar), g.value(d.sigma_eps));
            let xi = self.net.cfg.likelihood_noise.then(|| {
                gaussian_noise(
                    m,
                    et.cols,
                    derive_seed(derive_seed(seed, u64::MAX), ci as u64),
                )
            });
            for i in 0..m {
                let z0i = z0.row_slice(i).to_vec();
                draws.push(PosteriorDraw {
                    q0_log_density: diag_gaussian_log_density(&z0i, &mu, &sigma),
                    z0: z0i,
                    zk: zk.row_slice(i).to_vec(),
                    sum_log_det: ld.data[i],
                });
                let mut shape = et.row_slice(i).to_vec();
                if let Some(xi) = &xi {
                    for ((t, s), x) in shape.iter_mut().zip(sl.row_slice(i)).zip(xi.row_slice(i)) {
                        *t += s * x;
                    }
                }
                scaled.push(
                    assemble_scaled(&shape, eb.data[i], se.data[i])?
                        .values()
                        .to_vec(),
                );
                normalized.push(shape);
            }
        }
        let distribution = EmissivityDistribution::from_samples(scaled, normalized)?;
        Ok(PosteriorSample {
            distribution,
            draws,
        })
    }
}
