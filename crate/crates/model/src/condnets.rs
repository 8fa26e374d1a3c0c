//! Scene estimators: the deep-set atmosphere network and the background autoencoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specret_core::cube::{sample_pixel_sets, HsiCube, PixelSet};
use specret_core::rng::{derive_named, derive_seed};
use specret_core::synth::Scene;
use specret_core::{AtmosphereParams, Error, RadianceSpectrum, Result};
use specret_nn::graph::Graph;
use specret_nn::{
    adam_step, Activation, AdamConfig, AdamState, Mlp, MlpConfig, ParamStore, Tensor, Var,
};

/// Radiances are divided by this many microflicks before entering a network.
pub const DEFAULT_RADIANCE_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropNetConfig {
    pub n_bands: usize,
    pub d_prop: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub transform_layers: usize,
    pub head_layers: usize,
    pub activation: Activation,
    pub radiance_scale: f64,
}

impl PropNetConfig {
    pub fn new(n_bands: usize) -> Self {
        Self {
            n_bands,
            d_prop: 12,
            hidden: 128,
            encoder_layers: 5,
            transform_layers: 5,
            head_layers: 3,
            activation: Activation::Tanh,
            radiance_scale: DEFAULT_RADIANCE_SCALE,
        }
    }
}

/// E_prop, m_prop and the four curve heads (τ, L_u, L_d, B).
#[derive(Debug, Clone)]
pub struct PropNet {
    pub cfg: PropNetConfig,
    pub encoder: Mlp,
    pub transform: Mlp,
    pub heads: [Mlp; 4],
}

#[derive(Debug, Clone)]
pub struct PropNetModel {
    pub net: PropNet,
    pub params: ParamStore,
}

pub const CURVE_NAMES: [&str; 4] = ["tau", "upwelling", "downwelling", "blackbody"];

fn rows_tensor(rows: &[Vec<f64>], scale: f64) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::new(
        rows.len(),
        cols,
        rows.iter().flatten().map(|v| v / scale).collect(),
    )
}

impl PropNet {
    pub fn new(store: &mut ParamStore, cfg: PropNetConfig) -> Result<Self> {
        let (r, h, d, a) = (cfg.n_bands, cfg.hidden, cfg.d_prop, cfg.activation);
        let encoder = Mlp::new(
            store,
            "propnet/encoder",
            MlpConfig::new(r, h, d, cfg.encoder_layers, a),
        )?;
        let transform = Mlp::new(
            store,
            "propnet/transform",
            MlpConfig::new(d, h, d, cfg.transform_layers, a),
        )?;
        let head = |store: &mut ParamStore, i: usize| {
            Mlp::new(
                store,
                &format!("propnet/head_{}", CURVE_NAMES[i]),
                MlpConfig::new(d, h, r, cfg.head_layers, a),
            )
        };
        let heads = [
            head(store, 0)?,
            head(store, 1)?,
            head(store, 2)?,
            head(store, 3)?,
        ];
        Ok(Self {
            cfg,
            encoder,
            transform,
            heads,
        })
    }

    /// Codes of several pixel sets given as one stacked matrix (scaled radiance) and set sizes.
    pub fn encode_stacked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stacked: Var,
        sizes: &[usize],
    ) -> Result<Var> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Domain("pixel sets must be nonempty".into()));
        }
        let e = self.encoder.forward(g, store, stacked)?;
        let mut pooled = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            let part = g.slice_rows(e, start, n);
            pooled.push(g.mean_rows(part));
            start += n;
        }
        let p = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_rows(&pooled)
        };
        self.transform.forward(g, store, p)
    }

    /// Curves in network units: τ in (0, 1), radiance curves divided by the radiance scale.
    pub fn decode_var(&self, g: &mut Graph, store: &ParamStore, c: Var) -> Result<[Var; 4]> {
        let mut out = [c; 4];
        for (i, head) in self.heads.iter().enumerate() {
            let h = head.forward(g, store, c)?;
            out[i] = if i == 0 { g.sigmoid(h) } else { g.softplus(h) };
        }
        Ok(out)
    }

    pub fn zero_decoders(&self, store: &mut ParamStore) {
        for h in &self.heads {
            h.zero_all(store);
        }
    }
}

impl PropNetModel {
    pub fn new(cfg: PropNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        let net = PropNet::new(&mut params, cfg)?;
        Ok(Self { net, params })
    }

    pub fn encode(&self, set: &PixelSet) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::Domain("empty pixel set".into()));
        }
        check_width(&set.spectra, self.net.cfg.n_bands)?;
        let mut g = Graph::new();
        let x = g.constant(rows_tensor(&set.spectra, self.net.cfg.radiance_scale));
        let c = self
            .net
            .encode_stacked(&mut g, &self.params, x, &[set.len()])?;
        Ok(g.value(c).data.clone())
    }

    pub fn decode(&self, c_prop: &[f64]) -> Result<AtmosphereParams> {
        if c_prop.len() != self.net.cfg.d_prop {
            return Err(Error::Shape(format!(
                "code length {} vs {}",
                c_prop.len(),
                self.net.cfg.d_prop
            )));
        }
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(c_prop));
        let curves = self.net.decode_var(&mut g, &self.params, c)?;
        let s = self.net.cfg.radiance_scale;
        let v = |i: usize, k: f64| {
            g.value(curves[i])
                .data
                .iter()
                .map(|x| x * k)
                .collect::<Vec<f64>>()
        };
        AtmosphereParams::new(v(0, 1.0), v(1, s), v(2, s), v(3, s), None)
    }
}

fn check_width(rows: &[Vec<f64>], r: usize) -> Result<()> {
    if let Some(bad) = rows.iter().find(|x| x.len() != r) {
        return Err(Error::Shape(format!(
            "spectrum with {} bands, model expects {r}",
            bad.len()
        )));
    }
    Ok(())
}

/// Atmosphere curves in network units, one row per labelled set.
pub fn atmosphere_rows(atms: &[&AtmosphereParams], radiance_scale: f64) -> [Tensor; 4] {
    let build = |i: usize| {
        let k = if i == 0 { 1.0 } else { radiance_scale };
        let rows: Vec<Vec<f64>> = atms.iter().map(|a| a.curves()[i].to_vec()).collect();
        rows_tensor(&rows, k)
    };
    [build(0), build(1), build(2), build(3)]
}

/// f_p(0.5; 𝒜, α = 1) = τ(B + L_d)/2 + L_u on network-unit curves.
fn half_emissivity_radiance(g: &mut Graph, c: [Var; 4]) -> Var {
    let [tau, up, down, bb] = c;
    let s = g.add(bb, down);
    let h = g.scale(s, 0.5);
    let t = g.mul(tau, h);
    g.add(t, up)
}

/// (1−β)·Σ_curves MSE + β·MSE of the ε = 0.5 propagated radiance.
pub fn propnet_loss(g: &mut Graph, pred: [Var; 4], truth: &[Tensor; 4], beta: f64) -> Var {
    let t: Vec<Var> = truth.iter().map(|x| g.constant(x.clone())).collect();
    let mut curve = None;
    for i in 0..4 {
        let d = g.sub(pred[i], t[i]);
        let sq = g.square(d);
        let m = g.mean_rows(sq);
        let m = g.mean(m);
        curve = Some(match curve {
            None => m,
            Some(a) => g.add(a, m),
        });
    }
    let curve = curve.expect("four curves");
    let fp_hat = half_emissivity_radiance(g, pred);
    let fp_true = half_emissivity_radiance(g, [t[0], t[1], t[2], t[3]]);
    let d = g.sub(fp_hat, fp_true);
    let sq = g.square(d);
    let prop = g.mean(sq);
    let a = g.scale(curve, 1.0 - beta);
    let b = g.scale(prop, beta);
    g.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BgNetConfig {
    pub n_bands: usize,
    pub d_bg: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub activation: Activation,
    pub radiance_scale: f64,
}

impl BgNetConfig {
    pub fn new(n_bands: usize) -> Self {
        Self {
            n_bands,
            d_bg: 12,
            hidden: 128,
            encoder_layers: 5,
            decoder_layers: 3,
            activation: Activation::Tanh,
            radiance_scale: DEFAULT_RADIANCE_SCALE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BgNet {
    pub cfg: BgNetConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct BgNetModel {
    pub net: BgNet,
    pub params: ParamStore,
}

impl BgNet {
    pub fn new(store: &mut ParamStore, cfg: BgNetConfig) -> Result<Self> {
        let (r, h, d, a) = (cfg.n_bands, cfg.hidden, cfg.d_bg, cfg.activation);
        let encoder = Mlp::new(
            store,
            "bgnet/encoder",
            MlpConfig::new(r, h, d, cfg.encoder_layers, a),
        )?;
        let decoder = Mlp::new(
            store,
            "bgnet/decoder",
            MlpConfig::new(d, h, r, cfg.decoder_layers, a),
        )?;
        Ok(Self {
            cfg,
            encoder,
            decoder,
        })
    }

    /// (code, reconstruction) for rows of scaled background radiance.
    pub fn forward_var(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let c = self.encoder.forward(g, store, x)?;
        let h = self.decoder.forward(g, store, c)?;
        Ok((c, g.softplus(h)))
    }
}

pub fn bgnet_loss(g: &mut Graph, recon: Var, target: Var) -> Var {
    let d = g.sub(recon, target);
    let sq = g.square(d);
    g.mean(sq)
}

impl BgNetModel {
    pub fn new(cfg: BgNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        let net = BgNet::new(&mut params, cfg)?;
        Ok(Self { net, params })
    }

    pub fn forward(&self, bg_mean: &RadianceSpectrum) -> Result<(Vec<f64>, RadianceSpectrum)> {
        check_width(&[bg_mean.values().to_vec()], self.net.cfg.n_bands)?;
        let s = self.net.cfg.radiance_scale;
        let mut g = Graph::new();
        let x = g.constant(rows_tensor(&[bg_mean.values().to_vec()], s));
        let (c, y) = self.net.forward_var(&mut g, &self.params, x)?;
        let bg_hat = RadianceSpectrum::new(g.value(y).data.iter().map(|v| v * s).collect())?;
        Ok((g.value(c).data.clone(), bg_hat))
    }
}

/// Ĉ = {Â, L̂_bg} with the codes c_prop and c_bg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEstimate {
    pub atm_hat: AtmosphereParams,
    pub bg_hat: RadianceSpectrum,
    pub c_prop: Vec<f64>,
    pub c_bg: Vec<f64>,
}

impl SceneEstimate {
    pub fn c(&self) -> Vec<f64> {
        self.c_prop.iter().chain(&self.c_bg).copied().collect()
    }

    pub fn n_bands(&self) -> usize {
        self.bg_hat.len()
    }
}

/// Runs both estimators on one seeded pixel set (all pixels when the cube is smaller) and on
/// the cube's background mean.
pub fn estimate_scene(
    propnet: &PropNetModel,
    bgnet: &BgNetModel,
    cube: &HsiCube,
    bg_mean: &[f64],
    set_size: usize,
    seed: u64,
) -> Result<SceneEstimate> {
    let size = set_size.clamp(1, cube.n_pixels());
    let set = sample_pixel_sets(cube, size, 1, seed)?.remove(0);
    let c_prop = propnet.encode(&set)?;
    let atm_hat = propnet.decode(&c_prop)?;
    let (c_bg, bg_hat) = bgnet.forward(&RadianceSpectrum::new(bg_mean.to_vec())?)?;
    Ok(SceneEstimate {
        atm_hat,
        bg_hat,
        c_prop,
        c_bg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxTrainConfig {
    pub epochs: usize,
    pub lr_prop: f64,
    pub lr_bg: f64,
    pub sets_per_cube: usize,
    pub set_size: usize,
    /// Sets per optimizer step.
    pub batch_sets: usize,
    pub seed: u64,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr_prop: 9e-4,
            lr_bg: 1e-3,
            sets_per_cube: 16,
            set_size: 200,
            batch_sets: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxEpoch {
    pub epoch: usize,
    pub beta: f64,
    pub propnet_loss: f64,
    pub bgnet_loss: f64,
}

/// β rises linearly from 0 at the first epoch to 1 at the last.
pub fn beta_schedule(epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return 1.0;
    }
    (epoch as f64 / (epochs - 1) as f64).clamp(0.0, 1.0)
}

fn finite_or(loss: f64, what: &str, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "{what} loss is {loss} at epoch {epoch}"
        )));
    }
    Ok(())
}

/// Trains both estimators on the labelled scenes; returns per-epoch mean losses.
pub fn train_aux(
    propnet: &mut PropNetModel,
    bgnet: &mut BgNetModel,
    scenes: &[&Scene],
    cfg: &AuxTrainConfig,
) -> Result<Vec<AuxEpoch>> {
    if scenes.is_empty() {
        return Err(Error::Domain(
            "no training scenes for the estimators".into(),
        ));
    }
    let s_p = propnet.net.cfg.radiance_scale;
    let s_b = bgnet.net.cfg.radiance_scale;
    let adam = AdamConfig::default();
    let mut st_p = AdamState::new(&propnet.params);
    let mut st_b = AdamState::new(&bgnet.params);
    let mut report = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let beta = beta_schedule(epoch, cfg.epochs);
        let mut sets: Vec<(PixelSet, usize)> = Vec::new();
        for (ci, scene) in scenes.iter().enumerate() {
            let size = cfg.set_size.clamp(1, scene.cube.n_pixels());
            let seed = derive_seed(
                derive_seed(derive_named(cfg.seed, "aux-sets"), epoch as u64),
                ci as u64,
            );
            for set in sample_pixel_sets(&scene.cube, size, cfg.sets_per_cube, seed)? {
                sets.push((set, ci));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            derive_named(cfg.seed, "aux-order"),
            epoch as u64,
        ));
        sets.shuffle(&mut rng);
        let (mut lp, mut lb) = (0.0, 0.0);
        for batch in sets.chunks(cfg.batch_sets.max(1)) {
            let stacked: Vec<Vec<f64>> = batch
                .iter()
                .flat_map(|(s, _)| s.spectra.iter().cloned())
                .collect();
            let sizes: Vec<usize> = batch.iter().map(|(s, _)| s.len()).collect();
            let atms: Vec<&AtmosphereParams> = batch
                .iter()
                .map(|(_, ci)| &scenes[*ci].atmosphere)
                .collect();

            let mut g = Graph::new();
            let x = g.constant(rows_tensor(&stacked, s_p));
            let c = propnet
                .net
                .encode_stacked(&mut g, &propnet.params, x, &sizes)?;
            let pred = propnet.net.decode_var(&mut g, &propnet.params, c)?;
            let loss = propnet_loss(&mut g, pred, &atmosphere_rows(&atms, s_p), beta);
            let v = g.value(loss).item();
            finite_or(v, "propnet", epoch)?;
            lp += v * batch.len() as f64;
            let grads = g.backward_named(loss, Some(&propnet.params))?.into_params();
            adam_step(&mut propnet.params, &grads, &mut st_p, cfg.lr_prop, &adam)?;

            // the autoencoder reconstructs set means, which vary around each cube's background
            let means: Vec<Vec<f64>> = batch.iter().map(|(s, _)| column_mean(&s.spectra)).collect();
            let mut g = Graph::new();
            let x = g.constant(rows_tensor(&means, s_b));
            let (_, recon) = bgnet.net.forward_var(&mut g, &bgnet.params, x)?;
            let loss = bgnet_loss(&mut g, recon, x);
            let v = g.value(loss).item();
            finite_or(v, "bgnet", epoch)?;
            lb += v * batch.len() as f64;
            let grads = g.backward_named(loss, Some(&bgnet.params))?.into_params();
            adam_step(&mut bgnet.params, &grads, &mut st_b, cfg.lr_bg, &adam)?;
        }
        let n = sets.len() as f64;
        report.push(AuxEpoch {
            epoch,
            beta,
            propnet_loss: lp / n,
            bgnet_loss: lb / n,
        });
    }
    Ok(report)
}

pub fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let r = rows.first().map_or(0, Vec::len);
    let mut m = vec![0.0; r];
    for row in rows {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

/// Per-curve relative L2 error ‖â − a‖/‖a‖ in the order τ, L_u, L_d, B.
pub fn curve_errors(hat: &AtmosphereParams, truth: &AtmosphereParams) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        *o = relative_l2(hat.curves()[i], truth.curves()[i]);
    }
    out
}

pub fn relative_l2(hat: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = hat
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
