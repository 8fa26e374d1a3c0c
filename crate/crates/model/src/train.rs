//! Weight schedule, per-epoch augmentation and the EpsNet training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use specret_core::rng::{derive_named, derive_seed};
use specret_core::synth::{augment_with, GpSampler, Matern52Params, Scene, TrainingExample};
use specret_core::{normalize, propagate, EmissivitySpectrum, Error, Result};
use specret_nn::graph::Graph;
use specret_nn::{adam_step, AdamConfig, AdamState, Tensor};

use crate::condnets::SceneEstimate;
use crate::epsnet::{gaussian_noise, EpsInputs, EpsNetModel};
use crate::losses::{breakdown, composite_forward, BatchTargets, LossBreakdown, LossWeights};

/// Phase boundaries as fractions of the total epoch count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSchedule {
    pub propagation_start: f64,
    pub propagation_end: f64,
    pub regularization_start: f64,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self {
            propagation_start: 0.2,
            propagation_end: 0.4,
            regularization_start: 0.4,
        }
    }
}

impl WeightSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.propagation_start)
            && (self.propagation_start..=1.0).contains(&self.propagation_end)
            && (0.0..=1.0).contains(&self.regularization_start);
        if !ok {
            return Err(Error::Domain(format!("invalid weight schedule {self:?}")));
        }
        Ok(())
    }

    /// (ω1, ω2, ω3) at `epoch` of `epochs`.
    pub fn omegas(&self, epoch: usize, epochs: usize) -> (f64, f64, f64) {
        let e = epoch as f64;
        let total = epochs as f64;
        let (a, b) = (self.propagation_start * total, self.propagation_end * total);
        let w2 = if e >= b {
            1.0
        } else if e <= a {
            0.0
        } else {
            (e - a) / (b - a)
        };
        let w3 = if e >= self.regularization_start * total {
            1.0
        } else {
            0.0
        };
        (1.0, w2, w3)
    }
}

/// Sub-weights from `base` with the scheduled ω's.
pub fn schedule_weights(
    epoch: usize,
    epochs: usize,
    schedule: &WeightSchedule,
    base: &LossWeights,
) -> LossWeights {
    let (omega1, omega2, omega3) = schedule.omegas(epoch, epochs);
    LossWeights {
        omega1,
        omega2,
        omega3,
        ..*base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// lr_e = lr·decay^e, with `weight_decay` as decoupled L2.
    LearningRate,
    /// Constant lr; parameters shrink by (1 − decay) per unit of lr each step.
    Parameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-epoch GP perturbation of the targets; `None` trains on the stored spectra.
    pub augment: Option<Matern52Params>,
    pub weights: LossWeights,
    pub schedule: WeightSchedule,
    /// Fraction of cubes held out for validation losses.
    pub val_fraction: f64,
    pub squared_propagation: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 150,
            lr_decay: 0.99,
            weight_decay: 5e-5,
            decay_mode: DecayMode::LearningRate,
            batch_size: 64,
            seed: 0,
            augment: Some(Matern52Params::default()),
            weights: LossWeights::default(),
            schedule: WeightSchedule::default(),
            val_fraction: 0.1,
            squared_propagation: false,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Domain(
                "lr must be positive and epochs, batch_size at least 1".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Domain("decay coefficients out of range".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Domain(format!(
                "val_fraction {} not in [0, 1)",
                self.val_fraction
            )));
        }
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        self.weights.validate()?;
        self.schedule.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_mode {
            DecayMode::LearningRate => self.lr * self.lr_decay.powi(epoch as i32),
            DecayMode::Parameter => self.lr,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        let weight_decay = match self.decay_mode {
            DecayMode::LearningRate => self.weight_decay,
            DecayMode::Parameter => 1.0 - self.lr_decay,
        };
        AdamConfig {
            weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One training pixel with targets in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub scene: usize,
    pub alpha: f64,
    pub eps: Vec<f64>,
    pub eps_norm: Vec<f64>,
    pub eps_mean: f64,
    pub eps_sdev: f64,
    pub measured: Vec<f64>,
    pub whitened: Vec<f64>,
    pub bg: Vec<f64>,
}

/// Stored targets of an example.
pub fn prepare_example(scene_idx: usize, ex: &TrainingExample) -> PreparedExample {
    PreparedExample {
        scene: scene_idx,
        alpha: ex.alpha,
        eps: ex.eps.values().to_vec(),
        eps_norm: ex.eps_norm.values.clone(),
        eps_mean: ex.eps_norm.mean,
        eps_sdev: ex.eps_norm.sdev,
        measured: ex.measured.values().to_vec(),
        whitened: ex.whitened.values().to_vec(),
        bg: ex.bg.values().to_vec(),
    }
}

/// Replaces the target with a GP-perturbed copy and re-synthesizes the pixel: clean radiance
/// from the true atmosphere, the example's stored sensor noise, then the cube's whitening.
pub fn augment_example(
    scene_idx: usize,
    scene: &Scene,
    ex: &TrainingExample,
    sampler: &GpSampler,
    seed: u64,
) -> Result<PreparedExample> {
    let aug = augment_with(sampler, &ex.eps, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let clean = propagate(&aug.scaled, &scene.atmosphere, ex.alpha, &ex.bg)?;
    let measured: Vec<f64> = clean
        .values()
        .iter()
        .zip(ex.noise())
        .map(|(l, n)| l + n)
        .collect();
    let whitened = scene.whitening.whiten_slice(&measured);
    Ok(PreparedExample {
        scene: scene_idx,
        alpha: ex.alpha,
        eps: aug.scaled.values().to_vec(),
        eps_norm: aug.normalized.values.clone(),
        eps_mean: aug.normalized.mean,
        eps_sdev: aug.normalized.sdev,
        measured,
        whitened,
        bg: ex.bg.values().to_vec(),
    })
}

/// Network inputs and targets for a batch of prepared examples.
pub fn build_batch(
    model: &EpsNetModel,
    scenes: &[&Scene],
    estimates: &[SceneEstimate],
    items: &[&PreparedExample],
) -> Result<(EpsInputs, BatchTargets)> {
    let cfg = model.cfg();
    let s = cfg.radiance_scale;
    let r = cfg.n_bands;
    let l: Vec<Vec<f64>> = items.iter().map(|e| e.measured.clone()).collect();
    let lw: Vec<Vec<f64>> = items.iter().map(|e| e.whitened.clone()).collect();
    let est: Vec<&SceneEstimate> = items.iter().map(|e| &estimates[e.scene]).collect();
    let inputs = EpsInputs::batch(cfg, &l, &lw, &est)?;
    let k = items.len();
    let mut coef = Vec::with_capacity(k * r);
    let mut offset = Vec::with_capacity(k * r);
    for e in items {
        let atm = &scenes[e.scene].atmosphere;
        for j in 0..r {
            let (tau, lu, ld, b) = (
                atm.tau[j],
                atm.upwelling[j],
                atm.downwelling[j],
                atm.blackbody[j],
            );
            coef.push(e.alpha * tau * (b - ld) / s);
            offset.push((e.alpha * (tau * ld + lu) + (1.0 - e.alpha) * e.bg[j]) / s);
        }
    }
    let flat = |f: &dyn Fn(&PreparedExample) -> &[f64]| {
        items
            .iter()
            .flat_map(|e| f(e).iter().copied())
            .collect::<Vec<f64>>()
    };
    let targets = BatchTargets {
        eps: Tensor::new(k, r, flat(&|e| &e.eps)),
        eps_norm: Tensor::new(k, r, flat(&|e| &e.eps_norm)),
        eps_mean: Tensor::new(k, 1, items.iter().map(|e| e.eps_mean).collect()),
        eps_sdev: Tensor::new(k, 1, items.iter().map(|e| e.eps_sdev).collect()),
        measured: Tensor::new(
            k,
            r,
            flat(&|e| &e.measured).into_iter().map(|v| v / s).collect(),
        ),
        coef: Tensor::new(k, r, coef),
        offset: Tensor::new(k, r, offset),
    };
    Ok((inputs, targets))
}

/// Labelled scenes with their estimated conditioning and a by-cube train/validation split.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub scenes: Vec<&'a Scene>,
    pub estimates: Vec<SceneEstimate>,
    /// (scene, example) pairs.
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
}

impl<'a> TrainData<'a> {
    /// Holds out round(val_fraction·n) cubes (at least one when the fraction is positive and more
    /// than one cube exists), chosen by a seeded shuffle.
    pub fn new(
        scenes: Vec<&'a Scene>,
        estimates: Vec<SceneEstimate>,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if scenes.len() != estimates.len() {
            return Err(Error::Shape("one scene estimate per scene required".into()));
        }
        let n = scenes.len();
        let mut n_val = (val_fraction * n as f64).round() as usize;
        if val_fraction > 0.0 && n > 1 {
            n_val = n_val.max(1);
        }
        n_val = n_val.min(n.saturating_sub(1));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_named(
            seed,
            "val-split",
        )));
        let val_cubes = &order[..n_val];
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (si, scene) in scenes.iter().enumerate() {
            let dst = if val_cubes.contains(&si) {
                &mut val
            } else {
                &mut train
            };
            dst.extend((0..scene.examples.len()).map(|ei| (si, ei)));
        }
        if train.is_empty() {
            return Err(Error::Domain("no training examples".into()));
        }
        Ok(Self {
            scenes,
            estimates,
            train,
            val,
        })
    }

    /// Mean and spread of the training targets' level and sdev, for initializing the scale head.
    pub fn target_scale(&self) -> (f64, f64) {
        let n = self.train.len() as f64;
        let (mut m, mut s) = (0.0, 0.0);
        for &(si, ei) in &self.train {
            let ne = &self.scenes[si].examples[ei].eps_norm;
            m += ne.mean;
            s += ne.sdev;
        }
        (m / n, s / n)
    }

    /// RMS of the whitened training pixels.
    pub fn whitened_rms(&self) -> f64 {
        let (mut acc, mut cnt) = (0.0, 0usize);
        for &(si, ei) in &self.train {
            for v in self.scenes[si].examples[ei].whitened.values() {
                acc += v * v;
                cnt += 1;
            }
        }
        (acc / cnt.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub flow_active: bool,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(Self { records })
    }
}

/// Stateful training loop; everything needed to resume lives in the model, `adam` and `epoch`.
pub struct Trainer<'d, 'a> {
    pub model: EpsNetModel,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub cfg: TrainConfig,
    data: &'d TrainData<'a>,
    sampler: Option<GpSampler>,
}

impl<'d, 'a> Trainer<'d, 'a> {
    pub fn new(model: EpsNetModel, data: &'d TrainData<'a>, cfg: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(&model.params);
        Self::resume(model, adam, 0, data, cfg)
    }

    pub fn resume(
        model: EpsNetModel,
        adam: AdamState,
        epoch: usize,
        data: &'d TrainData<'a>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let r = model.cfg().n_bands;
        if let Some(s) = data.scenes.iter().find(|s| s.cube.n_bands() != r) {
            return Err(Error::Shape(format!(
                "cube {} has {} bands, model expects {r}",
                s.cube.id,
                s.cube.n_bands()
            )));
        }
        let sampler = match &cfg.augment {
            Some(p) => Some(GpSampler::new(data.scenes[0].cube.grid(), *p)?),
            None => None,
        };
        Ok(Self {
            model,
            adam,
            epoch,
            cfg,
            data,
            sampler,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Training targets for `epoch`, freshly augmented when augmentation is on.
    pub fn epoch_examples(&self, epoch: usize) -> Result<Vec<PreparedExample>> {
        let base = derive_seed(derive_named(self.cfg.seed, "augment"), epoch as u64);
        self.data
            .train
            .iter()
            .enumerate()
            .map(|(i, &(si, ei))| {
                let ex = &self.data.scenes[si].examples[ei];
                match &self.sampler {
                    Some(s) => augment_example(
                        si,
                        self.data.scenes[si],
                        ex,
                        s,
                        derive_seed(base, i as u64),
                    ),
                    None => Ok(prepare_example(si, ex)),
                }
            })
            .collect()
    }

    fn evaluate(
        &self,
        items: &[&PreparedExample],
        weights: &LossWeights,
        use_flow: bool,
        eta_seed: u64,
        step: bool,
    ) -> Result<(
        LossBreakdown,
        Option<std::collections::HashMap<specret_nn::ParamId, Tensor>>,
    )> {
        let (inputs, targets) =
            build_batch(&self.model, &self.data.scenes, &self.data.estimates, items)?;
        let eta = gaussian_noise(items.len(), self.model.cfg().d_z, eta_seed);
        let mut g = Graph::new();
        let vars = composite_forward(
            &mut g,
            &self.model.net,
            &self.model.params,
            &inputs,
            &targets,
            &eta,
            weights,
            use_flow,
            self.cfg.squared_propagation,
        )?;
        let b = breakdown(&g, &vars, weights);
        if !b.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {}: {b:?}",
                self.epoch
            )));
        }
        let grads = if step {
            Some(
                g.backward_named(vars.composite, Some(&self.model.params))?
                    .into_params(),
            )
        } else {
            None
        };
        Ok((b, grads))
    }

    /// One pass over the (re-augmented) training set plus validation losses.
    pub fn step_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let weights = schedule_weights(
            epoch,
            self.cfg.epochs,
            &self.cfg.schedule,
            &self.cfg.weights,
        );
        let use_flow = weights.omega3 > 0.0;
        let lr = self.cfg.lr_at(epoch);
        let adam_cfg = self.cfg.adam();

        let examples = self.epoch_examples(epoch)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            derive_named(self.cfg.seed, "order"),
            epoch as u64,
        )));
        let eta_base = derive_seed(derive_named(self.cfg.seed, "eta"), epoch as u64);
        let mut train = LossBreakdown::default();
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let items: Vec<&PreparedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (b, grads) = self.evaluate(
                &items,
                &weights,
                use_flow,
                derive_seed(eta_base, bi as u64),
                true,
            )?;
            train.accumulate(&b, items.len() as f64);
            adam_step(
                &mut self.model.params,
                &grads.expect("requested"),
                &mut self.adam,
                lr,
                &adam_cfg,
            )?;
            if self.cfg.precision == Precision::F32 {
                self.model.params.round_to_f32();
            }
        }
        let train = train.scaled(1.0 / examples.len() as f64);

        let val = if self.data.val.is_empty() {
            None
        } else {
            let prepared: Vec<PreparedExample> = self
                .data
                .val
                .iter()
                .map(|&(si, ei)| prepare_example(si, &self.data.scenes[si].examples[ei]))
                .collect();
            let mut acc = LossBreakdown::default();
            let vbase = derive_named(self.cfg.seed, "val-eta");
            for (bi, chunk) in prepared.chunks(self.cfg.batch_size).enumerate() {
                let items: Vec<&PreparedExample> = chunk.iter().collect();
                let (b, _) = self.evaluate(
                    &items,
                    &weights,
                    use_flow,
                    derive_seed(vbase, bi as u64),
                    false,
                )?;
                acc.accumulate(&b, items.len() as f64);
            }
            Some(acc.scaled(1.0 / prepared.len() as f64))
        };
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            omega1: weights.omega1,
            omega2: weights.omega2,
            omega3: weights.omega3,
            flow_active: use_flow,
            train,
            val,
        })
    }

    /// Runs the remaining epochs up to `until` (capped at the configured total).
    pub fn run_until(&mut self, until: usize) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        while self.epoch < until.min(self.cfg.epochs) {
            out.push(self.step_epoch()?);
        }
        Ok(out)
    }
}

/// Trains for the configured epochs from a fresh optimizer state.
pub fn train_epsnet(
    model: EpsNetModel,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(EpsNetModel, TrainReport)> {
    let mut t = Trainer::new(model, data, *cfg)?;
    let records = t.run_until(cfg.epochs)?;
    Ok((t.model, TrainReport { records }))
}

/// Hash of an emissivity target, for checking that augmentation never repeats.
pub fn target_digest(eps: &[f64]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in eps {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Emissivity re-normalization helper used by callers that hold raw spectra.
pub fn normalized_parts(eps: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let n = normalize(&EmissivitySpectrum::new(eps.to_vec())?);
    Ok((n.values, n.mean, n.sdev))
}
