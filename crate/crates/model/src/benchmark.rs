//! The seeded desk-scale pipeline: synthesize, train the estimators, train conditioned and
//! unconditioned EpsNets, infer on held-out cubes and score the matchers.

use serde::{Deserialize, Serialize};
use specret_core::matching::{
    baseline_scores, hit_rate, match_score, BaselineMetric, HitExperiment, HitRateCurve,
    MatchScorecard, MatcherKind, MatcherVariant,
};
use specret_core::rng::{derive_named, derive_seed};
use specret_core::synth::{
    build_dataset, Dataset, LibraryEntry, Matern52Params, Scene, SyntheticSceneSpec,
};
use specret_core::{Error, Result};
use specret_nn::Checkpoint;

use crate::condnets::{
    curve_errors, estimate_scene, relative_l2, train_aux, AuxEpoch, AuxTrainConfig, BgNetConfig,
    BgNetModel, PropNetConfig, PropNetModel, SceneEstimate,
};
use crate::epsnet::{EpsNetConfig, EpsNetModel};
use crate::train::{train_epsnet, TrainConfig, TrainData, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub synth: SyntheticSceneSpec,
    /// The last `n_test_cubes` cubes are never seen in training.
    pub n_test_cubes: usize,
    pub d_z: usize,
    pub aux: AuxTrainConfig,
    pub train: TrainConfig,
    /// Pixels per set when estimating a scene's atmosphere.
    pub estimate_set_size: usize,
    pub n_samples: usize,
    pub k_values: Vec<usize>,
    pub alpha_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            synth: SyntheticSceneSpec::default(),
            n_test_cubes: 2,
            d_z: 16,
            aux: AuxTrainConfig {
                epochs: 50,
                ..AuxTrainConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 8,
                augment: Some(Matern52Params {
                    variance: 0.1,
                    ..Matern52Params::default()
                }),
                ..TrainConfig::default()
            },
            estimate_set_size: 200,
            n_samples: 320,
            k_values: vec![1, 5, 10],
            alpha_grid: vec![0.1, 0.25, 0.5, 0.75],
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    /// Propagates the master seed to every stage.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = derive_named(seed, "synth");
        self.aux.seed = derive_named(seed, "aux");
        self.train.seed = derive_named(seed, "train");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.n_test_cubes == 0 || self.n_test_cubes >= self.synth.n_cubes {
            return Err(Error::Domain(
                "need at least one test cube and one training cube".into(),
            ));
        }
        if self.n_samples < 2 || self.k_values.is_empty() {
            return Err(Error::Domain(
                "need n_samples ≥ 2 and at least one K".into(),
            ));
        }
        Ok(())
    }
}

/// Rankings of one held-out pixel under every matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub cube_id: String,
    pub pixel: usize,
    pub truth: String,
    pub alpha: f64,
    pub md_conditioned: MatchScorecard,
    pub md_unconditioned: MatchScorecard,
    pub l2_conditioned: Vec<(String, f64)>,
    pub cd_conditioned: Vec<(String, f64)>,
}

impl Trial {
    fn ranking(&self, v: MatcherVariant) -> Option<Vec<String>> {
        let names = |l: &[(String, f64)]| l.iter().map(|(n, _)| n.clone()).collect();
        match (v.kind, v.conditioned) {
            (MatcherKind::MD, true) => Some(self.md_conditioned.ranking()),
            (MatcherKind::MD, false) => Some(self.md_unconditioned.ranking()),
            (MatcherKind::L2, true) => Some(names(&self.l2_conditioned)),
            (MatcherKind::CD, true) => Some(names(&self.cd_conditioned)),
            _ => None,
        }
    }
}

pub const BENCHMARK_VARIANTS: [MatcherVariant; 4] = [
    MatcherVariant {
        kind: MatcherKind::MD,
        conditioned: true,
    },
    MatcherVariant {
        kind: MatcherKind::MD,
        conditioned: false,
    },
    MatcherVariant {
        kind: MatcherKind::L2,
        conditioned: true,
    },
    MatcherVariant {
        kind: MatcherKind::CD,
        conditioned: true,
    },
];

/// Hit-rate curves for every variant and α threshold that has at least one trial.
pub fn curves_for(
    trials: &[Trial],
    k_values: &[usize],
    alpha_grid: &[f64],
) -> Result<Vec<HitRateCurve>> {
    let mut out = Vec::new();
    for v in BENCHMARK_VARIANTS {
        let exps: Vec<HitExperiment> = trials
            .iter()
            .filter_map(|t| {
                t.ranking(v).map(|ranking| HitExperiment {
                    ranking,
                    truth: t.truth.clone(),
                    alpha: t.alpha,
                })
            })
            .collect();
        for &a in alpha_grid {
            if exps.iter().any(|e| e.alpha >= a) {
                out.push(hit_rate(v, &exps, k_values, a)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub aux: Vec<AuxEpoch>,
    pub conditioned: TrainReport,
    pub unconditioned: TrainReport,
    /// (name, bytes) for propnet, bgnet and both EpsNets.
    pub checkpoints: Vec<(String, Vec<u8>)>,
    /// Per held-out cube: relative L2 error of each estimated curve (τ, L_u, L_d, B).
    pub atmosphere_errors: Vec<[f64; 4]>,
    /// Per held-out cube: relative L2 error of the reconstructed background mean.
    pub background_errors: Vec<f64>,
    pub trials: Vec<Trial>,
    pub curves: Vec<HitRateCurve>,
    pub seconds: f64,
}

impl BenchmarkOutcome {
    pub fn curve(&self, v: MatcherVariant, alpha_min: f64) -> Option<&HitRateCurve> {
        self.curves
            .iter()
            .find(|c| c.matcher == v && c.alpha_min == alpha_min)
    }
}

pub fn checkpoint_bytes(
    kind: &str,
    config: &impl Serialize,
    params: &specret_nn::ParamStore,
) -> Result<Vec<u8>> {
    let json = serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint::new(kind, json, params.clone()).to_bytes())
}

/// Scene estimates from the trained estimators, one seeded pixel set per cube.
pub fn estimate_all(
    propnet: &PropNetModel,
    bgnet: &BgNetModel,
    scenes: &[&Scene],
    set_size: usize,
    seed: u64,
) -> Result<Vec<SceneEstimate>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            estimate_scene(
                propnet,
                bgnet,
                &s.cube,
                &s.whitening.background_mean,
                set_size,
                derive_seed(seed, i as u64),
            )
        })
        .collect()
}

/// A fresh EpsNet with the scale head and input scale taken from the training targets.
pub fn init_epsnet(
    d_z: usize,
    n_bands: usize,
    conditioned: bool,
    data: &TrainData,
    seed: u64,
) -> Result<EpsNetModel> {
    let mut ec = EpsNetConfig::new(n_bands, d_z);
    ec.conditioned = conditioned;
    ec.whitened_scale = data.whitened_rms().max(1e-12);
    let mut model = EpsNetModel::new(ec, seed)?;
    let (m, s) = data.target_scale();
    model.calibrate_scale_head(m, s)?;
    Ok(model)
}

pub fn fit_epsnet(
    d_z: usize,
    n_bands: usize,
    conditioned: bool,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(EpsNetModel, TrainReport)> {
    train_epsnet(
        init_epsnet(d_z, n_bands, conditioned, data, seed)?,
        data,
        cfg,
    )
}

/// Samples both models on every target pixel of the test scenes and scores the library.
pub fn evaluate_trials(
    cond: &EpsNetModel,
    uncond: &EpsNetModel,
    scenes: &[&Scene],
    estimates: &[SceneEstimate],
    library: &[LibraryEntry],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for ex in &scene.examples {
            let s = derive_seed(derive_seed(seed, si as u64), ex.pixel as u64);
            let (l, lw) = (ex.measured.values(), ex.whitened.values());
            let qid = format!("{}:{}", ex.cube_id, ex.pixel);
            let pc = cond.sample_posterior(l, lw, &estimates[si], n_samples, s)?;
            let pu = uncond.sample_posterior(l, lw, &estimates[si], n_samples, s)?;
            trials.push(Trial {
                cube_id: ex.cube_id.clone(),
                pixel: ex.pixel,
                truth: ex.entry.clone(),
                alpha: ex.alpha,
                md_conditioned: match_score(&qid, &pc.distribution, library)?,
                md_unconditioned: match_score(&qid, &pu.distribution, library)?,
                l2_conditioned: baseline_scores(&pc.distribution, library, BaselineMetric::L2)?,
                cd_conditioned: baseline_scores(&pc.distribution, library, BaselineMetric::CD)?,
            });
        }
    }
    Ok(trials)
}

/// (training, held-out) scenes: the last `n_test_cubes` are held out.
pub fn split_scenes<'a>(
    cfg: &BenchmarkConfig,
    scenes: &'a [Scene],
) -> Result<(Vec<&'a Scene>, Vec<&'a Scene>)> {
    if cfg.n_test_cubes >= scenes.len() {
        return Err(Error::Domain(format!(
            "{} cubes cannot hold out {}",
            scenes.len(),
            cfg.n_test_cubes
        )));
    }
    let n_train = scenes.len() - cfg.n_test_cubes;
    Ok((
        scenes[..n_train].iter().collect(),
        scenes[n_train..].iter().collect(),
    ))
}

pub struct Estimators {
    pub propnet: PropNetModel,
    pub bgnet: BgNetModel,
    pub report: Vec<AuxEpoch>,
}

pub fn fit_estimators(cfg: &BenchmarkConfig, train_scenes: &[&Scene]) -> Result<Estimators> {
    let r = cfg.synth.n_bands;
    let mut propnet = PropNetModel::new(
        PropNetConfig::new(r),
        derive_named(cfg.seed, "propnet-init"),
    )?;
    let mut bgnet = BgNetModel::new(BgNetConfig::new(r), derive_named(cfg.seed, "bgnet-init"))?;
    let report = train_aux(&mut propnet, &mut bgnet, train_scenes, &cfg.aux)?;
    Ok(Estimators {
        propnet,
        bgnet,
        report,
    })
}

/// Scene estimates for the training and held-out cubes, each from its own seed stream.
pub fn split_estimates(
    cfg: &BenchmarkConfig,
    propnet: &PropNetModel,
    bgnet: &BgNetModel,
    train_scenes: &[&Scene],
    test_scenes: &[&Scene],
) -> Result<(Vec<SceneEstimate>, Vec<SceneEstimate>)> {
    let est_seed = derive_named(cfg.seed, "estimate");
    let train = estimate_all(
        propnet,
        bgnet,
        train_scenes,
        cfg.estimate_set_size,
        est_seed,
    )?;
    let test = estimate_all(
        propnet,
        bgnet,
        test_scenes,
        cfg.estimate_set_size,
        derive_seed(est_seed, 1 << 32),
    )?;
    Ok((train, test))
}

pub fn epsnet_init_seed(cfg: &BenchmarkConfig) -> u64 {
    derive_named(cfg.seed, "epsnet-init")
}

pub fn inference_seed(cfg: &BenchmarkConfig) -> u64 {
    derive_named(cfg.seed, "infer")
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let dataset: Dataset = build_dataset(&cfg.synth)?;
    let r = cfg.synth.n_bands;
    let (train_scenes, test_scenes) = split_scenes(cfg, &dataset.scenes)?;
    let Estimators {
        propnet,
        bgnet,
        report: aux,
    } = fit_estimators(cfg, &train_scenes)?;
    let (train_est, test_est) =
        split_estimates(cfg, &propnet, &bgnet, &train_scenes, &test_scenes)?;
    let atmosphere_errors = test_scenes
        .iter()
        .zip(&test_est)
        .map(|(s, e)| curve_errors(&e.atm_hat, &s.atmosphere))
        .collect();
    let background_errors = test_scenes
        .iter()
        .zip(&test_est)
        .map(|(s, e)| relative_l2(e.bg_hat.values(), &s.whitening.background_mean))
        .collect();

    let data = TrainData::new(
        train_scenes.clone(),
        train_est,
        cfg.train.val_fraction,
        cfg.train.seed,
    )?;
    let init = epsnet_init_seed(cfg);
    let (cond, conditioned) = fit_epsnet(cfg.d_z, r, true, &data, &cfg.train, init)?;
    let (uncond, unconditioned) = fit_epsnet(cfg.d_z, r, false, &data, &cfg.train, init)?;

    let trials = evaluate_trials(
        &cond,
        &uncond,
        &test_scenes,
        &test_est,
        &dataset.library,
        cfg.n_samples,
        inference_seed(cfg),
    )?;
    let curves = curves_for(&trials, &cfg.k_values, &cfg.alpha_grid)?;
    let checkpoints = vec![
        (
            "propnet".to_string(),
            checkpoint_bytes("propnet", &propnet.net.cfg, &propnet.params)?,
        ),
        (
            "bgnet".to_string(),
            checkpoint_bytes("bgnet", &bgnet.net.cfg, &bgnet.params)?,
        ),
        (
            "epsnet".to_string(),
            checkpoint_bytes("epsnet", cond.cfg(), &cond.params)?,
        ),
        (
            "epsnet-unconditioned".to_string(),
            checkpoint_bytes("epsnet", uncond.cfg(), &uncond.params)?,
        ),
    ];
    Ok(BenchmarkOutcome {
        aux,
        conditioned,
        atmosphere_errors,
        background_errors,
        unconditioned,
        checkpoints,
        trials,
        curves,
        seconds: start.elapsed().as_secs_f64(),
    })
}
