use std::path::Path;

use serde::{Deserialize, Serialize};
use specret_core::matching::{
    baseline_scores, hit_rate, match_score, BaselineMetric, HitExperiment, HitRateCurve,
    MatchScorecard, MatcherKind, MatcherVariant,
};
use specret_core::rng::derive_seed;
use specret_core::synth::{build_dataset, library_to_json, Scene};
use specret_core::{AtmosphereParams, EmissivityDistribution, Error, RadianceSpectrum, Result};
use specret_model::benchmark::{
    epsnet_init_seed, fit_estimators, inference_seed, init_epsnet, split_estimates, split_scenes,
};
use specret_model::condnets::{
    AuxEpoch, BgNetConfig, BgNetModel, PropNetConfig, PropNetModel, SceneEstimate,
};
use specret_model::epsnet::{EpsNetConfig, EpsNetModel};
use specret_model::train::{EpochRecord, TrainData, TrainReport, Trainer};
use specret_nn::{AdamState, ParamStore, Tensor};

use crate::artifacts::*;
use crate::config::{RunConfig, Stage};

/// Writes cubes, sidecars and the library, then the manifest of their hashes.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let ds = build_dataset(&cfg.synth)?;
    std::fs::create_dir_all(out.join("cubes"))?;
    let mut files = Vec::new();
    write_atomic(
        &out.join(LIBRARY),
        library_to_json(&ds.grid, &ds.library)?.as_bytes(),
    )?;
    files.push(file_entry(out, &out.join(LIBRARY))?);
    for s in &ds.scenes {
        let (c, j) = (cube_path(out, &s.cube.id), sidecar_path(out, &s.cube.id));
        write_atomic(&c, &s.cube.to_bytes())?;
        write_atomic(&j, &serde_json::to_vec(&s.sidecar())?)?;
        files.push(file_entry(out, &c)?);
        files.push(file_entry(out, &j)?);
    }
    let manifest = DatasetManifest {
        n_bands: cfg.synth.n_bands,
        cubes: ds.scenes.iter().map(|s| s.cube.id.clone()).collect(),
        files,
    };
    write_envelope(
        &out.join(MANIFEST),
        "dataset",
        Stage::Data.hash(cfg),
        &manifest,
    )?;
    Ok(manifest)
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn train_aux(cfg: &RunConfig, dir: &Path) -> Result<Vec<AuxEpoch>> {
    cfg.validate()?;
    let ds = load_dataset(dir, cfg)?;
    let (train, _) = split_scenes(cfg, &ds.scenes)?;
    let est = fit_estimators(cfg, &train)?;
    save_checkpoint(
        &dir.join(PROPNET),
        "propnet",
        Stage::Aux,
        cfg,
        &est.propnet.net.cfg,
        &est.propnet.params,
    )?;
    save_checkpoint(
        &dir.join(BGNET),
        "bgnet",
        Stage::Aux,
        cfg,
        &est.bgnet.net.cfg,
        &est.bgnet.params,
    )?;
    write_atomic(&dir.join(AUX_REPORT), jsonl(&est.report)?.as_bytes())?;
    Ok(est.report)
}

fn load_estimators(cfg: &RunConfig, dir: &Path) -> Result<(PropNetModel, BgNetModel)> {
    let (pc, pp): (PropNetConfig, ParamStore) =
        load_checkpoint(&dir.join(PROPNET), "propnet", Stage::Aux, cfg)?;
    let (bc, bp): (BgNetConfig, ParamStore) =
        load_checkpoint(&dir.join(BGNET), "bgnet", Stage::Aux, cfg)?;
    let mut propnet = PropNetModel::new(pc, pp.seed())?;
    let mut bgnet = BgNetModel::new(bc, bp.seed())?;
    if propnet.params.load_matching(&pp)? != propnet.params.len()
        || bgnet.params.load_matching(&bp)? != bgnet.params.len()
    {
        return Err(Error::Format(
            "estimator checkpoints do not match the model layout".into(),
        ));
    }
    Ok((propnet, bgnet))
}

/// Stand-in conditioning for the ablation, whose inputs are zeroed anyway.
fn placeholder_estimate(scene: &Scene, d_prop: usize, d_bg: usize) -> Result<SceneEstimate> {
    let r = scene.cube.n_bands();
    let bg = scene.whitening.background_mean.clone();
    Ok(SceneEstimate {
        atm_hat: AtmosphereParams::new(vec![1.0; r], vec![0.0; r], vec![0.0; r], bg.clone(), None)?,
        bg_hat: RadianceSpectrum::new(bg)?,
        c_prop: vec![0.0; d_prop],
        c_bg: vec![0.0; d_bg],
    })
}

/// Estimates for (training, held-out) scenes.
fn estimates(
    cfg: &RunConfig,
    dir: &Path,
    train: &[&Scene],
    test: &[&Scene],
    unconditioned: bool,
) -> Result<(Vec<SceneEstimate>, Vec<SceneEstimate>)> {
    if unconditioned {
        let ec = EpsNetConfig::new(cfg.synth.n_bands, cfg.d_z);
        let ph = |s: &[&Scene]| {
            s.iter()
                .map(|x| placeholder_estimate(x, ec.d_prop, ec.d_bg))
                .collect::<Result<Vec<_>>>()
        };
        return Ok((ph(train)?, ph(test)?));
    }
    if !dir.join(PROPNET).exists() || !dir.join(BGNET).exists() {
        return Err(Error::Domain("estimator checkpoints are missing; run `specret train-aux` first or pass --unconditioned".into()));
    }
    let (p, b) = load_estimators(cfg, dir)?;
    split_estimates(cfg, &p, &b, train, test)
}

fn load_epsnet(path: &Path, kind: &str, cfg: &RunConfig) -> Result<EpsNetModel> {
    let (ec, params): (EpsNetConfig, ParamStore) = load_checkpoint(path, kind, Stage::Train, cfg)?;
    let mut m = EpsNetModel::new(ec, params.seed())?;
    let n = m.params.load_matching(&params)?;
    if n != m.params.len() {
        return Err(Error::Format(format!(
            "{} does not match the model layout",
            path.display()
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub unconditioned: bool,
    /// Stop after this many epochs in total (the schedule still spans the configured epochs).
    pub stop_after: Option<usize>,
    /// Continue from the saved model, optimizer state and report.
    pub resume: bool,
}

/// Trains one EpsNet, saving the model, optimizer state and report after every epoch.
pub fn train(cfg: &RunConfig, dir: &Path, opts: TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let ds = load_dataset(dir, cfg)?;
    let (train_s, test_s) = split_scenes(cfg, &ds.scenes)?;
    let (train_est, _) = estimates(cfg, dir, &train_s, &test_s, opts.unconditioned)?;
    let data = TrainData::new(train_s, train_est, cfg.train.val_fraction, cfg.train.seed)?;

    let model_path = dir.join(variant_file("epsnet", opts.unconditioned, "ckpt"));
    let adam_path = dir.join(variant_file("epsnet", opts.unconditioned, "adam.ckpt"));
    let report_path = dir.join(variant_file("train_report", opts.unconditioned, "jsonl"));
    let mut records: Vec<EpochRecord>;
    let mut trainer = if opts.resume {
        let model = load_epsnet(&model_path, "epsnet", cfg)?;
        let (epoch, moments): (usize, ParamStore) =
            load_checkpoint(&adam_path, "adam", Stage::Train, cfg)?;
        let adam = AdamState::from_store(&moments, &model.params)?;
        records = TrainReport::from_jsonl(&std::fs::read_to_string(&report_path)?)?.records;
        records.truncate(epoch);
        Trainer::resume(model, adam, epoch, &data, cfg.train)?
    } else {
        records = Vec::new();
        let model = init_epsnet(
            cfg.d_z,
            cfg.synth.n_bands,
            !opts.unconditioned,
            &data,
            epsnet_init_seed(cfg),
        )?;
        Trainer::new(model, &data, cfg.train)?
    };
    let until = opts
        .stop_after
        .unwrap_or(cfg.train.epochs)
        .min(cfg.train.epochs);
    while trainer.epoch < until {
        records.push(trainer.step_epoch()?);
        save_checkpoint(
            &model_path,
            "epsnet",
            Stage::Train,
            cfg,
            trainer.model.cfg(),
            &trainer.model.params,
        )?;
        save_checkpoint(
            &adam_path,
            "adam",
            Stage::Train,
            cfg,
            &trainer.epoch,
            &trainer.adam.to_store(&trainer.model.params),
        )?;
        let report = TrainReport {
            records: records.clone(),
        };
        write_atomic(&report_path, report.to_jsonl()?.as_bytes())?;
    }
    Ok(TrainReport { records })
}

/// One held-out query pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub cube_id: String,
    pub pixel: usize,
    pub truth: String,
    pub alpha: f64,
}

impl Query {
    pub fn id(&self) -> String {
        format!("{}:{}", self.cube_id, self.pixel)
    }
}

/// Posterior samples for every target pixel of the held-out cubes, as one tensor container with
/// `<cube>:<pixel>/scaled` and `/normalized` entries of shape (n, r).
pub fn infer(cfg: &RunConfig, dir: &Path, unconditioned: bool) -> Result<Vec<Query>> {
    cfg.validate()?;
    let ds = load_dataset(dir, cfg)?;
    let (train_s, test_s) = split_scenes(cfg, &ds.scenes)?;
    let (_, test_est) = estimates(cfg, dir, &train_s, &test_s, unconditioned)?;
    let model = load_epsnet(
        &dir.join(variant_file("epsnet", unconditioned, "ckpt")),
        "epsnet",
        cfg,
    )?;
    let seed = inference_seed(cfg);
    let mut bundle = ParamStore::new(seed);
    let mut queries = Vec::new();
    for (si, scene) in test_s.iter().enumerate() {
        for ex in &scene.examples {
            let s = derive_seed(derive_seed(seed, si as u64), ex.pixel as u64);
            let post = model.sample_posterior(
                ex.measured.values(),
                ex.whitened.values(),
                &test_est[si],
                cfg.n_samples,
                s,
            )?;
            let q = Query {
                cube_id: ex.cube_id.clone(),
                pixel: ex.pixel,
                truth: ex.entry.clone(),
                alpha: ex.alpha,
            };
            bundle.insert(
                &format!("{}/scaled", q.id()),
                Tensor::from_rows(&post.distribution.scaled),
            );
            bundle.insert(
                &format!("{}/normalized", q.id()),
                Tensor::from_rows(&post.distribution.normalized),
            );
            queries.push(q);
        }
    }
    save_checkpoint(
        &dir.join(variant_file("inference", unconditioned, "ckpt")),
        "inference",
        Stage::Infer,
        cfg,
        &queries,
        &bundle,
    )?;
    Ok(queries)
}

/// A query's matcher outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scorecard {
    pub query: Query,
    pub md: MatchScorecard,
    pub l2: Vec<(String, f64)>,
    pub cd: Vec<(String, f64)>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn match_library(cfg: &RunConfig, dir: &Path, unconditioned: bool) -> Result<Vec<Scorecard>> {
    let ds = load_dataset(dir, cfg)?;
    let (queries, bundle): (Vec<Query>, ParamStore) = load_checkpoint(
        &dir.join(variant_file("inference", unconditioned, "ckpt")),
        "inference",
        Stage::Infer,
        cfg,
    )?;
    let cards = queries
        .into_iter()
        .map(|q| {
            let get = |part: &str| {
                bundle
                    .by_name(&format!("{}/{part}", q.id()))
                    .map(rows)
                    .ok_or_else(|| Error::Format(format!("bundle lacks {}/{part}", q.id())))
            };
            let dist = EmissivityDistribution::from_samples(get("scaled")?, get("normalized")?)?;
            Ok(Scorecard {
                md: match_score(&q.id(), &dist, &ds.library)?,
                l2: baseline_scores(&dist, &ds.library, BaselineMetric::L2)?,
                cd: baseline_scores(&dist, &ds.library, BaselineMetric::CD)?,
                query: q,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_envelope(
        &dir.join(variant_file("scorecards", unconditioned, "json")),
        "scorecards",
        Stage::Infer.hash(cfg),
        &cards,
    )?;
    Ok(cards)
}

/// Hit-rate curves of every matcher over the given scorecards.
pub fn curves_from_scorecards(
    cards: &[Scorecard],
    conditioned: bool,
    k_values: &[usize],
    alpha_grid: &[f64],
) -> Result<Vec<HitRateCurve>> {
    let names = |l: &[(String, f64)]| l.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    let mut out = Vec::new();
    for kind in [MatcherKind::MD, MatcherKind::L2, MatcherKind::CD] {
        let exps: Vec<HitExperiment> = cards
            .iter()
            .map(|c| HitExperiment {
                ranking: match kind {
                    MatcherKind::MD => c.md.ranking(),
                    MatcherKind::L2 => names(&c.l2),
                    _ => names(&c.cd),
                },
                truth: c.query.truth.clone(),
                alpha: c.query.alpha,
            })
            .collect();
        for &a in alpha_grid {
            if exps.iter().any(|e| e.alpha >= a) {
                out.push(hit_rate(
                    MatcherVariant { kind, conditioned },
                    &exps,
                    k_values,
                    a,
                )?);
            }
        }
    }
    Ok(out)
}

/// Curves for whichever scorecard sets exist in the run directory.
pub fn hitrate(cfg: &RunConfig, dir: &Path) -> Result<Vec<HitRateCurve>> {
    let mut curves = Vec::new();
    let mut found = false;
    for unconditioned in [false, true] {
        let path = dir.join(variant_file("scorecards", unconditioned, "json"));
        if !path.exists() {
            continue;
        }
        found = true;
        let cards: Vec<Scorecard> = read_envelope(&path, "scorecards", Stage::Infer, cfg)?;
        curves.extend(curves_from_scorecards(
            &cards,
            !unconditioned,
            &cfg.k_values,
            &cfg.alpha_grid,
        )?);
    }
    if !found {
        return Err(Error::Format(format!(
            "no scorecards in {}; run `specret match` first",
            dir.display()
        )));
    }
    write_envelope(&dir.join(CURVES), "curves", Stage::Infer.hash(cfg), &curves)?;
    Ok(curves)
}
