//! Fast built-in checks and the finite-difference sweep behind `gradcheck`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use specret_core::cube::{fit_whitening, flatten, HsiCube, PixelSet};
use specret_core::matching::{hit_rate, match_score, HitExperiment, MatcherKind, MatcherVariant};
use specret_core::spectra::planck_scalar;
use specret_core::synth::{
    augment_with, build_dataset, gen_library, GpSampler, LibraryEntry, Matern52Params,
    SyntheticSceneSpec,
};
use specret_core::{
    propagate, AtmosphereParams, EmissivityDistribution, EmissivitySpectrum, RadianceSpectrum,
    Result, WavelengthGrid,
};
use specret_model::condnets::{PropNetConfig, PropNetModel, SceneEstimate};
use specret_model::epsnet::{gaussian_noise, EpsNetConfig, EpsNetModel};
use specret_model::losses::{composite_forward, kl_value, LossWeights};
use specret_model::train::{build_batch, prepare_example, TrainData};
use specret_nn::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use specret_nn::graph::Graph;
use specret_nn::{FlowConfig, FlowModel, ParamStore, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Composite-loss gradients of a tiny EpsNet (d_z = 4, r = 16) against central differences.
/// `corrupt` is added to every analytic gradient and exists to exercise the failure path.
pub fn gradcheck(corrupt: Option<f64>) -> Result<GradCheckReport> {
    let spec = SyntheticSceneSpec {
        n_cubes: 1,
        cube_width: 8,
        cube_height: 8,
        n_bands: 16,
        library_size: 8,
        target_fraction: 0.2,
        seed: 6,
        ..Default::default()
    };
    let ds = build_dataset(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let est = ds
        .scenes
        .iter()
        .map(|s| {
            Ok(SceneEstimate {
                atm_hat: s.atmosphere.clone(),
                bg_hat: RadianceSpectrum::new(s.whitening.background_mean.clone())?,
                c_prop: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                c_bg: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData::new(ds.scenes.iter().collect(), est, 0.0, 0)?;
    let mut c = EpsNetConfig::new(16, 4);
    (c.d_prop, c.d_bg, c.block_layers, c.max_modes) = (6, 6, 2, 4);
    (
        c.scale_hidden,
        c.scale_layers,
        c.variance_hidden,
        c.variance_layers,
    ) = (8, 3, 8, 3);
    c.flow = FlowConfig {
        hidden: 8,
        zero_init: false,
        scale_bound: 0.5,
        ..FlowConfig::new(4)
    };
    let model = EpsNetModel::new(c, 8)?;
    let items: Vec<_> = data
        .train
        .iter()
        .take(3)
        .map(|&(si, ei)| prepare_example(si, &data.scenes[si].examples[ei]))
        .collect();
    let refs: Vec<_> = items.iter().collect();
    let (inputs, targets) = build_batch(&model, &data.scenes, &data.estimates, &refs)?;
    let eta = gaussian_noise(refs.len(), 4, 9);
    let weights = LossWeights::default();
    check_gradients(
        &model.params,
        |g, s| {
            Ok(composite_forward(
                g, &model.net, s, &inputs, &targets, &eta, &weights, true, false,
            )?
            .composite)
        },
        GradCheckOptions {
            h: 1e-5,
            max_per_tensor: Some(4),
            floor: 1e-4,
        },
        corrupt,
    )
}

type Check = (&'static str, fn() -> std::result::Result<String, String>);

fn ok_if(ok: bool, detail: String) -> std::result::Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn forward_model() -> std::result::Result<String, String> {
    let g = WavelengthGrid::lwir(16).map_err(|e| e.to_string())?;
    let atm = AtmosphereParams::from_temperature(
        &g,
        300.0,
        vec![0.8; 16],
        vec![120.0; 16],
        vec![250.0; 16],
    )
    .map_err(|e| e.to_string())?;
    let bg = RadianceSpectrum::new(vec![900.0; 16]).unwrap();
    let eps = EmissivitySpectrum::new((0..16).map(|i| 0.8 + 0.01 * i as f64).collect()).unwrap();
    let mut err: f64 = 0.0;
    let l0 = propagate(&eps, &atm, 0.0, &bg).map_err(|e| e.to_string())?;
    err = l0
        .values()
        .iter()
        .zip(bg.values())
        .map(|(a, b)| (a - b).abs())
        .fold(err, f64::max);
    let one = propagate(
        &EmissivitySpectrum::constant(1.0, 16).unwrap(),
        &atm,
        1.0,
        &bg,
    )
    .map_err(|e| e.to_string())?;
    for j in 0..16 {
        err = err.max((one.values()[j] - (atm.tau[j] * atm.blackbody[j] + atm.upwelling[j])).abs());
    }
    ok_if(err < 1e-12, format!("max deviation {err:.1e}"))
}

fn planck() -> std::result::Result<String, String> {
    let table = [
        (300.0, 10.0, 992.40333300706946661),
        (250.0, 7.56, 238.46978090026481821),
        (1000.0, 10.0, 37040.256137208543244),
    ];
    let worst = table
        .iter()
        .map(|&(t, l, w)| ((planck_scalar(t, l) - w) / w).abs())
        .fold(0.0, f64::max);
    ok_if(worst < 1e-10, format!("max rel err {worst:.1e}"))
}

fn whitening() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = 8;
    let pixels: Vec<Vec<f64>> = (0..1024)
        .map(|_| {
            let c = normal(&mut rng);
            (0..r)
                .map(|j| 800.0 + 10.0 * j as f64 + 5.0 * c + 2.0 * normal(&mut rng))
                .collect()
        })
        .collect();
    let cube = HsiCube::from_pixels("s", 32, 32, WavelengthGrid::lwir(r).unwrap(), &pixels)
        .map_err(|e| e.to_string())?;
    let m = fit_whitening(&cube, 0.0).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = flatten(&cube).iter().map(|p| m.whiten_slice(p)).collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..r)
        .map(|j| rows.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let mut dev: f64 = 0.0;
    for a in 0..r {
        for b in 0..r {
            let c = rows
                .iter()
                .map(|x| (x[a] - mean[a]) * (x[b] - mean[b]))
                .sum::<f64>()
                / (n - 1.0);
            dev = dev.max((c - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    ok_if(dev < 1e-6, format!("max |cov − I| {dev:.1e}"))
}

fn flow() -> std::result::Result<String, String> {
    let mut store = ParamStore::new(4);
    let flow = FlowModel::new(
        &mut store,
        "flow",
        FlowConfig {
            zero_init: false,
            ..FlowConfig::new(8)
        },
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..8).map(|_| normal(&mut rng)).collect())
        .collect();
    let mut g = Graph::new();
    let z0 = g.constant(Tensor::from_rows(&rows));
    let (zk, _) = flow
        .forward(&mut g, &store, z0)
        .map_err(|e| e.to_string())?;
    let back = flow
        .inverse(&mut g, &store, zk)
        .map_err(|e| e.to_string())?;
    let err = g
        .value(back)
        .data
        .iter()
        .zip(&g.value(z0).data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ok_if(err < 1e-9, format!("round trip {err:.1e}"))
}

fn kl() -> std::result::Result<String, String> {
    let (mu, sigma) = ([0.5, -1.0], [0.7, 1.4]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 200_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let v: f64 = (0..2)
            .map(|j| {
                let e = normal(&mut rng);
                let z: f64 = mu[j] + sigma[j] * e;
                -sigma[j].ln() - 0.5 * e * e + 0.5 * z * z
            })
            .sum();
        s += v;
        s2 += v * v;
    }
    let m = s / n as f64;
    let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
    let z = (kl_value(&mu, &sigma) - m).abs() / se;
    ok_if(
        kl_value(&[0.0; 3], &[1.0; 3]) == 0.0 && z < 3.0,
        format!("closed form vs Monte Carlo {z:.2} SE"),
    )
}

fn deep_set() -> std::result::Result<String, String> {
    let m = PropNetModel::new(PropNetConfig::new(16), 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..16).map(|_| rng.random_range(500.0..1200.0)).collect())
        .collect();
    let set = |rows: Vec<Vec<f64>>| PixelSet {
        cube_id: "s".into(),
        indices: (0..rows.len()).map(|i| (i, 0)).collect(),
        spectra: rows,
    };
    let base = m.encode(&set(rows.clone())).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut p = rows.clone();
        p.shuffle(&mut rng);
        let c = m.encode(&set(p)).map_err(|e| e.to_string())?;
        worst = c
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    ok_if(worst < 1e-12, format!("max abs diff {worst:.1e}"))
}

fn augmentation() -> std::result::Result<String, String> {
    let g = WavelengthGrid::lwir(32).unwrap();
    let lib = gen_library(64, &g, 31).map_err(|e| e.to_string())?;
    let sampler = GpSampler::new(&g, Matern52Params::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut inside = true;
    for e in &lib {
        let a = augment_with(&sampler, &e.emissivity, &mut rng).map_err(|e| e.to_string())?;
        inside &= a.scaled.values().iter().all(|v| (0.0..=1.0).contains(v));
    }
    ok_if(inside, "augmented spectra stay within [0, 1]".into())
}

fn matching() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            (0..6)
                .map(|j| 0.85 + 0.01 * j as f64 + 0.02 * normal(&mut rng))
                .collect()
        })
        .collect();
    let normalized = samples
        .iter()
        .map(|s| specret_core::spectra::normalize_values(s).values)
        .collect();
    let d = EmissivityDistribution::from_samples(samples, normalized).map_err(|e| e.to_string())?;
    let lib: Vec<LibraryEntry> = (0..6)
        .map(|i| LibraryEntry {
            name: format!("m{i}"),
            emissivity: EmissivitySpectrum::new(
                (0..6)
                    .map(|j| 0.84 + 0.01 * j as f64 + 0.01 * i as f64)
                    .collect(),
            )
            .unwrap(),
        })
        .collect();
    let card = match_score("q", &d, &lib).map_err(|e| e.to_string())?;
    let min_zero = card.ranked.last().map(|e| e.score) == Some(0.0);
    let exps: Vec<HitExperiment> = (0..5)
        .map(|_| HitExperiment {
            ranking: card.ranking(),
            truth: card.ranked[0].name.clone(),
            alpha: 1.0,
        })
        .collect();
    let curve = hit_rate(
        MatcherVariant {
            kind: MatcherKind::MD,
            conditioned: true,
        },
        &exps,
        &[1, 3],
        0.1,
    )
    .map_err(|e| e.to_string())?;
    ok_if(
        min_zero && curve.hit_rate.iter().all(|&h| h == 1.0),
        format!(
            "min score zero {min_zero}, rank-1 curve {:?}",
            curve.hit_rate
        ),
    )
}

fn gradients() -> std::result::Result<String, String> {
    let rep = gradcheck(None).map_err(|e| e.to_string())?;
    ok_if(
        rep.passed(GRADCHECK_TOLERANCE),
        format!(
            "max rel err {:.1e} over {} probes",
            rep.max_rel_err, rep.n_checked
        ),
    )
}

pub const CHECKS: [Check; 9] = [
    ("forward model", forward_model),
    ("planck", planck),
    ("whitening", whitening),
    ("flow inverse", flow),
    ("kl", kl),
    ("deep-set invariance", deep_set),
    ("augmentation bounds", augmentation),
    ("matching", matching),
    ("gradients", gradients),
];

/// Runs every check; returns (name, outcome) pairs.
pub fn run_selftest() -> Vec<(&'static str, std::result::Result<String, String>)> {
    CHECKS.iter().map(|(name, f)| (*name, f())).collect()
}
