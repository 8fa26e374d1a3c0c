#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specret_core::synth::{build_dataset, Dataset, SyntheticSceneSpec};
use specret_core::{AtmosphereParams, RadianceSpectrum};
use specret_model::condnets::SceneEstimate;
use specret_model::epsnet::{EpsNetConfig, EpsNetModel};
use specret_nn::FlowConfig;

/// A plausible scene estimate with random codes.
pub fn scene(r: usize, d_code: usize, seed: u64) -> SceneEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau: Vec<f64> = (0..r).map(|_| rng.random_range(0.6..0.95)).collect();
    let up: Vec<f64> = (0..r).map(|_| rng.random_range(50.0..150.0)).collect();
    let down: Vec<f64> = (0..r).map(|_| rng.random_range(100.0..300.0)).collect();
    let bb: Vec<f64> = (0..r).map(|j| 800.0 + 5.0 * j as f64).collect();
    SceneEstimate {
        atm_hat: AtmosphereParams::new(tau, up, down, bb, None).unwrap(),
        bg_hat: RadianceSpectrum::new((0..r).map(|j| 700.0 + 3.0 * j as f64).collect()).unwrap(),
        c_prop: (0..d_code).map(|_| rng.random_range(-1.0..1.0)).collect(),
        c_bg: (0..d_code).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

pub fn radiance(r: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = (0..r).map(|_| rng.random_range(600.0..900.0)).collect();
    let lw = (0..r).map(|_| rng.random_range(-3.0..3.0)).collect();
    (l, lw)
}

/// r=16, d_z=4 model with small hidden layers.
pub fn tiny_config(r: usize, d_z: usize) -> EpsNetConfig {
    let mut c = EpsNetConfig::new(r, d_z);
    c.d_prop = 6;
    c.d_bg = 6;
    c.block_layers = 2;
    c.max_modes = 4;
    c.scale_hidden = 8;
    c.scale_layers = 3;
    c.variance_hidden = 8;
    c.variance_layers = 3;
    c.flow = FlowConfig {
        hidden: 8,
        ..FlowConfig::new(d_z)
    };
    c
}

pub fn tiny_model(seed: u64) -> EpsNetModel {
    EpsNetModel::new(tiny_config(16, 4), seed).unwrap()
}

/// Three small cubes of 16 bands.
pub fn tiny_dataset(seed: u64) -> Dataset {
    let spec = SyntheticSceneSpec {
        n_cubes: 3,
        cube_width: 10,
        cube_height: 10,
        n_bands: 16,
        library_size: 8,
        target_fraction: 0.2,
        seed,
        ..SyntheticSceneSpec::default()
    };
    build_dataset(&spec).unwrap()
}

/// Training data over every cube of `ds` with random scene estimates and no validation split.
pub fn tiny_train_data(ds: &Dataset) -> specret_model::train::TrainData<'_> {
    let scenes: Vec<_> = ds.scenes.iter().collect();
    let est = (0..scenes.len())
        .map(|i| scene(16, 6, 100 + i as u64))
        .collect();
    specret_model::train::TrainData::new(scenes, est, 0.0, 0).unwrap()
}

pub fn tiny_train_config(epochs: usize) -> specret_model::train::TrainConfig {
    specret_model::train::TrainConfig {
        epochs,
        batch_size: 16,
        seed: 9,
        ..Default::default()
    }
}
