//! Synthetic atmospheres, emissivity libraries and scenes, plus the Gaussian-process
//! emissivity augmentation applied during training.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cube::{fit_whitening_with, HsiCube, WhiteningModel, WhiteningOptions};
use crate::error::{check_len, Error, Result};
use crate::rng::{derive_named, derive_seed};
use crate::spectra::{
    mean_sdev, normalize, normalize_values, planck_radiance, propagate, softclamp_scalar,
    AtmosphereParams, EmissivitySpectrum, NormalizedEmissivity, RadianceSpectrum, WavelengthGrid,
};

pub const DEFAULT_AUGMENT_LENGTHSCALE: f64 = 0.4;
/// Sensor noise standard deviation relative to the cube-mean radiance.
pub const DEFAULT_NOISE_REL: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Matern52Params {
    pub lengthscale: f64,
    pub variance: f64,
}

impl Matern52Params {
    pub fn new(lengthscale: f64, variance: f64) -> Result<Self> {
        let p = Self {
            lengthscale,
            variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.variance > 0.0)
            || !self.lengthscale.is_finite()
            || !self.variance.is_finite()
        {
            return Err(Error::Domain(format!("invalid Matérn parameters {self:?}")));
        }
        Ok(())
    }

    pub fn kernel(&self, d: f64) -> f64 {
        let a = 5f64.sqrt() * d.abs() / self.lengthscale;
        self.variance * (1.0 + a + a * a / 3.0) * (-a).exp()
    }
}

impl Default for Matern52Params {
    fn default() -> Self {
        Self {
            lengthscale: DEFAULT_AUGMENT_LENGTHSCALE,
            variance: 1.0,
        }
    }
}

/// Matérn-5/2 covariance between every pair of grid wavelengths.
pub fn matern52_covariance(grid: &WavelengthGrid, p: &Matern52Params) -> DMatrix<f64> {
    let lam = grid.values();
    DMatrix::from_fn(lam.len(), lam.len(), |i, j| p.kernel(lam[i] - lam[j]))
}

/// Zero-mean GP sampler holding a jittered Cholesky factor of the Matérn covariance.
#[derive(Debug, Clone)]
pub struct GpSampler {
    factor: DMatrix<f64>,
    pub params: Matern52Params,
    pub jitter: f64,
}

impl GpSampler {
    pub fn new(grid: &WavelengthGrid, params: Matern52Params) -> Result<Self> {
        params.validate()?;
        let k = matern52_covariance(grid, &params);
        let n = grid.n_bands();
        let mut jitter = 1e-12 * params.variance;
        while jitter <= 1e-6 * params.variance * (1.0 + 1e-9) {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(ch) = kj.cholesky() {
                return Ok(Self {
                    factor: ch.unpack(),
                    params,
                    jitter,
                });
            }
            jitter *= 10.0;
        }
        Err(Error::Numeric(format!(
            "Matérn covariance not factorizable with jitter up to 1e-6·σ² ({params:?})"
        )))
    }

    pub fn n_bands(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eta = DVector::from_iterator(
            self.n_bands(),
            (0..self.n_bands()).map(|_| StandardNormal.sample(rng)),
        );
        (&self.factor * eta).iter().cloned().collect()
    }
}

pub fn sample_gp(grid: &WavelengthGrid, p: &Matern52Params, seed: u64) -> Result<Vec<f64>> {
    let sampler = GpSampler::new(grid, *p)?;
    Ok(sampler.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Result of one emissivity perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub scaled: EmissivitySpectrum,
    pub normalized: NormalizedEmissivity,
    /// The source spectrum was constant, so the perturbation was suppressed.
    pub constant_source: bool,
}

/// Perturbs the z-scored shape with a GP draw, rescales with the source statistics,
/// soft-clamps into [0, 1] and re-normalizes.
pub fn augment_emissivity(
    eps: &EmissivitySpectrum,
    p: &Matern52Params,
    seed: u64,
) -> Result<Augmented> {
    let sampler = GpSampler::new(&WavelengthGrid::lwir(eps.len())?, *p)?;
    augment_with(&sampler, eps, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn augment_with<R: Rng + ?Sized>(
    sampler: &GpSampler,
    eps: &EmissivitySpectrum,
    rng: &mut R,
) -> Result<Augmented> {
    check_len("emissivity vs GP sampler", sampler.n_bands(), eps.len())?;
    let ne = normalize(eps);
    let draw = sampler.sample(rng);
    let values: Vec<f64> = ne
        .values
        .iter()
        .zip(&draw)
        .map(|(t, g)| softclamp_scalar((t + g) * ne.sdev + ne.mean, 0.0, 1.0))
        .collect();
    let normalized = normalize_values(&values);
    Ok(Augmented {
        scaled: EmissivitySpectrum::new(values)?,
        normalized,
        constant_source: ne.constant,
    })
}

/// Generator coefficients of one synthetic atmosphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereRecipe {
    pub temperature_k: f64,
    pub air_temperature_k: f64,
    pub c_up: f64,
    pub c_down: f64,
    pub base_transmission: f64,
    pub edge_depth: f64,
    pub edge_width: f64,
    /// (center μm, width μm, depth) of each absorption notch.
    pub notches: Vec<(f64, f64, f64)>,
}

/// Atmosphere from an explicit transmission curve:
/// L_u = (1−τ)·c_u·B(T_air), L_d = (1−τ)·c_d·B(T_air), blackbody = B(T).
pub fn atmosphere_from_transmission(
    grid: &WavelengthGrid,
    temperature_k: f64,
    tau: Vec<f64>,
    air_temperature_k: f64,
    c_up: f64,
    c_down: f64,
) -> Result<AtmosphereParams> {
    check_len("transmission", grid.n_bands(), tau.len())?;
    let b_air = planck_radiance(air_temperature_k, grid)?;
    let upwelling = tau
        .iter()
        .zip(b_air.values())
        .map(|(t, b)| (1.0 - t) * c_up * b)
        .collect();
    let downwelling = tau
        .iter()
        .zip(b_air.values())
        .map(|(t, b)| (1.0 - t) * c_down * b)
        .collect();
    AtmosphereParams::from_temperature(grid, temperature_k, tau, upwelling, downwelling)
}

pub fn gen_atmosphere(
    grid: &WavelengthGrid,
    temperature_k: f64,
    seed: u64,
) -> Result<AtmosphereParams> {
    generate_atmosphere(grid, temperature_k, seed).map(|(a, _)| a)
}

/// Smooth transmission with a few absorption notches and an opaque short-wave edge.
pub fn generate_atmosphere(
    grid: &WavelengthGrid,
    temperature_k: f64,
    seed: u64,
) -> Result<(AtmosphereParams, AtmosphereRecipe)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lam = grid.values();
    let (lo, hi) = (grid.lambda_min(), grid.lambda_max());
    let span = hi - lo;

    let base_transmission = rng.random_range(0.6..0.92);
    let smooth = GpSampler::new(
        grid,
        Matern52Params {
            lengthscale: 0.25 * span,
            variance: 0.05f64.powi(2),
        },
    )?;
    let wiggle = smooth.sample(&mut rng);
    let edge_depth = rng.random_range(0.4..0.9);
    let edge_width = rng.random_range(0.05..0.12) * span;
    let n_notches = rng.random_range(2..=5);
    let notches: Vec<(f64, f64, f64)> = (0..n_notches)
        .map(|_| {
            (
                rng.random_range(lo..hi),
                rng.random_range(0.1..0.4),
                rng.random_range(0.05..0.35),
            )
        })
        .collect();

    let tau: Vec<f64> = lam
        .iter()
        .zip(&wiggle)
        .map(|(&l, &w)| {
            let mut t = base_transmission + w;
            t -= edge_depth * (-(l - lo) / edge_width).exp();
            for &(c, width, depth) in &notches {
                t -= depth * (-0.5 * ((l - c) / width).powi(2)).exp();
            }
            softclamp_scalar(t, 0.0, 1.0)
        })
        .collect();

    let air_temperature_k = temperature_k - rng.random_range(0.0..30.0);
    let c_up = rng.random_range(0.3..1.0);
    let c_down = rng.random_range(0.3..1.0);
    let atm =
        atmosphere_from_transmission(grid, temperature_k, tau, air_temperature_k, c_up, c_down)?;
    let recipe = AtmosphereRecipe {
        temperature_k,
        air_temperature_k,
        c_up,
        c_down,
        base_transmission,
        edge_depth,
        edge_width,
        notches,
    };
    Ok((atm, recipe))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub name: String,
    pub emissivity: EmissivitySpectrum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub n_bands: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl GridHeader {
    pub fn of(grid: &WavelengthGrid) -> Self {
        Self {
            n_bands: grid.n_bands(),
            lambda_min: grid.lambda_min(),
            lambda_max: grid.lambda_max(),
        }
    }

    pub fn grid(&self) -> Result<WavelengthGrid> {
        WavelengthGrid::uniform(self.n_bands, self.lambda_min, self.lambda_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LibraryFileEntry {
    name: String,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LibraryFile {
    grid: GridHeader,
    entries: Vec<LibraryFileEntry>,
}

/// Synthetic material library: each entry is softclamp(μ + σ·g) with μ ~ U[0.7, 0.98],
/// σ log-uniform on [0.002, 0.15] and g a unit GP draw with a per-entry lengthscale.
pub fn gen_library(m: usize, grid: &WavelengthGrid, seed: u64) -> Result<Vec<LibraryEntry>> {
    if m == 0 {
        return Err(Error::Domain("library size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|i| {
            let entry = random_material(grid, &mut rng, (0.7, 0.98), (0.002, 0.15))?;
            Ok(LibraryEntry {
                name: format!("mat-{i:04}"),
                emissivity: entry,
            })
        })
        .collect()
}

fn random_material(
    grid: &WavelengthGrid,
    rng: &mut ChaCha8Rng,
    mean_range: (f64, f64),
    sdev_range: (f64, f64),
) -> Result<EmissivitySpectrum> {
    let mean = rng.random_range(mean_range.0..mean_range.1);
    let sdev = (rng.random_range(sdev_range.0.ln()..sdev_range.1.ln())).exp();
    let lengthscale = rng.random_range(0.3..1.5);
    let g = GpSampler::new(
        grid,
        Matern52Params {
            lengthscale,
            variance: 1.0,
        },
    )?
    .sample(rng);
    EmissivitySpectrum::new(
        g.iter()
            .map(|v| softclamp_scalar(mean + sdev * v, 0.0, 1.0))
            .collect(),
    )
}

pub fn save_library(
    path: impl AsRef<Path>,
    grid: &WavelengthGrid,
    library: &[LibraryEntry],
) -> Result<()> {
    std::fs::write(path, library_to_json(grid, library)?)?;
    Ok(())
}

pub fn library_to_json(grid: &WavelengthGrid, library: &[LibraryEntry]) -> Result<String> {
    let file = LibraryFile {
        grid: GridHeader::of(grid),
        entries: library
            .iter()
            .map(|e| LibraryFileEntry {
                name: e.name.clone(),
                values: e.emissivity.values().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn load_library(path: impl AsRef<Path>) -> Result<(WavelengthGrid, Vec<LibraryEntry>)> {
    library_from_json(&std::fs::read_to_string(path)?)
}

pub fn library_from_json(text: &str) -> Result<(WavelengthGrid, Vec<LibraryEntry>)> {
    let file: LibraryFile = serde_json::from_str(text)?;
    let grid = file.grid.grid()?;
    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::with_capacity(file.entries.len());
    for e in file.entries {
        check_len(
            &format!("library entry {}", e.name),
            grid.n_bands(),
            e.values.len(),
        )?;
        if !seen.insert(e.name.clone()) {
            return Err(Error::Format(format!("duplicate library entry {}", e.name)));
        }
        entries.push(LibraryEntry {
            name: e.name,
            emissivity: EmissivitySpectrum::new(e.values)?,
        });
    }
    Ok((grid, entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub n_cubes: usize,
    pub cube_width: usize,
    pub cube_height: usize,
    pub n_bands: usize,
    pub temperature_range_k: (f64, f64),
    pub alpha_range: (f64, f64),
    pub library_size: usize,
    /// Fraction of pixels that receive a library target.
    pub target_fraction: f64,
    pub noise_rel: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            n_cubes: 8,
            cube_width: 32,
            cube_height: 32,
            n_bands: 32,
            temperature_range_k: (285.0, 315.0),
            alpha_range: (0.1, 1.0),
            library_size: 64,
            target_fraction: 0.1,
            noise_rel: DEFAULT_NOISE_REL,
            outlier_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.alpha_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Domain(format!(
                "alpha range {:?} not within [0, 1]",
                self.alpha_range
            )));
        }
        let (t0, t1) = self.temperature_range_k;
        if !(t0 > 0.0 && t0 <= t1 && t1 < 10_000.0) {
            return Err(Error::Domain(format!(
                "temperature range {:?} invalid",
                self.temperature_range_k
            )));
        }
        if self.cube_width == 0 || self.cube_height == 0 || self.n_bands < 3 {
            return Err(Error::Domain(
                "cube dimensions must be positive and n_bands ≥ 3".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_fraction) || self.noise_rel < 0.0 {
            return Err(Error::Domain(
                "target fraction must be in [0, 1] and noise nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Domain("outlier fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<WavelengthGrid> {
        WavelengthGrid::lwir(self.n_bands)
    }
}

/// One injected pixel with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub cube_id: String,
    pub pixel: usize,
    pub entry: String,
    pub alpha: f64,
    pub eps: EmissivitySpectrum,
    pub eps_norm: NormalizedEmissivity,
    /// Clean background radiance of the pixel.
    pub bg: RadianceSpectrum,
    /// Noise-free at-sensor radiance, propagate(eps, atm, alpha, bg).
    pub radiance: RadianceSpectrum,
    /// The stored cube pixel (radiance plus sensor noise, at f32 precision).
    pub measured: RadianceSpectrum,
    pub whitened: RadianceSpectrum,
}

impl TrainingExample {
    /// Difference between the measured pixel and the clean radiance.
    pub fn noise(&self) -> Vec<f64> {
        self.measured
            .values()
            .iter()
            .zip(self.radiance.values())
            .map(|(m, r)| m - r)
            .collect()
    }

    pub fn check(&self, atm: &AtmosphereParams) -> Result<()> {
        let l = propagate(&self.eps, atm, self.alpha, &self.bg)?;
        let err = l
            .values()
            .iter()
            .zip(self.radiance.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if err > 1e-10 * l.values().iter().fold(1.0f64, |m, v| m.max(v.abs())) {
            return Err(Error::Numeric(format!(
                "example {}:{} violates propagation by {err}",
                self.cube_id, self.pixel
            )));
        }
        Ok(())
    }
}

/// A generated cube together with its labels.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cube: HsiCube,
    pub examples: Vec<TrainingExample>,
    pub atmosphere: AtmosphereParams,
    pub recipe: AtmosphereRecipe,
    pub whitening: WhiteningModel,
    /// Emissivities of the background materials mixed into this cube.
    pub background_materials: Vec<EmissivitySpectrum>,
}

/// Builds one cube: background pixels mix 2–4 materials at full strength, a fraction of pixels
/// receive a library target at α ~ U(alpha_range), and Gaussian sensor noise is added.
pub fn build_scene(
    spec: &SyntheticSceneSpec,
    library: &[LibraryEntry],
    cube_id: &str,
    seed: u64,
) -> Result<Scene> {
    spec.validate()?;
    if library.is_empty() {
        return Err(Error::Domain("library is empty".into()));
    }
    let grid = spec.grid()?;
    let r = grid.n_bands();
    for e in library {
        check_len(&format!("library entry {}", e.name), r, e.emissivity.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t0, t1) = spec.temperature_range_k;
    let temperature = if t1 > t0 {
        rng.random_range(t0..t1)
    } else {
        t0
    };
    let (atmosphere, recipe) =
        generate_atmosphere(&grid, temperature, derive_named(seed, "atmosphere"))?;

    let n_bg = rng.random_range(2..=4);
    let background_materials: Vec<EmissivitySpectrum> = (0..n_bg)
        .map(|_| random_material(&grid, &mut rng, (0.85, 0.98), (0.005, 0.03)))
        .collect::<Result<_>>()?;
    let bg_radiance: Vec<Vec<f64>> = background_materials
        .iter()
        .map(|e| {
            propagate(e, &atmosphere, 1.0, &RadianceSpectrum::zeros(r)).map(|l| l.into_inner())
        })
        .collect::<Result<_>>()?;

    let n_pix = spec.cube_width * spec.cube_height;
    let clean_bg: Vec<Vec<f64>> = (0..n_pix)
        .map(|_| {
            let w: Vec<f64> = (0..n_bg)
                .map(|_| -rng.random_range(f64::EPSILON..1.0).ln())
                .collect();
            let total: f64 = w.iter().sum();
            (0..r)
                .map(|b| {
                    w.iter()
                        .zip(&bg_radiance)
                        .map(|(wi, l)| wi / total * l[b])
                        .sum()
                })
                .collect()
        })
        .collect();

    let n_targets = (spec.target_fraction * n_pix as f64).round() as usize;
    let target_pixels = rand::seq::index::sample(&mut rng, n_pix, n_targets.min(n_pix)).into_vec();
    let (a0, a1) = spec.alpha_range;
    let mut injected = Vec::with_capacity(target_pixels.len());
    let mut clean = clean_bg.clone();
    for &p in &target_pixels {
        let entry = &library[rng.random_range(0..library.len())];
        let alpha = if a1 > a0 {
            rng.random_range(a0..=a1)
        } else {
            a0
        };
        let bg = RadianceSpectrum::new(clean_bg[p].clone())?;
        let radiance = propagate(&entry.emissivity, &atmosphere, alpha, &bg)?;
        clean[p] = radiance.values().to_vec();
        injected.push((p, entry, alpha, bg, radiance));
    }

    let mean_radiance = clean.iter().flatten().sum::<f64>() / (n_pix * r) as f64;
    let noise_sd = spec.noise_rel * mean_radiance;
    let noisy: Vec<Vec<f64>> = clean
        .iter()
        .map(|px| {
            px.iter()
                .map(|v| {
                    v + noise_sd
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect()
        })
        .collect();
    let mut cube = HsiCube::from_pixels(cube_id, spec.cube_width, spec.cube_height, grid, &noisy)?;
    cube.metadata
        .insert("temperature_k".into(), format!("{temperature}"));
    cube.metadata
        .insert("noise_sd".into(), format!("{noise_sd}"));

    let whitening = fit_whitening_with(
        &cube,
        &WhiteningOptions {
            outlier_fraction: spec.outlier_fraction,
            max_pixels: None,
        },
    )?;
    let examples = injected
        .into_iter()
        .map(|(p, entry, alpha, bg, radiance)| {
            let measured = RadianceSpectrum::new(cube.pixel(p))?;
            let whitened = RadianceSpectrum::new(whitening.whiten_slice(measured.values()))?;
            let ex = TrainingExample {
                cube_id: cube_id.to_string(),
                pixel: p,
                entry: entry.name.clone(),
                alpha,
                eps: entry.emissivity.clone(),
                eps_norm: normalize(&entry.emissivity),
                bg,
                radiance,
                measured,
                whitened,
            };
            ex.check(&atmosphere)?;
            Ok(ex)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        cube,
        examples,
        atmosphere,
        recipe,
        whitening,
        background_materials,
    })
}

/// Library plus every cube of a scene spec, with per-cube seeds derived from `spec.seed`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticSceneSpec,
    pub grid: WavelengthGrid,
    pub library: Vec<LibraryEntry>,
    pub scenes: Vec<Scene>,
}

pub fn build_dataset(spec: &SyntheticSceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let grid = spec.grid()?;
    let library = gen_library(
        spec.library_size.max(1),
        &grid,
        derive_named(spec.seed, "library"),
    )?;
    let scenes = (0..spec.n_cubes)
        .map(|i| {
            build_scene(
                spec,
                &library,
                &format!("cube-{i:04}"),
                derive_seed(derive_named(spec.seed, "scene"), i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        grid,
        library,
        scenes,
    })
}

/// JSON sidecar stored next to each cube file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub version: u32,
    pub cube_id: String,
    pub atmosphere: AtmosphereParams,
    pub recipe: AtmosphereRecipe,
    pub background_mean: Vec<f64>,
    pub examples: Vec<TrainingExample>,
}

pub const SIDECAR_VERSION: u32 = 1;

impl Scene {
    pub fn sidecar(&self) -> SceneSidecar {
        SceneSidecar {
            version: SIDECAR_VERSION,
            cube_id: self.cube.id.clone(),
            atmosphere: self.atmosphere.clone(),
            recipe: self.recipe.clone(),
            background_mean: self.whitening.background_mean.clone(),
            examples: self.examples.clone(),
        }
    }

    /// Rebuilds a scene from a stored cube and its sidecar, refitting the whitening model.
    pub fn from_parts(cube: HsiCube, sidecar: SceneSidecar, outlier_fraction: f64) -> Result<Self> {
        if sidecar.version != SIDECAR_VERSION {
            return Err(Error::Format(format!(
                "unsupported sidecar version {}",
                sidecar.version
            )));
        }
        let whitening = fit_whitening_with(
            &cube,
            &WhiteningOptions {
                outlier_fraction,
                max_pixels: None,
            },
        )?;
        for ex in &sidecar.examples {
            ex.check(&sidecar.atmosphere)?;
        }
        Ok(Self {
            cube,
            examples: sidecar.examples,
            atmosphere: sidecar.atmosphere,
            recipe: sidecar.recipe,
            whitening,
            background_materials: Vec::new(),
        })
    }
}

/// Per-sample (mean, sdev) pairs of a batch of spectra.
pub fn batch_statistics(spectra: &[EmissivitySpectrum]) -> (Vec<f64>, Vec<f64>) {
    spectra.iter().map(|e| mean_sdev(e.values())).unzip()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
