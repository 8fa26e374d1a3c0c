//! Wavelength grids, spectrum containers and the at-sensor radiance forward model.
//!
//! Radiance is expressed in microflicks (1 μf = 1e-6 W·cm⁻²·sr⁻¹·μm⁻¹) and wavelengths
//! in micrometers throughout.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Planck constant, J·s (CODATA 2018, exact).
pub const PLANCK_H: f64 = 6.626_070_15e-34;
/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Boltzmann constant, J/K (CODATA 2018, exact).
pub const BOLTZMANN_K: f64 = 1.380_649e-23;
/// W·m⁻²·sr⁻¹·m⁻¹ to microflicks: 1e-4 (m² → cm²) · 1e-6 (per m → per μm) / 1e-6 (W → μW).
pub const SI_TO_MICROFLICKS: f64 = 1e-4;

/// Relative width of the saturating tail regions of [`softclamp`].
pub const SOFTCLAMP_MARGIN: f64 = 0.02;
const SOFTCLAMP_TAIL_POWER: f64 = 4.0;

/// Threshold below which a spectrum is treated as constant by [`normalize`].
pub const CONSTANT_SDEV_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    lambda_min: f64,
    lambda_max: f64,
    values: Vec<f64>,
}

impl WavelengthGrid {
    /// Uniformly spaced grid of `n_bands` wavelengths spanning `[lambda_min, lambda_max]`.
    pub fn uniform(n_bands: usize, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if n_bands < 2 {
            return Err(Error::Domain(format!(
                "grid needs at least 2 bands, got {n_bands}"
            )));
        }
        if !(lambda_min.is_finite() && lambda_max.is_finite())
            || lambda_min <= 0.0
            || lambda_min >= lambda_max
        {
            return Err(Error::Domain(format!(
                "invalid wavelength range [{lambda_min}, {lambda_max}]"
            )));
        }
        let step = (lambda_max - lambda_min) / (n_bands - 1) as f64;
        let mut values: Vec<f64> = (0..n_bands).map(|i| lambda_min + step * i as f64).collect();
        values[n_bands - 1] = lambda_max;
        Ok(Self {
            lambda_min,
            lambda_max,
            values,
        })
    }

    /// The 128-band 7.56–13.16 μm LWIR sensor grid.
    pub fn lwir(n_bands: usize) -> Result<Self> {
        Self::uniform(n_bands, 7.56, 13.16)
    }

    pub fn n_bands(&self) -> usize {
        self.values.len()
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> f64 {
        (self.lambda_max - self.lambda_min) / (self.values.len() - 1) as f64
    }
}

impl Default for WavelengthGrid {
    fn default() -> Self {
        Self::lwir(128).expect("default grid is valid")
    }
}

/// Emissivity values on a wavelength grid, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmissivitySpectrum(Vec<f64>);

impl EmissivitySpectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Domain(format!(
                "emissivity[{i}] = {v} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn constant(value: f64, n_bands: usize) -> Result<Self> {
        Self::new(vec![value; n_bands])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Radiance in microflicks on a wavelength grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RadianceSpectrum(Vec<f64>);

impl RadianceSpectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("radiance[{i}] is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(n_bands: usize) -> Self {
        Self(vec![0.0; n_bands])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A z-scored emissivity spectrum together with the statistics needed to undo it.
///
/// Statistics use the population (1/n) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedEmissivity {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sdev: f64,
    /// Set when the source spectrum was constant and `values` is the all-zero shape.
    pub constant: bool,
}

impl NormalizedEmissivity {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The radiance propagation set {B(T), τ, L_u, L_d} of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereParams {
    pub tau: Vec<f64>,
    pub upwelling: Vec<f64>,
    pub downwelling: Vec<f64>,
    pub blackbody: Vec<f64>,
    /// Scene temperature; `None` for estimated atmospheres that only carry a B(T) curve.
    pub temperature_k: Option<f64>,
}

impl AtmosphereParams {
    pub fn new(
        tau: Vec<f64>,
        upwelling: Vec<f64>,
        downwelling: Vec<f64>,
        blackbody: Vec<f64>,
        temperature_k: Option<f64>,
    ) -> Result<Self> {
        let n = tau.len();
        check_len("upwelling", n, upwelling.len())?;
        check_len("downwelling", n, downwelling.len())?;
        check_len("blackbody", n, blackbody.len())?;
        if tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Domain("transmission outside [0, 1]".into()));
        }
        for (name, curve) in [
            ("upwelling", &upwelling),
            ("downwelling", &downwelling),
            ("blackbody", &blackbody),
        ] {
            if curve.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        if let Some(t) = temperature_k {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Domain(format!("temperature {t} K must be positive")));
            }
        }
        Ok(Self {
            tau,
            upwelling,
            downwelling,
            blackbody,
            temperature_k,
        })
    }

    /// Builds the set with `B` evaluated from `temperature_k` on `grid`.
    pub fn from_temperature(
        grid: &WavelengthGrid,
        temperature_k: f64,
        tau: Vec<f64>,
        upwelling: Vec<f64>,
        downwelling: Vec<f64>,
    ) -> Result<Self> {
        let blackbody = planck_radiance(temperature_k, grid)?.into_inner();
        Self::new(tau, upwelling, downwelling, blackbody, Some(temperature_k))
    }

    pub fn n_bands(&self) -> usize {
        self.tau.len()
    }

    /// The four curves in the order τ, L_u, L_d, B.
    pub fn curves(&self) -> [&[f64]; 4] {
        [
            &self.tau,
            &self.upwelling,
            &self.downwelling,
            &self.blackbody,
        ]
    }
}

/// Black-body spectral radiance at `temperature_k` on every band of `grid`, in microflicks.
pub fn planck_radiance(temperature_k: f64, grid: &WavelengthGrid) -> Result<RadianceSpectrum> {
    if !(temperature_k.is_finite() && temperature_k > 0.0 && temperature_k < 10_000.0) {
        return Err(Error::Domain(format!(
            "temperature {temperature_k} K outside (0, 10000)"
        )));
    }
    let values = grid
        .values()
        .iter()
        .map(|&lam| planck_scalar(temperature_k, lam))
        .collect();
    Ok(RadianceSpectrum(values))
}

/// Planck's law at one wavelength (μm); result in microflicks.
pub fn planck_scalar(temperature_k: f64, lambda_um: f64) -> f64 {
    let lam = lambda_um * 1e-6;
    let x = PLANCK_H * SPEED_OF_LIGHT / (lam * BOLTZMANN_K * temperature_k);
    let prefactor = 2.0 * PLANCK_H * SPEED_OF_LIGHT * SPEED_OF_LIGHT / lam.powi(5);
    // exp_m1 overflows to +inf for very cold bodies, which correctly yields 0
    prefactor / x.exp_m1() * SI_TO_MICROFLICKS
}

/// L_t = τ(εB + (1−ε)L_d) + L_u, the radiance leaving the target and reaching the sensor.
pub fn target_radiance(
    eps: &EmissivitySpectrum,
    atm: &AtmosphereParams,
) -> Result<RadianceSpectrum> {
    check_len("emissivity vs atmosphere", atm.n_bands(), eps.len())?;
    let values = eps
        .values()
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            target_band(
                e,
                atm.tau[i],
                atm.blackbody[i],
                atm.downwelling[i],
                atm.upwelling[i],
            )
        })
        .collect();
    Ok(RadianceSpectrum(values))
}

#[inline]
pub(crate) fn target_band(
    eps: f64,
    tau: f64,
    blackbody: f64,
    downwelling: f64,
    upwelling: f64,
) -> f64 {
    tau * (eps * blackbody + (1.0 - eps) * downwelling) + upwelling
}

/// Total at-sensor radiance α·L_t(ε, 𝒜) + (1−α)·L_bg.
pub fn propagate(
    eps: &EmissivitySpectrum,
    atm: &AtmosphereParams,
    alpha: f64,
    bg: &RadianceSpectrum,
) -> Result<RadianceSpectrum> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "strength alpha = {alpha} outside [0, 1]"
        )));
    }
    check_len("background vs atmosphere", atm.n_bands(), bg.len())?;
    let target = target_radiance(eps, atm)?;
    let values = target
        .values()
        .iter()
        .zip(bg.values())
        .map(|(&t, &b)| alpha * t + (1.0 - alpha) * b)
        .collect();
    Ok(RadianceSpectrum(values))
}

/// Smooth strictly increasing map of the real line onto `(lo, hi)`.
///
/// The map is the identity on `[lo + m, hi − m]` with `m = SOFTCLAMP_MARGIN·(hi − lo)`, and
/// continues with unit slope into power-law tails `hi − m·(1 + u/(p·m))^(−p)` that approach the
/// bounds without reaching them.
pub fn softclamp(x: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::Domain(format!(
            "softclamp bounds lo = {lo} must be below hi = {hi}"
        )));
    }
    Ok(x.iter().map(|&v| softclamp_scalar(v, lo, hi)).collect())
}

/// Scalar [`softclamp`]; callers guarantee `lo < hi`.
pub fn softclamp_scalar(x: f64, lo: f64, hi: f64) -> f64 {
    let m = SOFTCLAMP_MARGIN * (hi - lo);
    let p = SOFTCLAMP_TAIL_POWER;
    if x > hi - m {
        let u = x - (hi - m);
        hi - m * (1.0 + u / (p * m)).powf(-p)
    } else if x < lo + m {
        let u = (lo + m) - x;
        lo + m * (1.0 + u / (p * m)).powf(-p)
    } else {
        x
    }
}

/// Derivative of [`softclamp_scalar`] with respect to `x`.
pub fn softclamp_derivative(x: f64, lo: f64, hi: f64) -> f64 {
    let m = SOFTCLAMP_MARGIN * (hi - lo);
    let p = SOFTCLAMP_TAIL_POWER;
    let u = if x > hi - m {
        x - (hi - m)
    } else if x < lo + m {
        (lo + m) - x
    } else {
        return 1.0;
    };
    (1.0 + u / (p * m)).powf(-p - 1.0)
}

/// Population mean and standard deviation.
pub fn mean_sdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores a spectrum against its own statistics.
///
/// Constant spectra (sdev ≤ 1e-12) yield the zero shape with `sdev = 0` and `constant = true`.
pub fn normalize(eps: &EmissivitySpectrum) -> NormalizedEmissivity {
    normalize_values(eps.values())
}

pub fn normalize_values(values: &[f64]) -> NormalizedEmissivity {
    let (mean, sdev) = mean_sdev(values);
    if sdev <= CONSTANT_SDEV_EPS {
        let mean = if values.iter().all(|&v| v == values[0]) {
            values[0]
        } else {
            mean
        };
        return NormalizedEmissivity {
            values: vec![0.0; values.len()],
            mean,
            sdev: 0.0,
            constant: true,
        };
    }
    let values = values.iter().map(|v| (v - mean) / sdev).collect();
    NormalizedEmissivity {
        values,
        mean,
        sdev,
        constant: false,
    }
}

/// Rescales a normalized spectrum and soft-clamps it into `[0, 1]`.
pub fn denormalize(ne: &NormalizedEmissivity) -> EmissivitySpectrum {
    let values = ne
        .values
        .iter()
        .map(|v| softclamp_scalar(v * ne.sdev + ne.mean, 0.0, 1.0))
        .collect();
    EmissivitySpectrum(values)
}
