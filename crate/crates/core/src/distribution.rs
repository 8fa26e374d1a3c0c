use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical moments of a sample matrix (rows are samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Sample covariance with 1/(n−1) normalization.
    pub cov: Vec<Vec<f64>>,
    pub sdev: Vec<f64>,
}

impl Moments {
    pub fn of(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 samples for a covariance, got {n}"
            )));
        }
        let r = samples[0].len();
        if samples.iter().any(|s| s.len() != r) {
            return Err(Error::Shape("ragged sample matrix".into()));
        }
        let mut mean = vec![0.0; r];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![vec![0.0; r]; r];
        let mut d = vec![0.0; r];
        for s in samples {
            for j in 0..r {
                d[j] = s[j] - mean[j];
            }
            for i in 0..r {
                let di = d[i];
                let row = &mut cov[i];
                for j in i..r {
                    row[j] += di * d[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..r {
            for j in i..r {
                let v = cov[i][j] / denom;
                cov[i][j] = v;
                cov[j][i] = v;
            }
        }
        let sdev = (0..r).map(|i| cov[i][i].sqrt()).collect();
        Ok(Self { mean, cov, sdev })
    }
}

/// Monte-Carlo emissivity samples for one radiance observation, in scaled and normalized space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissivityDistribution {
    pub scaled: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    pub scaled_moments: Moments,
    pub normalized_moments: Moments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Scaled,
    Normalized,
}

impl EmissivityDistribution {
    pub fn from_samples(scaled: Vec<Vec<f64>>, normalized: Vec<Vec<f64>>) -> Result<Self> {
        if scaled.len() != normalized.len() {
            return Err(Error::Shape(
                "scaled and normalized sample counts differ".into(),
            ));
        }
        let scaled_moments = Moments::of(&scaled)?;
        let normalized_moments = Moments::of(&normalized)?;
        Ok(Self {
            scaled,
            normalized,
            scaled_moments,
            normalized_moments,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.scaled.len()
    }

    pub fn n_bands(&self) -> usize {
        self.scaled_moments.mean.len()
    }

    pub fn moments(&self, space: Space) -> &Moments {
        match space {
            Space::Scaled => &self.scaled_moments,
            Space::Normalized => &self.normalized_moments,
        }
    }

    pub fn mean_vec(&self) -> &[f64] {
        &self.scaled_moments.mean
    }
}
