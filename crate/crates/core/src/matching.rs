//! Variance-aware material identification against a spectral library.

use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::distribution::{EmissivityDistribution, Moments, Space};
use crate::error::{check_len, Error, Result};
use crate::spectra::normalize_values;
use crate::synth::LibraryEntry;

/// Relative covariance ridge: Σ + δ·trace(Σ)/r·I.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Floor on per-band standard deviations in the per-wavelength likelihood.
pub const SDEV_FLOOR: f64 = 1e-6;
/// Distance sums are floored here before inversion so a perfect match scores finitely.
pub const MIN_DISTANCE_SUM: f64 = 1e-12;

/// Mahalanobis metric of one empirical distribution, factorized once.
pub struct MahalanobisMetric {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl MahalanobisMetric {
    pub fn new(moments: &Moments, ridge: f64) -> Result<Self> {
        let r = moments.mean.len();
        let mut cov = DMatrix::from_fn(r, r, |i, j| moments.cov[i][j]);
        let trace = cov.trace();
        let delta = ridge * trace / r as f64;
        for i in 0..r {
            cov[(i, i)] += delta;
        }
        let chol = Cholesky::new(cov)
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        Ok(Self {
            mean: DVector::from_column_slice(&moments.mean),
            chol,
        })
    }

    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        check_len("candidate spectrum", self.mean.len(), x.len())?;
        let d = DVector::from_column_slice(x) - &self.mean;
        let q = d.dot(&self.chol.solve(&d));
        Ok(q.max(0.0).sqrt())
    }
}

pub fn mahalanobis(dist: &EmissivityDistribution, eps: &[f64], space: Space) -> Result<f64> {
    mahalanobis_with_ridge(dist, eps, space, DEFAULT_RIDGE)
}

pub fn mahalanobis_with_ridge(
    dist: &EmissivityDistribution,
    eps: &[f64],
    space: Space,
    ridge: f64,
) -> Result<f64> {
    if dist.n_samples() < 2 {
        return Err(Error::Domain(
            "distribution needs at least 2 samples".into(),
        ));
    }
    MahalanobisMetric::new(dist.moments(space), ridge)?.distance(eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub name: String,
    pub score: f64,
    pub d_md_scaled: f64,
    pub d_md_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchScorecard {
    pub query_id: String,
    pub ranked: Vec<MatchEntry>,
    pub zeta: f64,
}

impl MatchScorecard {
    pub fn ranking(&self) -> Vec<String> {
        self.ranked.iter().map(|e| e.name.clone()).collect()
    }
}

/// Scores every library entry by M = [(d_MD(p̃, ε̃) + d_MD(p, ε))⁻¹ − ζ]^(1/2), where ζ is the
/// smallest inverse distance sum over the library, so the least likely entry scores exactly 0.
pub fn match_score(
    query_id: &str,
    dist: &EmissivityDistribution,
    library: &[LibraryEntry],
) -> Result<MatchScorecard> {
    match_score_with_ridge(query_id, dist, library, DEFAULT_RIDGE)
}

pub fn match_score_with_ridge(
    query_id: &str,
    dist: &EmissivityDistribution,
    library: &[LibraryEntry],
    ridge: f64,
) -> Result<MatchScorecard> {
    if library.is_empty() {
        return Err(Error::Domain("library is empty".into()));
    }
    let scaled = MahalanobisMetric::new(&dist.scaled_moments, ridge)?;
    let normalized = MahalanobisMetric::new(&dist.normalized_moments, ridge)?;
    let mut rows = Vec::with_capacity(library.len());
    for entry in library {
        let ds = scaled.distance(entry.emissivity.values())?;
        let dn = normalized.distance(&normalize_values(entry.emissivity.values()).values)?;
        rows.push((
            entry.name.clone(),
            ds,
            dn,
            1.0 / (ds + dn).max(MIN_DISTANCE_SUM),
        ));
    }
    let zeta = rows.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    let mut ranked: Vec<MatchEntry> = rows
        .into_iter()
        .map(|(name, ds, dn, m0)| MatchEntry {
            name,
            score: (m0 - zeta).max(0.0).sqrt(),
            d_md_scaled: ds,
            d_md_normalized: dn,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(MatchScorecard {
        query_id: query_id.to_string(),
        ranked,
        zeta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMetric {
    /// Cosine distance 1 − cos(ε, E[p̂]).
    CD,
    /// Euclidean distance ‖ε − E[p̂]‖.
    L2,
}

/// Variance-neglecting ranking of the library against the expectation vector (ascending).
pub fn baseline_scores(
    dist: &EmissivityDistribution,
    library: &[LibraryEntry],
    metric: BaselineMetric,
) -> Result<Vec<(String, f64)>> {
    let mu = dist.mean_vec();
    let mu_norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    if metric == BaselineMetric::CD && mu_norm == 0.0 {
        return Err(Error::Domain(
            "cosine distance to a zero expectation vector".into(),
        ));
    }
    let mut out = Vec::with_capacity(library.len());
    for entry in library {
        let e = entry.emissivity.values();
        check_len("library entry", mu.len(), e.len())?;
        let d = match metric {
            BaselineMetric::L2 => e
                .iter()
                .zip(mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            BaselineMetric::CD => {
                let dot: f64 = e.iter().zip(mu).map(|(a, b)| a * b).sum();
                let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if en == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (en * mu_norm)
                }
            }
        };
        out.push((entry.name.clone(), d));
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// log N(x_λ; μ_λ, σ_λ²) per band, σ floored at 1e-6.
pub fn per_wavelength_loglik(moments: &Moments, x: &[f64]) -> Result<Vec<f64>> {
    check_len("ground truth spectrum", moments.mean.len(), x.len())?;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    Ok(x.iter()
        .zip(&moments.mean)
        .zip(&moments.sdev)
        .map(|((&v, &m), &s)| {
            let s = s.max(SDEV_FLOOR);
            let z = (v - m) / s;
            -half_log_2pi - s.ln() - 0.5 * z * z
        })
        .collect())
}

/// Per-band log-likelihood of a true emissivity in both spaces: (scaled, normalized).
pub fn loglik_both(
    dist: &EmissivityDistribution,
    eps_true: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scaled = per_wavelength_loglik(&dist.scaled_moments, eps_true)?;
    let normalized =
        per_wavelength_loglik(&dist.normalized_moments, &normalize_values(eps_true).values)?;
    Ok((scaled, normalized))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatcherKind {
    MD,
    CD,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatcherVariant {
    pub kind: MatcherKind,
    pub conditioned: bool,
}

impl MatcherVariant {
    pub fn label(&self) -> String {
        format!(
            "{:?}-{}",
            self.kind,
            if self.conditioned {
                "conditioned"
            } else {
                "unconditioned"
            }
        )
    }
}

/// One identification trial: a ranked candidate list and the true material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitExperiment {
    pub ranking: Vec<String>,
    pub truth: String,
    pub alpha: f64,
}

impl HitExperiment {
    /// 1-based rank of the truth, or `None` if absent.
    pub fn truth_rank(&self) -> Option<usize> {
        self.ranking
            .iter()
            .position(|n| *n == self.truth)
            .map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateCurve {
    pub matcher: MatcherVariant,
    pub alpha_min: f64,
    pub k_values: Vec<usize>,
    pub hit_rate: Vec<f64>,
    pub n_trials: usize,
}

impl HitRateCurve {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_values
            .iter()
            .position(|&v| v == k)
            .map(|i| self.hit_rate[i])
    }
}

pub const DEFAULT_ALPHA_GRID: [f64; 4] = [0.1, 0.25, 0.5, 0.75];

/// Fraction of trials with α ≥ `alpha_min` whose truth ranks within the top K, for each K.
pub fn hit_rate(
    matcher: MatcherVariant,
    experiments: &[HitExperiment],
    k_values: &[usize],
    alpha_min: f64,
) -> Result<HitRateCurve> {
    let ranks: Vec<Option<usize>> = experiments
        .iter()
        .filter(|e| e.alpha >= alpha_min)
        .map(|e| e.truth_rank())
        .collect();
    if ranks.is_empty() {
        return Err(Error::Domain(format!("no trials with alpha ≥ {alpha_min}")));
    }
    let n = ranks.len() as f64;
    let hit_rate = k_values
        .iter()
        .map(|&k| {
            ranks
                .iter()
                .filter(|r| matches!(r, Some(v) if *v <= k))
                .count() as f64
                / n
        })
        .collect();
    Ok(HitRateCurve {
        matcher,
        alpha_min,
        k_values: k_values.to_vec(),
        hit_rate,
        n_trials: ranks.len(),
    })
}

/// Total order used for ranking ties: descending score, then ascending name.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::EmissivitySpectrum;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_dist(n: usize, r: usize, seed: u64) -> EmissivityDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scaled: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..r)
                    .map(|j| {
                        0.8 + 0.01 * j as f64
                            + 0.02
                                * <StandardNormal as Distribution<f64>>::sample(
                                    &StandardNormal,
                                    &mut rng,
                                )
                    })
                    .collect()
            })
            .collect();
        let normalized = scaled.iter().map(|s| normalize_values(s).values).collect();
        EmissivityDistribution::from_samples(scaled, normalized).unwrap()
    }

    fn entry(name: &str, v: Vec<f64>) -> LibraryEntry {
        LibraryEntry {
            name: name.into(),
            emissivity: EmissivitySpectrum::new(v).unwrap(),
        }
    }

    #[test]
    fn center_has_zero_distance() {
        let d = gaussian_dist(200, 6, 1);
        let mu = d.mean_vec().to_vec();
        assert!(mahalanobis(&d, &mu, Space::Scaled).unwrap() < 1e-12);
        assert!(mahalanobis(&d, &mu[..3], Space::Scaled).is_err());
    }

    #[test]
    fn worst_entry_scores_zero_and_center_wins() {
        let d = gaussian_dist(300, 8, 2);
        let mut lib = vec![entry("center", d.mean_vec().to_vec())];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..6 {
            lib.push(entry(
                &format!("m{i}"),
                (0..8).map(|_| rng.random_range(0.6..0.99)).collect(),
            ));
        }
        let card = match_score("q", &d, &lib).unwrap();
        assert_eq!(card.ranked[0].name, "center");
        assert_eq!(card.ranked.last().unwrap().score, 0.0);
        for w in card.ranked.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn baselines_rank_expectation_first() {
        let d = gaussian_dist(100, 5, 4);
        let mu = d.mean_vec().to_vec();
        let lib = vec![
            entry("a", vec![0.5; 5]),
            entry("mu", mu.clone()),
            entry("b", vec![0.99; 5]),
        ];
        for metric in [BaselineMetric::CD, BaselineMetric::L2] {
            let out = baseline_scores(&d, &lib, metric).unwrap();
            assert_eq!(out[0].0, "mu");
            assert!(out[0].1.abs() < 1e-12);
        }
        let half: Vec<f64> = mu.iter().map(|v| v * 0.5).collect();
        let lib2 = vec![entry("mu", mu), entry("half", half)];
        let cd = baseline_scores(&d, &lib2, BaselineMetric::CD).unwrap();
        assert!((cd[0].1 - cd[1].1).abs() < 1e-12);
    }

    #[test]
    fn loglik_mode_and_two_sigma() {
        let m = Moments {
            mean: vec![0.5, 0.2],
            cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            sdev: vec![1.0, 1.0],
        };
        let mode = -0.5 * (2.0 * std::f64::consts::PI).ln();
        let ll = per_wavelength_loglik(&m, &[0.5, 2.2]).unwrap();
        assert!((ll[0] - mode).abs() < 1e-15);
        assert!((ll[1] - (mode - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn hit_rate_edges() {
        let v = MatcherVariant {
            kind: MatcherKind::MD,
            conditioned: true,
        };
        let names: Vec<String> = (0..5).map(|i| format!("m{i}")).collect();
        let exps: Vec<HitExperiment> = (0..5)
            .map(|i| {
                let mut ranking = names.clone();
                ranking.rotate_left(i);
                HitExperiment {
                    ranking,
                    truth: "m0".into(),
                    alpha: 0.2 * (i + 1) as f64,
                }
            })
            .collect();
        let c = hit_rate(v, &exps, &[1, 2, 5], 0.0).unwrap();
        assert_eq!(c.hit_rate[2], 1.0);
        assert!((c.hit_rate[0] - 0.2).abs() < 1e-15);
        assert!(hit_rate(v, &exps, &[1], 2.0).is_err());
    }
}
