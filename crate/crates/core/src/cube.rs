//! Hyperspectral cubes, robust background statistics and covariance whitening.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::spectra::{RadianceSpectrum, WavelengthGrid};

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u16 = 1;

/// Relative eigenvalue floor applied before inverting the covariance square root.
pub const EIGEN_FLOOR_REL: f64 = 1e-10;
/// Absolute eigenvalue floor, used when the covariance vanishes entirely.
pub const EIGEN_FLOOR_ABS: f64 = 1e-12;
/// Ridge added to the first-pass covariance when ranking outliers.
const OUTLIER_RIDGE_REL: f64 = 1e-6;

/// An N×M×r radiance cube. Pixel (i, j) band b lives at `data[(i·M + j)·r + b]`.
///
/// Values are held at single precision, matching the on-disk format, so that write/read
/// round trips are bit-exact. All arithmetic on them is done in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub id: String,
    width: usize,
    height: usize,
    grid: WavelengthGrid,
    data: Vec<f32>,
    pub metadata: BTreeMap<String, String>,
}

impl HsiCube {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        grid: WavelengthGrid,
        data: Vec<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain("cube dimensions must be positive".into()));
        }
        let expected = width * height * grid.n_bands();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "cube data has {} values, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cube contains non-finite radiance".into()));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            grid,
            data,
            metadata: BTreeMap::new(),
        })
    }

    /// Builds a cube from a flattened (N·M)×r matrix of f64 pixels, rounding to f32.
    pub fn from_pixels(
        id: impl Into<String>,
        width: usize,
        height: usize,
        grid: WavelengthGrid,
        pixels: &[Vec<f64>],
    ) -> Result<Self> {
        let r = grid.n_bands();
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}×{height} cube",
                pixels.len()
            )));
        }
        let mut data = Vec::with_capacity(pixels.len() * r);
        for p in pixels {
            check_len("pixel", r, p.len())?;
            data.extend(p.iter().map(|&v| v as f32));
        }
        Self::new(id, width, height, grid, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_bands(&self) -> usize {
        self.grid.n_bands()
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Pixel by flat (row-major) index.
    pub fn pixel(&self, flat_index: usize) -> Vec<f64> {
        let r = self.n_bands();
        self.data[flat_index * r..(flat_index + 1) * r]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn pixel_at(&self, row: usize, col: usize) -> Vec<f64> {
        self.pixel(row * self.height + col)
    }

    pub fn coords(&self, flat_index: usize) -> (usize, usize) {
        (flat_index / self.height, flat_index % self.height)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CUBE_MAGIC)?;
        w.write_all(&CUBE_VERSION.to_le_bytes())?;
        for dim in [self.width, self.height, self.n_bands()] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Format(format!("dimension {dim} exceeds u32")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        w.write_all(&self.grid.lambda_min().to_le_bytes())?;
        w.write_all(&self.grid.lambda_max().to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(id: impl Into<String>, mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CUBE_MAGIC {
            return Err(Error::Format("bad cube magic".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != CUBE_VERSION {
            return Err(Error::Format(format!("unsupported cube version {version}")));
        }
        let mut b4 = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let lambda_min = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let lambda_max = f64::from_le_bytes(b8);
        let grid = WavelengthGrid::uniform(dims[2], lambda_min, lambda_max)?;
        let count = dims[0] * dims[1] * dims[2];
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(id, dims[0], dims[1], grid, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("cube")
            .to_string();
        let bytes = std::fs::read(path)?;
        Self::read_from(id, bytes.as_slice())
    }
}

/// Row-major (row, col) flattening of a cube into an (N·M)×r matrix.
pub fn flatten(cube: &HsiCube) -> Vec<Vec<f64>> {
    (0..cube.n_pixels()).map(|i| cube.pixel(i)).collect()
}

pub fn unflatten(
    id: impl Into<String>,
    width: usize,
    height: usize,
    grid: WavelengthGrid,
    rows: &[Vec<f64>],
) -> Result<HsiCube> {
    HsiCube::from_pixels(id, width, height, grid, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhiteningOptions {
    pub outlier_fraction: f64,
    /// Estimate statistics from at most this many evenly strided pixels.
    pub max_pixels: Option<usize>,
}

impl Default for WhiteningOptions {
    fn default() -> Self {
        Self {
            outlier_fraction: 0.2,
            max_pixels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningModel {
    pub background_mean: Vec<f64>,
    /// Inlier covariance; replaced by its floored reconstruction when the floor engaged.
    pub covariance: Vec<Vec<f64>>,
    pub whitener: Vec<Vec<f64>>,
    /// One flag per estimation pixel, `true` for inliers.
    pub inlier_mask: Vec<bool>,
    pub outlier_fraction: f64,
    pub floor_engaged: bool,
}

impl WhiteningModel {
    pub fn n_bands(&self) -> usize {
        self.background_mean.len()
    }

    pub fn background(&self) -> RadianceSpectrum {
        RadianceSpectrum::new(self.background_mean.clone()).expect("finite mean")
    }

    pub fn whiten_slice(&self, l: &[f64]) -> Vec<f64> {
        let r = self.n_bands();
        let centered: Vec<f64> = l
            .iter()
            .zip(&self.background_mean)
            .map(|(a, b)| a - b)
            .collect();
        (0..r)
            .map(|j| {
                centered
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * self.whitener[i][j])
                    .sum()
            })
            .collect()
    }
}

/// Fits the robust background mean and whitening transform with the default options.
pub fn fit_whitening(cube: &HsiCube, outlier_fraction: f64) -> Result<WhiteningModel> {
    fit_whitening_with(
        cube,
        &WhiteningOptions {
            outlier_fraction,
            max_pixels: None,
        },
    )
}

/// Two-pass fit: plain mean/covariance over all pixels, removal of the ⌈f·n⌉ pixels farthest
/// in Mahalanobis distance, then mean/covariance over the inliers and W = V·Λ^(−1/2)·Vᵀ.
pub fn fit_whitening_with(cube: &HsiCube, opts: &WhiteningOptions) -> Result<WhiteningModel> {
    if !(0.0..1.0).contains(&opts.outlier_fraction) {
        return Err(Error::Domain(format!(
            "outlier fraction {} outside [0, 1)",
            opts.outlier_fraction
        )));
    }
    let r = cube.n_bands();
    let indices: Vec<usize> = match opts.max_pixels {
        Some(k) if k > 0 && k < cube.n_pixels() => {
            let stride = cube.n_pixels() as f64 / k as f64;
            (0..k).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..cube.n_pixels()).collect(),
    };
    let pixels: Vec<DVector<f64>> = indices
        .iter()
        .map(|&i| DVector::from_vec(cube.pixel(i)))
        .collect();
    let n = pixels.len();

    let n_out = (opts.outlier_fraction * n as f64).ceil() as usize;
    let n_out = n_out.min(n.saturating_sub(1));
    let mut inlier_mask = vec![true; n];
    if n_out > 0 {
        let all: Vec<usize> = (0..n).collect();
        let (mean0, mut cov0) = mean_cov(&pixels, &all, r);
        let ridge = OUTLIER_RIDGE_REL * cov0.trace() / r as f64 + EIGEN_FLOOR_ABS;
        for i in 0..r {
            cov0[(i, i)] += ridge;
        }
        let chol = cov0
            .cholesky()
            .ok_or_else(|| Error::Numeric("first-pass covariance not positive definite".into()))?;
        let mut dist: Vec<(f64, usize)> = pixels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = p - &mean0;
                (d.dot(&chol.solve(&d)), i)
            })
            .collect();
        dist.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in dist.iter().take(n_out) {
            inlier_mask[i] = false;
        }
    }
    let inliers: Vec<usize> = (0..n).filter(|&i| inlier_mask[i]).collect();
    let (mean, cov) = mean_cov(&pixels, &inliers, r);

    let eig = SymmetricEigen::new(cov.clone());
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = (EIGEN_FLOOR_REL * lambda_max).max(EIGEN_FLOOR_ABS);
    let mut floor_engaged = false;
    let floored: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < floor {
                floor_engaged = true;
                floor
            } else {
                l
            }
        })
        .collect();
    let v = &eig.eigenvectors;
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        r,
        floored.iter().map(|l| 1.0 / l.sqrt()),
    ));
    let w = v * inv_sqrt * v.transpose();
    let w = (&w + w.transpose()) * 0.5;
    let covariance = if floor_engaged {
        let lam = DMatrix::from_diagonal(&DVector::from_vec(floored));
        v * lam * v.transpose()
    } else {
        cov
    };
    Ok(WhiteningModel {
        background_mean: mean.iter().cloned().collect(),
        covariance: to_rows(&covariance),
        whitener: to_rows(&w),
        inlier_mask,
        outlier_fraction: opts.outlier_fraction,
        floor_engaged,
    })
}

fn mean_cov(pixels: &[DVector<f64>], subset: &[usize], r: usize) -> (DVector<f64>, DMatrix<f64>) {
    let k = subset.len();
    let mut mean = DVector::zeros(r);
    for &i in subset {
        mean += &pixels[i];
    }
    mean /= k as f64;
    let mut cov = DMatrix::zeros(r, r);
    for &i in subset {
        let d = &pixels[i] - &mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    // syger fills the lower triangle only
    for a in 0..r {
        for b in (a + 1)..r {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    if k > 1 {
        cov /= (k - 1) as f64;
    } else {
        cov.fill(0.0);
    }
    (mean, cov)
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

/// L_w = (L − L̄_bg)·W.
pub fn whiten(l: &RadianceSpectrum, model: &WhiteningModel) -> Result<RadianceSpectrum> {
    check_len("radiance vs whitening model", model.n_bands(), l.len())?;
    RadianceSpectrum::new(model.whiten_slice(l.values()))
}

/// A random subset of a cube's pixels, as consumed by the set encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelSet {
    pub cube_id: String,
    pub spectra: Vec<Vec<f64>>,
    pub indices: Vec<(usize, usize)>,
}

impl PixelSet {
    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }
}

/// Draws `count` sets of `set_size` distinct pixels each; sets are independent of one another.
pub fn sample_pixel_sets(
    cube: &HsiCube,
    set_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PixelSet>> {
    let n = cube.n_pixels();
    if set_size == 0 || set_size > n {
        return Err(Error::Domain(format!("set size {set_size} not in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let picks = index::sample(&mut rng, n, set_size).into_vec();
            PixelSet {
                cube_id: cube.id.clone(),
                spectra: picks.iter().map(|&i| cube.pixel(i)).collect(),
                indices: picks.iter().map(|&i| cube.coords(i)).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_cube(width: usize, height: usize, r: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = WavelengthGrid::lwir(r).unwrap();
        let pixels: Vec<Vec<f64>> = (0..width * height)
            .map(|_| {
                (0..r)
                    .map(|b| {
                        800.0
                            + b as f64
                            + 5.0
                                * <StandardNormal as Distribution<f64>>::sample(
                                    &StandardNormal,
                                    &mut rng,
                                )
                    })
                    .collect()
            })
            .collect();
        HsiCube::from_pixels("g", width, height, grid, &pixels).unwrap()
    }

    #[test]
    fn flatten_is_row_major() {
        let grid = WavelengthGrid::lwir(3).unwrap();
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let cube = HsiCube::new("t", 2, 2, grid.clone(), data).unwrap();
        let flat = flatten(&cube);
        assert_eq!(flat.len(), 4);
        assert_eq!(flat[0], vec![0.0, 1.0, 2.0]);
        assert_eq!(flat[1], vec![3.0, 4.0, 5.0]);
        assert_eq!(flat[3], vec![9.0, 10.0, 11.0]);
        assert_eq!(cube.pixel_at(1, 0), flat[2]);
        let back = unflatten("t", 2, 2, grid, &flat).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn cube_bytes_round_trip() {
        let cube = gaussian_cube(5, 7, 6, 1);
        let bytes = cube.to_bytes();
        assert_eq!(&bytes[..4], b"HSIC");
        assert_eq!(bytes.len(), 4 + 2 + 12 + 16 + 5 * 7 * 6 * 4);
        let back = HsiCube::read_from("g", bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.raw(), cube.raw());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(HsiCube::read_from("g", bad.as_slice()).is_err());
    }

    #[test]
    fn identical_pixels_hit_the_floor() {
        let grid = WavelengthGrid::lwir(4).unwrap();
        let px = vec![vec![100.0, 200.0, 300.0, 400.0]; 16];
        let cube = HsiCube::from_pixels("flat", 4, 4, grid, &px).unwrap();
        let m = fit_whitening(&cube, 0.0).unwrap();
        assert_eq!(m.background_mean, px[0]);
        assert!(m.floor_engaged);
        let expected = EIGEN_FLOOR_ABS.powf(-0.5);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { expected } else { 0.0 };
                assert!(
                    (m.whitener[i][j] - want).abs() <= 1e-9 * expected,
                    "{i},{j}"
                );
                let cov_want = if i == j { EIGEN_FLOOR_ABS } else { 0.0 };
                assert!((m.covariance[i][j] - cov_want).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn outlier_count_is_ceil_fraction() {
        let cube = gaussian_cube(10, 10, 4, 2);
        let m = fit_whitening(&cube, 0.2).unwrap();
        assert_eq!(m.inlier_mask.iter().filter(|&&b| !b).count(), 20);
        let cube = gaussian_cube(7, 3, 4, 2);
        let m = fit_whitening(&cube, 0.2).unwrap();
        assert_eq!(m.inlier_mask.iter().filter(|&&b| !b).count(), 5);
    }

    #[test]
    fn whitener_is_symmetric_and_centers() {
        let cube = gaussian_cube(16, 16, 8, 3);
        let m = fit_whitening(&cube, 0.2).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert!((m.whitener[i][j] - m.whitener[j][i]).abs() < 1e-10);
            }
        }
        let z = whiten(&m.background(), &m).unwrap();
        assert!(z.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn whiten_is_affine() {
        let cube = gaussian_cube(16, 16, 8, 4);
        let m = fit_whitening(&cube, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l1: Vec<f64> = (0..8).map(|_| rng.random_range(700.0..900.0)).collect();
        let l2: Vec<f64> = (0..8).map(|_| rng.random_range(700.0..900.0)).collect();
        let a = 0.3;
        let mix: Vec<f64> = l1
            .iter()
            .zip(&l2)
            .map(|(x, y)| a * x + (1.0 - a) * y)
            .collect();
        let w1 = m.whiten_slice(&l1);
        let w2 = m.whiten_slice(&l2);
        let wm = m.whiten_slice(&mix);
        for j in 0..8 {
            assert!(
                (wm[j] - (a * w1[j] + (1.0 - a) * w2[j])).abs()
                    < 1e-12 * w1[j].abs().max(1.0) * 10.0
            );
        }
        assert!(whiten(&RadianceSpectrum::zeros(3), &m).is_err());
    }

    #[test]
    fn whitening_of_inliers_gives_identity_without_floor() {
        let cube = gaussian_cube(32, 32, 8, 5);
        let m = fit_whitening(&cube, 0.2).unwrap();
        assert!(!m.floor_engaged);
        let cov = DMatrix::from_fn(8, 8, |i, j| m.covariance[i][j]);
        let w = DMatrix::from_fn(8, 8, |i, j| m.whitener[i][j]);
        let prod = &w * cov * w.transpose();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fit_is_invariant_to_pixel_order() {
        let cube = gaussian_cube(12, 12, 6, 6);
        let mut rows = flatten(&cube);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::seq::SliceRandom;
        rows.shuffle(&mut rng);
        let shuffled = HsiCube::from_pixels("s", 12, 12, cube.grid().clone(), &rows).unwrap();
        let a = fit_whitening(&cube, 0.2).unwrap();
        let b = fit_whitening(&shuffled, 0.2).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!(
                    (a.covariance[i][j] - b.covariance[i][j]).abs()
                        < 1e-12 * a.covariance[i][i].abs().max(1.0) * 100.0
                );
                assert!((a.whitener[i][j] - b.whitener[i][j]).abs() < 1e-12 * 100.0);
            }
        }
    }

    #[test]
    fn pixel_sets_are_seeded_and_distinct() {
        let cube = gaussian_cube(8, 8, 3, 7);
        let all = sample_pixel_sets(&cube, 64, 1, 5).unwrap();
        let mut idx: Vec<(usize, usize)> = all[0].indices.clone();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 64);
        let a = sample_pixel_sets(&cube, 10, 3, 42).unwrap();
        let b = sample_pixel_sets(&cube, 10, 3, 42).unwrap();
        assert_eq!(a, b);
        assert!(sample_pixel_sets(&cube, 65, 1, 0).is_err());
    }

    #[test]
    fn subsampled_fit_uses_requested_pixels() {
        let cube = gaussian_cube(16, 16, 4, 8);
        let m = fit_whitening_with(
            &cube,
            &WhiteningOptions {
                outlier_fraction: 0.0,
                max_pixels: Some(100),
            },
        )
        .unwrap();
        assert_eq!(m.inlier_mask.len(), 100);
    }
}
