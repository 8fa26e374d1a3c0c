use serde::{Deserialize, Serialize};

/// Dense row-major matrix. Vectors are 1×n rows, scalars 1×1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match {rows}×{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row_slice(i).to_vec()).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on a {}×{} tensor",
            self.rows,
            self.cols
        );
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}×{} by {}×{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        gemm(
            m,
            k,
            n,
            &self.data,
            (k as isize, 1),
            &other.data,
            (n as isize, 1),
        )
    }

    /// selfᵀ · other without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Self {
        assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        gemm(
            m,
            k,
            n,
            &self.data,
            (1, m as isize),
            &other.data,
            (n as isize, 1),
        )
    }

    /// self · otherᵀ.
    pub fn matmul_t(&self, other: &Tensor) -> Self {
        assert_eq!(self.cols, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.rows);
        gemm(
            m,
            k,
            n,
            &self.data,
            (k as isize, 1),
            &other.data,
            (1, k as isize),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// m×n product of a (m×k) and b (k×n) given as (row stride, column stride) views.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
) -> Tensor {
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe views lying inside `a` and `b`, which the callers'
        // shape asserts guarantee, and `out` is a fresh row-major m×n buffer.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}
