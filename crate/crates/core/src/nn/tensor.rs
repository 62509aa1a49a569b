use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// Gradient bookkeeping lives on the [`Graph`](super::Graph) node that wraps a
/// tensor, not on the tensor itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Stacks equal-length rows into a `[rows, cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("ragged rows: {} vs {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes, i.e. the number of trailing-axis rows.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }
}

// Matrix kernels. Loops run in a fixed order so results are bit-reproducible.

const ROW_BLOCK: usize = 4;
const COL_BLOCK: usize = 16;

/// `[m,k] x [k,n] -> [m,n]`. Every output element accumulates over `p` in
/// ascending order regardless of blocking.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let full_rows = m - m % ROW_BLOCK;
    let full_cols = n - n % COL_BLOCK;
    for i in (0..full_rows).step_by(ROW_BLOCK) {
        for j in (0..full_cols).step_by(COL_BLOCK) {
            let mut acc = [[0.0f64; COL_BLOCK]; ROW_BLOCK];
            for p in 0..k {
                let b_blk: &[f64; COL_BLOCK] = b[p * n + j..p * n + j + COL_BLOCK].try_into().expect("block");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (o, &bv) in acc_r.iter_mut().zip(b_blk) {
                        *o += av * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + COL_BLOCK].copy_from_slice(acc_r);
            }
        }
        for r in i..i + ROW_BLOCK {
            matmul_row_tail(a, b, &mut out, r, k, n, full_cols);
        }
    }
    for r in full_rows..m {
        matmul_row_tail(a, b, &mut out, r, k, n, 0);
    }
    out
}

fn matmul_row_tail(a: &[f64], b: &[f64], out: &mut [f64], i: usize, k: usize, n: usize, from: usize) {
    if from == n {
        return;
    }
    let out_row = &mut out[i * n + from..(i + 1) * n];
    for p in 0..k {
        let aip = a[i * k + p];
        let b_row = &b[p * n + from..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += aip * bv;
        }
    }
}

/// `[m,k] x [n,k]^T -> [m,n]`. Accumulates in the same order as `dot`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, m, k, n)
}

/// `[k,m]^T x [k,n] -> [m,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut at = vec![0.0; m * k];
    for p in 0..k {
        for i in 0..m {
            at[i * k + p] = a[p * m + i];
        }
    }
    matmul_nn(&at, b, m, k, n)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
