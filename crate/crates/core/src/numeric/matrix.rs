use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                layer: "matrix".into(),
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally sized rows. An empty iterator yields a `0 × cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    layer: "matrix row".into(),
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// `out = input · Wᵀ + bias`, with `W` stored `(out_dim, in_dim)` row-major.
pub(crate) fn linear_forward(input: &Matrix, weight: &[f64], bias: &[f64]) -> Matrix {
    let (m, k, n) = (input.rows, input.cols, bias.len());
    debug_assert_eq!(weight.len(), n * k);
    let mut out = Matrix::zeros(m, n);
    for r in 0..m {
        out.row_mut(r).copy_from_slice(bias);
    }
    if m == 0 || k == 0 || n == 0 {
        return out;
    }
    // SAFETY: all slices are sized for the declared strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            input.data.as_ptr(),
            k as isize,
            1,
            weight.as_ptr(),
            1,
            k as isize,
            1.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Accumulates `dW += doutᵀ · input` and `db += Σ_rows dout`.
pub(crate) fn linear_backward_params(input: &Matrix, dout: &Matrix, dweight: &mut [f64], dbias: &mut [f64]) {
    let (m, k, n) = (input.rows, input.cols, dout.cols);
    debug_assert_eq!(dweight.len(), n * k);
    for r in dout.iter_rows() {
        for (b, g) in dbias.iter_mut().zip(r) {
            *b += g;
        }
    }
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: dout is (m × n), input (m × k), dweight (n × k).
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            dout.data.as_ptr(),
            1,
            n as isize,
            input.data.as_ptr(),
            k as isize,
            1,
            1.0,
            dweight.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `din = dout · W`.
pub(crate) fn linear_backward_input(dout: &Matrix, weight: &[f64], in_dim: usize) -> Matrix {
    let (m, n) = (dout.rows, dout.cols);
    let mut din = Matrix::zeros(m, in_dim);
    if m == 0 || n == 0 || in_dim == 0 {
        return din;
    }
    // SAFETY: dout (m × n), weight (n × in_dim), din (m × in_dim).
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            in_dim,
            1.0,
            dout.data.as_ptr(),
            n as isize,
            1,
            weight.as_ptr(),
            in_dim as isize,
            1,
            0.0,
            din.data.as_mut_ptr(),
            in_dim as isize,
            1,
        );
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_linear(input: &Matrix, w: &[f64], b: &[f64]) -> Matrix {
        let n = b.len();
        let mut out = Matrix::zeros(input.rows(), n);
        for r in 0..input.rows() {
            for j in 0..n {
                let mut acc = b[j];
                for i in 0..input.cols() {
                    acc += input.get(r, i) * w[j * input.cols() + i];
                }
                out.set(r, j, acc);
            }
        }
        out
    }

    #[test]
    fn linear_forward_matches_naive() {
        let input = Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let w: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect();
        let b = vec![0.5, -0.25];
        let fast = linear_forward(&input, &w, &b);
        let slow = naive_linear(&input, &w, &b);
        for (a, e) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_backward_matches_naive() {
        let input = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let dout = Matrix::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let w = vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        linear_backward_params(&input, &dout, &mut dw, &mut db);
        for j in 0..2 {
            for i in 0..3 {
                let e: f64 = (0..2).map(|r| dout.get(r, j) * input.get(r, i)).sum();
                assert!((dw[j * 3 + i] - e).abs() < 1e-12);
            }
            let eb: f64 = (0..2).map(|r| dout.get(r, j)).sum();
            assert!((db[j] - eb).abs() < 1e-12);
        }
        let din = linear_backward_input(&dout, &w, 3);
        for r in 0..2 {
            for i in 0..3 {
                let e: f64 = (0..2).map(|j| dout.get(r, j) * w[j * 3 + i]).sum();
                assert!((din.get(r, i) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]], 2).is_err());
    }
}
