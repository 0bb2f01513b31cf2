use crate::error::{Error, Result};

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix given {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self * w^T` where `w` is `[out, self.cols]`.
    pub fn mul_transposed(&self, w: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, w.cols);
        let mut out = Matrix::zeros(self.rows, w.rows);
        for r in 0..self.rows {
            let x = self.row(r);
            for (o, slot) in out.row_mut(r).iter_mut().enumerate() {
                *slot = dot(x, w.row(o));
            }
        }
        out
    }

    /// `self^T * x` accumulated into `acc` (`[self.cols, x.cols]`).
    pub fn add_transposed_mul(&self, x: &Matrix, acc: &mut Matrix) {
        debug_assert_eq!(self.rows, x.rows);
        for r in 0..self.rows {
            let xr = x.row(r);
            for (o, &g) in self.row(r).iter().enumerate() {
                if g != 0.0 {
                    for (a, &v) in acc.row_mut(o).iter_mut().zip(xr) {
                        *a += g * v;
                    }
                }
            }
        }
    }

    /// `self * w` accumulated into `acc` (`[self.rows, w.cols]`).
    pub fn add_mul(&self, w: &Matrix, acc: &mut Matrix) {
        debug_assert_eq!(self.cols, w.rows);
        for r in 0..self.rows {
            for (k, &g) in self.row(r).iter().enumerate() {
                if g != 0.0 {
                    let wr = w.row(k);
                    for (a, &v) in acc.row_mut(r).iter_mut().zip(wr) {
                        *a += g * v;
                    }
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_hand_values() {
        let a = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Matrix::from_vec(1, 3, vec![1., 0., -1.]).unwrap();
        assert_eq!(a.mul_transposed(&w).data(), [-2., -2.]);

        let mut acc = Matrix::zeros(3, 3);
        a.add_transposed_mul(&a, &mut acc);
        assert_eq!(acc.row(0), [17., 22., 27.]);

        let b = Matrix::from_vec(3, 1, vec![1., 1., 1.]).unwrap();
        let mut acc = Matrix::from_vec(2, 1, vec![1., 1.]).unwrap();
        a.add_mul(&b, &mut acc);
        assert_eq!(acc.data(), [7., 16.]);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(!Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap().is_finite());
    }
}
