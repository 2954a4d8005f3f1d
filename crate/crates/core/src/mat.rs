//! Small dense row-major matrix used for features, logits, and scores.
//!
//! Everything in this crate operates on bags of at most a few hundred
//! proposals with feature dimensions in the tens, so a flat `Vec<f64>`
//! beats pulling in a linear-algebra stack.

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        debug_assert!(rows.iter().all(|row| row.len() == c));
        Matrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self (r x c) * other (c x k) -> (r x k)`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for inner in 0..self.cols {
                let a = self.get(r, inner);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(inner, c);
                }
            }
        }
        out
    }

    /// `self^T (c x r) * other (r x k) -> (c x k)`; used for weight gradients.
    pub fn transpose_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "transpose_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let a = self.get(r, c);
                if a == 0.0 {
                    continue;
                }
                for k in 0..other.cols {
                    out.data[c * other.cols + k] += a * other.get(r, k);
                }
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax along each row.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..logits.cols {
            let e = (row[c] - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..logits.cols {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Numerically stable softmax along each column.
pub fn softmax_cols(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for c in 0..logits.cols {
        let mut max = f64::NEG_INFINITY;
        for r in 0..logits.rows {
            max = max.max(logits.get(r, c));
        }
        let mut sum = 0.0;
        for r in 0..logits.rows {
            let e = (logits.get(r, c) - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for r in 0..logits.rows {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}
