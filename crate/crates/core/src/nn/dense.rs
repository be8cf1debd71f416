use rand::Rng;

use super::{Param, Parameterized};
use crate::real::{gemm, Operand};

/// Row-major `f64` matrix; rows are batch elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[&Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for p in parts {
                assert_eq!(p.rows, rows, "hcat row mismatch");
                dst[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        out
    }

    /// Columns `start..start + len`.
    pub fn cols_slice(&self, start: usize, len: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Rows selected by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Mat {
        let mut out = Mat::zeros(self.rows * times, self.cols);
        for r in 0..self.rows {
            for i in 0..times {
                out.row_mut(r * times + i).copy_from_slice(self.row(r));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Fully connected layer `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: Param<f64>,
    pub bias: Param<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            input,
            output,
            weight: Param::he_uniform(format!("{name}.kernel"), &[input, output], input, rng),
            bias: Param::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.input, "dense input width");
        let mut y = Mat::zeros(x.rows, self.output);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(x.rows, self.input, self.output, Operand::new(&x.data, x.cols), Operand::new(&self.weight.value, self.output), 1.0, &mut y.data, self.output);
        y
    }

    /// `y += x[:, ..] W[rows, :]` using only weight rows `row0..row0 + x.cols`.
    /// Used when the layer input is a concatenation evaluated in pieces.
    pub fn forward_partial(&self, x: &Mat, row0: usize, y: &mut Mat) {
        assert!(row0 + x.cols <= self.input);
        gemm(
            x.rows,
            x.cols,
            self.output,
            Operand::new(&x.data, x.cols),
            Operand::new(&self.weight.value[row0 * self.output..], self.output),
            1.0,
            &mut y.data,
            self.output,
        );
    }

    /// Accumulate gradients; returns `dx`.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.backward_weights(x, 0, dy);
        self.accumulate_bias(dy);
        self.input_grad(dy, 0, self.input)
    }

    /// Weight-gradient contribution of an input piece occupying weight rows
    /// `row0..row0 + x.cols`.
    pub fn backward_weights(&mut self, x: &Mat, row0: usize, dy: &Mat) {
        assert_eq!(x.rows, dy.rows);
        gemm(
            x.cols,
            x.rows,
            self.output,
            Operand::t(&x.data, x.cols),
            Operand::new(&dy.data, self.output),
            1.0,
            &mut self.weight.grad[row0 * self.output..],
            self.output,
        );
    }

    pub fn accumulate_bias(&mut self, dy: &Mat) {
        for r in 0..dy.rows {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }

    /// Gradient with respect to input columns `row0..row0 + len`.
    pub fn input_grad(&self, dy: &Mat, row0: usize, len: usize) -> Mat {
        let mut dx = Mat::zeros(dy.rows, len);
        gemm(
            dy.rows,
            self.output,
            len,
            Operand::new(&dy.data, self.output),
            Operand::t(&self.weight.value[row0 * self.output..], self.output),
            0.0,
            &mut dx.data,
            len,
        );
        dx
    }
}

impl Parameterized<f64> for Dense {
    fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
