//! Plain feedforward pieces shared by the pipeline: a dense linear layer, the
//! windowed context encoder that stands in for a recurrent backbone, and the
//! softmax cross-entropy loss.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{tanh_backward, Matrix};
use crate::param::{Param, ParamVisitor, ParamVisitorMut};
use crate::rng::Rng;

/// `y = x W + b`.
pub struct Linear {
    weight: Param,
    bias: Param,
    cache: Option<Matrix>,
}

impl Linear {
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::new(Matrix::uniform_init(rng, d_in, d_out, d_in)),
            bias: Param::new(Matrix::zeros(1, d_out)),
            cache: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight.value)?.add_row(&self.bias.value)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, d_out: &Matrix) -> Result<Matrix> {
        let x = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        self.weight.accumulate(&x.transpose().matmul(d_out)?);
        self.bias.accumulate(&d_out.col_sums());
        d_out.matmul(&self.weight.value.transpose())
    }

    pub fn visit_params(&self, prefix: &str, f: ParamVisitor) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward_madds(&self, l: usize) -> u64 {
        l as u64 * self.weight.value.rows() as u64 * self.weight.value.cols() as u64
    }
}

/// Context encoder: every row is replaced by a dense transform of the
/// concatenation of its `window` neighbours (zero-padded at the sequence
/// boundaries) followed by tanh. Feature width is preserved, so it can slot
/// in before or after fusion.
pub struct ContextEncoder {
    dim: usize,
    window: usize,
    weight: Param, // (window*dim) x dim
    bias: Param,
    cache: Option<(Matrix, Matrix)>, // (gathered neighbours, tanh output)
}

impl ContextEncoder {
    pub fn new(rng: &mut Rng, dim: usize, window: usize) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!("context window must be odd and >= 1, got {window}")));
        }
        Ok(Self {
            dim,
            window,
            weight: Param::new(Matrix::uniform_init(rng, window * dim, dim, window * dim)),
            bias: Param::new(Matrix::zeros(1, dim)),
            cache: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn gather(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(Error::Shape { op: "context_encode", left: x.shape(), right: (x.rows(), self.dim) });
        }
        let half = (self.window - 1) / 2;
        let mut z = Matrix::zeros(x.rows(), self.window * self.dim);
        for i in 0..x.rows() {
            for o in 0..self.window {
                let src = i as isize + o as isize - half as isize;
                if src < 0 || src >= x.rows() as isize {
                    continue;
                }
                let dst = &mut z.row_mut(i)[o * self.dim..(o + 1) * self.dim];
                dst.copy_from_slice(x.row(src as usize));
            }
        }
        Ok(z)
    }

    fn compute(&self, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let z = self.gather(x)?;
        let pre = z.matmul(&self.weight.value)?.add_row(&self.bias.value)?;
        let out = pre.tanh_ew();
        Ok((z, pre, out))
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.compute(x)?.2)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (z, _, out) = self.compute(x)?;
        self.cache = Some((z, out.clone()));
        Ok(out)
    }

    pub fn backward(&mut self, d_out: &Matrix) -> Result<Matrix> {
        let (z, out) = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        let d_pre = tanh_backward(out, d_out)?;
        self.weight.accumulate(&z.transpose().matmul(&d_pre)?);
        self.bias.accumulate(&d_pre.col_sums());
        let d_z = d_pre.matmul(&self.weight.value.transpose())?;

        // Scatter the gathered-neighbour gradient back onto the input rows.
        let half = (self.window - 1) / 2;
        let rows = d_z.rows();
        let mut d_x = Matrix::zeros(rows, self.dim);
        for i in 0..rows {
            for o in 0..self.window {
                let src = i as isize + o as isize - half as isize;
                if src < 0 || src >= rows as isize {
                    continue;
                }
                let block = &d_z.row(i)[o * self.dim..(o + 1) * self.dim];
                for (t, g) in d_x.row_mut(src as usize).iter_mut().zip(block) {
                    *t += g;
                }
            }
        }
        Ok(d_x)
    }

    pub fn visit_params(&self, prefix: &str, f: ParamVisitor) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: ParamVisitorMut) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward_madds(&self, l: usize) -> u64 {
        l as u64 * (self.window * self.dim) as u64 * self.dim as u64
    }
}

/// Mean softmax cross-entropy over rows. Returns the loss and the logit
/// gradient `(softmax - onehot) * upstream_scale / rows`; `upstream_scale`
/// lets callers average over a whole batch of sequences instead.
pub fn cross_entropy(logits: &Matrix, labels: &[usize], scale: f64) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::Config(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    let mut loss = 0.0;
    let mut grad = logits.softmax_rows();
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Config(format!("label {label} out of range for {classes} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
        loss += lse - row[label];
        grad[(r, label)] -= 1.0;
    }
    let g = grad.scale(scale);
    Ok((loss * scale, g))
}

/// Row-wise argmax, ties resolved to the first maximum.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn encoder_window_one_identity_weights_is_tanh() {
        let mut rng = Rng::new(1);
        let mut enc = ContextEncoder::new(&mut rng, 3, 1).unwrap();
        enc.visit_params_mut("e", &mut |name, p| {
            if name.ends_with("weight") {
                p.value = Matrix::identity(3);
            }
        });
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.1, 0.2, 0.3]]).unwrap();
        let out = enc.infer(&x).unwrap();
        assert_eq!(out, x.tanh_ew());
    }

    #[test]
    fn encoder_zero_pads_boundaries() {
        let mut rng = Rng::new(2);
        let enc = ContextEncoder::new(&mut rng, 1, 3).unwrap();
        let x = Matrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let z = enc.gather(&x).unwrap();
        // Row 0 neighbours: [pad, x0, x1]; row 1: [x0, x1, pad].
        assert_eq!(z.to_rows(), vec![vec![0.0, 2.0, 3.0], vec![2.0, 3.0, 0.0]]);

        let w = &enc.weight.value;
        let out = enc.infer(&x).unwrap();
        let want0 = libm::tanh(2.0 * w[(1, 0)] + 3.0 * w[(2, 0)]);
        let want1 = libm::tanh(2.0 * w[(0, 0)] + 3.0 * w[(1, 0)]);
        assert!((out[(0, 0)] - want0).abs() < 1e-15);
        assert!((out[(1, 0)] - want1).abs() < 1e-15);
    }

    #[test]
    fn encoder_preserves_row_count_and_rejects_even_windows() {
        let mut rng = Rng::new(3);
        let enc = ContextEncoder::new(&mut rng, 4, 3).unwrap();
        let x = Matrix::uniform_init(&mut rng, 7, 4, 1);
        assert_eq!(enc.infer(&x).unwrap().rows(), 7);
        assert!(ContextEncoder::new(&mut rng, 4, 2).is_err());
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_near_zero() {
        let logits = Matrix::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0, 1], 0.5).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_shape_and_sign() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[1], 1.0).unwrap();
        assert!((loss - libm::log(2.0)).abs() < 1e-12);
        assert!((grad[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((grad[(0, 1)] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let logits = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![-1.0, 0.0, 0.5]]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 2]);
    }
}
