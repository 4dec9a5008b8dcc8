//! Low-rank factorized linear weights. A dense `d_in x d_out` weight is
//! replaced by the sum of `rank` rank-1 outer products, stored as factor
//! matrices `U (d_in x r)` and `V (d_out x r)` with a dense bias, cutting the
//! parameter count from `d_in*d_out + d_out` to `r*(d_in + d_out) + d_out`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct LowRankWeight {
    d_in: usize,
    d_out: usize,
    rank: usize,
    pub u: Matrix,
    pub v: Matrix,
    pub bias: Matrix,
}

impl LowRankWeight {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, rank: usize) -> Result<Self> {
        check_rank(d_in, d_out, rank)?;
        Ok(Self {
            d_in,
            d_out,
            rank,
            u: Matrix::uniform_init(rng, d_in, rank, d_in),
            v: Matrix::uniform_init(rng, d_out, rank, rank),
            bias: Matrix::zeros(1, d_out),
        })
    }

    pub fn from_parts(u: Matrix, v: Matrix, bias: Matrix) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(Error::Shape { op: "lowrank factors", left: u.shape(), right: v.shape() });
        }
        if bias.rows() != 1 || bias.cols() != v.rows() {
            return Err(Error::Shape { op: "lowrank bias", left: v.shape(), right: bias.shape() });
        }
        let (d_in, rank) = u.shape();
        let d_out = v.rows();
        check_rank(d_in, d_out, rank)?;
        Ok(Self { d_in, d_out, rank, u, v, bias })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Materializes the implied dense weight `U * V^T` (`d_in x d_out`).
    pub fn reconstruct(&self) -> Matrix {
        self.u.matmul(&self.v.transpose()).expect("factor shapes are validated")
    }

    /// Applies the weight as `(x * U) * V^T + bias` without materializing the
    /// dense matrix.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        Ok(apply_forward(x, &self.u, &self.v, &self.bias)?.0)
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count_lowrank(self.d_in, self.d_out, self.rank)
    }
}

fn check_rank(d_in: usize, d_out: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "rank {rank} out of range for a {d_in}x{d_out} weight (must be 1..={})",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// Forward pass through the factor pair. Returns the output and the cached
/// intermediate `h = x * U` needed by the backward rule.
pub fn apply_forward(x: &Matrix, u: &Matrix, v: &Matrix, bias: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.cols() != u.rows() {
        return Err(Error::Shape { op: "lowrank apply", left: x.shape(), right: u.shape() });
    }
    let h = x.matmul(u)?;
    let out = h.matmul(&v.transpose())?.add_row(bias)?;
    Ok((out, h))
}

/// Backward for [`apply_forward`]. Returns `(dx, du, dv, dbias)`.
pub fn apply_backward(
    x: &Matrix,
    u: &Matrix,
    v: &Matrix,
    h: &Matrix,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    let dh = d_out.matmul(v)?;
    let dv = d_out.transpose().matmul(h)?;
    let du = x.transpose().matmul(&dh)?;
    let dx = dh.matmul(&u.transpose())?;
    let dbias = d_out.col_sums();
    Ok((dx, du, dv, dbias))
}

/// Parameters of a rank-`r` factor pair plus bias: `r*(d_in + d_out) + d_out`.
pub fn parameter_count_lowrank(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * (d_in + d_out) + d_out
}

/// Parameters of a dense projection with bias: `d_in*d_out + d_out`.
pub fn parameter_count_dense(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Parameters of the three self-attention projections (query, key, value,
/// each with bias; no output projection).
pub fn parameter_count_self_attention(d_in: usize, d_out: usize) -> usize {
    3 * parameter_count_dense(d_in, d_out)
}

/// Alternating least squares fit of a rank-`r` factor pair to `target`,
/// minimizing the Frobenius error. The returned bias is zero.
pub fn fit_rank_r(
    target: &Matrix,
    rank: usize,
    rng: &mut Rng,
    max_iters: usize,
    tol: f64,
) -> Result<LowRankWeight> {
    Ok(fit_rank_r_with_trace(target, rank, rng, max_iters, tol)?.0)
}

/// Same as [`fit_rank_r`] but also returns the Frobenius error after each
/// iteration.
pub fn fit_rank_r_with_trace(
    target: &Matrix,
    rank: usize,
    rng: &mut Rng,
    max_iters: usize,
    tol: f64,
) -> Result<(LowRankWeight, Vec<f64>)> {
    let (d_in, d_out) = target.shape();
    check_rank(d_in, d_out, rank)?;
    let mut u = Matrix::uniform_init(rng, d_in, rank, d_in);
    let mut v = Matrix::uniform_init(rng, d_out, rank, rank);
    let mut trace = Vec::new();
    let mut prev_err = f64::INFINITY;
    for _ in 0..max_iters {
        // U-step: U = T V (V^T V)^-1, solved row by row against the Gram matrix.
        let gram_v = v.transpose().matmul(&v)?;
        let tv = target.matmul(&v)?;
        u = solve_lu(&gram_v, &tv.transpose())?.transpose();

        // A zero residual here means the V-step's Gram matrix may be singular
        // (e.g. a zero target drives U to zero); the fit is already exact.
        if target.sub(&u.matmul(&v.transpose())?)?.frobenius_norm() == 0.0 {
            trace.push(0.0);
            break;
        }

        // V-step: V = T^T U (U^T U)^-1.
        let gram_u = u.transpose().matmul(&u)?;
        let ttu = target.transpose().matmul(&u)?;
        v = solve_lu(&gram_u, &ttu.transpose())?.transpose();

        let err = target.sub(&u.matmul(&v.transpose())?)?.frobenius_norm();
        trace.push(err);
        let improvement = (prev_err - err) / prev_err.max(1e-300);
        prev_err = err;
        if err == 0.0 || improvement.abs() < tol {
            break;
        }
    }
    let weight = LowRankWeight { d_in, d_out, rank, u, v, bias: Matrix::zeros(1, d_out) };
    Ok((weight, trace))
}

/// Solves `A X = B` for square `A` by LU decomposition with partial pivoting.
fn solve_lu(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::Shape { op: "solve", left: a.shape(), right: b.shape() });
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut pivot = col;
        let mut best = libm::fabs(lu[(col, col)]);
        for r in col + 1..n {
            let v = libm::fabs(lu[(r, col)]);
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::Numeric(format!("singular system at pivot {col}")));
        }
        if pivot != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = tmp;
            }
            for j in 0..x.cols() {
                let tmp = x[(col, j)];
                x[(col, j)] = x[(pivot, j)];
                x[(pivot, j)] = tmp;
            }
        }
        for r in col + 1..n {
            let f = lu[(r, col)] / lu[(col, col)];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = lu[(col, j)];
                lu[(r, j)] -= f * v;
            }
            for j in 0..x.cols() {
                let v = x[(col, j)];
                x[(r, j)] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        for j in 0..x.cols() {
            let mut s = x[(col, j)];
            for k in col + 1..n {
                s -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = s / lu[(col, col)];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn reconstruct_rank_one_outer_product() {
        let u = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let w = LowRankWeight::from_parts(u, v, Matrix::zeros(1, 2)).unwrap();
        assert_eq!(w.reconstruct().to_rows(), vec![vec![2.0, 3.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn full_rank_factors_reproduce_any_weight() {
        let mut rng = Rng::new(2);
        let w = Matrix::uniform_init(&mut rng, 3, 5, 1);
        // r = min(3,5) = 3: U = I, V = W^T.
        let lr = LowRankWeight::from_parts(Matrix::identity(3), w.transpose(), Matrix::zeros(1, 5)).unwrap();
        let diff = lr.reconstruct().sub(&w).unwrap().frobenius_norm();
        assert!(diff < 1e-15);
    }

    #[test]
    fn reconstruct_matches_sum_of_outer_products() {
        let mut rng = Rng::new(4);
        let u = Matrix::uniform_init(&mut rng, 4, 2, 1);
        let v = Matrix::uniform_init(&mut rng, 5, 2, 1);
        let w = LowRankWeight::from_parts(u.clone(), v.clone(), Matrix::zeros(1, 5)).unwrap();
        let rec = w.reconstruct();
        for i in 0..4 {
            for j in 0..5 {
                let want = u[(i, 0)] * v[(j, 0)] + u[(i, 1)] * v[(j, 1)];
                assert!((rec[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn apply_agrees_with_dense_path() {
        let mut rng = Rng::new(7);
        let w = LowRankWeight::init(&mut rng, 8, 5, 3).unwrap();
        let x = Matrix::uniform_init(&mut rng, 6, 8, 1);
        let fast = w.apply(&x).unwrap();
        let dense = x.matmul(&w.reconstruct()).unwrap().add_row(&w.bias).unwrap();
        let diff = fast.sub(&dense).unwrap().frobenius_norm();
        assert!(diff < 1e-10, "diff {diff}");
    }

    #[test]
    fn apply_hand_case_and_zero_input() {
        let u = Matrix::ones(2, 1);
        let v = Matrix::ones(3, 1);
        let w = LowRankWeight::from_parts(u, v, Matrix::zeros(1, 3)).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(w.apply(&x).unwrap().to_rows(), vec![vec![2.0, 2.0, 2.0]]);

        let zero = Matrix::zeros(4, 2);
        assert_eq!(w.apply(&zero).unwrap(), Matrix::zeros(4, 3));
    }

    #[test]
    fn parameter_count_formulas() {
        assert_eq!(parameter_count_lowrank(100, 100, 45), 9100);
        assert_eq!(parameter_count_self_attention(100, 100), 30300);
        assert_eq!(parameter_count_lowrank(1, 1, 1), 3);
        assert_eq!(parameter_count_dense(1, 1), 2);
        assert_eq!(parameter_count_self_attention(1, 1), 6);
        // At r = d the factor pair costs more than the dense weight.
        let d = 10;
        assert!(parameter_count_lowrank(d, d, d) > parameter_count_dense(d, d));
    }

    #[test]
    fn ratio_boundary_at_half_width() {
        let d = 100;
        let sa = parameter_count_self_attention(d, d) as f64;
        assert!((parameter_count_lowrank(d, d, 45) as f64) / sa < 1.0 / 3.0);
        assert!((parameter_count_lowrank(d, d, 51) as f64) / sa > 1.0 / 3.0);
    }

    #[test]
    fn fit_recovers_known_rank_three_target() {
        let mut rng = Rng::new(11);
        let u = Matrix::uniform_init(&mut rng, 8, 3, 1);
        let v = Matrix::uniform_init(&mut rng, 8, 3, 1);
        let target = u.matmul(&v.transpose()).unwrap();
        let fit = fit_rank_r(&target, 3, &mut rng, 500, 1e-14).unwrap();
        let err = target.sub(&fit.reconstruct()).unwrap().frobenius_norm();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn fit_full_rank_recovers_random_target() {
        let mut rng = Rng::new(12);
        let target = Matrix::uniform_init(&mut rng, 5, 7, 1);
        let fit = fit_rank_r(&target, 5, &mut rng, 500, 1e-15).unwrap();
        let err = target.sub(&fit.reconstruct()).unwrap().frobenius_norm();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn fit_zero_target_is_exact_and_rank_is_checked() {
        let mut rng = Rng::new(13);
        let target = Matrix::zeros(4, 4);
        let fit = fit_rank_r(&target, 2, &mut rng, 50, 1e-12).unwrap();
        assert!(fit.reconstruct().frobenius_norm() < 1e-12);

        assert!(fit_rank_r(&Matrix::zeros(3, 3), 4, &mut rng, 10, 1e-6).is_err());
    }

    #[test]
    fn fit_error_is_non_increasing() {
        let mut rng = Rng::new(14);
        let target = Matrix::uniform_init(&mut rng, 6, 6, 1);
        let (_, trace) = fit_rank_r_with_trace(&target, 2, &mut rng, 100, 0.0).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0]), "trace not monotone: {w:?}");
        }
    }
}
