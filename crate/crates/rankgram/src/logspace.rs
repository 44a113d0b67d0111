//! Log-domain primitives shared by all dynamic-programming kernels.
//!
//! All quantities are natural-log probabilities. Zero probability is
//! `f64::NEG_INFINITY`; IEEE semantics then give the right annihilator
//! behaviour (`-inf + x = -inf`) without a sentinel. Values must be finite
//! or `-inf`, never NaN; every operation here preserves that.
//!
//! Reductions use max-shifting: one scalar shift per operand vector (per
//! row for a matrix), so sums happen on real-domain numbers in `[0, 1]`
//! instead of elementwise log-sum-exp chains.

use crate::error::{Error, Result};

/// A vector of log-probabilities.
pub type LogVec = Vec<f64>;

/// Row-major matrix of log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogMat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDims(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        debug_assert!(data.iter().all(|x| !x.is_nan()));
        Ok(Self { rows, cols, data })
    }

    /// Matrix filled with log 0.
    pub fn neg_inf(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![f64::NEG_INFINITY; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::InvalidDims("matrix needs at least one row".into()));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::DimMismatch {
                    context: "ragged matrix rows",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
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

    pub fn col_vec(&self, c: usize) -> LogVec {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Elementwise exp, as a flat row-major real-domain buffer.
    pub fn exp_data(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.exp()).collect()
    }
}

/// Row-major order-3 tensor of log-probabilities, indexed `[i][j][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTensor3 {
    d0: usize,
    d1: usize,
    d2: usize,
    data: Vec<f64>,
}

impl LogTensor3 {
    pub fn new(d0: usize, d1: usize, d2: usize, data: Vec<f64>) -> Result<Self> {
        if d0 == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::InvalidDims(format!(
                "tensor dimensions must be positive, got {d0}x{d1}x{d2}"
            )));
        }
        if data.len() != d0 * d1 * d2 {
            return Err(Error::DimMismatch {
                context: "tensor data length",
                expected: d0 * d1 * d2,
                got: data.len(),
            });
        }
        debug_assert!(data.iter().all(|x| !x.is_nan()));
        Ok(Self { d0, d1, d2, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d0, self.d1, self.d2)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d1 + j) * self.d2 + k]
    }

    /// Contiguous slice over the last axis for fixed `(i, j)`.
    #[inline]
    pub fn lane(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.d1 + j) * self.d2;
        &self.data[off..off + self.d2]
    }

    /// Contiguous `d1 x d2` slice for fixed leading index.
    #[inline]
    pub fn plane(&self, i: usize) -> &[f64] {
        let off = i * self.d1 * self.d2;
        &self.data[off..off + self.d1 * self.d2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Max over a slice, treating an all `-inf` slice as `-inf`.
#[inline]
pub(crate) fn max_or_neg_inf(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// log(sum_i exp(xs_i)), computed by max-shifting.
///
/// Returns `-inf` iff every entry is `-inf`; errors on empty input.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(lse_slice(xs))
}

/// Non-failing log-sum-exp over a known-nonempty slice.
#[inline]
pub(crate) fn lse_slice(xs: &[f64]) -> f64 {
    let m = max_or_neg_inf(xs);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// out_i = log(sum_j exp(M_ij + v_j)).
///
/// The log-einsum-exp trick: shift `v` by its max, shift each matrix row by
/// its own max, multiply in the real domain, re-log, add the shifts back.
pub fn log_mat_vec(m: &LogMat, v: &[f64]) -> Result<LogVec> {
    if m.cols != v.len() {
        return Err(Error::DimMismatch {
            context: "log_mat_vec operand width",
            expected: m.cols,
            got: v.len(),
        });
    }
    let vmax = max_or_neg_inf(v);
    if vmax == f64::NEG_INFINITY {
        return Ok(vec![f64::NEG_INFINITY; m.rows]);
    }
    let ev: Vec<f64> = v.iter().map(|&x| (x - vmax).exp()).collect();
    let mut out = vec![f64::NEG_INFINITY; m.rows];
    for (i, o) in out.iter_mut().enumerate() {
        let row = m.row(i);
        let rmax = max_or_neg_inf(row);
        if rmax == f64::NEG_INFINITY {
            continue;
        }
        let s: f64 = row
            .iter()
            .zip(&ev)
            .map(|(&a, &b)| (a - rmax).exp() * b)
            .sum();
        if s > 0.0 {
            *o = s.ln() + rmax + vmax;
        }
    }
    Ok(out)
}

/// out_j = log(sum_i exp(v_i + M_ij)); the transpose-side product.
pub fn log_vec_mat(v: &[f64], m: &LogMat) -> Result<LogVec> {
    if m.rows != v.len() {
        return Err(Error::DimMismatch {
            context: "log_vec_mat operand height",
            expected: m.rows,
            got: v.len(),
        });
    }
    let vmax = max_or_neg_inf(v);
    if vmax == f64::NEG_INFINITY {
        return Ok(vec![f64::NEG_INFINITY; m.cols]);
    }
    // Per-column shifts; one strided pass to find them, one to accumulate.
    let mut cmax = vec![f64::NEG_INFINITY; m.cols];
    for i in 0..m.rows {
        for (c, &x) in m.row(i).iter().enumerate() {
            if x > cmax[c] {
                cmax[c] = x;
            }
        }
    }
    let mut acc = vec![0.0f64; m.cols];
    for (i, &vi) in v.iter().enumerate() {
        if vi == f64::NEG_INFINITY {
            continue;
        }
        let evi = (vi - vmax).exp();
        for (c, &x) in m.row(i).iter().enumerate() {
            if x != f64::NEG_INFINITY {
                acc[c] += evi * (x - cmax[c]).exp();
            }
        }
    }
    Ok(acc
        .iter()
        .zip(&cmax)
        .map(|(&s, &cm)| {
            if s > 0.0 {
                s.ln() + cm + vmax
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// Real-domain strided GEMM: C = A * B + beta * C.
///
/// `a` is m x k with strides (rsa, csa), `b` is k x n with (rsb, csb),
/// `c` is m x n with (rsc, csc). Backs the exp-multiply-relog path of the
/// log-einsum-exp trick when operands are probability-scale reals.
#[allow(clippy::too_many_arguments)]
pub(crate) fn real_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
    };
    assert!(extent(m, k, rsa, csa) < a.len());
    assert!(extent(k, n, rsb, csb) < b.len());
    assert!(extent(m, n, rsc, csc) < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Entrywise product in log space: out_i = a_i + b_i.
pub fn log_hadamard(a: &[f64], b: &[f64]) -> Result<LogVec> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            context: "log_hadamard operand length",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
            return;
        }
        let scale = a.abs().max(b.abs()).max(1.0);
        assert!(
            (a - b).abs() <= tol * scale,
            "expected {b}, got {a} (tol {tol})"
        );
    }

    #[test]
    fn lse_single_element_identity() {
        assert_eq!(log_sum_exp(&[1.0f64.ln()]).unwrap(), 0.0);
    }

    #[test]
    fn lse_halves_sum_to_one() {
        let h = 0.5f64.ln();
        assert_close(log_sum_exp(&[h, h]).unwrap(), 0.0, 1e-15);
    }

    #[test]
    fn lse_deep_underflow_region() {
        // log(exp(-1000) + exp(-1000)) = -1000 + log 2, where the naive
        // route underflows to -inf.
        let got = log_sum_exp(&[-1000.0, -1000.0]).unwrap();
        assert_close(got, -1000.0 + 2f64.ln(), 1e-12);
        assert_eq!(((-1000.0f64).exp() + (-1000.0f64).exp()).ln(), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_empty_is_error() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyReduction)));
    }

    #[test]
    fn lse_all_neg_inf() {
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn mat_vec_identity_matrix() {
        let mut m = LogMat::neg_inf(3, 3);
        for i in 0..3 {
            m.set(i, i, 0.0);
        }
        let v = vec![0.3f64.ln(), f64::NEG_INFINITY, 1.7f64.ln()];
        let out = log_mat_vec(&m, &v).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert_close(*a, *b, 1e-15);
        }
    }

    #[test]
    fn mat_vec_distribution_row() {
        let m = LogMat::new(1, 2, vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let out = log_mat_vec(&m, &[0.0, 0.0]).unwrap();
        assert_close(out[0], 0.0, 1e-15);
    }

    #[test]
    fn mat_vec_matches_naive_lse() {
        // Fixed random-ish 3x3 stochastic matrix.
        let rows = vec![
            vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()],
            vec![0.6f64.ln(), 0.1f64.ln(), 0.3f64.ln()],
            vec![0.25f64.ln(), 0.25f64.ln(), 0.5f64.ln()],
        ];
        let m = LogMat::from_rows(rows.clone()).unwrap();
        let v = vec![(-2.0f64).exp().ln(), -0.5, -3.25];
        let out = log_mat_vec(&m, &v).unwrap();
        for i in 0..3 {
            let naive = lse_slice(&[rows[i][0] + v[0], rows[i][1] + v[1], rows[i][2] + v[2]]);
            assert_close(out[i], naive, 1e-12);
        }
    }

    #[test]
    fn mat_vec_dim_mismatch() {
        let m = LogMat::neg_inf(2, 3);
        assert!(log_mat_vec(&m, &[0.0]).is_err());
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let out = log_hadamard(&[0.0, 0.0], &[2f64.ln(), 3f64.ln()]).unwrap();
        assert_close(out[0], 2f64.ln(), 1e-15);
        assert_close(out[1], 3f64.ln(), 1e-15);

        let out = log_hadamard(&[f64::NEG_INFINITY, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out[0], f64::NEG_INFINITY);
        assert_eq!(out[1], 0.0);

        assert!(log_hadamard(&[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn vec_mat_matches_naive_lse() {
        let rows = vec![vec![-0.1, -2.0, f64::NEG_INFINITY], vec![-1.0, -0.4, -0.9]];
        let m = LogMat::from_rows(rows.clone()).unwrap();
        let v = vec![-0.7, -1.3];
        let out = log_vec_mat(&v, &m).unwrap();
        for c in 0..3 {
            let naive = lse_slice(&[v[0] + rows[0][c], v[1] + rows[1][c]]);
            assert_close(out[c], naive, 1e-12);
        }
    }

    proptest! {
        #[test]
        fn prop_lse_matches_real_domain(xs in prop::collection::vec(-30.0f64..5.0, 1..20)) {
            let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
            let got = log_sum_exp(&xs).unwrap();
            prop_assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }

        #[test]
        fn prop_hadamard_matches_real_domain(
            pairs in prop::collection::vec((-20.0f64..0.0, -20.0f64..0.0), 1..16)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let out = log_hadamard(&a, &b).unwrap();
            for i in 0..a.len() {
                let real = a[i].exp() * b[i].exp();
                prop_assert!((out[i].exp() - real).abs() <= 1e-12 * real.max(1e-30));
            }
        }

        #[test]
        fn prop_stochastic_times_ones_is_ones(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..10.0, 4), 1..6)
        ) {
            // Rows of exp(M) sum to 1; v = all log 1. Result must be all log 1.
            let rows: Vec<Vec<f64>> = raw.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|x| (x / s).ln()).collect()
            }).collect();
            let m = LogMat::from_rows(rows).unwrap();
            let out = log_mat_vec(&m, &[0.0; 4]).unwrap();
            for x in out {
                prop_assert!(x.abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_no_nan_with_neg_inf_inputs(
            xs in prop::collection::vec(prop_oneof![Just(f64::NEG_INFINITY), -50.0f64..10.0], 1..12)
        ) {
            let got = log_sum_exp(&xs).unwrap();
            prop_assert!(!got.is_nan());
            let had = log_hadamard(&xs, &xs).unwrap();
            prop_assert!(had.iter().all(|x| !x.is_nan()));
        }
    }
}
