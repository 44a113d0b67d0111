//! Inside-algorithm variants, adjoint span marginals, and MBR decoding.
//!
//! Four interchangeable routes to the same sentence probability:
//!
//! * [`dense_inside`]: O(n^3 num_nt m^2) on the reconstructed tensor,
//! * [`td_inside`]: O(n^3 r + n^2 m r) with cached child projections,
//! * [`lpcfg_inside`]: O(n^3 m^2 r + n^2 m r) through the order-3 view,
//! * [`rank_inside`]: O(n^3 r + n^2 r^2) on the compiled rank-space model.
//!
//! Chart cells hold real-domain values with one log-scale per span,
//! rescaled as each cell is filled; public accessors convert back to log.
//! Span marginals come from a hand-written reverse sweep over the
//! rank-space recursion: the sentence total is linear in every chart cell,
//! so the adjoint of a cell against the total is exactly the posterior mass
//! flowing through it.

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::logspace::{real_gemm, LogMat, LogVec};
use crate::model::{CpdPcfg, DensePcfg, LpcfgView, RankPcfg};
use std::collections::BTreeSet;

// ---------------------------------------------------------------------------
// Chart storage
// ---------------------------------------------------------------------------

/// Per-span vectors stored as scaled reals: the logical log value of entry
/// `q` in span `(i, j)` is `ln(vals[q]) + shift`.
#[derive(Debug, Clone)]
pub struct SpanTable {
    n: usize,
    dim: usize,
    vals: Vec<f64>,
    shifts: Vec<f64>,
}

impl SpanTable {
    fn new(n: usize, dim: usize) -> Self {
        let cells = (n + 1) * (n + 1);
        Self {
            n,
            dim,
            vals: vec![0.0; cells * dim],
            shifts: vec![f64::NEG_INFINITY; cells],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.n + 1) + j
    }

    #[inline]
    fn vals(&self, i: usize, j: usize) -> &[f64] {
        let c = self.idx(i, j);
        &self.vals[c * self.dim..(c + 1) * self.dim]
    }

    #[inline]
    fn vals_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let c = self.idx(i, j);
        &mut self.vals[c * self.dim..(c + 1) * self.dim]
    }

    #[inline]
    fn shift(&self, i: usize, j: usize) -> f64 {
        self.shifts[self.idx(i, j)]
    }

    #[inline]
    fn set_shift(&mut self, i: usize, j: usize, s: f64) {
        let c = self.idx(i, j);
        self.shifts[c] = s;
    }

    /// Divide the cell by its max and fold the max into the shift.
    fn renormalize(&mut self, i: usize, j: usize) {
        let c = self.idx(i, j);
        let cell = &mut self.vals[c * self.dim..(c + 1) * self.dim];
        let mx = cell.iter().copied().fold(0.0f64, f64::max);
        if mx > 0.0 {
            cell.iter_mut().for_each(|v| *v /= mx);
            self.shifts[c] += mx.ln();
        } else {
            self.shifts[c] = f64::NEG_INFINITY;
        }
    }

    /// The cell as log values.
    pub fn log_values(&self, i: usize, j: usize) -> LogVec {
        let s = self.shift(i, j);
        self.vals(i, j)
            .iter()
            .map(|&v| if s == f64::NEG_INFINITY { f64::NEG_INFINITY } else { v.ln() + s })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Inside scores for one sentence. `alpha` covers spans of width >= 2 (the
/// dimension is the nonterminal count for state-space sweeps and the rank
/// for the rank-space sweep); the left/right child caches exist only for
/// the rank-space sweep and cover width >= 1.
#[derive(Debug, Clone)]
pub struct InsideChart {
    pub n: usize,
    pub log_z: f64,
    alpha: SpanTable,
    alpha_left: Option<SpanTable>,
    alpha_right: Option<SpanTable>,
}

impl InsideChart {
    pub fn alpha(&self, i: usize, j: usize) -> Option<LogVec> {
        (i < j && j <= self.n && j - i >= 2).then(|| self.alpha.log_values(i, j))
    }

    pub fn alpha_left(&self, i: usize, j: usize) -> Option<LogVec> {
        let t = self.alpha_left.as_ref()?;
        (i < j && j <= self.n).then(|| t.log_values(i, j))
    }

    pub fn alpha_right(&self, i: usize, j: usize) -> Option<LogVec> {
        let t = self.alpha_right.as_ref()?;
        (i < j && j <= self.n).then(|| t.log_values(i, j))
    }
}

fn require_parseable(seq: &TokenSeq, o: usize) -> Result<()> {
    seq.check_range(o)?;
    if seq.len() < 2 {
        return Err(Error::SentenceLength {
            len: seq.len(),
            reason: "binary parses need at least two tokens",
        });
    }
    Ok(())
}

/// Collect split scales for a span: smax over splits of shiftL + shiftR.
#[inline]
fn split_scale_max(
    left: &SpanTable,
    right: &SpanTable,
    i: usize,
    j: usize,
) -> f64 {
    let mut smax = f64::NEG_INFINITY;
    for k in i + 1..j {
        let s = left.shift(i, k) + right.shift(k, j);
        if s > smax {
            smax = s;
        }
    }
    smax
}

fn close_chart_top(exp_root: &[f64], alpha: &SpanTable, n: usize) -> f64 {
    let top = alpha.vals(0, n);
    let s: f64 = exp_root.iter().zip(top).map(|(&r, &a)| r * a).sum();
    let shift = alpha.shift(0, n);
    if s > 0.0 && shift != f64::NEG_INFINITY {
        s.ln() + shift
    } else {
        f64::NEG_INFINITY
    }
}

// ---------------------------------------------------------------------------
// Dense inside (CYK baseline)
// ---------------------------------------------------------------------------

/// Inside algorithm on the explicit binary tensor; the per-split contraction
/// is the literal baseline recursion, batched over splits with a GEMM.
pub fn dense_inside(model: &DensePcfg, seq: &TokenSeq) -> Result<InsideChart> {
    require_parseable(seq, model.o())?;
    let n = seq.len();
    let nt = model.num_nt;
    let m = model.num_symbols();
    let o = model.o();

    // Leaf child vectors over all symbols: preterminal block carries the
    // emission, nonterminal block is zero mass.
    let exp_emit = model.exp_emit();
    let mut leaf = vec![0.0f64; n * m];
    for (pos, &w) in seq.ids().iter().enumerate() {
        for p in 0..model.num_pt {
            leaf[pos * m + nt + p] = exp_emit[p * o + w];
        }
    }

    // Chart cells are stored over all m symbols (preterminal lanes stay at
    // zero mass) so a filled span can serve as a child without repacking.
    let mut alpha = SpanTable::new(n, m);
    let max_splits = n.saturating_sub(1);
    let mut lbuf = vec![0.0f64; m * max_splits]; // column-major m x K
    let mut rbuf = vec![0.0f64; m * max_splits];
    let mut cbuf = vec![0.0f64; nt * m * max_splits]; // column-major (nt*m) x K
    let mut outer = vec![0.0f64; m * m];
    let mut narrow = vec![0.0f64; nt];

    // When no single tree can underflow a double, the whole chart runs on
    // raw reals: no per-cell scales, no per-split rescaling.
    let raw = model.tree_log_weight_floor(seq.ids()) > -600.0;

    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            let splits = width - 1;
            let smax = if raw {
                0.0
            } else {
                let s = split_scale_max_dense(&alpha, i, j);
                if s == f64::NEG_INFINITY {
                    continue; // zero-mass span
                }
                s
            };
            fn child<'x>(
                a: &'x SpanTable,
                leaf: &'x [f64],
                m: usize,
                lo: usize,
                hi: usize,
            ) -> &'x [f64] {
                if hi - lo == 1 {
                    &leaf[lo * m..(lo + 1) * m]
                } else {
                    a.vals(lo, hi)
                }
            }
            if m > 64 {
                // Batch the per-split contraction across splits as one GEMM:
                // C[(a, b), t] = sum_c expB[(a, b), c] * R[c, t].
                for (t, k) in (i + 1..j).enumerate() {
                    lbuf[t * m..(t + 1) * m].copy_from_slice(child(&alpha, &leaf, m, i, k));
                    rbuf[t * m..(t + 1) * m].copy_from_slice(child(&alpha, &leaf, m, k, j));
                    if !raw {
                        let s = child_shift(&alpha, i, k) + child_shift(&alpha, k, j);
                        let c = if s == f64::NEG_INFINITY { 0.0 } else { (s - smax).exp() };
                        rbuf[t * m..(t + 1) * m].iter_mut().for_each(|x| *x *= c);
                    }
                }
                real_gemm(
                    nt * m,
                    m,
                    splits,
                    model.exp_binary_block(),
                    m as isize,
                    1,
                    &rbuf,
                    1,
                    m as isize,
                    0.0,
                    &mut cbuf[..nt * m * splits],
                    1,
                    (nt * m) as isize,
                );
                narrow.iter_mut().for_each(|x| *x = 0.0);
                for t in 0..splits {
                    let col = &cbuf[t * nt * m..(t + 1) * nt * m];
                    let lcol = &lbuf[t * m..(t + 1) * m];
                    for (a, out) in narrow.iter_mut().enumerate() {
                        let seg = &col[a * m..(a + 1) * m];
                        let mut acc = 0.0;
                        for (x, y) in seg.iter().zip(lcol) {
                            acc += x * y;
                        }
                        *out += acc;
                    }
                }
            } else {
                // Small symbol sets: materialize the child outer product
                // once per split, then contract each parent plane against it
                // with one long chunked dot. Work per element is uniform in
                // m, so measured scaling tracks the flop count.
                let block = model.exp_binary_block();
                narrow.iter_mut().for_each(|x| *x = 0.0);
                for k in i + 1..j {
                    let scale = if raw {
                        1.0
                    } else {
                        let s = child_shift(&alpha, i, k) + child_shift(&alpha, k, j);
                        if s == f64::NEG_INFINITY {
                            continue;
                        }
                        (s - smax).exp()
                    };
                    let lcol = child(&alpha, &leaf, m, i, k);
                    let rcol = child(&alpha, &leaf, m, k, j);
                    for (b, &lb) in lcol.iter().enumerate() {
                        let w = scale * lb;
                        let row = &mut outer[b * m..(b + 1) * m];
                        for (x, &y) in row.iter_mut().zip(rcol) {
                            *x = w * y;
                        }
                    }
                    for (a, out) in narrow.iter_mut().enumerate() {
                        let plane = &block[a * m * m..(a + 1) * m * m];
                        *out += dot_unrolled(plane, &outer);
                    }
                }
            }
            let cell = alpha.vals_mut(i, j);
            cell[..nt].copy_from_slice(&narrow);
            cell[nt..].iter_mut().for_each(|x| *x = 0.0);
            alpha.set_shift(i, j, smax);
            if !raw {
                alpha.renormalize(i, j);
            }
        }
    }

    let log_z = close_chart_top_wide(model.exp_start(), &alpha, n, nt);
    // Publish the chart over nonterminals only.
    let mut public = SpanTable::new(n, nt);
    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            public
                .vals_mut(i, j)
                .copy_from_slice(&alpha.vals(i, j)[..nt]);
            public.set_shift(i, j, alpha.shift(i, j));
        }
    }
    Ok(InsideChart {
        n,
        log_z,
        alpha: public,
        alpha_left: None,
        alpha_right: None,
    })
}

fn close_chart_top_wide(exp_root: &[f64], alpha: &SpanTable, n: usize, nt: usize) -> f64 {
    let top = &alpha.vals(0, n)[..nt];
    let s: f64 = exp_root.iter().zip(top).map(|(&r, &a)| r * a).sum();
    let shift = alpha.shift(0, n);
    if s > 0.0 && shift != f64::NEG_INFINITY {
        s.ln() + shift
    } else {
        f64::NEG_INFINITY
    }
}

/// Four-accumulator dot product; keeps the summation order fixed per length
/// while letting independent lanes pipeline.
#[inline]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        acc[0] += a[base] * b[base];
        acc[1] += a[base + 1] * b[base + 1];
        acc[2] += a[base + 2] * b[base + 2];
        acc[3] += a[base + 3] * b[base + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn child_shift(alpha: &SpanTable, i: usize, j: usize) -> f64 {
    if j - i == 1 {
        0.0 // leaf vectors are unscaled
    } else {
        alpha.shift(i, j)
    }
}

fn split_scale_max_dense(alpha: &SpanTable, i: usize, j: usize) -> f64 {
    let mut smax = f64::NEG_INFINITY;
    for k in i + 1..j {
        let s = child_shift(alpha, i, k) + child_shift(alpha, k, j);
        if s > smax {
            smax = s;
        }
    }
    smax
}

fn fill_child(
    buf: &mut [f64],
    alpha: &SpanTable,
    leaf: &[f64],
    m: usize,
    nt: usize,
    i: usize,
    j: usize,
) {
    if j - i == 1 {
        buf.copy_from_slice(&leaf[i * m..(i + 1) * m]);
    } else {
        buf.iter_mut().for_each(|x| *x = 0.0);
        buf[..nt].copy_from_slice(alpha.vals(i, j));
    }
}

// ---------------------------------------------------------------------------
// TD inside (cached low-rank projections, state space)
// ---------------------------------------------------------------------------

/// Inside algorithm through the factor matrices with cached left/right child
/// projections: each filled span is projected once into rank space and the
/// projection reused by every parent.
pub fn td_inside(model: &CpdPcfg, seq: &TokenSeq) -> Result<InsideChart> {
    require_parseable(seq, model.o())?;
    let n = seq.len();
    let (nt, pt, r, m, o) = (
        model.num_nt,
        model.num_pt,
        model.r(),
        model.num_symbols(),
        model.o(),
    );
    let eu = model.parent_to_rank.exp_data();
    let ev = model.rank_to_left.exp_data();
    let ew = model.rank_to_right.exp_data();
    let ee = model.preterm_emit.exp_data();
    let es: Vec<f64> = model.start.iter().map(|&x| x.exp()).collect();

    let mut alpha = SpanTable::new(n, nt);
    let mut lproj = SpanTable::new(n, r);
    let mut rproj = SpanTable::new(n, r);

    // Leaf projections: the rank-space view of a single word serving as a
    // left (through V and the emission) or right (through W) child.
    for (pos, &w) in seq.ids().iter().enumerate() {
        {
            let cell = lproj.vals_mut(pos, pos + 1);
            for q in 0..r {
                let mut acc = 0.0;
                for p in 0..pt {
                    acc += ev[q * m + nt + p] * ee[p * o + w];
                }
                cell[q] = acc;
            }
        }
        lproj.set_shift(pos, pos + 1, 0.0);
        {
            let cell = rproj.vals_mut(pos, pos + 1);
            for q in 0..r {
                let mut acc = 0.0;
                for p in 0..pt {
                    acc += ew[q * m + nt + p] * ee[p * o + w];
                }
                cell[q] = acc;
            }
        }
        rproj.set_shift(pos, pos + 1, 0.0);
    }

    let mut acc = vec![0.0f64; r];
    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            let smax = split_scale_max(&lproj, &rproj, i, j);
            if smax == f64::NEG_INFINITY {
                continue;
            }
            acc.iter_mut().for_each(|x| *x = 0.0);
            for k in i + 1..j {
                let s = lproj.shift(i, k) + rproj.shift(k, j);
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let c = (s - smax).exp();
                let lv = lproj.vals(i, k);
                let rv = rproj.vals(k, j);
                for q in 0..r {
                    acc[q] += c * lv[q] * rv[q];
                }
            }
            {
                let cell = alpha.vals_mut(i, j);
                for (a, out) in cell.iter_mut().enumerate() {
                    let urow = &eu[a * r..(a + 1) * r];
                    let mut v = 0.0;
                    for (x, y) in urow.iter().zip(&acc) {
                        v += x * y;
                    }
                    *out = v;
                }
            }
            alpha.set_shift(i, j, smax);
            alpha.renormalize(i, j);

            if width < n {
                project_children(&alpha, &mut lproj, &mut rproj, &ev, &ew, m, nt, i, j);
            }
        }
    }

    let log_z = close_chart_top(&es, &alpha, n);
    Ok(InsideChart {
        n,
        log_z,
        alpha,
        alpha_left: None,
        alpha_right: None,
    })
}

/// lproj = V_NT * alpha, rproj = W_NT * alpha, inheriting alpha's scale.
fn project_children(
    alpha: &SpanTable,
    lproj: &mut SpanTable,
    rproj: &mut SpanTable,
    ev: &[f64],
    ew: &[f64],
    m: usize,
    nt: usize,
    i: usize,
    j: usize,
) {
    let av = alpha.vals(i, j);
    let shift = alpha.shift(i, j);
    let r = lproj.dim();
    {
        let cell = lproj.vals_mut(i, j);
        for q in 0..r {
            let row = &ev[q * m..q * m + nt];
            let mut acc = 0.0;
            for (x, y) in row.iter().zip(av) {
                acc += x * y;
            }
            cell[q] = acc;
        }
    }
    lproj.set_shift(i, j, shift);
    lproj.renormalize(i, j);
    {
        let cell = rproj.vals_mut(i, j);
        for q in 0..r {
            let row = &ew[q * m..q * m + nt];
            let mut acc = 0.0;
            for (x, y) in row.iter().zip(av) {
                acc += x * y;
            }
            cell[q] = acc;
        }
    }
    rproj.set_shift(i, j, shift);
    rproj.renormalize(i, j);
}

// ---------------------------------------------------------------------------
// LPCFG inside (order-3 child factor)
// ---------------------------------------------------------------------------

/// Inside algorithm through the un-flattened order-3 child factor. The
/// contraction runs right child first, then left.
pub fn lpcfg_inside(
    view: &LpcfgView,
    emission: &LogMat,
    start: &[f64],
    seq: &TokenSeq,
) -> Result<InsideChart> {
    let o = emission.cols();
    require_parseable(seq, o)?;
    let n = seq.len();
    let r = view.r();
    let m = view.num_symbols();
    let nt = start.len();
    let pt = emission.rows();
    if nt + pt != m || view.parent_to_rank.rows() != nt || view.parent_to_rank.cols() != r {
        return Err(Error::InvalidDims(
            "view, emission, and start dimensions are inconsistent".into(),
        ));
    }

    let eu = view.parent_to_rank.exp_data();
    let evp = view.pair_given_rank.data().iter().map(|&x| x.exp()).collect::<Vec<_>>();
    let exp_emit = emission.exp_data();
    let es: Vec<f64> = start.iter().map(|&x| x.exp()).collect();

    let mut leaf = vec![0.0f64; n * m];
    for (pos, &w) in seq.ids().iter().enumerate() {
        for p in 0..pt {
            leaf[pos * m + nt + p] = exp_emit[p * o + w];
        }
    }

    let mut alpha = SpanTable::new(n, nt);
    let mut lchild = vec![0.0f64; m];
    let mut rchild = vec![0.0f64; m];
    let mut t1 = vec![0.0f64; r * m];
    let mut acc = vec![0.0f64; r];

    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            let smax = split_scale_max_dense(&alpha, i, j);
            if smax == f64::NEG_INFINITY {
                continue;
            }
            acc.iter_mut().for_each(|x| *x = 0.0);
            for k in i + 1..j {
                let s = child_shift(&alpha, i, k) + child_shift(&alpha, k, j);
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let c = (s - smax).exp();
                fill_child(&mut lchild, &alpha, &leaf, m, nt, i, k);
                fill_child(&mut rchild, &alpha, &leaf, m, nt, k, j);
                // t1[q][b] = sum_c pair[q][b][c] * right[c]
                real_gemm(
                    r * m,
                    m,
                    1,
                    &evp,
                    m as isize,
                    1,
                    &rchild,
                    1,
                    1,
                    0.0,
                    &mut t1,
                    1,
                    1,
                );
                for q in 0..r {
                    let row = &t1[q * m..(q + 1) * m];
                    let mut v = 0.0;
                    for (x, y) in row.iter().zip(&lchild) {
                        v += x * y;
                    }
                    acc[q] += c * v;
                }
            }
            {
                let cell = alpha.vals_mut(i, j);
                for (a, out) in cell.iter_mut().enumerate() {
                    let urow = &eu[a * r..(a + 1) * r];
                    let mut v = 0.0;
                    for (x, y) in urow.iter().zip(&acc) {
                        v += x * y;
                    }
                    *out = v;
                }
            }
            alpha.set_shift(i, j, smax);
            alpha.renormalize(i, j);
        }
    }

    let log_z = close_chart_top(&es, &alpha, n);
    Ok(InsideChart {
        n,
        log_z,
        alpha,
        alpha_left: None,
        alpha_right: None,
    })
}

// ---------------------------------------------------------------------------
// Rank-space inside
// ---------------------------------------------------------------------------

/// Inside algorithm entirely over rank variables. A width-1 span enters as a
/// `left_word` column when serving as a left child and a `right_word` column
/// when serving as a right child; wider spans are projected once through
/// `left_proj`/`right_proj` and the projections reused by every parent.
pub fn rank_inside(model: &RankPcfg, seq: &TokenSeq) -> Result<InsideChart> {
    require_parseable(seq, model.o())?;
    let n = seq.len();
    let r = model.r();
    let o = model.o();
    let eh = model.left_proj.exp_data();
    let ei = model.right_proj.exp_data();
    let ej = model.left_word.exp_data();
    let ek = model.right_word.exp_data();
    let el: Vec<f64> = model.root.iter().map(|&x| x.exp()).collect();

    let mut alpha = SpanTable::new(n, r);
    let mut left = SpanTable::new(n, r);
    let mut right = SpanTable::new(n, r);

    for (pos, &w) in seq.ids().iter().enumerate() {
        for q in 0..r {
            left.vals_mut(pos, pos + 1)[q] = ej[q * o + w];
            right.vals_mut(pos, pos + 1)[q] = ek[q * o + w];
        }
        left.set_shift(pos, pos + 1, 0.0);
        right.set_shift(pos, pos + 1, 0.0);
    }

    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            let smax = split_scale_max(&left, &right, i, j);
            if smax == f64::NEG_INFINITY {
                continue;
            }
            {
                // Two-phase borrow: accumulate into a stack cell, then store.
                let mut acc = vec![0.0f64; r];
                for k in i + 1..j {
                    let s = left.shift(i, k) + right.shift(k, j);
                    if s == f64::NEG_INFINITY {
                        continue;
                    }
                    let c = (s - smax).exp();
                    let lv = left.vals(i, k);
                    let rv = right.vals(k, j);
                    for q in 0..r {
                        acc[q] += c * lv[q] * rv[q];
                    }
                }
                alpha.vals_mut(i, j).copy_from_slice(&acc);
            }
            alpha.set_shift(i, j, smax);
            alpha.renormalize(i, j);

            // Child projections for parents (kept for the top span too so
            // the chart is fully populated).
            let av = alpha.vals(i, j);
            let shift = alpha.shift(i, j);
            {
                let cell = left.vals_mut(i, j);
                for q in 0..r {
                    let row = &eh[q * r..(q + 1) * r];
                    let mut acc2 = 0.0;
                    for (x, y) in row.iter().zip(av) {
                        acc2 += x * y;
                    }
                    cell[q] = acc2;
                }
            }
            left.set_shift(i, j, shift);
            left.renormalize(i, j);
            {
                let cell = right.vals_mut(i, j);
                for q in 0..r {
                    let row = &ei[q * r..(q + 1) * r];
                    let mut acc2 = 0.0;
                    for (x, y) in row.iter().zip(av) {
                        acc2 += x * y;
                    }
                    cell[q] = acc2;
                }
            }
            right.set_shift(i, j, shift);
            right.renormalize(i, j);
        }
    }

    let log_z = close_chart_top(&el, &alpha, n);
    Ok(InsideChart {
        n,
        log_z,
        alpha,
        alpha_left: Some(left),
        alpha_right: Some(right),
    })
}

// ---------------------------------------------------------------------------
// Reverse sweep: span marginals and compiled-matrix adjoints
// ---------------------------------------------------------------------------

/// Adjoints of the sentence log-probability with respect to the log entries
/// of the compiled matrices. Filled by the reverse sweep when requested.
#[derive(Debug, Clone)]
pub(crate) struct RankMatAdjoints {
    pub root: Vec<f64>,
    pub left_proj: Vec<f64>,
    pub right_proj: Vec<f64>,
    pub left_word: Vec<f64>,
    pub right_word: Vec<f64>,
}

impl RankMatAdjoints {
    pub(crate) fn zeros(r: usize, o: usize) -> Self {
        Self {
            root: vec![0.0; r],
            left_proj: vec![0.0; r * r],
            right_proj: vec![0.0; r * r],
            left_word: vec![0.0; r * o],
            right_word: vec![0.0; r * o],
        }
    }
}

/// Posterior probability of each span of width >= 2.
#[derive(Debug, Clone)]
pub struct SpanMarginals {
    n: usize,
    mu: Vec<f64>,
}

impl SpanMarginals {
    fn new(n: usize) -> Self {
        Self {
            n,
            mu: vec![0.0; (n + 1) * (n + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i < j && j <= self.n && j - i >= 2).then(|| self.mu[i * (self.n + 1) + j])
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.mu[i * (self.n + 1) + j] = v;
    }

    /// All spans of width >= 2 in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        let n = self.n;
        (0..n).flat_map(move |i| {
            (i + 2..=n).map(move |j| ((i, j), self.mu[i * (n + 1) + j]))
        })
    }

    pub fn total(&self) -> f64 {
        self.iter().map(|(_, v)| v).sum()
    }

    /// Build from explicit values; missing spans default to 0.
    pub fn from_values(n: usize, values: &[((usize, usize), f64)]) -> Result<Self> {
        let mut out = Self::new(n);
        for &((i, j), v) in values {
            if !(i < j && j <= n && j - i >= 2) {
                return Err(Error::InvalidDims(format!(
                    "span ({i}, {j}) invalid for sentence length {n}"
                )));
            }
            out.set(i, j, v);
        }
        Ok(out)
    }
}

/// Reverse accumulation over the rank-space recursion. Returns span
/// marginals; optionally also fills compiled-matrix adjoints for training.
pub(crate) fn rank_reverse(
    model: &RankPcfg,
    seq: &TokenSeq,
    chart: &InsideChart,
    mut mats: Option<&mut RankMatAdjoints>,
) -> Result<SpanMarginals> {
    let n = chart.n;
    let r = model.r();
    let o = model.o();
    if chart.log_z == f64::NEG_INFINITY {
        return Err(Error::ZeroProbability(
            "sentence has zero probability under the model".into(),
        ));
    }
    let alpha = &chart.alpha;
    let left = chart.alpha_left.as_ref().expect("rank chart carries caches");
    let right = chart.alpha_right.as_ref().expect("rank chart carries caches");
    let eh = model.left_proj.exp_data();
    let ei = model.right_proj.exp_data();
    let el: Vec<f64> = model.root.iter().map(|&x| x.exp()).collect();

    let cells = (n + 1) * (n + 1);
    let mut abar_a = vec![0.0f64; cells * r];
    let mut abar_l = vec![0.0f64; cells * r];
    let mut abar_r = vec![0.0f64; cells * r];
    let at = |i: usize, j: usize| (i * (n + 1) + j) * r;

    // Seed from the top: d logZ / d log alpha[0,n][q].
    {
        let top = alpha.vals(0, n);
        let z_real: f64 = el.iter().zip(top).map(|(&l, &a)| l * a).sum();
        let base = at(0, n);
        for q in 0..r {
            let v = el[q] * top[q] / z_real;
            abar_a[base + q] = v;
            if let Some(m) = mats.as_deref_mut() {
                m.root[q] += v;
            }
        }
    }

    let mut marginals = SpanMarginals::new(n);
    let mut gl = vec![0.0f64; r];
    let mut gr = vec![0.0f64; r];

    for width in (2..=n).rev() {
        for i in 0..=n - width {
            let j = i + width;
            let s_a = alpha.shift(i, j);

            if width < n {
                // alpha adjoint flows in through this span's child caches.
                let s_l = left.shift(i, j);
                let s_r = right.shift(i, j);
                let lv = left.vals(i, j);
                let rv = right.vals(i, j);
                let cl = if s_a == f64::NEG_INFINITY || s_l == f64::NEG_INFINITY {
                    0.0
                } else {
                    (s_a - s_l).exp()
                };
                let cr = if s_a == f64::NEG_INFINITY || s_r == f64::NEG_INFINITY {
                    0.0
                } else {
                    (s_a - s_r).exp()
                };
                for q in 0..r {
                    let bl = abar_l[at(i, j) + q];
                    gl[q] = if bl == 0.0 { 0.0 } else { bl * cl / lv[q] };
                    let br = abar_r[at(i, j) + q];
                    gr[q] = if br == 0.0 { 0.0 } else { br * cr / rv[q] };
                }
                let av = alpha.vals(i, j);
                let base = at(i, j);
                // abar_a[p] = va[p] * (eH^T gl + eI^T gr)[p]
                for q in 0..r {
                    let (glq, grq) = (gl[q], gr[q]);
                    if glq == 0.0 && grq == 0.0 {
                        continue;
                    }
                    let hrow = &eh[q * r..(q + 1) * r];
                    let irow = &ei[q * r..(q + 1) * r];
                    for p in 0..r {
                        abar_a[base + p] += av[p] * (glq * hrow[p] + grq * irow[p]);
                    }
                    if let Some(m) = mats.as_deref_mut() {
                        for p in 0..r {
                            m.left_proj[q * r + p] += glq * hrow[p] * av[p];
                            m.right_proj[q * r + p] += grq * irow[p] * av[p];
                        }
                    }
                }
            }

            // Marginal: Z is linear in this cell, so the posterior mass
            // through the span is the sum of the cell's adjoints.
            let base = at(i, j);
            let mu: f64 = abar_a[base..base + r].iter().sum();
            marginals.set(i, j, mu);

            // Distribute to the split children. In log space the two
            // adjoints coincide: d log a / d log aL = d log a / d log aR
            // = exp(log aL + log aR - log a).
            let av = alpha.vals(i, j);
            for q in 0..r {
                let ab = abar_a[base + q];
                gl[q] = if ab == 0.0 { 0.0 } else { ab / av[q] };
            }
            for k in i + 1..j {
                let s = left.shift(i, k) + right.shift(k, j);
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let c = (s - s_a).exp();
                let lv = left.vals(i, k);
                let rv = right.vals(k, j);
                let lbase = at(i, k);
                let rbase = at(k, j);
                for q in 0..r {
                    let t = gl[q] * c * lv[q] * rv[q];
                    if t == 0.0 {
                        continue;
                    }
                    abar_l[lbase + q] += t;
                    abar_r[rbase + q] += t;
                }
            }
        }
    }

    if let Some(m) = mats.as_deref_mut() {
        for (pos, &w) in seq.ids().iter().enumerate() {
            let base = at(pos, pos + 1);
            for q in 0..r {
                m.left_word[q * o + w] += abar_l[base + q];
                m.right_word[q * o + w] += abar_r[base + q];
            }
        }
    }

    Ok(marginals)
}

/// Span marginals by reverse accumulation over [`rank_inside`]; same
/// asymptotic cost as the inside pass itself.
pub fn span_marginals(model: &RankPcfg, seq: &TokenSeq) -> Result<SpanMarginals> {
    let chart = rank_inside(model, seq)?;
    rank_reverse(model, seq, &chart, None)
}

// ---------------------------------------------------------------------------
// Trees, MBR decoding, and bracket evaluation
// ---------------------------------------------------------------------------

/// A binary bracketing over `n` leaves: the n-1 internal spans of width >= 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    n: usize,
    spans: Vec<(usize, usize)>,
}

impl ParseTree {
    /// Validates that the spans form a complete binary bracketing.
    pub fn from_spans(n: usize, mut spans: Vec<(usize, usize)>) -> Result<Self> {
        spans.sort_unstable();
        spans.dedup();
        if n < 2 || spans.len() != n - 1 || !spans.contains(&(0, n)) {
            return Err(Error::InvalidDims(format!(
                "{} spans cannot form a binary tree over {n} leaves",
                spans.len()
            )));
        }
        let set: BTreeSet<(usize, usize)> = spans.iter().copied().collect();
        let is_node = |i: usize, j: usize| j - i == 1 || set.contains(&(i, j));
        for &(i, j) in &spans {
            let splits = (i + 1..j).filter(|&k| is_node(i, k) && is_node(k, j)).count();
            if splits == 0 {
                return Err(Error::InvalidDims(format!(
                    "span ({i}, {j}) has no valid split"
                )));
            }
        }
        Ok(Self { n, spans })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    /// Spans scored in bracket evaluation: width >= 2, excluding the
    /// whole-sentence span.
    pub fn eval_spans(&self) -> BTreeSet<(usize, usize)> {
        self.spans
            .iter()
            .copied()
            .filter(|&(i, j)| !(i == 0 && j == self.n))
            .collect()
    }

    /// Nested bracket rendering over token indices, e.g. `((0 1) 2)`.
    pub fn bracket_string(&self) -> String {
        let set: BTreeSet<(usize, usize)> = self.spans.iter().copied().collect();
        fn render(set: &BTreeSet<(usize, usize)>, i: usize, j: usize, out: &mut String) {
            if j - i == 1 {
                out.push_str(&i.to_string());
                return;
            }
            let is_node = |a: usize, b: usize| b - a == 1 || set.contains(&(a, b));
            let k = (i + 1..j)
                .find(|&k| is_node(i, k) && is_node(k, j))
                .expect("validated tree");
            out.push('(');
            render(set, i, k, out);
            out.push(' ');
            render(set, k, j, out);
            out.push(')');
        }
        let mut out = String::new();
        render(&set, 0, self.n, &mut out);
        out
    }
}

/// Maximize the expected number of kept spans: best(i,j) = mu(i,j) +
/// max_k best(i,k) + best(k,j), ties broken toward the smallest split.
pub fn mbr_decode(marginals: &SpanMarginals) -> ParseTree {
    let n = marginals.n();
    let stride = n + 1;
    let mut best = vec![0.0f64; stride * stride];
    let mut split = vec![0usize; stride * stride];
    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            let mut bk = i + 1;
            let mut bv = f64::NEG_INFINITY;
            for k in i + 1..j {
                let v = best[i * stride + k] + best[k * stride + j];
                if v > bv {
                    bv = v;
                    bk = k;
                }
            }
            best[i * stride + j] = marginals.get(i, j).unwrap_or(0.0) + bv;
            split[i * stride + j] = bk;
        }
    }
    let mut spans = Vec::with_capacity(n - 1);
    let mut stack = vec![(0usize, n)];
    while let Some((i, j)) = stack.pop() {
        if j - i < 2 {
            continue;
        }
        spans.push((i, j));
        let k = split[i * stride + j];
        stack.push((i, k));
        stack.push((k, j));
    }
    ParseTree::from_spans(n, spans).expect("backtrace yields a valid binary tree")
}

/// The MBR objective of a tree under the given marginals.
pub fn expected_span_total(tree: &ParseTree, marginals: &SpanMarginals) -> f64 {
    tree.spans()
        .iter()
        .map(|&(i, j)| marginals.get(i, j).unwrap_or(0.0))
        .sum()
}

/// Possibly n-ary gold bracketing, as extracted from a bracket file line.
#[derive(Debug, Clone)]
pub struct GoldSpans {
    pub n: usize,
    spans: BTreeSet<(usize, usize)>,
}

impl GoldSpans {
    pub fn eval_spans(&self) -> BTreeSet<(usize, usize)> {
        self.spans
            .iter()
            .copied()
            .filter(|&(i, j)| !(i == 0 && j == self.n))
            .collect()
    }
}

/// Parse one bracket line over token indices, e.g. `((0 1) 2)`. Groups may
/// have any arity; leaves must be 0..n in order.
pub fn parse_bracket_line(line: &str) -> Result<GoldSpans> {
    #[derive(Debug)]
    enum Tok {
        Open,
        Close,
        Leaf(usize),
    }
    let mut toks = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            '(' => {
                toks.push(Tok::Open);
                chars.next();
            }
            ')' => {
                toks.push(Tok::Close);
                chars.next();
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            c if c.is_ascii_digit() => {
                let mut v = 0usize;
                while let Some(&d) = chars.peek() {
                    if let Some(dig) = d.to_digit(10) {
                        v = v * 10 + dig as usize;
                        chars.next();
                    } else {
                        break;
                    }
                }
                toks.push(Tok::Leaf(v));
            }
            other => {
                return Err(Error::Corpus {
                    line: 0,
                    msg: format!("unexpected character {other:?} in bracket line"),
                })
            }
        }
    }

    let mut spans = BTreeSet::new();
    let mut stack: Vec<(usize, usize)> = Vec::new(); // (min, max+1) per open group
    let mut next_leaf = 0usize;
    let mut root_done = false;
    let bad = |msg: &str| Error::Corpus {
        line: 0,
        msg: msg.to_string(),
    };
    for tok in toks {
        if root_done {
            return Err(bad("trailing content after root bracket"));
        }
        match tok {
            Tok::Open => stack.push((usize::MAX, 0)),
            Tok::Leaf(v) => {
                if v != next_leaf {
                    return Err(bad(&format!(
                        "leaf indices must be consecutive from 0, got {v} expecting {next_leaf}"
                    )));
                }
                next_leaf += 1;
                if let Some(top) = stack.last_mut() {
                    top.0 = top.0.min(v);
                    top.1 = top.1.max(v + 1);
                } else {
                    // bare single-leaf line
                    root_done = true;
                }
            }
            Tok::Close => {
                let (lo, hi) = stack.pop().ok_or_else(|| bad("unbalanced brackets"))?;
                if lo == usize::MAX {
                    return Err(bad("empty bracket group"));
                }
                spans.insert((lo, hi));
                if let Some(top) = stack.last_mut() {
                    top.0 = top.0.min(lo);
                    top.1 = top.1.max(hi);
                } else {
                    root_done = true;
                }
            }
        }
    }
    if !stack.is_empty() {
        return Err(bad("unbalanced brackets"));
    }
    if next_leaf == 0 {
        return Err(bad("no leaves in bracket line"));
    }
    Ok(GoldSpans {
        n: next_leaf,
        spans,
    })
}

/// Per-sentence bracket F1 in [0, 1]; empty-versus-empty counts as exact.
pub fn sentence_f1(pred: &BTreeSet<(usize, usize)>, gold: &BTreeSet<(usize, usize)>) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let overlap = pred.intersection(gold).count();
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (pred.len() + gold.len()) as f64
}

/// MBR-decode every sentence.
pub fn parse_corpus(model: &RankPcfg, seqs: &[TokenSeq]) -> Result<Vec<ParseTree>> {
    seqs.iter()
        .map(|s| Ok(mbr_decode(&span_marginals(model, s)?)))
        .collect()
}

/// Sentence-level (macro-averaged) F1 as a percentage.
pub fn corpus_f1(pred: &[ParseTree], gold: &[GoldSpans]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::GoldMismatch {
            index: pred.len().min(gold.len()),
            msg: format!(
                "{} predicted sentences vs {} gold lines",
                pred.len(),
                gold.len()
            ),
        });
    }
    let mut total = 0.0;
    for (idx, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.n() != g.n {
            return Err(Error::GoldMismatch {
                index: idx,
                msg: format!("{} tokens predicted vs {} gold leaves", p.n(), g.n),
            });
        }
        total += sentence_f1(&p.eval_spans(), &g.eval_spans());
    }
    Ok(100.0 * total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logspace::{lse_slice, LogTensor3};
    use crate::model::{random_cpd_pcfg, ValidateModel, Vocab};
    use crate::oracle::{pcfg_bruteforce, EnumerationBudget};

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::new(ids.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a == f64::NEG_INFINITY && b == f64::NEG_INFINITY) || (a - b).abs() <= tol
    }

    #[test]
    fn two_tokens_single_derivation() {
        let model = random_cpd_pcfg(1, 1, 2, 3, 7, 1.0).unwrap();
        let dense = model.reconstruct();
        let chart = dense_inside(&dense, &seq(&[0, 2])).unwrap();
        // Only derivation: root -> PT PT with the two emissions.
        let expected = dense.start[0]
            + dense.binary.at(0, 1, 1)
            + dense.preterm_emit.at(0, 0)
            + dense.preterm_emit.at(0, 2);
        assert!(close(chart.log_z, expected, 1e-12));
    }

    #[test]
    fn three_tokens_two_bracketings() {
        // Single nonterminal, single preterminal, uniform binary tensor:
        // both bracketings weigh the same, so log Z picks up log 2.
        let vocab = Vocab::synthetic(2).unwrap();
        let binary = LogTensor3::new(1, 2, 2, vec![(0.25f64).ln(); 4]).unwrap();
        let emit = LogMat::from_rows(vec![vec![0.5f64.ln(); 2]]).unwrap();
        let dense = DensePcfg::new(vocab, 1, 1, vec![0.0], binary, emit).unwrap();
        let chart = dense_inside(&dense, &seq(&[0, 1, 0])).unwrap();
        let expected = 2f64.ln() + 2.0 * (0.25f64).ln() + 3.0 * 0.5f64.ln();
        assert!(close(chart.log_z, expected, 1e-12));
    }

    #[test]
    fn four_routes_agree_on_random_models() {
        for s in 0..10 {
            let nt = 1 + (s as usize % 2);
            let pt = 1 + ((s as usize / 2) % 2);
            let r = 1 + (s as usize % 3);
            let model = random_cpd_pcfg(nt, pt, r, 3, 50 + s, 1.0).unwrap();
            assert!(model.is_valid());
            let dense = model.reconstruct();
            let view = model.lpcfg_view();
            let compiled = model.compile();
            let n = 2 + (s as usize % 4);
            let ids: Vec<usize> = (0..n).map(|t| (t * 5 + s as usize) % 3).collect();
            let sq = seq(&ids);
            let z_dense = dense_inside(&dense, &sq).unwrap().log_z;
            let z_td = td_inside(&model, &sq).unwrap().log_z;
            let z_lp = lpcfg_inside(&view, &model.preterm_emit, &model.start, &sq)
                .unwrap()
                .log_z;
            let z_rank = rank_inside(&compiled, &sq).unwrap().log_z;
            assert!(close(z_dense, z_td, 1e-10), "dense {z_dense} vs td {z_td}");
            assert!(close(z_td, z_lp, 1e-10), "td {z_td} vs lpcfg {z_lp}");
            assert!(close(z_lp, z_rank, 1e-10), "lpcfg {z_lp} vs rank {z_rank}");
        }
    }

    #[test]
    fn rank_base_case_matches_word_columns() {
        let model = random_cpd_pcfg(2, 2, 2, 3, 11, 1.0).unwrap();
        let compiled = model.compile();
        let sq = seq(&[1, 2]);
        let chart = rank_inside(&compiled, &sq).unwrap();
        let expected = lse_slice(
            &(0..compiled.r())
                .map(|q| {
                    compiled.root[q] + compiled.left_word.at(q, 1) + compiled.right_word.at(q, 2)
                })
                .collect::<Vec<_>>(),
        );
        assert!(close(chart.log_z, expected, 1e-12));
        // Width-1 caches are the word columns themselves.
        let al = chart.alpha_left(0, 1).unwrap();
        for q in 0..compiled.r() {
            assert!(close(al[q], compiled.left_word.at(q, 1), 1e-12));
        }
    }

    #[test]
    fn inside_matches_enumeration_oracle() {
        let model = random_cpd_pcfg(2, 2, 2, 3, 99, 1.0).unwrap();
        let dense = model.reconstruct();
        let ids = [0usize, 2, 1, 0, 2];
        let sq = seq(&ids);
        let exact = pcfg_bruteforce(&dense, &sq, &EnumerationBudget::default()).unwrap();
        let chart = dense_inside(&dense, &sq).unwrap();
        assert!(close(chart.log_z, exact.log_z, 1e-9));
        let rank = rank_inside(&model.compile(), &sq).unwrap();
        assert!(close(rank.log_z, exact.log_z, 1e-9));
    }

    #[test]
    fn marginals_match_oracle_and_mass_invariants() {
        let model = random_cpd_pcfg(1, 2, 2, 3, 123, 1.0).unwrap();
        let compiled = model.compile();
        let dense = model.reconstruct();
        let ids = [0usize, 1, 2, 1, 0];
        let sq = seq(&ids);
        let mu = span_marginals(&compiled, &sq).unwrap();
        let exact = pcfg_bruteforce(&dense, &sq, &EnumerationBudget::default()).unwrap();
        for ((i, j), v) in mu.iter() {
            let want = exact.span_marginals.get(&(i, j)).copied().unwrap_or(0.0);
            assert!(close(v, want, 1e-9), "({i},{j}): {v} vs {want}");
        }
        assert!((mu.total() - (ids.len() as f64 - 1.0)).abs() <= 1e-6);
        assert!((mu.get(0, ids.len()).unwrap() - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn two_and_three_token_marginals() {
        let model = random_cpd_pcfg(2, 1, 2, 3, 5, 1.0).unwrap();
        let compiled = model.compile();
        let mu2 = span_marginals(&compiled, &seq(&[0, 1])).unwrap();
        assert!((mu2.get(0, 2).unwrap() - 1.0).abs() <= 1e-12);

        let mu3 = span_marginals(&compiled, &seq(&[0, 1, 2])).unwrap();
        let partition = mu3.get(0, 2).unwrap() + mu3.get(1, 3).unwrap();
        assert!((partition - 1.0).abs() <= 1e-10);
        assert!((mu3.get(0, 3).unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn mbr_prefers_the_heavier_span() {
        let mu = SpanMarginals::from_values(
            3,
            &[((0, 2), 0.7), ((1, 3), 0.3), ((0, 3), 1.0)],
        )
        .unwrap();
        let tree = mbr_decode(&mu);
        assert_eq!(tree.spans(), &[(0, 2), (0, 3)]);

        let two = SpanMarginals::from_values(2, &[((0, 2), 1.0)]).unwrap();
        assert_eq!(mbr_decode(&two).spans(), &[(0, 2)]);
    }

    #[test]
    fn mbr_matches_exhaustive_argmax_and_scale_invariance() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let n = 6;
        for _ in 0..20 {
            let mut values = Vec::new();
            for i in 0..n {
                for j in i + 2..=n {
                    values.push(((i, j), rng.gen::<f64>()));
                }
            }
            let mu = SpanMarginals::from_values(n, &values).unwrap();
            let tree = mbr_decode(&mu);
            let got = expected_span_total(&tree, &mu);

            // Exhaustive max over all Catalan(5) = 42 bracketings.
            fn all_trees(i: usize, j: usize) -> Vec<Vec<(usize, usize)>> {
                if j - i == 1 {
                    return vec![vec![]];
                }
                let mut out = Vec::new();
                for k in i + 1..j {
                    for l in all_trees(i, k) {
                        for r in all_trees(k, j) {
                            let mut t = vec![(i, j)];
                            t.extend(&l);
                            t.extend(&r);
                            out.push(t);
                        }
                    }
                }
                out
            }
            let trees = all_trees(0, n);
            assert_eq!(trees.len(), 42);
            let best = trees
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|&(i, j)| mu.get(i, j).unwrap_or(0.0))
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((got - best).abs() <= 1e-12);

            // Scaling all marginals leaves the argmax unchanged.
            let scaled_vals: Vec<_> = values.iter().map(|&(s, v)| (s, 3.5 * v)).collect();
            let scaled = SpanMarginals::from_values(n, &scaled_vals).unwrap();
            assert_eq!(mbr_decode(&scaled).spans(), tree.spans());
        }
    }

    #[test]
    fn mbr_breaks_ties_toward_the_smallest_split() {
        let mu = SpanMarginals::from_values(4, &[((0, 4), 1.0)]).unwrap();
        let tree = mbr_decode(&mu);
        // All inner spans are zero-mass; split k = i+1 wins everywhere,
        // giving the fully right-branching tree.
        assert_eq!(tree.spans(), &[(0, 4), (1, 4), (2, 4)]);
    }

    #[test]
    fn sentence_length_one_is_rejected() {
        let model = random_cpd_pcfg(1, 1, 1, 3, 1, 1.0).unwrap();
        let compiled = model.compile();
        assert!(matches!(
            rank_inside(&compiled, &seq(&[0])),
            Err(Error::SentenceLength { len: 1, .. })
        ));
    }

    #[test]
    fn bracket_rendering_and_parsing() {
        let tree = ParseTree::from_spans(3, vec![(0, 3), (0, 2)]).unwrap();
        assert_eq!(tree.bracket_string(), "((0 1) 2)");
        let gold = parse_bracket_line("((0 1) 2)").unwrap();
        assert_eq!(gold.n, 3);
        assert_eq!(gold.eval_spans(), [(0usize, 2usize)].into_iter().collect());

        let nary = parse_bracket_line("(0 (1 2 3) 4)").unwrap();
        assert_eq!(nary.n, 5);
        assert_eq!(nary.eval_spans(), [(1usize, 4usize)].into_iter().collect());

        assert!(parse_bracket_line("(0 2 1)").is_err());
        assert!(parse_bracket_line("((0 1)").is_err());
        assert_eq!(parse_bracket_line("(0 1)").unwrap().eval_spans().len(), 0);
    }

    #[test]
    fn f1_conventions() {
        let a = ParseTree::from_spans(4, vec![(0, 4), (0, 2), (2, 4)]).unwrap();
        let b = ParseTree::from_spans(4, vec![(0, 4), (0, 3), (1, 3)]).unwrap();
        let gold_a = parse_bracket_line(&a.bracket_string()).unwrap();
        let gold_b = parse_bracket_line(&b.bracket_string()).unwrap();

        // identical trees: 100
        assert!((corpus_f1(&[a.clone()], &[gold_a.clone()]).unwrap() - 100.0).abs() < 1e-12);
        // disjoint (n = 4 allows it): 0 for that sentence
        assert_eq!(
            sentence_f1(&a.eval_spans(), &gold_b.eval_spans()),
            0.0
        );
        // {100, 0} averages to 50
        let f1 = corpus_f1(&[a.clone(), a], &[gold_a, gold_b]).unwrap();
        assert!((f1 - 50.0).abs() < 1e-12);

        // n = 2: no scored spans on either side counts as exact
        let two = ParseTree::from_spans(2, vec![(0, 2)]).unwrap();
        let gold_two = parse_bracket_line("(0 1)").unwrap();
        assert!((corpus_f1(&[two], &[gold_two]).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn gold_length_mismatch_is_reported() {
        let tree = ParseTree::from_spans(3, vec![(0, 3), (0, 2)]).unwrap();
        let gold = parse_bracket_line("(0 1)").unwrap();
        assert!(matches!(
            corpus_f1(&[tree], &[gold]),
            Err(Error::GoldMismatch { index: 0, .. })
        ));
    }
}
