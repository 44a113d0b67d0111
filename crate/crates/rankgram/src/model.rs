//! Model data types: dense and factored HMMs/PCFGs, validity checking,
//! random generation, tensor reconstruction, and rank-space compilation.
//!
//! Factored parameters follow one convention throughout: a factor matrix row
//! is a conditional distribution. `state_to_rank` rows are p(rank | state),
//! `rank_to_state` rows are p(state | rank), and so on. That makes every
//! reconstructed tensor a valid conditional by construction.
//!
//! The rank-space compilation marginalizes all state variables once, leaving
//! a model whose dynamic programming runs entirely over rank indices. For an
//! HMM the compiled object is itself an HMM with rank and state sizes
//! interchanged.

use crate::error::{Error, Result};
use crate::logspace::{real_gemm, LogMat, LogTensor3, LogVec};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use std::collections::HashMap;
use std::fmt;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

/// Construction-time tolerance on distribution mass.
pub const STRICT_TOL: f64 = 1e-9;
/// Tolerance used when re-checking models loaded from text files.
pub const LOAD_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Ordered vocabulary with reserved unknown-word and end-of-sentence tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
    eos: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidVocab(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let unk = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::InvalidVocab(format!("missing {UNK_TOKEN}")))?;
        let eos = *index
            .get(EOS_TOKEN)
            .ok_or_else(|| Error::InvalidVocab(format!("missing {EOS_TOKEN}")))?;
        Ok(Self {
            tokens,
            index,
            unk,
            eos,
        })
    }

    /// Generated vocabulary of size `o`: unk, w1..w(o-2), eos.
    pub fn synthetic(o: usize) -> Result<Self> {
        if o < 2 {
            return Err(Error::InvalidVocab(format!(
                "vocabulary size must be at least 2, got {o}"
            )));
        }
        let mut tokens = Vec::with_capacity(o);
        tokens.push(UNK_TOKEN.to_string());
        for i in 1..o - 1 {
            tokens.push(format!("w{i}"));
        }
        tokens.push(EOS_TOKEN.to_string());
        Self::new(tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn eos_id(&self) -> usize {
        self.eos
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

// ---------------------------------------------------------------------------
// Validity checking
// ---------------------------------------------------------------------------

/// One failed invariant, naming the parameter block and row it occurred in.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub param: &'static str,
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.param, i, self.message),
            None => write!(f, "{}: {}", self.param, self.message),
        }
    }
}

pub trait ValidateModel {
    fn violations_with_tol(&self, tol: f64) -> Vec<Violation>;

    fn violations(&self) -> Vec<Violation> {
        self.violations_with_tol(STRICT_TOL)
    }

    fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

fn check_finite(data: &[f64], param: &'static str, out: &mut Vec<Violation>) {
    for (i, &x) in data.iter().enumerate() {
        if x.is_nan() || x == f64::INFINITY {
            out.push(Violation {
                param,
                index: None,
                message: format!("entry {i} is {x} (must be finite or -inf)"),
            });
            return; // one per block is enough to name the problem
        }
    }
}

fn mass(row: &[f64]) -> f64 {
    row.iter().map(|&x| x.exp()).sum()
}

fn check_dist(row: &[f64], param: &'static str, index: Option<usize>, tol: f64, out: &mut Vec<Violation>) {
    let m = mass(row);
    if !((m - 1.0).abs() <= tol) {
        out.push(Violation {
            param,
            index,
            message: format!("mass {m:.12} deviates from 1 by {:.3e}", (m - 1.0).abs()),
        });
    }
}

fn check_rows(mat: &LogMat, param: &'static str, tol: f64, out: &mut Vec<Violation>) {
    check_finite(mat.data(), param, out);
    for r in 0..mat.rows() {
        check_dist(mat.row(r), param, Some(r), tol, out);
    }
}

// ---------------------------------------------------------------------------
// HMM family
// ---------------------------------------------------------------------------

/// HMM with the transition and emission merged into one joint factor:
/// `trans_emit[a][b][w] = log p(next state b, word w | state a)`.
#[derive(Debug, Clone)]
pub struct DenseHmm {
    pub vocab: Vocab,
    pub start: LogVec,
    pub trans_emit: LogTensor3,
    // exp(trans_emit) reordered [a][w][b] so the forward sweep reads
    // contiguous lanes; rebuilt on construction, never serialized.
    exp_awb: Vec<f64>,
    exp_start: Vec<f64>,
}

impl DenseHmm {
    pub fn new(vocab: Vocab, start: LogVec, trans_emit: LogTensor3) -> Result<Self> {
        let m = start.len();
        let o = vocab.size();
        let dims = trans_emit.dims();
        if m == 0 {
            return Err(Error::InvalidDims("state count must be positive".into()));
        }
        if dims != (m, m, o) {
            return Err(Error::InvalidDims(format!(
                "joint tensor dims {dims:?} do not match (m, m, o) = ({m}, {m}, {o})"
            )));
        }
        let mut exp_awb = vec![0.0; m * o * m];
        for a in 0..m {
            for b in 0..m {
                for (w, &x) in trans_emit.lane(a, b).iter().enumerate() {
                    exp_awb[(a * o + w) * m + b] = x.exp();
                }
            }
        }
        let exp_start = start.iter().map(|&x| x.exp()).collect();
        Ok(Self {
            vocab,
            start,
            trans_emit,
            exp_awb,
            exp_start,
        })
    }

    pub fn m(&self) -> usize {
        self.start.len()
    }

    pub fn o(&self) -> usize {
        self.vocab.size()
    }

    /// exp(trans_emit[a][.][w]) as a contiguous lane over next states.
    #[inline]
    pub(crate) fn exp_lane(&self, a: usize, w: usize) -> &[f64] {
        let m = self.m();
        let off = (a * self.o() + w) * m;
        &self.exp_awb[off..off + m]
    }

    pub(crate) fn exp_start(&self) -> &[f64] {
        &self.exp_start
    }
}

impl ValidateModel for DenseHmm {
    fn violations_with_tol(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        check_finite(&self.start, "start", &mut out);
        check_finite(self.trans_emit.data(), "trans_emit", &mut out);
        check_dist(&self.start, "start", None, tol, &mut out);
        for a in 0..self.m() {
            check_dist(self.trans_emit.plane(a), "trans_emit", Some(a), tol, &mut out);
        }
        out
    }
}

/// HMM with the joint factor in factored form:
/// `state_to_rank` rows are p(rank | state), `rank_to_state` rows are
/// p(next state | rank), `rank_emit` rows are p(word | rank).
#[derive(Debug, Clone)]
pub struct CpdHmm {
    pub vocab: Vocab,
    pub start: LogVec,
    pub state_to_rank: LogMat,
    pub rank_to_state: LogMat,
    pub rank_emit: LogMat,
}

impl CpdHmm {
    pub fn new(
        vocab: Vocab,
        start: LogVec,
        state_to_rank: LogMat,
        rank_to_state: LogMat,
        rank_emit: LogMat,
    ) -> Result<Self> {
        let m = start.len();
        let r = state_to_rank.cols();
        let o = vocab.size();
        if m == 0 || r == 0 {
            return Err(Error::InvalidDims("sizes must be positive".into()));
        }
        if state_to_rank.rows() != m
            || rank_to_state.rows() != r
            || rank_to_state.cols() != m
            || rank_emit.rows() != r
            || rank_emit.cols() != o
        {
            return Err(Error::InvalidDims(format!(
                "factor shapes inconsistent with m={m}, r={r}, o={o}"
            )));
        }
        Ok(Self {
            vocab,
            start,
            state_to_rank,
            rank_to_state,
            rank_emit,
        })
    }

    pub fn m(&self) -> usize {
        self.start.len()
    }

    pub fn r(&self) -> usize {
        self.state_to_rank.cols()
    }

    pub fn o(&self) -> usize {
        self.vocab.size()
    }

    /// Expand the factored transition back into the joint tensor:
    /// `T[a][b][w] = log sum_q exp(U[a][q] + V[q][b] + W[q][w])`.
    pub fn reconstruct(&self) -> DenseHmm {
        let (m, r, o) = (self.m(), self.r(), self.o());
        let eu = self.state_to_rank.exp_data();
        let ev = self.rank_to_state.exp_data();
        let ew = self.rank_emit.exp_data();
        let mut data = vec![0.0f64; m * m * o];
        let mut scaled = vec![0.0f64; r * m];
        let mut plane = vec![0.0f64; m * o];
        for a in 0..m {
            for q in 0..r {
                let c = eu[a * r + q];
                for b in 0..m {
                    scaled[q * m + b] = c * ev[q * m + b];
                }
            }
            // plane[b][w] = sum_q scaled[q][b] * ew[q][w]
            plane.iter_mut().for_each(|x| *x = 0.0);
            real_gemm(
                m, r, o, &scaled, 1, m as isize, &ew, o as isize, 1, 0.0, &mut plane,
                o as isize, 1,
            );
            let base = a * m * o;
            for (i, &p) in plane.iter().enumerate() {
                data[base + i] = p.ln();
            }
        }
        let tensor = LogTensor3::new(m, m, o, data).expect("shape fixed above");
        DenseHmm::new(self.vocab.clone(), self.start.clone(), tensor)
            .expect("reconstruction preserves shape")
    }

    /// Marginalize the state variables, leaving an HMM over ranks.
    pub fn compile(&self) -> RankHmm {
        let (m, r, o) = (self.m(), self.r(), self.o());
        let eu = self.state_to_rank.exp_data();
        let ev = self.rank_to_state.exp_data();
        let es: Vec<f64> = self.start.iter().map(|&x| x.exp()).collect();

        // start_rank[q] = sum_a start[a] U[a][q]
        let mut exp_start = vec![0.0f64; r];
        real_gemm(r, m, 1, &eu, 1, r as isize, &es, 1, 1, 0.0, &mut exp_start, 1, 1);
        let start_rank: LogVec = exp_start.iter().map(|&x| x.ln()).collect();

        // trans[q][q'] = sum_b V[q][b] U[b][q']
        let mut exp_trans = vec![0.0f64; r * r];
        real_gemm(
            r, m, r, &ev, m as isize, 1, &eu, r as isize, 1, 0.0, &mut exp_trans, r as isize, 1,
        );
        let trans = LogMat::new(r, r, exp_trans.iter().map(|&x| x.ln()).collect())
            .expect("shape fixed above");

        RankHmm {
            vocab: self.vocab.clone(),
            start: start_rank,
            trans,
            exp_emit: self.rank_emit.exp_data(),
            emit: self.rank_emit.clone(),
            exp_start,
            exp_trans,
        }
        .assert_dims(o)
    }
}

impl ValidateModel for CpdHmm {
    fn violations_with_tol(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        check_finite(&self.start, "start", &mut out);
        check_dist(&self.start, "start", None, tol, &mut out);
        check_rows(&self.state_to_rank, "state_to_rank", tol, &mut out);
        check_rows(&self.rank_to_state, "rank_to_state", tol, &mut out);
        check_rows(&self.rank_emit, "rank_emit", tol, &mut out);
        out
    }
}

/// Compiled rank-space HMM. Structurally an ordinary HMM whose hidden
/// variable is the rank index.
#[derive(Debug, Clone)]
pub struct RankHmm {
    pub vocab: Vocab,
    pub start: LogVec,
    pub trans: LogMat,
    pub emit: LogMat,
    // Real-domain copies cached at compile time for the forward sweep.
    exp_start: Vec<f64>,
    exp_trans: Vec<f64>,
    exp_emit: Vec<f64>,
}

impl RankHmm {
    fn assert_dims(self, o: usize) -> Self {
        debug_assert_eq!(self.trans.rows(), self.start.len());
        debug_assert_eq!(self.trans.cols(), self.start.len());
        debug_assert_eq!(self.emit.rows(), self.start.len());
        debug_assert_eq!(self.emit.cols(), o);
        self
    }

    pub fn r(&self) -> usize {
        self.start.len()
    }

    pub fn o(&self) -> usize {
        self.emit.cols()
    }

    pub(crate) fn exp_start(&self) -> &[f64] {
        &self.exp_start
    }

    pub(crate) fn exp_trans(&self) -> &[f64] {
        &self.exp_trans
    }

    pub(crate) fn exp_emit(&self) -> &[f64] {
        &self.exp_emit
    }
}

impl ValidateModel for RankHmm {
    fn violations_with_tol(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        check_finite(&self.start, "start", &mut out);
        check_dist(&self.start, "start", None, tol, &mut out);
        check_rows(&self.trans, "trans", tol, &mut out);
        check_rows(&self.emit, "emit", tol, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// PCFG family
// ---------------------------------------------------------------------------

/// PCFG with the binary-rule tensor in factored form. Symbols are indexed
/// `0..num_nt` (nonterminals) then `num_nt..num_nt+num_pt` (preterminals);
/// `rank_to_left`/`rank_to_right` rows range over all symbols, while only
/// preterminals emit words through `preterm_emit`.
#[derive(Debug, Clone)]
pub struct CpdPcfg {
    pub vocab: Vocab,
    pub num_nt: usize,
    pub num_pt: usize,
    pub start: LogVec,
    pub parent_to_rank: LogMat,
    pub rank_to_left: LogMat,
    pub rank_to_right: LogMat,
    pub preterm_emit: LogMat,
}

impl CpdPcfg {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab: Vocab,
        num_nt: usize,
        num_pt: usize,
        start: LogVec,
        parent_to_rank: LogMat,
        rank_to_left: LogMat,
        rank_to_right: LogMat,
        preterm_emit: LogMat,
    ) -> Result<Self> {
        let m = num_nt + num_pt;
        let r = parent_to_rank.cols();
        let o = vocab.size();
        if num_nt == 0 || num_pt == 0 || r == 0 {
            return Err(Error::InvalidDims("sizes must be positive".into()));
        }
        if start.len() != num_nt
            || parent_to_rank.rows() != num_nt
            || rank_to_left.rows() != r
            || rank_to_left.cols() != m
            || rank_to_right.rows() != r
            || rank_to_right.cols() != m
            || preterm_emit.rows() != num_pt
            || preterm_emit.cols() != o
        {
            return Err(Error::InvalidDims(format!(
                "factor shapes inconsistent with num_nt={num_nt}, num_pt={num_pt}, r={r}, o={o}"
            )));
        }
        Ok(Self {
            vocab,
            num_nt,
            num_pt,
            start,
            parent_to_rank,
            rank_to_left,
            rank_to_right,
            preterm_emit,
        })
    }

    /// Total symbol count (nonterminals + preterminals).
    pub fn num_symbols(&self) -> usize {
        self.num_nt + self.num_pt
    }

    pub fn r(&self) -> usize {
        self.parent_to_rank.cols()
    }

    pub fn o(&self) -> usize {
        self.vocab.size()
    }

    /// Expand the factored binary rule back into the dense tensor:
    /// `binary[a][b][c] = log sum_q exp(U[a][q] + V[q][b] + W[q][c])`.
    pub fn reconstruct(&self) -> DensePcfg {
        let (nt, m, r) = (self.num_nt, self.num_symbols(), self.r());
        let eu = self.parent_to_rank.exp_data();
        let ev = self.rank_to_left.exp_data();
        let ew = self.rank_to_right.exp_data();
        let mut data = vec![0.0f64; nt * m * m];
        let mut scaled = vec![0.0f64; r * m];
        let mut plane = vec![0.0f64; m * m];
        for a in 0..nt {
            for q in 0..r {
                let c = eu[a * r + q];
                for b in 0..m {
                    scaled[q * m + b] = c * ev[q * m + b];
                }
            }
            plane.iter_mut().for_each(|x| *x = 0.0);
            real_gemm(
                m, r, m, &scaled, 1, m as isize, &ew, m as isize, 1, 0.0, &mut plane,
                m as isize, 1,
            );
            let base = a * m * m;
            for (i, &p) in plane.iter().enumerate() {
                data[base + i] = p.ln();
            }
        }
        let binary = LogTensor3::new(nt, m, m, data).expect("shape fixed above");
        DensePcfg::new(
            self.vocab.clone(),
            self.num_nt,
            self.num_pt,
            self.start.clone(),
            binary,
            self.preterm_emit.clone(),
        )
        .expect("reconstruction preserves shape")
    }

    /// Un-flatten the left/right factors into one order-3 child factor:
    /// `pair_given_rank[q][b][c] = V[q][b] + W[q][c]`.
    pub fn lpcfg_view(&self) -> LpcfgView {
        let (m, r) = (self.num_symbols(), self.r());
        let mut data = vec![0.0f64; r * m * m];
        for q in 0..r {
            let vrow = self.rank_to_left.row(q);
            let wrow = self.rank_to_right.row(q);
            for (b, &vb) in vrow.iter().enumerate() {
                let base = (q * m + b) * m;
                for (c, &wc) in wrow.iter().enumerate() {
                    data[base + c] = vb + wc;
                }
            }
        }
        LpcfgView {
            parent_to_rank: self.parent_to_rank.clone(),
            pair_given_rank: LogTensor3::new(r, m, m, data).expect("shape fixed above"),
        }
    }

    /// Marginalize all symbol variables once, producing the reusable
    /// rank-space matrices that inference then shares across spans.
    pub fn compile(&self) -> RankPcfg {
        let (nt, pt, r, o) = (self.num_nt, self.num_pt, self.r(), self.o());
        let m = nt + pt;
        let eu = self.parent_to_rank.exp_data(); // nt x r
        let ev = self.rank_to_left.exp_data(); // r x m
        let ew = self.rank_to_right.exp_data(); // r x m
        let ee = self.preterm_emit.exp_data(); // pt x o
        let es: Vec<f64> = self.start.iter().map(|&x| x.exp()).collect();

        let ln_all = |v: Vec<f64>| -> Vec<f64> { v.iter().map(|&x| x.ln()).collect() };

        // left_proj[q][q'] = sum_{b in NT} V[q][b] U[b][q']
        let mut h = vec![0.0f64; r * r];
        real_gemm(r, nt, r, &ev, m as isize, 1, &eu, r as isize, 1, 0.0, &mut h, r as isize, 1);
        // right_proj likewise from W.
        let mut i_ = vec![0.0f64; r * r];
        real_gemm(r, nt, r, &ew, m as isize, 1, &eu, r as isize, 1, 0.0, &mut i_, r as isize, 1);
        // left_word[q][w] = sum_{p in PT} V[q][nt+p] E[p][w]
        let mut j = vec![0.0f64; r * o];
        real_gemm(
            r, pt, o, &ev[nt..], m as isize, 1, &ee, o as isize, 1, 0.0, &mut j, o as isize, 1,
        );
        let mut k = vec![0.0f64; r * o];
        real_gemm(
            r, pt, o, &ew[nt..], m as isize, 1, &ee, o as isize, 1, 0.0, &mut k, o as isize, 1,
        );
        // root[q] = sum_{a in NT} start[a] U[a][q]
        let mut l = vec![0.0f64; r];
        real_gemm(r, nt, 1, &eu, 1, r as isize, &es, 1, 1, 0.0, &mut l, 1, 1);

        RankPcfg {
            vocab: self.vocab.clone(),
            root: ln_all(l),
            left_proj: LogMat::new(r, r, ln_all(h)).expect("shape fixed"),
            right_proj: LogMat::new(r, r, ln_all(i_)).expect("shape fixed"),
            left_word: LogMat::new(r, o, ln_all(j)).expect("shape fixed"),
            right_word: LogMat::new(r, o, ln_all(k)).expect("shape fixed"),
        }
    }
}

impl ValidateModel for CpdPcfg {
    fn violations_with_tol(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        check_finite(&self.start, "start", &mut out);
        check_dist(&self.start, "start", None, tol, &mut out);
        check_rows(&self.parent_to_rank, "parent_to_rank", tol, &mut out);
        check_rows(&self.rank_to_left, "rank_to_left", tol, &mut out);
        check_rows(&self.rank_to_right, "rank_to_right", tol, &mut out);
        check_rows(&self.preterm_emit, "preterm_emit", tol, &mut out);
        out
    }
}

/// PCFG with an explicit binary-rule tensor over `num_nt` parents and all
/// `num_nt + num_pt` children.
#[derive(Debug, Clone)]
pub struct DensePcfg {
    pub vocab: Vocab,
    pub num_nt: usize,
    pub num_pt: usize,
    pub start: LogVec,
    pub binary: LogTensor3,
    pub preterm_emit: LogMat,
    exp_binary: Vec<f64>,
    exp_emit: Vec<f64>,
    exp_start: Vec<f64>,
    min_finite_binary: f64,
    min_finite_start: f64,
}

impl DensePcfg {
    pub fn new(
        vocab: Vocab,
        num_nt: usize,
        num_pt: usize,
        start: LogVec,
        binary: LogTensor3,
        preterm_emit: LogMat,
    ) -> Result<Self> {
        let m = num_nt + num_pt;
        let o = vocab.size();
        if num_nt == 0 || num_pt == 0 {
            return Err(Error::InvalidDims("symbol counts must be positive".into()));
        }
        if start.len() != num_nt
            || binary.dims() != (num_nt, m, m)
            || preterm_emit.rows() != num_pt
            || preterm_emit.cols() != o
        {
            return Err(Error::InvalidDims(format!(
                "dense PCFG shapes inconsistent with num_nt={num_nt}, num_pt={num_pt}, o={o}"
            )));
        }
        let exp_binary = binary.data().iter().map(|&x| x.exp()).collect();
        let exp_emit = preterm_emit.exp_data();
        let exp_start = start.iter().map(|&x| x.exp()).collect();
        let min_finite = |xs: &[f64]| {
            xs.iter()
                .copied()
                .filter(|x| *x != f64::NEG_INFINITY)
                .fold(0.0f64, f64::min)
        };
        let min_finite_binary = min_finite(binary.data());
        let min_finite_start = min_finite(&start);
        Ok(Self {
            vocab,
            num_nt,
            num_pt,
            start,
            binary,
            preterm_emit,
            exp_binary,
            exp_emit,
            exp_start,
            min_finite_binary,
            min_finite_start,
        })
    }

    pub fn num_symbols(&self) -> usize {
        self.num_nt + self.num_pt
    }

    pub fn o(&self) -> usize {
        self.vocab.size()
    }

    /// exp(binary) as one contiguous (num_nt * m) x m row-major block.
    #[inline]
    pub(crate) fn exp_binary_block(&self) -> &[f64] {
        &self.exp_binary
    }

    pub(crate) fn exp_emit(&self) -> &[f64] {
        &self.exp_emit
    }

    pub(crate) fn exp_start(&self) -> &[f64] {
        &self.exp_start
    }

    /// Lower bound on the log-weight of any single tree over the sentence:
    /// one start factor, n-1 binary factors, n emissions, each at least the
    /// smallest finite entry of its block. Used to decide whether a chart
    /// can run unscaled without underflow.
    pub(crate) fn tree_log_weight_floor(&self, ids: &[usize]) -> f64 {
        let n = ids.len();
        let mut total = self.min_finite_start + (n as f64 - 1.0) * self.min_finite_binary;
        for &w in ids {
            let mut emin = 0.0f64;
            for p in 0..self.num_pt {
                let x = self.preterm_emit.at(p, w);
                if x != f64::NEG_INFINITY && x < emin {
                    emin = x;
                }
            }
            total += emin;
        }
        total
    }
}

impl ValidateModel for DensePcfg {
    fn violations_with_tol(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        check_finite(&self.start, "start", &mut out);
        check_finite(self.binary.data(), "binary", &mut out);
        check_dist(&self.start, "start", None, tol, &mut out);
        for a in 0..self.num_nt {
            check_dist(self.binary.plane(a), "binary", Some(a), tol, &mut out);
        }
        check_rows(&self.preterm_emit, "preterm_emit", tol, &mut out);
        out
    }
}

/// Binary factor un-flattened to a single order-3 child factor, leaving the
/// parent projection separate.
#[derive(Debug, Clone)]
pub struct LpcfgView {
    pub parent_to_rank: LogMat,
    pub pair_given_rank: LogTensor3,
}

impl LpcfgView {
    pub fn r(&self) -> usize {
        self.pair_given_rank.dims().0
    }

    pub fn num_symbols(&self) -> usize {
        self.pair_given_rank.dims().1
    }
}

impl ValidateModel for LpcfgView {
    fn violations_with_tol(&self, _tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        check_finite(self.parent_to_rank.data(), "parent_to_rank", &mut out);
        check_finite(self.pair_given_rank.data(), "pair_given_rank", &mut out);
        out
    }
}

/// Compiled rank-space PCFG: five matrices computed once from the factored
/// model and reused for every span of every sentence.
///
/// `left_proj`/`right_proj` turn a span's rank vector into its score as a
/// left/right child; `left_word`/`right_word` are the single-word analogues;
/// `root` closes the chart at the top.
#[derive(Debug, Clone)]
pub struct RankPcfg {
    pub vocab: Vocab,
    pub root: LogVec,
    pub left_proj: LogMat,
    pub right_proj: LogMat,
    pub left_word: LogMat,
    pub right_word: LogMat,
}

impl RankPcfg {
    pub fn r(&self) -> usize {
        self.root.len()
    }

    pub fn o(&self) -> usize {
        self.left_word.cols()
    }
}

impl ValidateModel for RankPcfg {
    fn violations_with_tol(&self, _tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        check_finite(&self.root, "root", &mut out);
        check_finite(self.left_proj.data(), "left_proj", &mut out);
        check_finite(self.right_proj.data(), "right_proj", &mut out);
        check_finite(self.left_word.data(), "left_word", &mut out);
        check_finite(self.right_word.data(), "right_word", &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Random generation
// ---------------------------------------------------------------------------

fn dirichlet_log_row<R: Rng>(rng: &mut R, k: usize, concentration: f64) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return draws.iter().map(|&g| g.ln() - total.ln()).collect();
        }
    }
}

fn dirichlet_log_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, concentration: f64) -> LogMat {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        data.extend(dirichlet_log_row(rng, cols, concentration));
    }
    LogMat::new(rows, cols, data).expect("shape fixed")
}

fn check_gen_sizes(sizes: &[(usize, &str)], concentration: f64) -> Result<()> {
    for &(s, name) in sizes {
        if s == 0 {
            return Err(Error::InvalidDims(format!("{name} must be positive")));
        }
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidDims(format!(
            "concentration must be a positive real, got {concentration}"
        )));
    }
    Ok(())
}

/// Random factored HMM with every distribution row drawn from a symmetric
/// Dirichlet (normalized Gamma draws). Deterministic for fixed inputs.
pub fn random_cpd_hmm(m: usize, r: usize, o: usize, seed: u64, concentration: f64) -> Result<CpdHmm> {
    check_gen_sizes(&[(m, "m"), (r, "r"), (o, "o")], concentration)?;
    let vocab = Vocab::synthetic(o)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = dirichlet_log_row(&mut rng, m, concentration);
    let state_to_rank = dirichlet_log_mat(&mut rng, m, r, concentration);
    let rank_to_state = dirichlet_log_mat(&mut rng, r, m, concentration);
    let rank_emit = dirichlet_log_mat(&mut rng, r, o, concentration);
    CpdHmm::new(vocab, start, state_to_rank, rank_to_state, rank_emit)
}

/// Random factored PCFG; see [`random_cpd_hmm`] for the row distribution.
pub fn random_cpd_pcfg(
    num_nt: usize,
    num_pt: usize,
    r: usize,
    o: usize,
    seed: u64,
    concentration: f64,
) -> Result<CpdPcfg> {
    check_gen_sizes(
        &[(num_nt, "num_nt"), (num_pt, "num_pt"), (r, "r"), (o, "o")],
        concentration,
    )?;
    let vocab = Vocab::synthetic(o)?;
    let m = num_nt + num_pt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = dirichlet_log_row(&mut rng, num_nt, concentration);
    let parent_to_rank = dirichlet_log_mat(&mut rng, num_nt, r, concentration);
    let rank_to_left = dirichlet_log_mat(&mut rng, r, m, concentration);
    let rank_to_right = dirichlet_log_mat(&mut rng, r, m, concentration);
    let preterm_emit = dirichlet_log_mat(&mut rng, num_pt, o, concentration);
    CpdPcfg::new(
        vocab,
        num_nt,
        num_pt,
        start,
        parent_to_rank,
        rank_to_left,
        rank_to_right,
        preterm_emit,
    )
}
