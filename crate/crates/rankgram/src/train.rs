//! Gradient-based maximum-likelihood fitting of factored HMMs and PCFGs.
//!
//! Parameters are unconstrained scores; a log-softmax over each distribution
//! row yields a valid model by construction. The loss is per-token negative
//! log-likelihood under rank-space inference, and its gradient is computed
//! by hand-rolled reverse accumulation through the whole path: inference
//! sweep, compiled-matrix products, then the softmax. The computation graph
//! is static per sentence length, so no tape is needed.

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::hmm::rank_forward;
use crate::logspace::{lse_slice, LogMat};
use crate::model::{CpdHmm, CpdPcfg, Vocab};
use crate::pcfg::{rank_inside, rank_reverse, RankMatAdjoints};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hmm,
    Pcfg,
}

/// Unconstrained score arrays, one per distribution group, stored flat.
///
/// Layout: `start | parent-to-rank | rank-to-left/state | rank-to-right/
/// emission | emission`; HMM shapes have four groups, PCFG shapes five.
#[derive(Debug, Clone)]
pub struct ScoreParams {
    pub kind: ModelKind,
    /// State count (HMM) or nonterminal count (PCFG).
    pub num_states: usize,
    /// Preterminal count (PCFG only; 0 for HMMs).
    pub num_pt: usize,
    pub rank: usize,
    pub vocab_size: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Group {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Group {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

impl ScoreParams {
    pub fn new_hmm(m: usize, r: usize, o: usize) -> Result<Self> {
        if m == 0 || r == 0 || o < 2 {
            return Err(Error::InvalidDims(
                "HMM score shapes need m >= 1, r >= 1, o >= 2".into(),
            ));
        }
        let len = m + m * r + r * m + r * o;
        Ok(Self {
            kind: ModelKind::Hmm,
            num_states: m,
            num_pt: 0,
            rank: r,
            vocab_size: o,
            data: vec![0.0; len],
        })
    }

    pub fn new_pcfg(num_nt: usize, num_pt: usize, r: usize, o: usize) -> Result<Self> {
        if num_nt == 0 || num_pt == 0 || r == 0 || o < 2 {
            return Err(Error::InvalidDims(
                "PCFG score shapes need num_nt, num_pt, r >= 1 and o >= 2".into(),
            ));
        }
        let m = num_nt + num_pt;
        let len = num_nt + num_nt * r + r * m + r * m + num_pt * o;
        Ok(Self {
            kind: ModelKind::Pcfg,
            num_states: num_nt,
            num_pt,
            rank: r,
            vocab_size: o,
            data: vec![0.0; len],
        })
    }

    /// Rebuild from serialized parts (the raw-score checkpoint sidecar).
    pub fn from_parts(
        kind: ModelKind,
        num_states: usize,
        num_pt: usize,
        rank: usize,
        vocab_size: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut shape = match kind {
            ModelKind::Hmm => Self::new_hmm(num_states, rank, vocab_size)?,
            ModelKind::Pcfg => Self::new_pcfg(num_states, num_pt, rank, vocab_size)?,
        };
        if data.len() != shape.data.len() {
            return Err(Error::DimMismatch {
                context: "score checkpoint length",
                expected: shape.data.len(),
                got: data.len(),
            });
        }
        shape.data = data;
        Ok(shape)
    }

    fn symbols(&self) -> usize {
        self.num_states + self.num_pt
    }

    /// Groups in layout order: (start, u, v, w[, e]).
    fn groups(&self) -> Vec<Group> {
        let (ns, r, o) = (self.num_states, self.rank, self.vocab_size);
        let m = self.symbols();
        let mut out = Vec::with_capacity(5);
        let mut off = 0;
        let push = |rows: usize, cols: usize, off: &mut usize, out: &mut Vec<Group>| {
            out.push(Group {
                offset: *off,
                rows,
                cols,
            });
            *off += rows * cols;
        };
        push(1, ns, &mut off, &mut out); // start
        push(ns, r, &mut off, &mut out); // u
        match self.kind {
            ModelKind::Hmm => {
                push(r, ns, &mut off, &mut out); // v
                push(r, o, &mut off, &mut out); // w (emission)
            }
            ModelKind::Pcfg => {
                push(r, m, &mut off, &mut out); // v
                push(r, m, &mut off, &mut out); // w
                push(self.num_pt, o, &mut off, &mut out); // e
            }
        }
        debug_assert_eq!(off, self.data.len());
        out
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scores drawn i.i.d. from a zero-mean normal.
    pub fn init_normal(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("positive scale");
        for x in &mut self.data {
            *x = normal.sample(&mut rng);
        }
    }

    /// Log-softmax each distribution row of each group into `out`.
    fn log_softmax_into(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.data);
        for g in self.groups() {
            for row in 0..g.rows {
                let lo = g.offset + row * g.cols;
                let slice = &mut out[lo..lo + g.cols];
                let z = lse_slice(slice);
                slice.iter_mut().for_each(|x| *x -= z);
            }
        }
    }

    pub fn to_cpd_hmm(&self, vocab: &Vocab) -> Result<CpdHmm> {
        if self.kind != ModelKind::Hmm {
            return Err(Error::InvalidDims("score shape is not an HMM".into()));
        }
        if vocab.size() != self.vocab_size {
            return Err(Error::InvalidDims(format!(
                "vocabulary size {} does not match score shape o={}",
                vocab.size(),
                self.vocab_size
            )));
        }
        let (m, r, o) = (self.num_states, self.rank, self.vocab_size);
        let mut probs = vec![0.0; self.data.len()];
        self.log_softmax_into(&mut probs);
        let g = self.groups();
        CpdHmm::new(
            vocab.clone(),
            probs[g[0].offset..g[0].offset + m].to_vec(),
            LogMat::new(m, r, probs[g[1].offset..g[1].offset + g[1].len()].to_vec())?,
            LogMat::new(r, m, probs[g[2].offset..g[2].offset + g[2].len()].to_vec())?,
            LogMat::new(r, o, probs[g[3].offset..g[3].offset + g[3].len()].to_vec())?,
        )
    }

    pub fn to_cpd_pcfg(&self, vocab: &Vocab) -> Result<CpdPcfg> {
        if self.kind != ModelKind::Pcfg {
            return Err(Error::InvalidDims("score shape is not a PCFG".into()));
        }
        if vocab.size() != self.vocab_size {
            return Err(Error::InvalidDims(format!(
                "vocabulary size {} does not match score shape o={}",
                vocab.size(),
                self.vocab_size
            )));
        }
        let (nt, pt, r, o) = (self.num_states, self.num_pt, self.rank, self.vocab_size);
        let m = nt + pt;
        let mut probs = vec![0.0; self.data.len()];
        self.log_softmax_into(&mut probs);
        let g = self.groups();
        CpdPcfg::new(
            vocab.clone(),
            nt,
            pt,
            probs[g[0].offset..g[0].offset + nt].to_vec(),
            LogMat::new(nt, r, probs[g[1].offset..g[1].offset + g[1].len()].to_vec())?,
            LogMat::new(r, m, probs[g[2].offset..g[2].offset + g[2].len()].to_vec())?,
            LogMat::new(r, m, probs[g[3].offset..g[3].offset + g[3].len()].to_vec())?,
            LogMat::new(pt, o, probs[g[4].offset..g[4].offset + g[4].len()].to_vec())?,
        )
    }

    fn synthetic_vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size).expect("o >= 2 enforced at construction")
    }
}

/// Backprop through the row softmax: given the adjoint of the log-probs,
/// the score adjoint is `xbar - softmax * sum(xbar)` per row.
fn softmax_backward(params: &ScoreParams, log_probs: &[f64], prob_bar: &[f64], out: &mut [f64]) {
    for g in params.groups() {
        for row in 0..g.rows {
            let lo = g.offset + row * g.cols;
            let xb = &prob_bar[lo..lo + g.cols];
            let lp = &log_probs[lo..lo + g.cols];
            let total: f64 = xb.iter().sum();
            for c in 0..g.cols {
                out[lo + c] = xb[c] - lp[c].exp() * total;
            }
        }
    }
}

/// Loss (per-token negative log-likelihood) and its gradient with respect
/// to the raw scores, over one batch.
pub fn loss_and_grad(params: &ScoreParams, batch: &[TokenSeq]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // NaN or +inf scores have no meaningful likelihood; surface the NaN so
    // the training loop can report divergence at the offending step.
    if params.data.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Ok((f64::NAN, vec![0.0; params.len()]));
    }
    let tokens: usize = batch.iter().map(|s| s.len()).sum();
    let mut log_probs = vec![0.0; params.len()];
    params.log_softmax_into(&mut log_probs);
    let mut prob_bar = vec![0.0; params.len()];

    let total_log_z = match params.kind {
        ModelKind::Hmm => hmm_batch_adjoints(params, &log_probs, batch, &mut prob_bar)?,
        ModelKind::Pcfg => pcfg_batch_adjoints(params, &log_probs, batch, &mut prob_bar)?,
    };

    // loss = -sum logZ / tokens, so parameter adjoints scale by -1/tokens.
    let scale = -1.0 / tokens as f64;
    prob_bar.iter_mut().for_each(|x| *x *= scale);
    let mut grad = vec![0.0; params.len()];
    softmax_backward(params, &log_probs, &prob_bar, &mut grad);
    Ok((-total_log_z / tokens as f64, grad))
}

/// Forward-backward over the rank-space HMM for a batch, accumulating
/// adjoints of the log-probability parameters into `prob_bar`.
fn hmm_batch_adjoints(
    params: &ScoreParams,
    log_probs: &[f64],
    batch: &[TokenSeq],
    prob_bar: &mut [f64],
) -> Result<f64> {
    let (m, r, o) = (params.num_states, params.rank, params.vocab_size);
    let g = params.groups();
    let start = &log_probs[g[0].offset..g[0].offset + m];
    let u = &log_probs[g[1].offset..g[1].offset + g[1].len()]; // m x r
    let v = &log_probs[g[2].offset..g[2].offset + g[2].len()]; // r x m
    let w = &log_probs[g[3].offset..g[3].offset + g[3].len()]; // r x o

    // Compiled rank-space parameters (log domain).
    let mut pi = vec![f64::NEG_INFINITY; r];
    for q in 0..r {
        let terms: Vec<f64> = (0..m).map(|a| start[a] + u[a * r + q]).collect();
        pi[q] = lse_slice(&terms);
    }
    let mut trans = vec![f64::NEG_INFINITY; r * r];
    for q in 0..r {
        for qp in 0..r {
            let terms: Vec<f64> = (0..m).map(|b| v[q * m + b] + u[b * r + qp]).collect();
            trans[q * r + qp] = lse_slice(&terms);
        }
    }

    let mut pi_bar = vec![0.0f64; r];
    let mut trans_bar = vec![0.0f64; r * r];
    let mut w_bar = vec![0.0f64; r * o];
    let mut total_log_z = 0.0;

    for (idx, seq) in batch.iter().enumerate() {
        seq.check_range(o)?;
        let n = seq.len();
        // forward, keeping the pre-emission message c_t for the backward pass
        let mut h = vec![vec![0.0f64; r]; n];
        let mut c = vec![vec![0.0f64; r]; n]; // c[0] unused
        for (t, &wid) in seq.ids().iter().enumerate() {
            for q in 0..r {
                let base = if t == 0 {
                    pi[q]
                } else {
                    let terms: Vec<f64> =
                        (0..r).map(|p| h[t - 1][p] + trans[p * r + q]).collect();
                    let val = lse_slice(&terms);
                    c[t][q] = val;
                    val
                };
                h[t][q] = base + w[q * o + wid];
            }
        }
        let log_z = lse_slice(&h[n - 1]);
        if log_z == f64::NEG_INFINITY {
            return Err(Error::ZeroProbability(format!(
                "sentence {idx} in batch has zero probability"
            )));
        }
        total_log_z += log_z;

        // backward
        let mut hbar: Vec<f64> = h[n - 1].iter().map(|&x| (x - log_z).exp()).collect();
        for t in (0..n).rev() {
            let wid = seq.ids()[t];
            for q in 0..r {
                w_bar[q * o + wid] += hbar[q];
            }
            if t == 0 {
                for q in 0..r {
                    pi_bar[q] += hbar[q];
                }
            } else {
                let mut prev = vec![0.0f64; r];
                for q in 0..r {
                    let cb = hbar[q];
                    if cb == 0.0 || c[t][q] == f64::NEG_INFINITY {
                        continue;
                    }
                    for p in 0..r {
                        let share = cb * (h[t - 1][p] + trans[p * r + q] - c[t][q]).exp();
                        prev[p] += share;
                        trans_bar[p * r + q] += share;
                    }
                }
                hbar = prev;
            }
        }
    }

    // Back through the compilation products.
    let mut start_bar = vec![0.0f64; m];
    let mut u_bar = vec![0.0f64; m * r];
    let mut v_bar = vec![0.0f64; r * m];
    for q in 0..r {
        let d = pi_bar[q];
        if d == 0.0 {
            continue;
        }
        for a in 0..m {
            let t = d * (start[a] + u[a * r + q] - pi[q]).exp();
            start_bar[a] += t;
            u_bar[a * r + q] += t;
        }
    }
    for q in 0..r {
        for qp in 0..r {
            let d = trans_bar[q * r + qp];
            if d == 0.0 {
                continue;
            }
            for b in 0..m {
                let t = d * (v[q * m + b] + u[b * r + qp] - trans[q * r + qp]).exp();
                v_bar[q * m + b] += t;
                u_bar[b * r + qp] += t;
            }
        }
    }

    prob_bar[g[0].offset..g[0].offset + m].copy_from_slice(&start_bar);
    prob_bar[g[1].offset..g[1].offset + g[1].len()].copy_from_slice(&u_bar);
    prob_bar[g[2].offset..g[2].offset + g[2].len()].copy_from_slice(&v_bar);
    prob_bar[g[3].offset..g[3].offset + g[3].len()].copy_from_slice(&w_bar);
    Ok(total_log_z)
}

/// Inside + reverse sweep over the rank-space PCFG for a batch.
fn pcfg_batch_adjoints(
    params: &ScoreParams,
    log_probs: &[f64],
    batch: &[TokenSeq],
    prob_bar: &mut [f64],
) -> Result<f64> {
    let (nt, pt, r, o) = (params.num_states, params.num_pt, params.rank, params.vocab_size);
    let m = nt + pt;
    let vocab = params.synthetic_vocab();
    let cpd = params.to_cpd_pcfg(&vocab)?;
    let compiled = cpd.compile();

    let mut mats = RankMatAdjoints::zeros(r, o);
    let mut total_log_z = 0.0;
    for (idx, seq) in batch.iter().enumerate() {
        let chart = rank_inside(&compiled, seq)?;
        if chart.log_z == f64::NEG_INFINITY {
            return Err(Error::ZeroProbability(format!(
                "sentence {idx} in batch has zero probability"
            )));
        }
        total_log_z += chart.log_z;
        rank_reverse(&compiled, seq, &chart, Some(&mut mats))?;
    }

    let g = params.groups();
    let start = &log_probs[g[0].offset..g[0].offset + nt];
    let u = &log_probs[g[1].offset..g[1].offset + g[1].len()]; // nt x r
    let v = &log_probs[g[2].offset..g[2].offset + g[2].len()]; // r x m
    let w = &log_probs[g[3].offset..g[3].offset + g[3].len()]; // r x m
    let e = &log_probs[g[4].offset..g[4].offset + g[4].len()]; // pt x o

    let mut start_bar = vec![0.0f64; nt];
    let mut u_bar = vec![0.0f64; nt * r];
    let mut v_bar = vec![0.0f64; r * m];
    let mut w_bar = vec![0.0f64; r * m];
    let mut e_bar = vec![0.0f64; pt * o];

    // root[q] = lse_a(start[a] + u[a][q])
    for q in 0..r {
        let d = mats.root[q];
        if d == 0.0 {
            continue;
        }
        let denom = compiled.root[q];
        for a in 0..nt {
            let t = d * (start[a] + u[a * r + q] - denom).exp();
            start_bar[a] += t;
            u_bar[a * r + q] += t;
        }
    }
    // left/right projections: proj[q][p] = lse_b(child[q][b] + u[b][p])
    {
        let mut proj_back = |bar: &[f64], denom: &LogMat, child: &[f64], child_bar: &mut [f64]| {
            for q in 0..r {
                for p in 0..r {
                    let d = bar[q * r + p];
                    if d == 0.0 {
                        continue;
                    }
                    let dn = denom.at(q, p);
                    for b in 0..nt {
                        let t = d * (child[q * m + b] + u[b * r + p] - dn).exp();
                        child_bar[q * m + b] += t;
                        u_bar[b * r + p] += t;
                    }
                }
            }
        };
        proj_back(&mats.left_proj, &compiled.left_proj, v, &mut v_bar);
        proj_back(&mats.right_proj, &compiled.right_proj, w, &mut w_bar);
    }
    // word columns: word[q][t] = lse_p(child[q][nt+p] + e[p][t])
    {
        let word_back = |bar: &[f64],
                             denom: &LogMat,
                             child: &[f64],
                             child_bar: &mut [f64],
                             e_bar: &mut [f64]| {
            for q in 0..r {
                for t in 0..o {
                    let d = bar[q * o + t];
                    if d == 0.0 {
                        continue;
                    }
                    let dn = denom.at(q, t);
                    for p in 0..pt {
                        let x = d * (child[q * m + nt + p] + e[p * o + t] - dn).exp();
                        child_bar[q * m + nt + p] += x;
                        e_bar[p * o + t] += x;
                    }
                }
            }
        };
        word_back(&mats.left_word, &compiled.left_word, v, &mut v_bar, &mut e_bar);
        word_back(&mats.right_word, &compiled.right_word, w, &mut w_bar, &mut e_bar);
    }

    prob_bar[g[0].offset..g[0].offset + nt].copy_from_slice(&start_bar);
    prob_bar[g[1].offset..g[1].offset + g[1].len()].copy_from_slice(&u_bar);
    prob_bar[g[2].offset..g[2].offset + g[2].len()].copy_from_slice(&v_bar);
    prob_bar[g[3].offset..g[3].offset + g[3].len()].copy_from_slice(&w_bar);
    prob_bar[g[4].offset..g[4].offset + g[4].len()].copy_from_slice(&e_bar);
    Ok(total_log_z)
}

/// Per-token negative log-likelihood without gradients.
pub fn corpus_nll(params: &ScoreParams, corpus: &[TokenSeq]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = params.synthetic_vocab();
    let mut total = 0.0;
    let mut tokens = 0usize;
    match params.kind {
        ModelKind::Hmm => {
            let compiled = params.to_cpd_hmm(&vocab)?.compile();
            for seq in corpus {
                total += rank_forward(&compiled, seq)?.log_z;
                tokens += seq.len();
            }
        }
        ModelKind::Pcfg => {
            let compiled = params.to_cpd_pcfg(&vocab)?.compile();
            for seq in corpus {
                total += rank_inside(&compiled, seq)?.log_z;
                tokens += seq.len();
            }
        }
    }
    Ok(-total / tokens as f64)
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay (AdamW only).
    pub weight_decay: f64,
    pub epochs: usize,
    /// Batch size cap in tokens.
    pub batch_tokens: usize,
    /// Global gradient norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
    /// Halve the learning rate after this many evaluations without
    /// validation improvement.
    pub lr_halving_patience: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl TrainConfig {
    /// HMM defaults: AdamW, lr 0.001, beta1 0.99, beta2 0.999, 30 epochs,
    /// 256-token batches, gradient norm cap 5, halve on 2 flat evals.
    pub fn hmm_defaults() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 0.001,
            beta1: 0.99,
            beta2: 0.999,
            weight_decay: 0.0,
            epochs: 30,
            batch_tokens: 256,
            grad_clip: Some(5.0),
            eval_every: 1,
            lr_halving_patience: 2,
            seed: 0,
            init_scale: 1.0,
        }
    }

    /// PCFG defaults: Adam, lr 0.002, beta1 0.75, beta2 0.999.
    pub fn pcfg_defaults() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.002,
            beta1: 0.75,
            ..Self::hmm_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.epochs >= 1
            && self.batch_tokens >= 1
            && self.eval_every >= 1
            && self.lr_halving_patience >= 1
            && self.grad_clip.map_or(true, |c| c > 0.0)
            && self.init_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDims("invalid training configuration".into()))
        }
    }
}

struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, len: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const EPS: f64 = 1e-8;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    if self.kind == OptimizerKind::AdamW {
                        params[i] -= lr * self.weight_decay * params[i];
                    }
                    params[i] -= lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

/// Scale the gradient down to the cap if its global L2 norm exceeds it.
pub(crate) fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct FitResult {
    pub params: ScoreParams,
    pub trace: Vec<TraceRow>,
}

/// Mini-batch training loop: shuffled length buckets, gradient clipping,
/// learning-rate halving on validation plateaus. Deterministic per seed.
pub fn fit(
    mut params: ScoreParams,
    train: &[TokenSeq],
    val: &[TokenSeq],
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // Length buckets, ordered for determinism.
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        buckets.entry(s.len()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config, params.len());
    let mut lr = config.learning_rate;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut flat_evals = 0usize;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        // Batches of similar-length sentences, shuffled twice: within each
        // bucket and across the batch list.
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for (&len, idxs) in &buckets {
            let mut order = idxs.clone();
            shuffle(&mut order, &mut rng);
            let per_batch = (config.batch_tokens / len).max(1);
            for chunk in order.chunks(per_batch) {
                batches.push(chunk.to_vec());
            }
        }
        shuffle(&mut batches, &mut rng);

        let mut epoch_nll_weighted = 0.0;
        let mut epoch_tokens = 0usize;
        for batch_idxs in &batches {
            let batch: Vec<TokenSeq> = batch_idxs.iter().map(|&i| train[i].clone()).collect();
            let (nll, mut grad) = loss_and_grad(&params, &batch)?;
            if nll.is_nan() {
                return Err(Error::Diverged { step });
            }
            let btokens: usize = batch.iter().map(|s| s.len()).sum();
            epoch_nll_weighted += nll * btokens as f64;
            epoch_tokens += btokens;
            if let Some(cap) = config.grad_clip {
                clip_gradient(&mut grad, cap);
            }
            optimizer.step(params.data_mut(), &grad, lr);
            step += 1;
        }

        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let val_nll = corpus_nll(&params, val)?;
            if val_nll.is_nan() {
                return Err(Error::Diverged { step });
            }
            trace.push(TraceRow {
                epoch,
                train_nll: epoch_nll_weighted / epoch_tokens as f64,
                val_nll,
                lr,
            });
            if val_nll < best_val - 1e-12 {
                best_val = val_nll;
                flat_evals = 0;
            } else {
                flat_evals += 1;
                if flat_evals >= config.lr_halving_patience {
                    lr *= 0.5;
                    flat_evals = 0;
                }
            }
        }
    }

    Ok(FitResult { params, trace })
}

fn shuffle<T, R: Rng>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

/// Ancestral sampling from a factored HMM: state, then rank, then word and
/// next state. A sentence ends when the end-of-sentence token is emitted;
/// sentences that reach `max_len` without it are discarded and resampled.
pub fn sample_corpus(
    model: &CpdHmm,
    num_sentences: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<TokenSeq>> {
    if max_len == 0 || num_sentences == 0 {
        return Err(Error::InvalidDims(
            "need max_len >= 1 and num_sentences >= 1".into(),
        ));
    }
    let (m, r, o) = (model.m(), model.r(), model.o());
    let eos = model.vocab.eos_id();
    let es: Vec<f64> = model.start.iter().map(|&x| x.exp()).collect();
    let eu = model.state_to_rank.exp_data();
    let ev = model.rank_to_state.exp_data();
    let ew = model.rank_emit.exp_data();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_sentences);
    let max_attempts = num_sentences.saturating_mul(200).saturating_add(1000);
    let mut attempts = 0usize;
    while out.len() < num_sentences {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::EosUnreachable { attempts });
        }
        let mut ids = Vec::new();
        let mut state = sample_index(&mut rng, &es);
        let mut done = false;
        for _ in 0..max_len {
            let q = sample_index(&mut rng, &eu[state * r..(state + 1) * r]);
            let word = sample_index(&mut rng, &ew[q * o..(q + 1) * o]);
            ids.push(word);
            if word == eos {
                done = true;
                break;
            }
            state = sample_index(&mut rng, &ev[q * m..(q + 1) * m]);
        }
        if done {
            out.push(TokenSeq::new(ids)?);
        }
    }
    Ok(out)
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_cpd_hmm;

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::new(ids.to_vec()).unwrap()
    }

    fn hmm_params(seed: u64) -> ScoreParams {
        let mut p = ScoreParams::new_hmm(3, 2, 4).unwrap();
        p.init_normal(seed, 1.0);
        p
    }

    fn pcfg_params(seed: u64) -> ScoreParams {
        let mut p = ScoreParams::new_pcfg(2, 2, 2, 3).unwrap();
        p.init_normal(seed, 1.0);
        p
    }

    #[test]
    fn softmax_gauge_invariance() {
        let params = hmm_params(5);
        let batch = vec![seq(&[0, 2, 3]), seq(&[1, 3])];
        let (loss, _) = loss_and_grad(&params, &batch).unwrap();
        // Shift one full u-row by a constant: identical loss.
        let mut shifted = params.clone();
        let g = shifted.groups()[1];
        for c in 0..g.cols {
            shifted.data_mut()[g.offset + g.cols + c] += 3.7;
        }
        let (loss2, _) = loss_and_grad(&shifted, &batch).unwrap();
        assert!((loss - loss2).abs() <= 1e-12, "{loss} vs {loss2}");
    }

    #[test]
    fn uniform_point_start_gradient_vanishes_by_symmetry() {
        // All-zero scores make every distribution uniform; states are then
        // exchangeable, so the start-group gradient is exactly zero.
        let params = ScoreParams::new_hmm(3, 2, 4).unwrap();
        let batch = vec![seq(&[0, 2, 3]), seq(&[1, 3])];
        let (_, grad) = loss_and_grad(&params, &batch).unwrap();
        let g = params.groups()[0];
        for c in 0..g.cols {
            assert!(
                grad[g.offset + c].abs() <= 1e-14,
                "start gradient entry {c} = {}",
                grad[g.offset + c]
            );
        }
    }

    #[test]
    fn perplexity_is_consistent_across_independent_samples() {
        // Two disjoint samples from the same generator estimate the same
        // entropy rate; their perplexities agree within sampling noise.
        let model = random_cpd_hmm(4, 2, 12, 71, 0.5).unwrap();
        let compiled = model.compile();
        let a = sample_corpus(&model, 1500, 60, 8001).unwrap();
        let b = sample_corpus(&model, 1500, 60, 8002).unwrap();
        let ppl_a = crate::hmm::perplexity(&compiled, &a).unwrap();
        let ppl_b = crate::hmm::perplexity(&compiled, &b).unwrap();
        assert!(
            (ppl_a - ppl_b).abs() / ppl_a <= 0.10,
            "perplexities diverge: {ppl_a} vs {ppl_b}"
        );
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        for params in [hmm_params(8), pcfg_params(9)] {
            let batch = match params.kind {
                ModelKind::Hmm => vec![seq(&[0, 1, 3]), seq(&[2, 3])],
                ModelKind::Pcfg => vec![seq(&[0, 1, 2]), seq(&[2, 0])],
            };
            let (_, grad) = loss_and_grad(&params, &batch).unwrap();
            for g in params.groups() {
                for row in 0..g.rows {
                    let lo = g.offset + row * g.cols;
                    let s: f64 = grad[lo..lo + g.cols].iter().sum();
                    assert!(s.abs() <= 1e-12, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-4;
        for (params, batch) in [
            (hmm_params(3), vec![seq(&[0, 2, 3]), seq(&[1, 1, 0, 3])]),
            (pcfg_params(4), vec![seq(&[0, 1, 2, 1]), seq(&[2, 2])]),
        ] {
            let (_, grad) = loss_and_grad(&params, &batch).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(params.len() as u64);
            let dir: Vec<f64> = (0..params.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
            let norm: f64 = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|d| d / norm).collect();
            let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();

            let mut plus = params.clone();
            let mut minus = params.clone();
            for i in 0..params.len() {
                plus.data_mut()[i] += h * dir[i];
                minus.data_mut()[i] -= h * dir[i];
            }
            let (lp, _) = loss_and_grad(&plus, &batch).unwrap();
            let (lm, _) = loss_and_grad(&minus, &batch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "directional derivative {analytic} vs fd {fd}");
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let params = hmm_params(11);
        let train = vec![seq(&[0, 3]), seq(&[1, 2, 3])];
        let mut cfg = TrainConfig::hmm_defaults();
        cfg.learning_rate = 0.0;
        cfg.epochs = 3;
        let before = params.data().to_vec();
        let result = fit(params, &train, &train, &cfg).unwrap();
        assert_eq!(result.params.data(), &before[..]);
        let first = result.trace[0].val_nll;
        assert!(result
            .trace
            .iter()
            .all(|r| (r.val_nll - first).abs() < 1e-12));
    }

    #[test]
    fn capacity_one_model_learns_the_unigram_distribution() {
        // One state, one rank, vocabulary {unk, eos}: the optimum for the
        // sentence "w eos" is p(w) = p(eos) = 1/2, i.e. nll = ln 2.
        let mut params = ScoreParams::new_hmm(1, 1, 2).unwrap();
        params.init_normal(3, 0.5);
        let corpus = vec![seq(&[0, 1])];
        let mut cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.5,
            ..TrainConfig::hmm_defaults()
        };
        cfg.epochs = 200;
        cfg.grad_clip = None;
        let result = fit(params, &corpus, &corpus, &cfg).unwrap();
        let last = result.trace.last().unwrap();
        assert!(
            (last.train_nll - 2f64.ln()).abs() <= 1e-3,
            "nll {} vs ln 2",
            last.train_nll
        );
    }

    #[test]
    fn single_batch_loss_decreases_under_small_sgd_steps() {
        let mut params = hmm_params(17);
        let batch = vec![seq(&[0, 1, 2, 3])];
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (loss, grad) = loss_and_grad(&params, &batch).unwrap();
            assert!(loss <= last + 1e-12, "loss rose: {loss} > {last}");
            last = loss;
            for (p, g) in params.data_mut().iter_mut().zip(&grad) {
                *p -= 1e-2 * g;
            }
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![3.0, 4.0]; // norm 5
        let norm = clip_gradient(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn nan_scores_report_divergence() {
        let mut params = hmm_params(19);
        params.data_mut()[0] = f64::NAN;
        let train = vec![seq(&[0, 3])];
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::hmm_defaults()
        };
        assert!(matches!(
            fit(params, &train, &train, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_respects_eos() {
        let model = random_cpd_hmm(3, 2, 6, 7, 1.0).unwrap();
        let a = sample_corpus(&model, 20, 30, 99).unwrap();
        let b = sample_corpus(&model, 20, 30, 99).unwrap();
        assert_eq!(a, b);
        let eos = model.vocab.eos_id();
        for s in &a {
            assert_eq!(*s.ids().last().unwrap(), eos);
            assert!(s.ids().iter().filter(|&&w| w == eos).count() == 1);
        }
        let c = sample_corpus(&model, 20, 30, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_emitter_yields_eos_only_sentences() {
        let vocab = crate::model::Vocab::synthetic(3).unwrap();
        let point_eos = vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0];
        let model = CpdHmm::new(
            vocab,
            vec![0.0],
            LogMat::from_rows(vec![vec![0.0]]).unwrap(),
            LogMat::from_rows(vec![vec![0.0]]).unwrap(),
            LogMat::from_rows(vec![point_eos]).unwrap(),
        )
        .unwrap();
        let corpus = sample_corpus(&model, 5, 10, 1).unwrap();
        for s in &corpus {
            assert_eq!(s.ids(), &[2]);
        }
    }

    #[test]
    fn sampled_unigram_frequencies_match_exact_expectations() {
        // Exact per-sentence expected counts via the rank-chain recursion,
        // conditioned on acceptance within max_len steps.
        let model = random_cpd_hmm(3, 2, 6, 41, 1.0).unwrap();
        let compiled = model.compile();
        let (r, o) = (model.r(), model.o());
        let eos = model.vocab.eos_id();
        let max_len = 25usize;
        let epi: Vec<f64> = compiled.start.iter().map(|&x| x.exp()).collect();
        let ea = compiled.trans.exp_data();
        let ew = model.rank_emit.exp_data();

        // acc[t][q] = p(eos emitted within steps t..=max_len | rank q at t)
        let mut acc = vec![vec![0.0f64; r]; max_len + 1];
        for q in 0..r {
            acc[max_len][q] = ew[q * o + eos];
        }
        for t in (1..max_len).rev() {
            for q in 0..r {
                let cont: f64 = (0..r).map(|qp| ea[q * r + qp] * acc[t + 1][qp]).sum();
                acc[t][q] = ew[q * o + eos] + (1.0 - ew[q * o + eos]) * cont;
            }
        }
        // d[q]: p(no eos before step t, rank q at t); accumulate expected
        // counts of each word in accepted sentences.
        let mut expected = vec![0.0f64; o];
        let mut p_accept = 0.0;
        let mut d = epi.clone();
        for t in 1..=max_len {
            for q in 0..r {
                p_accept += d[q] * ew[q * o + eos];
                expected[eos] += d[q] * ew[q * o + eos];
                if t < max_len {
                    let cont: f64 = (0..r).map(|qp| ea[q * r + qp] * acc[t + 1][qp]).sum();
                    for w in 0..o {
                        if w != eos {
                            expected[w] += d[q] * ew[q * o + w] * cont;
                        }
                    }
                }
            }
            if t < max_len {
                let mut next = vec![0.0f64; r];
                for q in 0..r {
                    let stay = d[q] * (1.0 - ew[q * o + eos]);
                    for qp in 0..r {
                        next[qp] += stay * ea[q * r + qp];
                    }
                }
                d = next;
            }
        }
        expected.iter_mut().for_each(|x| *x /= p_accept);

        let sentences = 4000usize;
        let corpus = sample_corpus(&model, sentences, max_len, 4242).unwrap();
        for w in 0..o {
            let counts: Vec<f64> = corpus
                .iter()
                .map(|s| s.ids().iter().filter(|&&x| x == w).count() as f64)
                .collect();
            let mean: f64 = counts.iter().sum::<f64>() / sentences as f64;
            let var: f64 = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
                / (sentences as f64 - 1.0);
            let se = (var / sentences as f64).sqrt();
            assert!(
                (mean - expected[w]).abs() <= 3.0 * se + 1e-9,
                "token {w}: mean {mean} vs expected {} (se {se})",
                expected[w]
            );
        }
    }
}
