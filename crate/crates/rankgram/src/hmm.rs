//! Forward-algorithm variants, rank posteriors, and perplexity.
//!
//! All three scorers compute the same sentence log-probability:
//!
//! * [`dense_forward`]: O(n m^2) on the joint tensor,
//! * [`lowrank_forward`]: O(n m r) through the factor matrices,
//! * [`rank_forward`]: O(n r^2) on the compiled rank-space model.
//!
//! Sweeps run on real-domain numbers with one running log-scale per message
//! vector (rescaled every step), so nothing underflows on long sentences.

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::logspace::{log_hadamard, log_mat_vec, lse_slice, LogVec};
use crate::model::{CpdHmm, DenseHmm, RankHmm};

/// Per-position forward messages plus the sentence total.
///
/// Messages are stored as real-domain values with one log-scale per
/// position; [`ForwardTrellis::message`] converts a position back to log.
#[derive(Debug, Clone)]
pub struct ForwardTrellis {
    dim: usize,
    vals: Vec<f64>,
    shifts: Vec<f64>,
    pub log_z: f64,
}

impl ForwardTrellis {
    fn with_capacity(n: usize, dim: usize) -> Self {
        Self {
            dim,
            vals: Vec::with_capacity(n * dim),
            shifts: Vec::with_capacity(n),
            log_z: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, scaled: &Scaled) {
        self.vals.extend_from_slice(&scaled.vals);
        self.shifts.push(scaled.shift);
    }

    /// Number of positions covered.
    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    /// Build from explicit log-domain messages.
    pub fn from_log_messages(messages: &[LogVec], log_z: f64) -> Self {
        let dim = messages.first().map_or(0, |m| m.len());
        let mut out = Self::with_capacity(messages.len(), dim);
        for msg in messages {
            let shift = crate::logspace::max_or_neg_inf(msg);
            out.vals.extend(msg.iter().map(|&x| {
                if shift == f64::NEG_INFINITY {
                    0.0
                } else {
                    (x - shift).exp()
                }
            }));
            out.shifts.push(shift);
        }
        out.log_z = log_z;
        out
    }

    /// The log-domain message after consuming token `t` (0-based). The
    /// dimension is the state count for state-space sweeps, the rank count
    /// for the rank-space sweep.
    pub fn message(&self, t: usize) -> LogVec {
        let s = self.shifts[t];
        self.vals[t * self.dim..(t + 1) * self.dim]
            .iter()
            .map(|&v| if s == f64::NEG_INFINITY { f64::NEG_INFINITY } else { v.ln() + s })
            .collect()
    }

    pub fn messages(&self) -> Vec<LogVec> {
        (0..self.len()).map(|t| self.message(t)).collect()
    }
}

/// Running real-domain message with an attached log scale.
struct Scaled {
    vals: Vec<f64>,
    shift: f64,
}

impl Scaled {
    fn renormalize(&mut self) {
        let mx = self.vals.iter().copied().fold(0.0f64, f64::max);
        if mx > 0.0 {
            for v in &mut self.vals {
                *v /= mx;
            }
            self.shift += mx.ln();
        } else {
            self.shift = f64::NEG_INFINITY;
        }
    }

    fn log_total(&self) -> f64 {
        if self.shift == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let s: f64 = self.vals.iter().sum();
        if s > 0.0 {
            s.ln() + self.shift
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Forward algorithm on the joint dense tensor.
pub fn dense_forward(model: &DenseHmm, seq: &TokenSeq) -> Result<ForwardTrellis> {
    seq.check_range(model.o())?;
    let m = model.m();
    let mut f = Scaled {
        vals: vec![0.0; m],
        shift: 0.0,
    };
    let mut next = vec![0.0f64; m];
    let mut trellis = ForwardTrellis::with_capacity(seq.len(), m);
    let mut prev_is_start = true;
    for &w in seq.ids() {
        next.iter_mut().for_each(|x| *x = 0.0);
        let src: &[f64] = if prev_is_start {
            model.exp_start()
        } else {
            &f.vals
        };
        for (a, &fa) in src.iter().enumerate() {
            if fa == 0.0 {
                continue;
            }
            let lane = model.exp_lane(a, w);
            for (b, &t) in lane.iter().enumerate() {
                next[b] += fa * t;
            }
        }
        std::mem::swap(&mut f.vals, &mut next);
        prev_is_start = false;
        f.renormalize();
        trellis.push(&f);
    }
    trellis.log_z = f.log_total();
    Ok(trellis)
}

/// Forward algorithm through the factor matrices, staying in state space.
/// The emission multiplies in rank space, between the two projections.
pub fn lowrank_forward(model: &CpdHmm, seq: &TokenSeq) -> Result<ForwardTrellis> {
    seq.check_range(model.o())?;
    let (m, r, o) = (model.m(), model.r(), model.o());
    let eu = model.state_to_rank.exp_data();
    let ev = model.rank_to_state.exp_data();
    let ew = model.rank_emit.exp_data();
    let mut f = Scaled {
        vals: model.exp_start_vals(),
        shift: 0.0,
    };
    let mut g = vec![0.0f64; r];
    let mut trellis = ForwardTrellis::with_capacity(seq.len(), m);
    for &w in seq.ids() {
        g.iter_mut().for_each(|x| *x = 0.0);
        for (a, &fa) in f.vals.iter().enumerate() {
            if fa == 0.0 {
                continue;
            }
            let urow = &eu[a * r..(a + 1) * r];
            for (q, &u) in urow.iter().enumerate() {
                g[q] += fa * u;
            }
        }
        for (q, gq) in g.iter_mut().enumerate() {
            *gq *= ew[q * o + w];
        }
        f.vals.iter_mut().for_each(|x| *x = 0.0);
        for (q, &hq) in g.iter().enumerate() {
            if hq == 0.0 {
                continue;
            }
            let vrow = &ev[q * m..(q + 1) * m];
            for (b, &v) in vrow.iter().enumerate() {
                f.vals[b] += hq * v;
            }
        }
        f.renormalize();
        trellis.push(&f);
    }
    trellis.log_z = f.log_total();
    Ok(trellis)
}

/// Forward algorithm on the compiled rank-space model: an ordinary HMM
/// forward sweep over rank variables.
pub fn rank_forward(model: &RankHmm, seq: &TokenSeq) -> Result<ForwardTrellis> {
    seq.check_range(model.o())?;
    let r = model.r();
    let o = model.o();
    let ea = model.exp_trans();
    let ew = model.exp_emit();
    let mut h = Scaled {
        vals: model.exp_start().to_vec(),
        shift: 0.0,
    };
    let mut next = vec![0.0f64; r];
    let mut trellis = ForwardTrellis::with_capacity(seq.len(), r);
    let mut first = true;
    for &w in seq.ids() {
        if first {
            first = false;
        } else {
            next.iter_mut().for_each(|x| *x = 0.0);
            for (q, &hq) in h.vals.iter().enumerate() {
                if hq == 0.0 {
                    continue;
                }
                let row = &ea[q * r..(q + 1) * r];
                for (qp, &t) in row.iter().enumerate() {
                    next[qp] += hq * t;
                }
            }
            std::mem::swap(&mut h.vals, &mut next);
        }
        for (q, hq) in h.vals.iter_mut().enumerate() {
            *hq *= ew[q * o + w];
        }
        h.renormalize();
        trellis.push(&h);
    }
    trellis.log_z = h.log_total();
    Ok(trellis)
}

/// Posterior distribution over ranks at each emitted token.
#[derive(Debug, Clone)]
pub struct PosteriorRanks {
    /// `gamma[t][q]` = log p(rank at step t = q | sentence); rows normalize.
    pub gamma: Vec<LogVec>,
}

/// Forward-backward over the rank-space model.
pub fn rank_backward(model: &RankHmm, seq: &TokenSeq) -> Result<PosteriorRanks> {
    let forward = rank_forward(model, seq)?;
    if forward.log_z == f64::NEG_INFINITY {
        return Err(Error::ZeroProbability(
            "sequence has zero probability under the model".into(),
        ));
    }
    let n = seq.len();
    let r = model.r();
    let mut betas = vec![vec![0.0f64; r]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let w_next = seq.ids()[t + 1];
        let weighted = log_hadamard(&model.emit.col_vec(w_next), &betas[t + 1])
            .expect("dimensions fixed by model");
        betas[t] = log_mat_vec(&model.trans, &weighted).expect("dimensions fixed by model");
    }
    let gamma = betas
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let h = forward.message(t);
            let joint: Vec<f64> = h.iter().zip(b).map(|(&x, &y)| x + y).collect();
            let z = lse_slice(&joint);
            joint.iter().map(|&x| x - z).collect()
        })
        .collect();
    Ok(PosteriorRanks { gamma })
}

/// Anything that can assign a log-probability to a token sequence.
pub trait SequenceScorer {
    fn forward(&self, seq: &TokenSeq) -> Result<ForwardTrellis>;

    fn log_z(&self, seq: &TokenSeq) -> Result<f64> {
        Ok(self.forward(seq)?.log_z)
    }
}

impl SequenceScorer for DenseHmm {
    fn forward(&self, seq: &TokenSeq) -> Result<ForwardTrellis> {
        dense_forward(self, seq)
    }
}

impl SequenceScorer for CpdHmm {
    fn forward(&self, seq: &TokenSeq) -> Result<ForwardTrellis> {
        lowrank_forward(self, seq)
    }
}

impl SequenceScorer for RankHmm {
    fn forward(&self, seq: &TokenSeq) -> Result<ForwardTrellis> {
        rank_forward(self, seq)
    }
}

/// exp of per-token negative log-likelihood over the corpus. Token counts
/// include the end-of-sentence token carried by each sequence.
pub fn perplexity<S: SequenceScorer>(model: &S, corpus: &[TokenSeq]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total_log_z = 0.0;
    let mut tokens = 0usize;
    for seq in corpus {
        total_log_z += model.log_z(seq)?;
        tokens += seq.len();
    }
    Ok((-total_log_z / tokens as f64).exp())
}

impl CpdHmm {
    pub(crate) fn exp_start_vals(&self) -> Vec<f64> {
        self.start.iter().map(|&x| x.exp()).collect()
    }
}
