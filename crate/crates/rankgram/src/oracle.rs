//! Brute-force enumeration references.
//!
//! These certify every inference path at tiny scale. They deliberately share
//! nothing with the log-space kernels: parameters are exponentiated up
//! front, path weights multiply in the real domain, and totals accumulate
//! with compensated summation. Tiny instances never underflow, so this is
//! exact enough to check 1e-9 tolerances against.

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::model::{DenseHmm, DensePcfg};
use std::collections::BTreeMap;

/// Caps on enumeration size; operations error rather than truncate.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationBudget {
    /// Cap on the number of hidden-state paths for the HMM oracle.
    pub max_state_paths: u64,
    /// Cap on bracketings x labelings for the PCFG oracle.
    pub max_trees: u64,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_state_paths: 10_000_000,
            max_trees: 10_000_000,
        }
    }
}

/// Error-free-transformation accumulator (Kahan).
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

fn checked_pow(base: u64, exp: u32) -> u128 {
    (base as u128).saturating_pow(exp)
}

/// Total sequence probability by literal enumeration of all hidden-state
/// paths (start state plus one state per token).
pub fn hmm_bruteforce_log_z(
    model: &DenseHmm,
    seq: &TokenSeq,
    budget: &EnumerationBudget,
) -> Result<f64> {
    seq.check_range(model.o())?;
    let m = model.m();
    let n = seq.len();
    let paths = checked_pow(m as u64, (n + 1) as u32);
    if paths > budget.max_state_paths as u128 {
        return Err(Error::BudgetExceeded {
            needed: paths,
            budget: budget.max_state_paths,
        });
    }
    let start: Vec<f64> = model.start.iter().map(|&x| x.exp()).collect();
    let joint = |a: usize, b: usize, w: usize| model.trans_emit.at(a, b, w).exp();

    let mut total = Kahan::default();
    let mut states = vec![0usize; n + 1];
    loop {
        let mut weight = start[states[0]];
        for (t, &w) in seq.ids().iter().enumerate() {
            if weight == 0.0 {
                break;
            }
            weight *= joint(states[t], states[t + 1], w);
        }
        total.add(weight);

        // odometer over state assignments
        let mut pos = 0;
        loop {
            if pos > n {
                return Ok(total.sum.ln());
            }
            states[pos] += 1;
            if states[pos] < m {
                break;
            }
            states[pos] = 0;
            pos += 1;
        }
    }
}

/// A binary bracketing as its set of internal spans, plus the split point
/// chosen at each internal span.
#[derive(Debug, Clone)]
struct TreeShape {
    /// (i, j, k): span [i, j) split at k. Sorted by construction.
    splits: Vec<(usize, usize, usize)>,
}

fn enumerate_shapes(i: usize, j: usize) -> Vec<TreeShape> {
    if j - i == 1 {
        return vec![TreeShape { splits: Vec::new() }];
    }
    let mut out = Vec::new();
    for k in i + 1..j {
        for left in enumerate_shapes(i, k) {
            for right in enumerate_shapes(k, j) {
                let mut splits = vec![(i, j, k)];
                splits.extend_from_slice(&left.splits);
                splits.extend_from_slice(&right.splits);
                out.push(TreeShape { splits });
            }
        }
    }
    out
}

fn catalan(k: u32) -> u128 {
    // C(k) = binom(2k, k) / (k + 1)
    let mut c: u128 = 1;
    for i in 0..k as u128 {
        c = c * (2 * (k as u128) - i) / (i + 1);
    }
    c / (k as u128 + 1)
}

/// Exact quantities from full enumeration over bracketings and labelings.
#[derive(Debug, Clone)]
pub struct PcfgExact {
    pub log_z: f64,
    /// Probability that a tree drawn from the posterior contains each span
    /// of width >= 2.
    pub span_marginals: BTreeMap<(usize, usize), f64>,
    /// Spans (width >= 2) of the tree maximizing expected span count.
    pub mbr_spans: Vec<(usize, usize)>,
    pub mbr_objective: f64,
}

/// Enumerate every binary bracketing and every symbol labeling of `seq`.
pub fn pcfg_bruteforce(
    model: &DensePcfg,
    seq: &TokenSeq,
    budget: &EnumerationBudget,
) -> Result<PcfgExact> {
    seq.check_range(model.o())?;
    let n = seq.len();
    if n < 2 {
        return Err(Error::SentenceLength {
            len: n,
            reason: "binary parses need at least two tokens",
        });
    }
    let nt = model.num_nt;
    let pt = model.num_pt;
    let work = catalan((n - 1) as u32)
        .saturating_mul(checked_pow(nt as u64, (n - 1) as u32))
        .saturating_mul(checked_pow(pt as u64, n as u32));
    if work > budget.max_trees as u128 {
        return Err(Error::BudgetExceeded {
            needed: work,
            budget: budget.max_trees,
        });
    }

    let start: Vec<f64> = model.start.iter().map(|&x| x.exp()).collect();
    let binary = |a: usize, b: usize, c: usize| model.binary.at(a, b, c).exp();
    let emit = |p: usize, w: usize| model.preterm_emit.at(p, w).exp();

    let shapes = enumerate_shapes(0, n);
    let mut shape_mass = vec![0.0f64; shapes.len()];
    let mut total = Kahan::default();

    for (si, shape) in shapes.iter().enumerate() {
        // Position of each internal span in the labeling vector.
        let mut index_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (idx, &(i, j, _)) in shape.splits.iter().enumerate() {
            index_of.insert((i, j), idx);
        }
        let internal = shape.splits.len(); // always n - 1
        let mut int_labels = vec![0usize; internal];
        let mut leaf_labels = vec![0usize; n];
        let mut mass = Kahan::default();
        loop {
            // weight of this fully labeled tree
            let mut weight = start[int_labels[index_of[&(0, n)]]];
            for &(i, j, k) in &shape.splits {
                if weight == 0.0 {
                    break;
                }
                let parent = int_labels[index_of[&(i, j)]];
                let left_sym = if k - i == 1 {
                    nt + leaf_labels[i]
                } else {
                    int_labels[index_of[&(i, k)]]
                };
                let right_sym = if j - k == 1 {
                    nt + leaf_labels[k]
                } else {
                    int_labels[index_of[&(k, j)]]
                };
                weight *= binary(parent, left_sym, right_sym);
            }
            if weight != 0.0 {
                for (pos, &w) in seq.ids().iter().enumerate() {
                    weight *= emit(leaf_labels[pos], w);
                    if weight == 0.0 {
                        break;
                    }
                }
            }
            mass.add(weight);

            // odometer over (internal x nt, leaves x pt)
            let mut pos = 0;
            let advanced = loop {
                if pos < internal {
                    int_labels[pos] += 1;
                    if int_labels[pos] < nt {
                        break true;
                    }
                    int_labels[pos] = 0;
                    pos += 1;
                } else if pos < internal + n {
                    let l = pos - internal;
                    leaf_labels[l] += 1;
                    if leaf_labels[l] < pt {
                        break true;
                    }
                    leaf_labels[l] = 0;
                    pos += 1;
                } else {
                    break false;
                }
            };
            if !advanced {
                break;
            }
        }
        shape_mass[si] = mass.sum;
        total.add(mass.sum);
    }

    let z = total.sum;
    if z <= 0.0 {
        return Ok(PcfgExact {
            log_z: f64::NEG_INFINITY,
            span_marginals: BTreeMap::new(),
            mbr_spans: Vec::new(),
            mbr_objective: 0.0,
        });
    }

    // marginal of a span = mass of trees containing it / Z
    let mut span_mass: BTreeMap<(usize, usize), Kahan> = BTreeMap::new();
    for (si, shape) in shapes.iter().enumerate() {
        for &(i, j, _) in &shape.splits {
            span_mass.entry((i, j)).or_default().add(shape_mass[si]);
        }
    }
    let span_marginals: BTreeMap<(usize, usize), f64> = span_mass
        .iter()
        .map(|(&span, k)| (span, k.sum / z))
        .collect();

    // exhaustive argmax of expected span count over bracketings
    let mut best_si = 0usize;
    let mut best_obj = f64::NEG_INFINITY;
    for (si, shape) in shapes.iter().enumerate() {
        let obj: f64 = shape
            .splits
            .iter()
            .map(|&(i, j, _)| span_marginals.get(&(i, j)).copied().unwrap_or(0.0))
            .sum();
        if obj > best_obj {
            best_obj = obj;
            best_si = si;
        }
    }
    let mut mbr_spans: Vec<(usize, usize)> =
        shapes[best_si].splits.iter().map(|&(i, j, _)| (i, j)).collect();
    mbr_spans.sort_unstable();

    Ok(PcfgExact {
        log_z: z.ln(),
        span_marginals,
        mbr_spans,
        mbr_objective: best_obj,
    })
}
