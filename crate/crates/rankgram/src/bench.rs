//! Wall-clock measurement grid and scaling-exponent fits.
//!
//! Each cell generates a seeded random model and sentence, runs a few
//! discarded warmup calls, then times repeated single-sentence inference
//! calls. Medians and median absolute deviations are robust to scheduler
//! noise; slopes come from least squares on log time versus the log of the
//! varied axis. One-time compilation of the rank-space matrices is timed
//! separately and reported as its own row, never folded into inference.

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::hmm::{dense_forward, lowrank_forward, rank_forward};
use crate::model::{random_cpd_hmm, random_cpd_pcfg};
use crate::pcfg::{dense_inside, lpcfg_inside, rank_inside, td_inside};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchAlgo {
    DenseForward,
    LowrankForward,
    RankForward,
    DenseInside,
    TdInside,
    LpcfgInside,
    RankInside,
}

impl BenchAlgo {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchAlgo::DenseForward => "dense_forward",
            BenchAlgo::LowrankForward => "lowrank_forward",
            BenchAlgo::RankForward => "rank_forward",
            BenchAlgo::DenseInside => "dense_inside",
            BenchAlgo::TdInside => "td_inside",
            BenchAlgo::LpcfgInside => "lpcfg_inside",
            BenchAlgo::RankInside => "rank_inside",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dense_forward" => BenchAlgo::DenseForward,
            "lowrank_forward" => BenchAlgo::LowrankForward,
            "rank_forward" => BenchAlgo::RankForward,
            "dense_inside" => BenchAlgo::DenseInside,
            "td_inside" => BenchAlgo::TdInside,
            "lpcfg_inside" => BenchAlgo::LpcfgInside,
            "rank_inside" => BenchAlgo::RankInside,
            _ => return None,
        })
    }

    fn is_chain(&self) -> bool {
        matches!(
            self,
            BenchAlgo::DenseForward | BenchAlgo::LowrankForward | BenchAlgo::RankForward
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchAxis {
    N,
    M,
    R,
}

impl BenchAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchAxis::N => "n",
            BenchAxis::M => "m",
            BenchAxis::R => "r",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "n" => BenchAxis::N,
            "m" => BenchAxis::M,
            "r" => BenchAxis::R,
            _ => return None,
        })
    }
}

/// Sentence length, total states/symbols, rank, vocabulary size.
#[derive(Debug, Clone, Copy)]
pub struct BenchDims {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub o: usize,
}

/// Nonterminal/preterminal split at the usual 1:2 ratio.
pub fn split_symbols(m: usize) -> (usize, usize) {
    let nt = ((m + 1) / 3).max(1);
    (nt, m - nt)
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub algorithms: Vec<BenchAlgo>,
    pub axis: BenchAxis,
    pub values: Vec<usize>,
    pub base: BenchDims,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub time_budget: Option<Duration>,
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.reps < 5 {
            return Err(Error::InvalidDims(
                "benchmark repetitions must be at least 5".into(),
            ));
        }
        if self.algorithms.is_empty() || self.values.is_empty() {
            return Err(Error::InvalidDims(
                "benchmark grid needs algorithms and axis values".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub algorithm: &'static str,
    /// "infer" for the per-sentence timing, "compile" for the one-time cost.
    pub phase: &'static str,
    pub n: usize,
    pub m: usize,
    pub num_nt: usize,
    pub num_pt: usize,
    pub r: usize,
    pub o: usize,
    pub reps: usize,
    pub median_s: f64,
    pub mad_s: f64,
}

#[derive(Debug, Clone)]
pub struct SlopeFit {
    pub algorithm: &'static str,
    pub axis: &'static str,
    /// Present only when timings clear the resolution gate.
    pub slope: Option<f64>,
    pub points: usize,
    pub min_median_s: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<SlopeFit>,
    pub incomplete: bool,
    pub timer_resolution_s: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("algorithm,phase,n,m,num_nt,num_pt,r,o,reps,median_s,mad_s\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{:.9e},{:.9e}",
                row.algorithm,
                row.phase,
                row.n,
                row.m,
                row.num_nt,
                row.num_pt,
                row.r,
                row.o,
                row.reps,
                row.median_s,
                row.mad_s
            );
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>6} {:>6} {:>6} {:>6} {:>12} {:>12}",
            "algorithm", "phase", "n", "m", "r", "o", "median_s", "mad_s"
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>6} {:>6} {:>6} {:>6} {:>12.3e} {:>12.3e}",
                row.algorithm, row.phase, row.n, row.m, row.r, row.o, row.median_s, row.mad_s
            );
        }
        for fit in &self.slopes {
            match fit.slope {
                Some(s) => {
                    let _ = writeln!(
                        out,
                        "slope {:<16} vs {:<2} over {} points: {:.3}",
                        fit.algorithm, fit.axis, fit.points, s
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "slope {:<16} vs {:<2}: below timing resolution gate",
                        fit.algorithm, fit.axis
                    );
                }
            }
        }
        if self.incomplete {
            let _ = writeln!(out, "WARNING: time budget exceeded; report is partial");
        }
        out
    }

    pub fn slope_for(&self, algorithm: BenchAlgo) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.algorithm == algorithm.as_str())
            .and_then(|s| s.slope)
    }

    pub fn median_for(&self, algorithm: BenchAlgo) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm.as_str() && r.phase == "infer")
            .map(|r| r.median_s)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Smallest measurable nonzero interval of the monotonic clock.
pub fn timer_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut d = t0.elapsed();
        while d.is_zero() {
            d = t0.elapsed();
        }
        best = best.min(d.as_secs_f64());
    }
    best
}

fn median_and_mad(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let med = samples[samples.len() / 2];
    let mut dev: Vec<f64> = samples.iter().map(|&x| (x - med).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    (med, dev[dev.len() / 2])
}

fn random_sentence(n: usize, o: usize, eos: Option<usize>, seed: u64) -> TokenSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..o)).collect();
    if let Some(e) = eos {
        ids[n - 1] = e;
    }
    TokenSeq::new(ids).expect("n >= 1")
}

/// Run a timing grid: one varied axis, everything else fixed.
pub fn run_grid(spec: &GridSpec) -> Result<BenchReport> {
    spec.validate()?;
    let resolution = timer_resolution();
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut incomplete = false;

    'outer: for (ai, &algo) in spec.algorithms.iter().enumerate() {
        for &value in &spec.values {
            if let Some(budget) = spec.time_budget {
                if started.elapsed() > budget {
                    incomplete = true;
                    break 'outer;
                }
            }
            let dims = apply_axis(spec.base, spec.axis, value);
            let cell_seed = splitmix(spec.seed ^ splitmix(((ai as u64) << 32) | value as u64));
            rows.extend(run_cell(algo, dims, spec.reps, spec.warmup, cell_seed)?);
        }
    }

    // Least-squares slope per algorithm over the varied axis, gated on all
    // medians clearing 4x the timer resolution.
    let mut slopes = Vec::new();
    for &algo in &spec.algorithms {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.algorithm == algo.as_str() && r.phase == "infer")
            .map(|r| {
                let x = match spec.axis {
                    BenchAxis::N => r.n,
                    BenchAxis::M => r.m,
                    BenchAxis::R => r.r,
                } as f64;
                (x.ln(), r.median_s)
            })
            .collect();
        if pts.len() < 2 {
            continue;
        }
        let min_median = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let slope = (min_median >= 4.0 * resolution).then(|| {
            let logs: Vec<(f64, f64)> = pts.iter().map(|&(x, t)| (x, t.ln())).collect();
            least_squares_slope(&logs)
        });
        slopes.push(SlopeFit {
            algorithm: algo.as_str(),
            axis: spec.axis.as_str(),
            slope,
            points: pts.len(),
            min_median_s: min_median,
        });
    }

    Ok(BenchReport {
        rows,
        slopes,
        incomplete,
        timer_resolution_s: resolution,
    })
}

fn apply_axis(mut dims: BenchDims, axis: BenchAxis, value: usize) -> BenchDims {
    match axis {
        BenchAxis::N => dims.n = value,
        BenchAxis::M => dims.m = value,
        BenchAxis::R => dims.r = value,
    }
    dims
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn run_cell(
    algo: BenchAlgo,
    dims: BenchDims,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let (num_nt, num_pt) = if algo.is_chain() {
        (0, 0)
    } else {
        split_symbols(dims.m)
    };
    let mk_row = |phase: &'static str, reps: usize, median_s: f64, mad_s: f64| BenchRow {
        algorithm: algo.as_str(),
        phase,
        n: dims.n,
        m: dims.m,
        num_nt,
        num_pt,
        r: dims.r,
        o: dims.o,
        reps,
        median_s,
        mad_s,
    };

    // Timed closure per algorithm; model setup happens outside the timer,
    // rank-space compilation gets its own row.
    let timed: Box<dyn Fn() -> f64> = if algo.is_chain() {
        let model = random_cpd_hmm(dims.m, dims.r, dims.o, seed, 1.0)?;
        let seq = random_sentence(dims.n, dims.o, Some(model.vocab.eos_id()), splitmix(seed));
        match algo {
            BenchAlgo::DenseForward => {
                let dense = model.reconstruct();
                Box::new(move || dense_forward(&dense, &seq).expect("ids in range").log_z)
            }
            BenchAlgo::LowrankForward => {
                Box::new(move || lowrank_forward(&model, &seq).expect("ids in range").log_z)
            }
            BenchAlgo::RankForward => {
                let t0 = Instant::now();
                let compiled = model.compile();
                let compile_s = t0.elapsed().as_secs_f64();
                rows.push(mk_row("compile", 1, compile_s, 0.0));
                Box::new(move || rank_forward(&compiled, &seq).expect("ids in range").log_z)
            }
            _ => unreachable!(),
        }
    } else {
        let model = random_cpd_pcfg(num_nt, num_pt, dims.r, dims.o, seed, 1.0)?;
        let seq = random_sentence(dims.n, dims.o, None, splitmix(seed));
        match algo {
            BenchAlgo::DenseInside => {
                let dense = model.reconstruct();
                Box::new(move || dense_inside(&dense, &seq).expect("ids in range").log_z)
            }
            BenchAlgo::TdInside => {
                Box::new(move || td_inside(&model, &seq).expect("ids in range").log_z)
            }
            BenchAlgo::LpcfgInside => {
                let view = model.lpcfg_view();
                let emit = model.preterm_emit.clone();
                let start = model.start.clone();
                Box::new(move || {
                    lpcfg_inside(&view, &emit, &start, &seq)
                        .expect("ids in range")
                        .log_z
                })
            }
            BenchAlgo::RankInside => {
                let t0 = Instant::now();
                let compiled = model.compile();
                let compile_s = t0.elapsed().as_secs_f64();
                rows.push(mk_row("compile", 1, compile_s, 0.0));
                Box::new(move || rank_inside(&compiled, &seq).expect("ids in range").log_z)
            }
            _ => unreachable!(),
        }
    };

    for _ in 0..warmup {
        std::hint::black_box(timed());
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(timed());
        samples.push(t0.elapsed().as_secs_f64());
    }
    let (median, mad) = median_and_mad(&mut samples);
    rows.push(mk_row("infer", reps, median, mad));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fit_recovers_power_laws() {
        // t = 3 * x^2.5 exactly
        let pts: Vec<(f64, f64)> = [2.0f64, 4.0, 8.0, 16.0]
            .iter()
            .map(|&x| (x.ln(), (3.0 * x.powf(2.5)).ln()))
            .collect();
        let slope = least_squares_slope(&pts);
        assert!((slope - 2.5).abs() <= 1e-12);
    }

    #[test]
    fn tiny_grid_produces_stable_row_structure() {
        let spec = GridSpec {
            algorithms: vec![BenchAlgo::RankForward, BenchAlgo::RankInside],
            axis: BenchAxis::N,
            values: vec![4, 8],
            base: BenchDims {
                n: 4,
                m: 6,
                r: 2,
                o: 8,
            },
            reps: 5,
            warmup: 1,
            seed: 3,
            time_budget: None,
        };
        let a = run_grid(&spec).unwrap();
        let b = run_grid(&spec).unwrap();
        let schema = |r: &BenchReport| -> Vec<(String, String, usize, usize, usize, usize)> {
            r.rows
                .iter()
                .map(|x| {
                    (
                        x.algorithm.to_string(),
                        x.phase.to_string(),
                        x.n,
                        x.m,
                        x.r,
                        x.o,
                    )
                })
                .collect()
        };
        assert_eq!(schema(&a), schema(&b));
        // one compile row per rank-space cell: 2 algorithms x 2 axis values
        assert_eq!(a.rows.iter().filter(|r| r.phase == "compile").count(), 4);
        assert!(!a.incomplete);
        assert_eq!(a.to_csv().lines().count(), a.rows.len() + 1);
    }

    #[test]
    fn repetition_floor_is_enforced() {
        let spec = GridSpec {
            algorithms: vec![BenchAlgo::RankForward],
            axis: BenchAxis::R,
            values: vec![2],
            base: BenchDims {
                n: 4,
                m: 4,
                r: 2,
                o: 8,
            },
            reps: 3,
            warmup: 0,
            seed: 0,
            time_budget: None,
        };
        assert!(run_grid(&spec).is_err());
    }

    #[test]
    fn exhausted_budget_marks_the_report_partial() {
        let spec = GridSpec {
            algorithms: vec![BenchAlgo::RankForward],
            axis: BenchAxis::N,
            values: vec![4, 8, 16],
            base: BenchDims {
                n: 4,
                m: 4,
                r: 2,
                o: 8,
            },
            reps: 5,
            warmup: 0,
            seed: 0,
            time_budget: Some(Duration::from_nanos(1)),
        };
        let report = run_grid(&spec).unwrap();
        assert!(report.incomplete);
    }

    #[test]
    fn symbol_split_keeps_one_to_two_ratio() {
        assert_eq!(split_symbols(8), (3, 5));
        assert_eq!(split_symbols(16), (5, 11));
        assert_eq!(split_symbols(32), (11, 21));
        assert_eq!(split_symbols(512), (171, 341));
        assert_eq!(split_symbols(2), (1, 1));
    }
}
