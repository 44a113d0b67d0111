//! Command-line entry point: model generation, corpus scoring, parsing,
//! training, oracle checks, and benchmarks.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

use clap::{Args, Parser, Subcommand};
use rankgram::bench::{run_grid, BenchAlgo, BenchAxis, BenchDims, GridSpec};
use rankgram::corpus::{load_corpus, map_corpus, PreprocessOptions, RawCorpus, TokenSeq};
use rankgram::hmm::{dense_forward, lowrank_forward, rank_forward};
use rankgram::io::Model;
use rankgram::model::{random_cpd_hmm, random_cpd_pcfg};
use rankgram::oracle::{hmm_bruteforce_log_z, pcfg_bruteforce, EnumerationBudget};
use rankgram::pcfg::{
    dense_inside, mbr_decode, parse_bracket_line, rank_inside, span_marginals, td_inside,
};
use rankgram::train::{fit, ModelKind, OptimizerKind, ScoreParams, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

#[derive(Parser)]
#[command(
    name = "rankgram",
    version,
    about = "Dense, low-rank, and rank-space inference for HMMs and PCFGs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random factored model and write it as JSON.
    Gen(GenArgs),
    /// Score a corpus: per-sentence log-probabilities plus perplexity.
    Score(ScoreArgs),
    /// MBR-parse a corpus; optionally evaluate against gold brackets.
    Parse(ParseArgs),
    /// Fit a factored model by gradient descent.
    Train(TrainArgs),
    /// Cross-check every inference route against brute-force enumeration.
    OracleCheck(OracleArgs),
    /// Run a wall-clock scaling grid and write a CSV report.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Model kind: cpd_hmm or cpd_pcfg.
    #[arg(long)]
    kind: String,
    /// State count (cpd_hmm).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    m: Option<u64>,
    /// Nonterminal count (cpd_pcfg).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    num_nt: Option<u64>,
    /// Preterminal count (cpd_pcfg).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    num_pt: Option<u64>,
    /// Rank of the factored transition.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    r: u64,
    /// Vocabulary size, including the reserved unk and eos tokens.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    o: u64,
    #[arg(long)]
    seed: u64,
    /// Dirichlet concentration for the distribution rows.
    #[arg(long, default_value_t = 1.0)]
    concentration: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Inference route: dense, lowrank, or rank.
    #[arg(long)]
    algo: String,
    /// Output path for the JSONL report (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Substitute unknown words with the unk token (default: on for HMM
    /// models, off for PCFG models).
    #[arg(long, overrides_with = "no_unk")]
    unk: bool,
    #[arg(long = "no-unk", overrides_with = "unk")]
    no_unk: bool,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    strip_punct: bool,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Gold bracket file, one line per sentence.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Output path for bracket lines (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump span marginals as JSON lines.
    #[arg(long)]
    marginals_out: Option<PathBuf>,
    #[arg(long)]
    unk: bool,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    strip_punct: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Model family: hmm or pcfg.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    corpus: PathBuf,
    /// Validation corpus (required; evaluation runs once per epoch).
    #[arg(long)]
    val: PathBuf,
    /// Output prefix for model/scores/trace files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    m: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    num_nt: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    num_pt: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = 4)]
    r: u64,
    /// Cap the corpus-derived vocabulary at this size.
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer: sgd, adam, or adamw.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    /// Gradient norm cap; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Comma-separated seed list; one fit per seed.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    strip_punct: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Which family to check: hmm, pcfg, or both.
    #[arg(long, default_value = "both")]
    kind: String,
    #[arg(long, default_value_t = 25)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check a specific model file instead of generated instances.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid specification JSON; omit to use a built-in quick grid.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a human-readable table to stdout as well.
    #[arg(long)]
    table: bool,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<rankgram::Error> for CliError {
    fn from(e: rankgram::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Score(args) => cmd_score(args),
        Command::Parse(args) => cmd_parse(args),
        Command::Train(args) => cmd_train(args),
        Command::OracleCheck(args) => cmd_oracle_check(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_or_stdout(path: &Option<PathBuf>, content: &str) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, content)?,
        None => print!("{content}"),
    }
    Ok(())
}

fn preprocess_opts(no_lowercase: bool, strip_punct: bool) -> PreprocessOptions {
    PreprocessOptions {
        lowercase: !no_lowercase,
        strip_punct,
    }
}

fn warn_skipped(corpus: &RawCorpus) {
    if corpus.skipped_lines > 0 {
        eprintln!("warning: skipped {} empty line(s)", corpus.skipped_lines);
    }
}

fn cmd_gen(args: GenArgs) -> CliResult {
    let model = match args.kind.as_str() {
        "cpd_hmm" => {
            let m = args.m.ok_or_else(|| usage("--m is required for cpd_hmm"))? as usize;
            Model::CpdHmm(
                random_cpd_hmm(m, args.r as usize, args.o as usize, args.seed, args.concentration)
                    .map_err(|e| usage(e.to_string()))?,
            )
        }
        "cpd_pcfg" => {
            let nt = args
                .num_nt
                .ok_or_else(|| usage("--num-nt is required for cpd_pcfg"))? as usize;
            let pt = args
                .num_pt
                .ok_or_else(|| usage("--num-pt is required for cpd_pcfg"))? as usize;
            Model::CpdPcfg(
                random_cpd_pcfg(
                    nt,
                    pt,
                    args.r as usize,
                    args.o as usize,
                    args.seed,
                    args.concentration,
                )
                .map_err(|e| usage(e.to_string()))?,
            )
        }
        other => return Err(usage(format!("unknown kind {other:?}"))),
    };
    model.save(&args.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine {
    index: usize,
    n_tokens: usize,
    #[serde(rename = "logZ")]
    log_z: f64,
}

#[derive(Serialize)]
struct ScoreSummary {
    total_tokens: usize,
    nll_per_token: f64,
    ppl: f64,
}

fn cmd_score(args: ScoreArgs) -> CliResult {
    let model = Model::load(&args.model)?;
    let opts = preprocess_opts(args.no_lowercase, args.strip_punct);
    let corpus = load_corpus(&args.corpus, &opts)?;
    warn_skipped(&corpus);

    let is_hmm = matches!(model, Model::CpdHmm(_) | Model::DenseHmm(_));
    let allow_unk = if args.unk {
        true
    } else if args.no_unk {
        false
    } else {
        is_hmm // unk substitution defaults on for HMM corpora only
    };
    let seqs = map_corpus(model.vocab(), &corpus, allow_unk, is_hmm)?;
    if seqs.is_empty() {
        return Err(CliError::Data("empty corpus".into()));
    }

    let scorer: Box<dyn Fn(&TokenSeq) -> rankgram::Result<f64>> =
        match (&model, args.algo.as_str()) {
            (Model::CpdHmm(m), "dense") => {
                let dense = m.reconstruct();
                Box::new(move |s| Ok(dense_forward(&dense, s)?.log_z))
            }
            (Model::CpdHmm(m), "lowrank") => {
                let m = m.clone();
                Box::new(move |s| Ok(lowrank_forward(&m, s)?.log_z))
            }
            (Model::CpdHmm(m), "rank") => {
                let compiled = m.compile();
                Box::new(move |s| Ok(rank_forward(&compiled, s)?.log_z))
            }
            (Model::DenseHmm(m), "dense") => {
                let m = m.clone();
                Box::new(move |s| Ok(dense_forward(&m, s)?.log_z))
            }
            (Model::CpdPcfg(m), "dense") => {
                let dense = m.reconstruct();
                Box::new(move |s| Ok(dense_inside(&dense, s)?.log_z))
            }
            (Model::CpdPcfg(m), "lowrank") => {
                let m = m.clone();
                Box::new(move |s| Ok(td_inside(&m, s)?.log_z))
            }
            (Model::CpdPcfg(m), "rank") => {
                let compiled = m.compile();
                Box::new(move |s| Ok(rank_inside(&compiled, s)?.log_z))
            }
            (Model::DensePcfg(m), "dense") => {
                let m = m.clone();
                Box::new(move |s| Ok(dense_inside(&m, s)?.log_z))
            }
            // dense works for every kind; the factored routes need factors
            (m, algo @ ("lowrank" | "rank")) => {
                return Err(usage(format!(
                    "algo {algo:?} is incompatible with model kind {:?}",
                    m.kind()
                )))
            }
            (_, other) => return Err(usage(format!("unknown algo {other:?}"))),
        };

    let mut out = String::new();
    let mut total_log_z = 0.0;
    let mut total_tokens = 0usize;
    for (index, seq) in seqs.iter().enumerate() {
        let log_z = scorer(seq).map_err(|e| CliError::Data(format!("sentence {index}: {e}")))?;
        total_log_z += log_z;
        total_tokens += seq.len();
        let line = ScoreLine {
            index,
            n_tokens: seq.len(),
            log_z,
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("serializable"));
    }
    let nll = -total_log_z / total_tokens as f64;
    let summary = ScoreSummary {
        total_tokens,
        nll_per_token: nll,
        ppl: nll.exp(),
    };
    let _ = writeln!(out, "{}", serde_json::to_string(&summary).expect("serializable"));
    write_or_stdout(&args.out, &out)
}

#[derive(Serialize)]
struct MarginalLine {
    index: usize,
    i: usize,
    j: usize,
    mu: f64,
}

fn cmd_parse(args: ParseArgs) -> CliResult {
    let model = match Model::load(&args.model)? {
        Model::CpdPcfg(m) => m,
        other => {
            return Err(usage(format!(
                "parse needs a cpd_pcfg model (got {:?})",
                other.kind()
            )))
        }
    };
    let opts = preprocess_opts(args.no_lowercase, args.strip_punct);
    let corpus = load_corpus(&args.corpus, &opts)?;
    warn_skipped(&corpus);
    let seqs = map_corpus(&model.vocab, &corpus, args.unk, false)?;
    if seqs.is_empty() {
        return Err(CliError::Data("empty corpus".into()));
    }

    let compiled = model.compile();
    let mut brackets = String::new();
    let mut marginal_lines = String::new();
    let mut trees = Vec::with_capacity(seqs.len());
    for (index, seq) in seqs.iter().enumerate() {
        let marginals = span_marginals(&compiled, seq)
            .map_err(|e| CliError::Data(format!("sentence {index}: {e}")))?;
        if args.marginals_out.is_some() {
            for ((i, j), mu) in marginals.iter() {
                let line = MarginalLine { index, i, j, mu };
                let _ = writeln!(
                    marginal_lines,
                    "{}",
                    serde_json::to_string(&line).expect("serializable")
                );
            }
        }
        let tree = mbr_decode(&marginals);
        let _ = writeln!(brackets, "{}", tree.bracket_string());
        trees.push(tree);
    }
    write_or_stdout(&args.out, &brackets)?;
    if let Some(path) = &args.marginals_out {
        std::fs::write(path, marginal_lines)?;
    }

    if let Some(gold_path) = &args.gold {
        let gold_text = std::fs::read_to_string(gold_path)?;
        let gold: Vec<_> = gold_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(parse_bracket_line)
            .collect::<rankgram::Result<_>>()?;
        let f1 = rankgram::pcfg::corpus_f1(&trees, &gold)?;
        println!("S-F1: {f1:.1}");
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ScoreSidecar {
    kind: String,
    num_states: usize,
    num_pt: usize,
    rank: usize,
    vocab_size: usize,
    data: Vec<f64>,
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let kind = match args.kind.as_str() {
        "hmm" => ModelKind::Hmm,
        "pcfg" => ModelKind::Pcfg,
        other => return Err(usage(format!("unknown kind {other:?}"))),
    };
    let opts = preprocess_opts(args.no_lowercase, args.strip_punct);
    let train_raw = load_corpus(&args.corpus, &opts)?;
    let val_raw = load_corpus(&args.val, &opts)?;
    warn_skipped(&train_raw);
    warn_skipped(&val_raw);

    let vocab = rankgram::corpus::vocab_from_corpus(&train_raw, args.vocab_cap)?;
    let append_eos = kind == ModelKind::Hmm;
    let train_seqs = map_corpus(&vocab, &train_raw, true, append_eos)?;
    let val_seqs = map_corpus(&vocab, &val_raw, true, append_eos)?;

    let mut config = match kind {
        ModelKind::Hmm => TrainConfig::hmm_defaults(),
        ModelKind::Pcfg => TrainConfig::pcfg_defaults(),
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = &args.optimizer {
        config.optimizer = match v.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            "adamw" => OptimizerKind::AdamW,
            other => return Err(usage(format!("unknown optimizer {other:?}"))),
        };
    }
    if let Some(v) = args.beta1 {
        config.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        config.beta2 = v;
    }
    if let Some(v) = args.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = args.batch_tokens {
        config.batch_tokens = v;
    }
    if let Some(v) = args.grad_clip {
        config.grad_clip = (v > 0.0).then_some(v);
    }
    if let Some(v) = args.patience {
        config.lr_halving_patience = v;
    }
    if let Some(v) = args.init_scale {
        config.init_scale = v;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("bad seed {s:?}")))
        })
        .collect::<Result<_, _>>()?;

    let r = args.r as usize;
    let o = vocab.size();
    for seed in seeds {
        let mut params = match kind {
            ModelKind::Hmm => {
                let m = args.m.ok_or_else(|| usage("--m is required for hmm"))? as usize;
                ScoreParams::new_hmm(m, r, o)?
            }
            ModelKind::Pcfg => {
                let nt = args
                    .num_nt
                    .ok_or_else(|| usage("--num-nt is required for pcfg"))?
                    as usize;
                let pt = args
                    .num_pt
                    .ok_or_else(|| usage("--num-pt is required for pcfg"))?
                    as usize;
                ScoreParams::new_pcfg(nt, pt, r, o)?
            }
        };
        params.init_normal(seed, config.init_scale);
        let mut run_config = config.clone();
        run_config.seed = seed;
        let result = fit(params, &train_seqs, &val_seqs, &run_config)?;

        let prefix = args.out.display();
        let model_path = PathBuf::from(format!("{prefix}.seed{seed}.model.json"));
        let scores_path = PathBuf::from(format!("{prefix}.seed{seed}.scores.json"));
        let trace_path = PathBuf::from(format!("{prefix}.seed{seed}.trace.csv"));

        let model = match kind {
            ModelKind::Hmm => Model::CpdHmm(result.params.to_cpd_hmm(&vocab)?),
            ModelKind::Pcfg => Model::CpdPcfg(result.params.to_cpd_pcfg(&vocab)?),
        };
        model.save(&model_path)?;

        let sidecar = ScoreSidecar {
            kind: args.kind.clone(),
            num_states: result.params.num_states,
            num_pt: result.params.num_pt,
            rank: result.params.rank,
            vocab_size: result.params.vocab_size,
            data: result.params.data().to_vec(),
        };
        std::fs::write(
            &scores_path,
            serde_json::to_string(&sidecar).expect("serializable"),
        )?;

        let mut trace = String::from("epoch,train_nll,val_nll,lr\n");
        for row in &result.trace {
            let _ = writeln!(
                trace,
                "{},{:.12},{:.12},{:.12}",
                row.epoch, row.train_nll, row.val_nll, row.lr
            );
        }
        std::fs::write(&trace_path, trace)?;
        if let Some(last) = result.trace.last() {
            println!(
                "seed {seed}: val nll/token {:.6} (ppl {:.3}) -> {}",
                last.val_nll,
                last.val_nll.exp(),
                model_path.display()
            );
        }
    }
    Ok(())
}

const ORACLE_TOL: f64 = 1e-9;

fn cmd_oracle_check(args: OracleArgs) -> CliResult {
    let budget = EnumerationBudget::default();
    let mut all_pass = true;
    let mut lines = String::new();
    let mut cases_run = 0usize;
    let mut cases_passed = 0usize;

    if let Some(path) = &args.model {
        // Check one model file: report validity violations, then agreement.
        let model = Model::load_unvalidated(path)?;
        let violations = model.violations_with_tol(rankgram::model::LOAD_TOL);
        for v in &violations {
            let _ = writeln!(lines, "violation: {v}");
        }
        if !violations.is_empty() {
            all_pass = false;
        }
        match &model {
            Model::CpdHmm(m) => {
                let (pass, detail) = check_one_hmm(m, args.seed, &budget);
                cases_run += 1;
                cases_passed += usize::from(pass);
                all_pass &= pass;
                let _ = writeln!(lines, "{detail}");
            }
            Model::CpdPcfg(m) => {
                let (pass, detail) = check_one_pcfg(m, args.seed, &budget);
                cases_run += 1;
                cases_passed += usize::from(pass);
                all_pass &= pass;
                let _ = writeln!(lines, "{detail}");
            }
            other => {
                return Err(usage(format!(
                    "oracle-check --model needs a factored model (got {:?})",
                    other.kind()
                )))
            }
        }
    } else {
        let do_hmm = args.kind == "hmm" || args.kind == "both";
        let do_pcfg = args.kind == "pcfg" || args.kind == "both";
        if !(do_hmm || do_pcfg) {
            return Err(usage(format!("unknown kind {:?}", args.kind)));
        }
        for case in 0..args.cases {
            let seed = args.seed.wrapping_add(case as u64);
            if do_hmm {
                let m = 1 + (seed % 4) as usize;
                let r = 1 + (seed % 3) as usize;
                let o = 2 + (seed % 3) as usize;
                let model = random_cpd_hmm(m, r, o, seed, 1.0)?;
                let (pass, detail) = check_one_hmm(&model, seed, &budget);
                cases_run += 1;
                cases_passed += usize::from(pass);
                all_pass &= pass;
                let _ = writeln!(lines, "hmm case {case}: {detail}");
            }
            if do_pcfg {
                let nt = 1 + (seed % 2) as usize;
                let pt = 1 + ((seed / 2) % 2) as usize;
                let r = 1 + (seed % 3) as usize;
                let o = 2 + (seed % 2) as usize;
                let model = random_cpd_pcfg(nt, pt, r, o, seed, 1.0)?;
                let (pass, detail) = check_one_pcfg(&model, seed, &budget);
                cases_run += 1;
                cases_passed += usize::from(pass);
                all_pass &= pass;
                let _ = writeln!(lines, "pcfg case {case}: {detail}");
            }
        }
    }

    let _ = writeln!(lines, "oracle-check: {cases_passed}/{cases_run} cases passed");
    print!("{lines}");
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Data("oracle-check found mismatches".into()))
    }
}

fn check_one_hmm(
    model: &rankgram::model::CpdHmm,
    seed: u64,
    budget: &EnumerationBudget,
) -> (bool, String) {
    let dense = model.reconstruct();
    let compiled = model.compile();
    let o = model.o();
    let mut max_diff = 0.0f64;
    let mut oracle_note = "";
    for len in 1..=4usize {
        let ids: Vec<usize> = (0..len)
            .map(|t| ((seed as usize).wrapping_mul(31).wrapping_add(t * 7)) % o)
            .collect();
        let seq = TokenSeq::new(ids).expect("len >= 1");
        let mut all = vec![
            dense_forward(&dense, &seq).expect("in range").log_z,
            lowrank_forward(model, &seq).expect("in range").log_z,
            rank_forward(&compiled, &seq).expect("in range").log_z,
        ];
        match hmm_bruteforce_log_z(&dense, &seq, budget) {
            Ok(z) => all.push(z),
            Err(_) => oracle_note = " (enumeration skipped: over budget)",
        }
        for a in &all {
            for b in &all {
                max_diff = max_diff.max((a - b).abs());
            }
        }
    }
    let pass = max_diff <= ORACLE_TOL;
    (
        pass,
        format!(
            "max |dlogZ| = {max_diff:.3e}{oracle_note} -> {}",
            if pass { "PASS" } else { "FAIL" }
        ),
    )
}

fn check_one_pcfg(
    model: &rankgram::model::CpdPcfg,
    seed: u64,
    budget: &EnumerationBudget,
) -> (bool, String) {
    let dense = model.reconstruct();
    let view = model.lpcfg_view();
    let compiled = model.compile();
    let o = model.o();
    let mut max_diff = 0.0f64;
    let mut max_mu_diff = 0.0f64;
    let mut oracle_note = "";
    for len in 2..=5usize {
        let ids: Vec<usize> = (0..len)
            .map(|t| ((seed as usize).wrapping_mul(17).wrapping_add(t * 5)) % o)
            .collect();
        let seq = TokenSeq::new(ids).expect("len >= 1");
        let mut all = vec![
            dense_inside(&dense, &seq).expect("in range").log_z,
            td_inside(model, &seq).expect("in range").log_z,
            rankgram::pcfg::lpcfg_inside(&view, &model.preterm_emit, &model.start, &seq)
                .expect("in range")
                .log_z,
            rank_inside(&compiled, &seq).expect("in range").log_z,
        ];
        match pcfg_bruteforce(&dense, &seq, budget) {
            Ok(exact) => {
                all.push(exact.log_z);
                if let Ok(mu) = span_marginals(&compiled, &seq) {
                    for ((i, j), v) in mu.iter() {
                        let want = exact.span_marginals.get(&(i, j)).copied().unwrap_or(0.0);
                        max_mu_diff = max_mu_diff.max((v - want).abs());
                    }
                }
            }
            Err(_) => oracle_note = " (enumeration skipped: over budget)",
        }
        for a in &all {
            for b in &all {
                max_diff = max_diff.max((a - b).abs());
            }
        }
    }
    let pass = max_diff <= ORACLE_TOL && max_mu_diff <= ORACLE_TOL;
    (
        pass,
        format!(
            "max |dlogZ| = {max_diff:.3e}, max |dmu| = {max_mu_diff:.3e}{oracle_note} -> {}",
            if pass { "PASS" } else { "FAIL" }
        ),
    )
}

#[derive(Deserialize)]
struct BenchSpecFile {
    algorithms: Vec<String>,
    axis: String,
    values: Vec<usize>,
    base: BenchBase,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default = "default_warmup")]
    warmup: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    time_budget_s: Option<f64>,
}

#[derive(Deserialize)]
struct BenchBase {
    n: usize,
    m: usize,
    r: usize,
    o: usize,
}

fn default_reps() -> usize {
    7
}

fn default_warmup() -> usize {
    2
}

fn cmd_bench(args: BenchArgs) -> CliResult {
    let spec = match &args.spec {
        Some(path) => {
            let file: BenchSpecFile = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| CliError::Data(format!("bench spec: {e}")))?;
            let algorithms = file
                .algorithms
                .iter()
                .map(|s| {
                    BenchAlgo::parse(s).ok_or_else(|| usage(format!("unknown algorithm {s:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let axis = BenchAxis::parse(&file.axis)
                .ok_or_else(|| usage(format!("unknown axis {:?}", file.axis)))?;
            GridSpec {
                algorithms,
                axis,
                values: file.values,
                base: BenchDims {
                    n: file.base.n,
                    m: file.base.m,
                    r: file.base.r,
                    o: file.base.o,
                },
                reps: file.reps,
                warmup: file.warmup,
                seed: file.seed,
                time_budget: file.time_budget_s.map(Duration::from_secs_f64),
            }
        }
        None => GridSpec {
            algorithms: vec![
                BenchAlgo::RankForward,
                BenchAlgo::LowrankForward,
                BenchAlgo::RankInside,
                BenchAlgo::TdInside,
            ],
            axis: BenchAxis::R,
            values: vec![4, 8, 16, 32],
            base: BenchDims {
                n: 24,
                m: 48,
                r: 4,
                o: 64,
            },
            reps: 7,
            warmup: 2,
            seed: 0,
            time_budget: None,
        },
    };
    let report = run_grid(&spec).map_err(|e| usage(e.to_string()))?;
    if args.table {
        print!("{}", report.render_table());
        if let Some(out) = &args.out {
            std::fs::write(out, report.to_csv())?;
        }
    } else {
        write_or_stdout(&args.out, &report.to_csv())?;
    }
    Ok(())
}
