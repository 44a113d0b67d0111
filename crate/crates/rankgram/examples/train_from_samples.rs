//! Closed-loop training check: sample a corpus from a seeded factored HMM,
//! fit a fresh model of the same shape by gradient descent on the
//! rank-space likelihood, and compare held-out perplexities.
//!
//!     cargo run --release --example train_from_samples

use rankgram::hmm::perplexity;
use rankgram::model::random_cpd_hmm;
use rankgram::train::{fit, sample_corpus, ScoreParams, TrainConfig};

fn main() -> rankgram::Result<()> {
    let generator = random_cpd_hmm(8, 4, 32, 601, 0.3)?;
    let train_corpus = sample_corpus(&generator, 2000, 40, 602)?;
    let heldout = sample_corpus(&generator, 400, 40, 603)?;
    let tokens: usize = train_corpus.iter().map(|s| s.len()).sum();
    println!(
        "sampled {} training sentences ({tokens} tokens) from an m=8, r=4, o=32 generator",
        train_corpus.len()
    );

    let gen_ppl = perplexity(&generator.compile(), &heldout)?;
    println!("generator held-out perplexity: {gen_ppl:.3}");

    let mut params = ScoreParams::new_hmm(8, 4, 32)?;
    let config = TrainConfig {
        seed: 604,
        ..TrainConfig::hmm_defaults()
    };
    params.init_normal(config.seed, config.init_scale);
    let result = fit(params, &train_corpus, &heldout, &config)?;
    for row in result.trace.iter().step_by(5) {
        println!(
            "  epoch {:>2}: train nll {:.4}, val nll {:.4}, lr {:.2e}",
            row.epoch, row.train_nll, row.val_nll, row.lr
        );
    }

    let fitted = result.params.to_cpd_hmm(&generator.vocab)?;
    let fit_ppl = perplexity(&fitted.compile(), &heldout)?;
    println!("fitted held-out perplexity:    {fit_ppl:.3}");
    println!(
        "relative gap: {:.1}%",
        100.0 * (fit_ppl - gen_ppl).abs() / gen_ppl
    );
    Ok(())
}
