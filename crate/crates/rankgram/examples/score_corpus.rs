//! The file-facing pipeline in miniature: write a model file and a text
//! corpus, load them back, map tokens against the stored vocabulary (unk
//! substitution plus the appended end-of-sentence token), and score.
//!
//!     cargo run --release --example score_corpus

use rankgram::corpus::{corpus_from_str, map_corpus, PreprocessOptions};
use rankgram::hmm::{perplexity, rank_forward, SequenceScorer};
use rankgram::io::Model;
use rankgram::model::random_cpd_hmm;

fn main() -> rankgram::Result<()> {
    let dir = std::env::temp_dir().join("rankgram_score_corpus_example");
    std::fs::create_dir_all(&dir)?;
    let model_path = dir.join("model.json");

    Model::CpdHmm(random_cpd_hmm(4, 2, 8, 5, 1.0)?).save(&model_path)?;
    println!("wrote {}", model_path.display());

    let model = match Model::load(&model_path)? {
        Model::CpdHmm(m) => m,
        _ => unreachable!("just written as cpd_hmm"),
    };
    let text = "w1 w3 W2\nw4 zebra w1\n\nw2\n";
    let corpus = corpus_from_str(text, &PreprocessOptions::default());
    println!(
        "corpus: {} sentences ({} empty line skipped)",
        corpus.sentences.len(),
        corpus.skipped_lines
    );

    // Unknown words map to unk; every sentence gains the eos token.
    let seqs = map_corpus(&model.vocab, &corpus, true, true)?;
    let compiled = model.compile();
    for (i, seq) in seqs.iter().enumerate() {
        let trellis = rank_forward(&compiled, seq)?;
        println!(
            "sentence {i}: {} tokens, log Z = {:.6}",
            seq.len(),
            trellis.log_z
        );
    }
    println!(
        "corpus perplexity: {:.4} (low-rank route agrees: {:.4})",
        perplexity(&compiled, &seqs)?,
        {
            let mut total = 0.0;
            let mut toks = 0usize;
            for s in &seqs {
                total += model.log_z(s)?;
                toks += s.len();
            }
            (-total / toks as f64).exp()
        }
    );
    Ok(())
}
