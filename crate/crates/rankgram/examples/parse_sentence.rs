//! Posterior span marginals by reverse accumulation over the rank-space
//! inside pass, then the minimum-risk parse: the binary tree holding the
//! largest expected number of posterior spans.
//!
//!     cargo run --release --example parse_sentence

use rankgram::corpus::TokenSeq;
use rankgram::model::random_cpd_pcfg;
use rankgram::pcfg::{expected_span_total, mbr_decode, span_marginals};

fn main() -> rankgram::Result<()> {
    let model = random_cpd_pcfg(3, 6, 4, 10, 21, 0.5)?;
    let compiled = model.compile();
    let seq = TokenSeq::new(vec![2, 7, 1, 4, 8, 3])?;
    let n = seq.len();

    let marginals = span_marginals(&compiled, &seq)?;
    println!("span marginals for a {n}-token sentence (width >= 2):");
    for ((i, j), mu) in marginals.iter() {
        println!("  mu({i:>2}, {j:>2}) = {mu:.6}");
    }
    println!(
        "mass check: sum = {:.9} (expect {}), whole-sentence = {:.9}",
        marginals.total(),
        n - 1,
        marginals.get(0, n).unwrap()
    );

    let tree = mbr_decode(&marginals);
    println!("minimum-risk parse: {}", tree.bracket_string());
    println!(
        "expected spans kept: {:.6}",
        expected_span_total(&tree, &marginals)
    );
    Ok(())
}
