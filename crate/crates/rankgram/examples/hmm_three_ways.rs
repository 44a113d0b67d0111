//! Score the same sentence three ways: dense forward on the reconstructed
//! joint tensor, low-rank forward through the factors, and the rank-space
//! forward on the compiled model. A brute-force enumeration over all hidden
//! state paths certifies the answer.
//!
//!     cargo run --release --example hmm_three_ways

use rankgram::corpus::TokenSeq;
use rankgram::hmm::{dense_forward, lowrank_forward, rank_forward};
use rankgram::model::random_cpd_hmm;
use rankgram::oracle::{hmm_bruteforce_log_z, EnumerationBudget};

fn main() -> rankgram::Result<()> {
    let model = random_cpd_hmm(4, 2, 6, 7, 1.0)?;
    let dense = model.reconstruct();
    let compiled = model.compile();

    let mut ids = vec![1, 3, 2, 4];
    ids.push(model.vocab.eos_id());
    let seq = TokenSeq::new(ids)?;
    println!(
        "model: m={} states, r={} ranks, o={} words; sentence of {} tokens",
        model.m(),
        model.r(),
        model.o(),
        seq.len()
    );

    let z_dense = dense_forward(&dense, &seq)?.log_z;
    let z_lowrank = lowrank_forward(&model, &seq)?.log_z;
    let z_rank = rank_forward(&compiled, &seq)?.log_z;
    let z_exact = hmm_bruteforce_log_z(&dense, &seq, &EnumerationBudget::default())?;

    println!("dense forward      log Z = {z_dense:.12}   (O(n m^2))");
    println!("low-rank forward   log Z = {z_lowrank:.12}   (O(n m r))");
    println!("rank-space forward log Z = {z_rank:.12}   (O(n r^2))");
    println!("state-path sum     log Z = {z_exact:.12}   ({} paths)", {
        let m = model.m() as u64;
        m.pow(seq.len() as u32 + 1)
    });
    println!(
        "max pairwise difference: {:.3e}",
        [z_dense, z_lowrank, z_rank, z_exact]
            .iter()
            .flat_map(|a| [z_dense, z_lowrank, z_rank, z_exact].map(|b| (a - b).abs()))
            .fold(0.0f64, f64::max)
    );
    Ok(())
}
