//! A small wall-clock grid: vary the rank at fixed sentence length and
//! state count, and fit log-log slopes. The rank-space routes should show
//! their quadratic (forward) and near-linear (inside, in this regime)
//! dependence on the rank.
//!
//!     cargo run --release --example scaling_grid

use rankgram::bench::{run_grid, BenchAlgo, BenchAxis, BenchDims, GridSpec};

fn main() -> rankgram::Result<()> {
    let spec = GridSpec {
        algorithms: vec![
            BenchAlgo::RankForward,
            BenchAlgo::LowrankForward,
            BenchAlgo::RankInside,
            BenchAlgo::TdInside,
        ],
        axis: BenchAxis::R,
        values: vec![8, 16, 32, 64],
        base: BenchDims {
            n: 32,
            m: 64,
            r: 8,
            o: 128,
        },
        reps: 7,
        warmup: 2,
        seed: 0,
        time_budget: None,
    };
    let report = run_grid(&spec)?;
    print!("{}", report.render_table());
    println!(
        "(timer resolution {:.1e}s; compile rows are the one-time cost of \
         the rank-space matrices, excluded from inference timings)",
        report.timer_resolution_s
    );
    Ok(())
}
