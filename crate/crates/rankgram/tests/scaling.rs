//! Cross-algorithm timing order for the chain models at a matched size
//! where the state count dwarfs the rank.

use rankgram::bench::{run_grid, BenchAlgo, BenchAxis, BenchDims, GridSpec};

#[test]
fn forward_algorithms_order_by_complexity_at_large_state_counts() {
    let report = run_grid(&GridSpec {
        algorithms: vec![
            BenchAlgo::RankForward,
            BenchAlgo::LowrankForward,
            BenchAlgo::DenseForward,
        ],
        axis: BenchAxis::N,
        values: vec![128],
        base: BenchDims {
            n: 128,
            m: 1024,
            r: 64,
            o: 16,
        },
        reps: 5,
        warmup: 1,
        seed: 42,
        time_budget: None,
    })
    .unwrap();
    let t_rank = report.median_for(BenchAlgo::RankForward).unwrap();
    let t_lowrank = report.median_for(BenchAlgo::LowrankForward).unwrap();
    let t_dense = report.median_for(BenchAlgo::DenseForward).unwrap();
    println!("rank {t_rank:.2e}s < lowrank {t_lowrank:.2e}s < dense {t_dense:.2e}s");
    assert!(
        t_rank < t_lowrank && t_lowrank < t_dense,
        "expected rank < lowrank < dense, got {t_rank:.3e}, {t_lowrank:.3e}, {t_dense:.3e}"
    );
}
