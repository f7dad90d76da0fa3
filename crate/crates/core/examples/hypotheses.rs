//! Ranks candidate ratio functions by how well a segmenter can fit them.

use weakseg::hypothesis::{rank_hypotheses, Hypothesis};
use weakseg::model::ModelConfig;
use weakseg::synth::{Dataset, DatasetConfig, SplitCounts};
use weakseg::train::TrainConfig;

fn main() -> weakseg::Result<()> {
    let data = Dataset::generate(&DatasetConfig {
        counts: SplitCounts {
            train: 4,
            val: 2,
            test: 2,
        },
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    })?;
    let hyps = ["linear", "power-decay:2", "alternating", "constant:0.5"]
        .iter()
        .map(|s| Hypothesis::parse(s, (0, 7)))
        .collect::<weakseg::Result<Vec<_>>>()?;
    let model = ModelConfig {
        input_size: (32, 32),
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 10,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let (report, _) = rank_hypotheses(&hyps, &data, &model, &cfg, 1)?;
    for (rank, e) in report.entries.iter().enumerate() {
        let shape = if e.monotonicity.constant { "constant".to_string() } else { format!("{:?}", e.monotonicity.direction) };
        println!("{} {:<14} val mse {:.5} {shape}", rank + 1, e.name, e.val_mse);
    }
    Ok(())
}
