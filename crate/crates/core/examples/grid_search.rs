use weakseg::model::ModelConfig;
use weakseg::synth::{Dataset, DatasetConfig, SplitCounts};
use weakseg::train::{grid_search, CellOutcome, GridCell, Task, TrainConfig};

fn main() -> weakseg::Result<()> {
    let data = Dataset::generate(&DatasetConfig {
        label_range: (0, 3),
        counts: SplitCounts {
            train: 8,
            val: 4,
            test: 4,
        },
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    })?;
    let mut cells = Vec::new();
    for c in [4, 8] {
        for lr in [3e-3, 1e-2] {
            let model = ModelConfig {
                c,
                d: 1,
                num_classes: 4,
                input_size: (16, 16),
                ..ModelConfig::default()
            };
            cells.push(GridCell { model, lr: Some(lr) });
        }
    }
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    for (rank, e) in grid_search(&cells, &data, &Task::Classifier, &cfg, 1)?.iter().enumerate() {
        match &e.outcome {
            CellOutcome::Trained { metric, param_count, .. } => println!(
                "{} c={} lr={:?}: val accuracy {metric:.3}, {param_count} parameters",
                rank + 1,
                e.cell.model.c,
                e.cell.lr
            ),
            CellOutcome::Failed(msg) => println!("- c={} failed: {msg}", e.cell.model.c),
        }
    }
    Ok(())
}
