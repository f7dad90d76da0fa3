use weakseg::model::{Model, ModelConfig};
use weakseg::synth::{Dataset, DatasetConfig, SplitCounts};
use weakseg::train::{train_classifier, TrainConfig};

fn main() -> weakseg::Result<()> {
    let data = Dataset::generate(&DatasetConfig {
        label_range: (0, 3),
        counts: SplitCounts {
            train: 12,
            val: 4,
            test: 4,
        },
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    })?;
    let config = ModelConfig {
        c: 6,
        d: 2,
        num_classes: data.label_count(),
        input_size: (32, 32),
        ..ModelConfig::default()
    };
    let mut model = Model::classifier(config, 0)?;
    let cfg = TrainConfig {
        epochs: 20,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let metrics = train_classifier(&mut model, &data, &cfg)?;
    let c = metrics.classifier.as_ref().expect("classifier run");
    println!("test accuracy {:.3}, best val epoch {}", c.final_accuracy.test, c.best_epoch);
    for row in &c.confusion {
        println!("{row:?}");
    }
    Ok(())
}
