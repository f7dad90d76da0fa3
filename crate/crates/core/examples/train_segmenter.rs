//! Trains a segmenter from image-level ratios only, then compares the
//! predicted masks with the hidden pixel masks.

use weakseg::model::{Model, ModelConfig};
use weakseg::synth::{Dataset, DatasetConfig, SplitCounts};
use weakseg::train::{train_segmenter, TrainConfig};

fn main() -> weakseg::Result<()> {
    let data = Dataset::generate(&DatasetConfig {
        counts: SplitCounts {
            train: 6,
            val: 2,
            test: 2,
        },
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    })?;
    let h = data.f_true()?;
    let config = ModelConfig {
        input_size: (32, 32),
        ..ModelConfig::default()
    };
    let mut model = Model::segmenter(config, 0)?;
    let cfg = TrainConfig {
        epochs: 20,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let metrics = train_segmenter(&mut model, &data, &h, &cfg)?;
    let s = metrics.segmenter.as_ref().expect("segmenter run");
    println!("val mse {:.5}, test pixel agreement {:.3}", s.final_mse.val, s.pixel_agreement.test);
    for r in &s.per_label {
        println!("label {}: g {:.3} mean mask {:.3}", r.label, r.target_g, r.mean_prediction);
    }
    model.save("target/example-segmenter.wsm")?;
    Ok(())
}
