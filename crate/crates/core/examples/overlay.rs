//! Blends a segmenter's mask over a generated image: red where it predicts
//! smooth surface, blue where it predicts rough.

use weakseg::model::{Model, ModelConfig};
use weakseg::overlay::{blend, predict_mask};
use weakseg::pnm::{self, GrayImage};
use weakseg::synth::{generate_sample, DatasetConfig, Split};

fn main() -> weakseg::Result<()> {
    let cfg = DatasetConfig {
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    };
    let sample = generate_sample(&cfg, 4, Split::Test, 0)?;
    let image = GrayImage::new(32, 32, sample.image)?;
    let model = match Model::load("target/example-segmenter.wsm") {
        Ok(m) => m,
        Err(_) => {
            println!("no trained model found, using an untrained one (run train_segmenter first)");
            let config = ModelConfig {
                input_size: (32, 32),
                ..ModelConfig::default()
            };
            Model::segmenter(config, 0)?
        }
    };
    let mask = predict_mask(&model, &image)?;
    pnm::write_ppm("target/example-overlay.ppm", 32, 32, &blend(&image.data, &mask)?)?;
    let truth: Vec<f64> = sample.mask.iter().map(|&m| m as f64).collect();
    pnm::write_ppm("target/example-truth.ppm", 32, 32, &blend(&image.data, &truth)?)?;
    println!("wrote target/example-overlay.ppm and target/example-truth.ppm");
    Ok(())
}
