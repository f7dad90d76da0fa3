//! Writes a small synthetic surface dataset and prints the achieved mask
//! ratio of each sample next to its target.

use weakseg::pnm;
use weakseg::synth::{generate_dataset, DatasetConfig, Split, SplitCounts};

fn main() -> weakseg::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into());
    let cfg = DatasetConfig {
        counts: SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        },
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    };
    let manifest = generate_dataset(&cfg, &out)?;
    let root = std::path::Path::new(&out);
    for s in manifest.samples.iter().filter(|s| s.split == Split::Train) {
        let mask = pnm::read_pgm(root.join(&s.mask))?;
        let achieved = mask.data.iter().sum::<f64>() / mask.data.len() as f64;
        println!("{:<26} label {} target {:.4} achieved {achieved:.4}", s.image, s.label, s.true_ratio);
    }
    println!("{} samples in {out}, manifest sha256 {}", manifest.samples.len(), manifest.checksum());
    Ok(())
}
