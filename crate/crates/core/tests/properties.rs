use proptest::prelude::*;

use weakseg::hypothesis::{Family, Hypothesis};
use weakseg::model::{Model, ModelConfig};
use weakseg::overlay::blend;
use weakseg::pnm::{decode_pgm, encode_pgm, quantize, GrayImage};
use weakseg::synth::{self, DatasetConfig, SplitCounts};
use weakseg::train::confusion_matrix;

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![
        Just(Family::Linear),
        (0.1f64..5.0).prop_map(|alpha| Family::PowerDecay { alpha }),
        Just(Family::Alternating),
        (0.0f64..=1.0).prop_map(|value| Family::Constant { value }),
        prop::collection::vec(0.0f64..=1.0, 4).prop_map(|values| Family::Table { values }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_selects_exactly_ceil_rn(
        field in prop::collection::vec(-1.0f64..1.0, 1..300),
        r in 0.0f64..=1.0,
    ) {
        let mask = synth::threshold_at_ratio(&field, r).unwrap();
        let want = (r * field.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(mask.iter().filter(|&&m| m == 1).count(), want);
        // Every selected value is at least every unselected one.
        let lo = field.iter().zip(&mask).filter(|(_, &m)| m == 1).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let hi = field.iter().zip(&mask).filter(|(_, &m)| m == 0).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo >= hi);
    }

    #[test]
    fn blob_masks_hit_the_target_ratio(seed in any::<u64>(), passes in 0usize..6, t in 0i64..8) {
        let cfg = DatasetConfig {
            height: 12,
            width: 20,
            blob_passes: passes,
            seed,
            ..DatasetConfig::default()
        };
        let s = synth::generate_sample(&cfg, t, synth::Split::Val, 3).unwrap();
        let r = cfg.f_true().unwrap().g(t).unwrap();
        let frac = s.mask.iter().map(|&m| m as f64).sum::<f64>() / 240.0;
        prop_assert!((frac - r).abs() <= 1.0 / 240.0);
        prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn family_specs_round_trip(f in family()) {
        let back: Family = f.to_string().parse().unwrap();
        prop_assert_eq!(back.to_string(), f.to_string());
        let h = Hypothesis::new(f.to_string(), f, (0, 3)).unwrap();
        prop_assert!(h.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pgm_encoding_is_a_fixed_point(
        (w, h, data) in (1usize..20, 1usize..20).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(0.0f64..=1.0, w * h))
        })
    ) {
        let img = GrayImage::new(w, h, data).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        let back = decode_pgm(&bytes).unwrap();
        prop_assert_eq!(encode_pgm(&back).unwrap(), bytes);
        for (b, v) in back.data.iter().zip(&img.data) {
            prop_assert_eq!(*b, quantize(*v) as f64 / 255.0);
        }
    }

    #[test]
    fn overlay_channels_stay_in_their_bands(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64)
    ) {
        let (gray, mask): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let rgb = blend(&gray, &mask).unwrap();
        prop_assert_eq!(rgb.len(), 3 * gray.len());
        for px in rgb.chunks(3) {
            // Green carries only the gray half; red plus blue carry the full tint.
            prop_assert!(px[1] <= 128);
            let tint = px[0] as i32 + px[2] as i32 - 2 * px[1] as i32;
            prop_assert!((125..=130).contains(&tint), "{:?}", px);
        }
    }

    #[test]
    fn confusion_totals_match_label_counts(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 0..80)
    ) {
        let (pred, lab): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = confusion_matrix(&pred, &lab, 4).unwrap();
        for (k, row) in m.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), lab.iter().filter(|&&l| l == k).count());
        }
        let diag: usize = (0..4).map(|k| m[k][k]).sum();
        prop_assert_eq!(diag, pred.iter().zip(&lab).filter(|(p, l)| p == l).count());
    }

    #[test]
    fn depth_law_holds_for_classifiers(d in 1usize..4, n in 1usize..4, blocks in 1usize..4, c in 1usize..4) {
        let cfg = ModelConfig { c, d, n, blocks, num_classes: 2, input_size: (8, 16) };
        prop_assert_eq!(Model::classifier(cfg, 1).unwrap().conv_count(), d * n * blocks + 1);
    }

    #[test]
    fn model_bytes_round_trip(seed in any::<u64>(), seg in any::<bool>(), d in 1usize..3) {
        let cfg = ModelConfig { c: 2, d, n: 1, blocks: 1, num_classes: 3, input_size: (8, 8) };
        let m = if seg { Model::segmenter(cfg, seed) } else { Model::classifier(cfg, seed) }.unwrap();
        let bytes = m.to_bytes();
        prop_assert_eq!(Model::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn truncated_model_bytes_are_rejected(cut in 1usize..64) {
        let cfg = ModelConfig { c: 2, d: 1, n: 1, blocks: 1, num_classes: 2, input_size: (4, 4) };
        let bytes = Model::segmenter(cfg, 0).unwrap().to_bytes();
        prop_assert!(Model::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }
}

#[test]
fn sample_regeneration_ignores_dataset_size() {
    let small = DatasetConfig {
        counts: SplitCounts { train: 1, val: 1, test: 1 },
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let large = DatasetConfig {
        counts: SplitCounts { train: 9, val: 4, test: 2 },
        ..small.clone()
    };
    let a = synth::generate_sample(&small, 5, synth::Split::Test, 0).unwrap();
    let all = synth::generate_samples(&large).unwrap();
    let b = all.iter().find(|s| s.label == 5 && s.split == synth::Split::Test && s.index == 0).unwrap();
    assert_eq!(&a, b);
}
