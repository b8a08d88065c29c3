//! Recursive de-noising over a synthetic corpus with a noisy predictor.

use boxlabel_core::denoise::{recursive_harness, DenoiseConfig, HarnessItem, SyntheticPredictor};
use boxlabel_core::seed;
use boxlabel_core::synth::{generate, SceneBundle, SceneSpec};
use boxlabel_core::weaklabels::Method;
use boxlabel_core::WeakLabelConfig;

fn corpus(n: u64) -> Vec<SceneBundle> {
    (0..n)
        .map(|i| {
            let spec = SceneSpec {
                seed: seed::derive(&[3, i]),
                ..SceneSpec::default()
            };
            generate(&spec).unwrap()
        })
        .collect()
}

#[test]
fn noisy_rounds_do_not_regress() {
    let bundles = corpus(12);
    let items: Vec<HarnessItem> = bundles
        .iter()
        .map(|b| HarnessItem {
            image: &b.image,
            boxes: &b.boxes,
            boundary: Some(&b.boundary),
            proposals: Some(&b.proposals),
            gt: Some(&b.gt),
        })
        .collect();
    let predictor = SyntheticPredictor {
        gts: bundles.iter().map(|b| b.gt.clone()).collect(),
        noise: 0.3,
        n_labels: 21,
        seed: 11,
    };
    let states = recursive_harness(
        &items,
        Method::Box,
        &predictor,
        5,
        &WeakLabelConfig::default(),
        &DenoiseConfig::default(),
    )
    .unwrap();
    assert_eq!(states.len(), 6);
    let miou: Vec<f64> = states.iter().map(|s| s.stats.miou.unwrap()).collect();
    for (r, w) in miou.windows(2).enumerate() {
        assert!(
            w[1] >= w[0] - 0.01,
            "round {} mIoU {:.4} after {:.4}: {miou:?}",
            r + 1,
            w[1],
            w[0]
        );
    }
}

#[test]
fn harness_round_zero_is_the_generator_output() {
    let bundles = corpus(3);
    let items: Vec<HarnessItem> = bundles
        .iter()
        .map(|b| HarnessItem {
            image: &b.image,
            boxes: &b.boxes,
            boundary: None,
            proposals: None,
            gt: None,
        })
        .collect();
    let predictor = SyntheticPredictor {
        gts: bundles.iter().map(|b| b.gt.clone()).collect(),
        noise: 0.1,
        n_labels: 21,
        seed: 0,
    };
    let states = recursive_harness(
        &items,
        Method::BoxInner,
        &predictor,
        1,
        &WeakLabelConfig::default(),
        &DenoiseConfig::default(),
    )
    .unwrap();
    assert!(states.iter().all(|s| s.stats.miou.is_none()));
    let cfg = WeakLabelConfig::default();
    for (labels, b) in states[0].labels.iter().zip(&bundles) {
        let inner = boxlabel_core::weaklabels::rasterize_box_inner(&b.boxes, cfg.inner_region_frac);
        assert_eq!(*labels, inner);
    }
}
