//! Label clean-up between recursive rounds and the round loop itself.
//!
//! A round maps a prediction to the next training labels through box
//! enforcement, outlier reset and CRF filtering, followed by a second box
//! enforcement so the emitted labels never leave their boxes.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::densecrf::{labelmap_to_unaries, meanfield, CrfParams};
use crate::metrics::semantic_eval;
use crate::model::{BoundaryMap, BoxSet, Image, LabelMap, ProposalSet, Rect, WeakLabelConfig, BACKGROUND, IGNORE};
use crate::weaklabels::{generate, GenInputs, Method};
use crate::Result;

/// Which pixels of a box count as its segment when testing for outliers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SegmentRule {
    /// Every pixel of the box carrying the box class.
    #[default]
    AllPixels,
    /// The largest 4-connected component of those pixels.
    LargestComponent,
}

/// Keeps a pixel only if some box covering it has the pixel's class.
/// Ignore pixels survive inside boxes; everything outside the boxes becomes
/// background.
pub fn enforce_boxes(pred: &LabelMap, boxes: &BoxSet) -> Result<LabelMap> {
    let dims = boxes.dims();
    dims.check(pred.dims())?;
    let mut keep = vec![false; dims.len()];
    for b in boxes {
        for (x, y) in b.rect.pixels() {
            let i = y as usize * dims.width + x as usize;
            let l = pred.labels()[i];
            if l == b.class_id || l == IGNORE {
                keep[i] = true;
            }
        }
    }
    let mut out = pred.clone();
    for (l, k) in out.labels_mut().iter_mut().zip(keep) {
        if !k {
            *l = BACKGROUND;
        }
    }
    Ok(out)
}

fn largest_component(member: &[bool], rect: Rect) -> usize {
    let (w, h) = (rect.width() as usize, rect.height() as usize);
    let mut seen = vec![false; w * h];
    let mut best = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !member[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if member[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        best = best.max(size);
    }
    best
}

/// IoU between a box and its segment in `labels`.
pub fn segment_box_iou(labels: &LabelMap, b: &crate::model::BBox, rule: SegmentRule) -> f64 {
    let member: Vec<bool> = b
        .rect
        .pixels()
        .map(|(x, y)| labels.get(x as usize, y as usize) == b.class_id)
        .collect();
    let size = match rule {
        SegmentRule::AllPixels => member.iter().filter(|&&m| m).count(),
        SegmentRule::LargestComponent => largest_component(&member, b.rect),
    };
    // segment ⊆ box, so the union is the box
    size as f64 / b.area() as f64
}

/// Restores `initial` over every box whose segment IoU is below `thresh`.
///
/// Outliers are chosen on the labels as they stand before a pass, so the box
/// order does not matter. Passes repeat until no outlier box still differs
/// from `initial`; pixels only ever take `initial` values, so this terminates
/// and the result is a fixed point.
pub fn reset_outliers(
    cur: &LabelMap,
    boxes: &BoxSet,
    initial: &LabelMap,
    thresh: f64,
    rule: SegmentRule,
) -> Result<LabelMap> {
    let dims = boxes.dims();
    dims.check(cur.dims())?;
    dims.check(initial.dims())?;
    let mut out = cur.clone();
    loop {
        let outliers: Vec<_> = boxes
            .iter()
            .filter(|b| segment_box_iou(&out, b, rule) < thresh)
            .collect();
        let mut changed = false;
        for b in outliers {
            for (x, y) in b.rect.pixels() {
                let (x, y) = (x as usize, y as usize);
                let v = initial.get(x, y);
                if out.get(x, y) != v {
                    out.set(x, y, v);
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(out);
        }
    }
}

/// Dense CRF over hard labels; returns the argmax map.
pub fn crf_stage(labels: &LabelMap, image: &Image, params: &CrfParams, n_labels: usize) -> Result<LabelMap> {
    let unaries = labelmap_to_unaries(labels, n_labels, params.unary_confidence)?;
    Ok(meanfield(&unaries, image, params)?.labels)
}

/// Enabled post-processing stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub enforce: bool,
    pub reset: bool,
    pub crf: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        enforce: true,
        reset: true,
        crf: true,
    };

    /// Parses a comma-separated subset of `1,2,3`.
    pub fn parse(s: &str) -> Option<Stages> {
        let mut st = Stages {
            enforce: false,
            reset: false,
            crf: false,
        };
        for part in s.split(',') {
            match part.trim() {
                "1" => st.enforce = true,
                "2" => st.reset = true,
                "3" => st.crf = true,
                _ => return None,
            }
        }
        Some(st)
    }
}

impl Default for Stages {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DenoiseConfig {
    pub outlier_iou_thresh: f64,
    pub segment_rule: SegmentRule,
    pub crf: CrfParams,
    /// Background plus object classes.
    pub n_labels: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            outlier_iou_thresh: 0.5,
            segment_rule: SegmentRule::AllPixels,
            crf: CrfParams::default(),
            n_labels: 21,
        }
    }
}

impl DenoiseConfig {
    pub fn from_weak(cfg: &WeakLabelConfig, crf: CrfParams) -> Self {
        Self {
            outlier_iou_thresh: cfg.outlier_iou_thresh,
            segment_rule: SegmentRule::AllPixels,
            crf,
            n_labels: cfg.num_classes as usize + 1,
        }
    }
}

/// Applies the selected stages in their fixed order. Box enforcement is
/// repeated after the CRF when both are enabled.
pub fn run_stages(
    pred: &LabelMap,
    boxes: &BoxSet,
    initial: &LabelMap,
    image: &Image,
    stages: Stages,
    cfg: &DenoiseConfig,
) -> Result<LabelMap> {
    image.dims().check(pred.dims())?;
    let mut labels = pred.clone();
    if stages.enforce {
        labels = enforce_boxes(&labels, boxes)?;
    }
    if stages.reset {
        labels = reset_outliers(&labels, boxes, initial, cfg.outlier_iou_thresh, cfg.segment_rule)?;
    }
    if stages.crf {
        labels = crf_stage(&labels, image, &cfg.crf, cfg.n_labels)?;
        if stages.enforce {
            labels = enforce_boxes(&labels, boxes)?;
        }
    }
    Ok(labels)
}

pub fn run_round(
    pred: &LabelMap,
    boxes: &BoxSet,
    initial: &LabelMap,
    image: &Image,
    cfg: &DenoiseConfig,
) -> Result<LabelMap> {
    run_stages(pred, boxes, initial, image, Stages::ALL, cfg)
}

/// Stand-in for the network trained on the current labels.
pub trait Predictor {
    fn predict(&self, image_index: usize, image: &Image, labels: &LabelMap, round: usize) -> Result<LabelMap>;
}

/// Ground truth corrupted by seeded boundary shifts and label noise.
///
/// With probability `noise` a pixel on a class boundary takes a neighbouring
/// label (eroding or dilating the region), and independently any pixel takes
/// a uniformly random label.
#[derive(Debug, Clone)]
pub struct SyntheticPredictor {
    pub gts: Vec<LabelMap>,
    pub noise: f64,
    pub n_labels: usize,
    pub seed: u64,
}

impl Predictor for SyntheticPredictor {
    fn predict(&self, image_index: usize, image: &Image, _labels: &LabelMap, round: usize) -> Result<LabelMap> {
        let gt = &self.gts[image_index];
        image.dims().check(gt.dims())?;
        if self.noise <= 0.0 {
            return Ok(gt.clone());
        }
        let mut rng = crate::seed::rng(&[self.seed, image_index as u64, round as u64]);
        let (w, h) = (gt.width(), gt.height());
        let mut out = gt.clone();
        for y in 0..h {
            for x in 0..w {
                let here = gt.get(x, y);
                let mut neighbours = [None; 4];
                if x > 0 {
                    neighbours[0] = Some(gt.get(x - 1, y));
                }
                if x + 1 < w {
                    neighbours[1] = Some(gt.get(x + 1, y));
                }
                if y > 0 {
                    neighbours[2] = Some(gt.get(x, y - 1));
                }
                if y + 1 < h {
                    neighbours[3] = Some(gt.get(x, y + 1));
                }
                let shift = rng.random_bool(self.noise);
                let pick = rng.random_range(0..4usize);
                if shift {
                    let other = (0..4)
                        .map(|k| neighbours[(pick + k) % 4])
                        .find_map(|n| n.filter(|&l| l != here));
                    if let Some(l) = other {
                        out.set(x, y, l);
                    }
                }
                if rng.random_bool(self.noise) {
                    out.set(x, y, rng.random_range(0..self.n_labels) as u8);
                }
            }
        }
        Ok(out)
    }
}

/// One image of a recursive run.
#[derive(Debug, Clone, Copy)]
pub struct HarnessItem<'a> {
    pub image: &'a Image,
    pub boxes: &'a BoxSet,
    pub boundary: Option<&'a BoundaryMap>,
    pub proposals: Option<&'a ProposalSet>,
    pub gt: Option<&'a LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RoundStats {
    /// Fraction of pixels whose label differs from the previous round.
    pub changed_pixel_fraction: f64,
    pub class_counts: BTreeMap<u8, u64>,
    /// Against ground truth, when every item carries it.
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round_index: usize,
    pub labels: Vec<LabelMap>,
    pub stats: RoundStats,
}

pub fn round_stats(
    labels: &[LabelMap],
    previous: Option<&[LabelMap]>,
    gts: Option<&[LabelMap]>,
    num_classes: u8,
) -> Result<RoundStats> {
    let mut class_counts = BTreeMap::new();
    let mut total = 0u64;
    for m in labels {
        for &l in m.labels() {
            *class_counts.entry(l).or_insert(0) += 1;
        }
        total += m.labels().len() as u64;
    }
    let changed = previous.map_or(0, |prev| {
        prev.iter()
            .zip(labels)
            .map(|(a, b)| a.labels().iter().zip(b.labels()).filter(|(x, y)| x != y).count() as u64)
            .sum::<u64>()
    });
    let miou = match gts {
        Some(g) => Some(semantic_eval(labels, g, num_classes)?.miou),
        None => None,
    };
    Ok(RoundStats {
        changed_pixel_fraction: if total == 0 { 0.0 } else { changed as f64 / total as f64 },
        class_counts,
        miou,
    })
}

/// Round 0 is `init_method`'s output; round `r` post-processes the predictor's
/// output on round `r - 1` labels. Returns `rounds + 1` states.
pub fn recursive_harness(
    items: &[HarnessItem<'_>],
    init_method: Method,
    predictor: &dyn Predictor,
    rounds: usize,
    weak: &WeakLabelConfig,
    cfg: &DenoiseConfig,
) -> Result<Vec<RoundState>> {
    if rounds == 0 {
        return Err(crate::Error::InvalidConfig("at least one round is required"));
    }
    let gts: Option<Vec<LabelMap>> = items.iter().map(|it| it.gt.cloned()).collect();
    let num_classes = weak.num_classes;
    let initial = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let cfg = WeakLabelConfig {
                rng_seed: crate::seed::derive(&[weak.rng_seed, i as u64]),
                ..weak.clone()
            };
            let inputs = GenInputs {
                image: it.image,
                boxes: it.boxes,
                boundary: it.boundary,
                proposals: it.proposals,
            };
            generate(init_method, inputs, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states = vec![RoundState {
        round_index: 0,
        stats: round_stats(&initial, None, gts.as_deref(), num_classes)?,
        labels: initial.clone(),
    }];
    for r in 1..=rounds {
        let prev = &states[r - 1].labels;
        let labels = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let pred = predictor.predict(i, it.image, &prev[i], r)?;
                run_round(&pred, it.boxes, &initial[i], it.image, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = round_stats(&labels, Some(prev), gts.as_deref(), num_classes)?;
        states.push(RoundState {
            round_index: r,
            labels,
            stats,
        });
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Dims};
    use crate::weaklabels::rasterize_box_labels;
    use proptest::prelude::*;

    fn map(w: usize, rows: &[&[u8]]) -> LabelMap {
        LabelMap::new(w, rows.len(), rows.concat()).unwrap()
    }

    #[test]
    fn enforce_cases() {
        let d = Dims::new(8, 8);
        let boxes = BoxSet::new(vec![BBox::new(7, 0, 0, 4, 4)], d).unwrap();
        let mut pred = LabelMap::background(d);
        for (x, y) in Rect::new(5, 5, 8, 8).pixels() {
            pred.set(x as usize, y as usize, 5);
        }
        assert_eq!(enforce_boxes(&pred, &boxes).unwrap(), LabelMap::background(d));

        let inside = rasterize_box_labels(&boxes);
        assert_eq!(enforce_boxes(&inside, &boxes).unwrap(), inside);

        let mut wrong = inside.clone();
        wrong.set(1, 1, 3);
        wrong.set(2, 2, 3);
        let out = enforce_boxes(&wrong, &boxes).unwrap();
        assert_eq!(out.get(1, 1), 0);
        assert_eq!(out.get(0, 0), 7);
    }

    #[test]
    fn reset_threshold_is_strict() {
        let d = Dims::new(10, 1);
        let boxes = BoxSet::new(vec![BBox::new(1, 0, 0, 10, 1)], d).unwrap();
        let initial = rasterize_box_labels(&boxes);
        let half = map(10, &[&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]]);
        assert_eq!(
            reset_outliers(&half, &boxes, &initial, 0.5, SegmentRule::AllPixels).unwrap(),
            half
        );
        let forty = map(10, &[&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]]);
        assert_eq!(
            reset_outliers(&forty, &boxes, &initial, 0.5, SegmentRule::AllPixels).unwrap(),
            initial
        );
        assert_eq!(
            reset_outliers(&initial, &boxes, &initial, 0.5, SegmentRule::AllPixels).unwrap(),
            initial
        );
    }

    #[test]
    fn largest_component_rule() {
        let d = Dims::new(10, 1);
        let boxes = BoxSet::new(vec![BBox::new(1, 0, 0, 10, 1)], d).unwrap();
        let split = map(10, &[&[1, 1, 1, 0, 1, 1, 1, 0, 0, 0]]);
        assert_eq!(segment_box_iou(&split, &boxes.boxes()[0], SegmentRule::AllPixels), 0.6);
        assert_eq!(
            segment_box_iou(&split, &boxes.boxes()[0], SegmentRule::LargestComponent),
            0.3
        );
    }

    #[test]
    fn stage_parsing() {
        assert_eq!(Stages::parse("1,2,3"), Some(Stages::ALL));
        assert_eq!(
            Stages::parse("1"),
            Some(Stages {
                enforce: true,
                reset: false,
                crf: false
            })
        );
        assert_eq!(Stages::parse("4"), None);
        assert_eq!(Stages::parse(""), None);
    }

    #[test]
    fn all_background_prediction_restores_initial() {
        let d = Dims::new(12, 12);
        let boxes = BoxSet::new(vec![BBox::new(2, 1, 1, 8, 8), BBox::new(3, 5, 5, 11, 11)], d).unwrap();
        let initial = rasterize_box_labels(&boxes);
        let image = Image::filled(12, 12, [90, 90, 90]);
        let stages = Stages {
            crf: false,
            ..Stages::ALL
        };
        let out = run_stages(
            &LabelMap::background(d),
            &boxes,
            &initial,
            &image,
            stages,
            &DenoiseConfig::default(),
        )
        .unwrap();
        assert_eq!(out, initial);
    }

    #[test]
    fn outliers_are_chosen_before_any_reset() {
        // resetting the first box alone would lift the second above threshold
        let d = Dims::new(12, 10);
        let boxes = BoxSet::new(vec![BBox::new(2, 0, 0, 10, 10), BBox::new(2, 5, 0, 12, 10)], d).unwrap();
        let initial = rasterize_box_labels(&boxes);
        let out = reset_outliers(&LabelMap::background(d), &boxes, &initial, 0.5, SegmentRule::AllPixels).unwrap();
        assert_eq!(out, initial);
    }

    fn arb_scene() -> impl Strategy<Value = (BoxSet, LabelMap, LabelMap)> {
        let d = Dims::new(12, 12);
        (
            prop::collection::vec((1u8..4, 0i32..11, 0i32..11, 1i32..8, 1i32..8), 0..4),
            prop::collection::vec(0u8..4, 144),
            prop::collection::vec(0u8..4, 144),
        )
            .prop_map(move |(b, cur, init)| {
                let boxes = b
                    .into_iter()
                    .map(|(c, x, y, w, h)| BBox::new(c, x, y, (x + w).min(12), (y + h).min(12)))
                    .collect();
                let boxes = BoxSet::new(boxes, d).unwrap();
                let initial = enforce_boxes(&LabelMap::new(12, 12, init).unwrap(), &boxes).unwrap();
                let cur = enforce_boxes(&LabelMap::new(12, 12, cur).unwrap(), &boxes).unwrap();
                (boxes, cur, initial)
            })
    }

    proptest! {
        #[test]
        fn reset_is_idempotent((boxes, cur, initial) in arb_scene(), cc in any::<bool>()) {
            let rule = if cc { SegmentRule::LargestComponent } else { SegmentRule::AllPixels };
            let once = reset_outliers(&cur, &boxes, &initial, 0.5, rule).unwrap();
            let twice = reset_outliers(&once, &boxes, &initial, 0.5, rule).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn enforce_is_idempotent((boxes, cur, _i) in arb_scene()) {
            let again = enforce_boxes(&cur, &boxes).unwrap();
            prop_assert_eq!(again, cur);
        }
    }

    #[test]
    fn noise_free_predictor_returns_gt() {
        let gt = map(3, &[&[0, 1, 1], &[0, 0, 1]]);
        let p = SyntheticPredictor {
            gts: vec![gt.clone()],
            noise: 0.0,
            n_labels: 21,
            seed: 4,
        };
        let image = Image::filled(3, 2, [0, 0, 0]);
        assert_eq!(p.predict(0, &image, &gt, 1).unwrap(), gt);
        let noisy = SyntheticPredictor { noise: 0.5, ..p };
        let a = noisy.predict(0, &image, &gt, 1).unwrap();
        assert_eq!(a, noisy.predict(0, &image, &gt, 1).unwrap());
    }
}
