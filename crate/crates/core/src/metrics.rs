//! Label quality metrics.
//!
//! Semantic: confusion-matrix IoU per class and its mean over classes that
//! occur in the ground truth or the prediction. Ground-truth ignore pixels are
//! not scored; predicted ignore pixels count as misses of the true class.
//!
//! Instance: class-aware mask AP with all-point interpolation, and average best
//! overlap.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{DetectionSet, LabelMap, SegmentMask, IGNORE};
use crate::{Error, Result};

/// `|a ∩ b| / |a ∪ b|`.
pub fn mask_iou(a: &SegmentMask, b: &SegmentMask) -> Result<f64> {
    a.dims().check(b.dims())?;
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

/// Mask IoU as `intersection / union` counts; two empty masks score `0/1`.
fn overlap_ratio(a: &SegmentMask, b: &SegmentMask) -> Result<Ratio> {
    a.dims().check(b.dims())?;
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 {
        Ratio::new(0, 1)
    } else {
        Ratio::new(inter as u128, union as u128)
    })
}

/// Mask IoU with two empty masks scored as no overlap.
fn overlap(a: &SegmentMask, b: &SegmentMask) -> Result<f64> {
    match mask_iou(a, b) {
        Err(Error::BothEmpty) => Ok(0.0),
        r => r,
    }
}

/// Pixel confusion counts; rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    n: usize,
    counts: Vec<u64>,
    /// Scored pixels predicted as ignore, per ground-truth class.
    unlabelled: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: u8) -> Self {
        let n = num_classes as usize + 1;
        Self {
            n,
            counts: vec![0; n * n],
            unlabelled: vec![0; n],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        gt.dims().check(pred.dims())?;
        let max = (self.n - 1) as u8;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE {
                continue;
            }
            if g > max {
                return Err(Error::InvalidLabel { value: g, max });
            }
            if p == IGNORE {
                self.unlabelled[g as usize] += 1;
            } else if p > max {
                return Err(Error::InvalidLabel { value: p, max });
            } else {
                self.counts[g as usize * self.n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.n, other.n, "class counts differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unlabelled.iter_mut().zip(&other.unlabelled) {
            *a += b;
        }
    }

    pub fn get(&self, gt: u8, pred: u8) -> u64 {
        self.counts[gt as usize * self.n + pred as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unlabelled.iter().sum::<u64>()
    }

    pub fn report(&self) -> Result<SemanticReport> {
        if self.total() == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = self.n;
        let fractions: Vec<Option<(u64, u64)>> = (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let row: u64 = self.counts[c * n..(c + 1) * n].iter().sum::<u64>() + self.unlabelled[c];
                let col: u64 = (0..n).map(|r| self.counts[r * n + c]).sum();
                let denom = row + col - tp;
                (denom > 0).then_some((tp, denom))
            })
            .collect();
        let per_class_iou: Vec<Option<f64>> = fractions
            .iter()
            .map(|f| f.map(|(tp, d)| tp as f64 / d as f64))
            .collect();
        let defined: Vec<Ratio> = fractions
            .iter()
            .flatten()
            .map(|&(tp, d)| Ratio::new(tp as u128, d as u128))
            .collect();
        let miou = exact_mean(&defined)
            .and_then(Ratio::to_f64)
            .unwrap_or_else(|| mean_f64(&per_class_iou.iter().flatten().copied().collect::<Vec<_>>()));
        Ok(SemanticReport {
            confusion: self.counts.chunks(n).map(<[u64]>::to_vec).collect(),
            unlabelled: self.unlabelled.clone(),
            per_class_iou,
            miou,
        })
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Non-negative fraction in lowest terms; arithmetic yields `None` on overflow.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    fn checked_add(self, o: Ratio) -> Option<Ratio> {
        let g = gcd(self.den, o.den);
        let lcm = self.den.checked_mul(o.den / g)?;
        let num = self
            .num
            .checked_mul(lcm / self.den)?
            .checked_add(o.num.checked_mul(lcm / o.den)?)?;
        Some(Ratio::new(num, lcm))
    }

    fn checked_div(self, k: u128) -> Option<Ratio> {
        Some(Ratio::new(self.num, self.den.checked_mul(k)?))
    }

    fn gt(self, o: Ratio) -> bool {
        // cross products of counts below 2^64 fit in u128
        self.num * o.den > o.num * self.den
    }

    /// Correctly rounded when both parts fit in 53 bits.
    fn to_f64(self) -> Option<f64> {
        (self.num < 1 << 53 && self.den < 1 << 53).then(|| self.num as f64 / self.den as f64)
    }
}

/// Mean of the fractions, exact until the final rounding; `None` on overflow.
fn exact_mean(fractions: &[Ratio]) -> Option<Ratio> {
    let mut sum = Ratio::new(0, 1);
    for &f in fractions {
        sum = sum.checked_add(f)?;
    }
    sum.checked_div(fractions.len() as u128)
}

fn mean_f64(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SemanticReport {
    pub confusion: Vec<Vec<u64>>,
    pub unlabelled: Vec<u64>,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn semantic_eval(preds: &[LabelMap], gts: &[LabelMap], num_classes: u8) -> Result<SemanticReport> {
    if preds.len() != gts.len() {
        return Err(Error::CountMismatch {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    let mut conf = Confusion::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        conf.add(p, g)?;
    }
    conf.report()
}

/// A ground-truth object instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtInstance {
    pub class_id: u8,
    pub mask: SegmentMask,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ApReport {
    pub iou_thresh: f64,
    /// AP of every class with at least one ground-truth instance.
    pub per_class: BTreeMap<u8, f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct InstanceReport {
    pub ap: Vec<ApReport>,
    pub abo: f64,
}

fn check_images(dets: &[DetectionSet], gts: &[Vec<GtInstance>]) -> Result<()> {
    if dets.len() != gts.len() {
        return Err(Error::CountMismatch {
            expected: gts.len(),
            got: dets.len(),
        });
    }
    if gts.iter().all(Vec::is_empty) {
        return Err(Error::EmptyDataset);
    }
    for d in dets {
        if let Some(i) = d.detections().iter().position(|d| d.mask.is_none()) {
            return Err(Error::MissingMask(i));
        }
    }
    Ok(())
}

fn gt_classes(gts: &[Vec<GtInstance>]) -> Vec<u8> {
    let mut classes: Vec<u8> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Area under the precision/recall curve with precision made monotone
/// non-increasing in recall.
pub fn all_point_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Class-aware mask AP at one IoU threshold. Detections are visited by
/// descending score and each claims the best-overlapping unclaimed instance of
/// its class in its image.
pub fn instance_ap(dets: &[DetectionSet], gts: &[Vec<GtInstance>], iou_thresh: f64) -> Result<ApReport> {
    check_images(dets, gts)?;
    let mut per_class = BTreeMap::new();
    for class in gt_classes(gts) {
        let mut order: Vec<(f64, usize, usize)> = Vec::new();
        for (img, set) in dets.iter().enumerate() {
            for (k, d) in set.detections().iter().enumerate() {
                if d.class_id == class {
                    order.push((d.score, img, k));
                }
            }
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::with_capacity(order.len());
        for &(_, img, k) in &order {
            let mask = dets[img].detections()[k].mask.as_ref().expect("checked");
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[img].iter().enumerate() {
                if g.class_id != class || claimed[img][gi] {
                    continue;
                }
                let iou = overlap(mask, &g.mask)?;
                if best.is_none_or(|b| iou > b.1) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, iou)) if iou >= iou_thresh => {
                    claimed[img][gi] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
        per_class.insert(class, all_point_ap(&tp, n_gt));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ApReport {
        iou_thresh,
        per_class,
        map,
    })
}

/// Average best overlap: per class, the mean over instances of the best IoU of
/// any same-class detection in the same image; then the mean over classes.
/// Means are taken over exact pixel-count fractions and rounded once.
pub fn abo(dets: &[DetectionSet], gts: &[Vec<GtInstance>]) -> Result<f64> {
    check_images(dets, gts)?;
    let mut class_means = Vec::new();
    let mut class_means_f64 = Vec::new();
    for class in gt_classes(gts) {
        let mut bests = Vec::new();
        for (set, inst) in dets.iter().zip(gts) {
            for g in inst.iter().filter(|g| g.class_id == class) {
                let mut best = Ratio::new(0, 1);
                for d in set.detections().iter().filter(|d| d.class_id == class) {
                    let r = overlap_ratio(d.mask.as_ref().expect("checked"), &g.mask)?;
                    if r.gt(best) {
                        best = r;
                    }
                }
                bests.push(best);
            }
        }
        class_means_f64.push(mean_f64(
            &bests.iter().map(|r| r.num as f64 / r.den as f64).collect::<Vec<_>>(),
        ));
        class_means.push(exact_mean(&bests));
    }
    let exact: Option<Vec<Ratio>> = class_means.into_iter().collect();
    Ok(exact
        .and_then(|m| exact_mean(&m))
        .and_then(Ratio::to_f64)
        .unwrap_or_else(|| mean_f64(&class_means_f64)))
}

pub fn instance_eval(dets: &[DetectionSet], gts: &[Vec<GtInstance>], thresholds: &[f64]) -> Result<InstanceReport> {
    let ap = thresholds
        .iter()
        .map(|&t| instance_ap(dets, gts, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(InstanceReport {
        ap,
        abo: abo(dets, gts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Detection, Dims, Rect};
    use proptest::prelude::*;

    const D: Dims = Dims::new(10, 10);

    fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> SegmentMask {
        SegmentMask::from_rect(D, Rect::new(x0, y0, x1, y1))
    }

    fn det(class_id: u8, score: f64, mask: SegmentMask) -> Detection {
        Detection {
            class_id,
            bbox: BBox::new(class_id, 0, 0, 1, 1),
            score,
            mask: Some(mask),
        }
    }

    #[test]
    fn mask_iou_cases() {
        let a = rect(0, 0, 5, 2);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &rect(5, 5, 7, 7)).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &rect(0, 0, 5, 1)).unwrap(), 0.5);
        let e = SegmentMask::empty(D);
        assert_eq!(mask_iou(&e, &e), Err(Error::BothEmpty));
    }

    #[test]
    fn semantic_toy() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let pred = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let r = semantic_eval(&[pred], core::slice::from_ref(&gt), 1).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(r.miou, 7.0 / 12.0);

        let r = semantic_eval(core::slice::from_ref(&gt), core::slice::from_ref(&gt), 20).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class_iou.iter().flatten().count(), 2);

        let ign = LabelMap::filled(Dims::new(2, 2), IGNORE);
        let any = LabelMap::background(Dims::new(2, 2));
        assert_eq!(semantic_eval(&[any], &[ign], 20), Err(Error::EmptyDataset));
        assert_eq!(semantic_eval(&[], &[], 20), Err(Error::EmptyDataset));
    }

    #[test]
    fn predicted_ignore_is_a_miss() {
        let gt = LabelMap::new(2, 1, vec![1, 1]).unwrap();
        let pred = LabelMap::new(2, 1, vec![1, IGNORE]).unwrap();
        let r = semantic_eval(&[pred], &[gt], 1).unwrap();
        assert_eq!(r.per_class_iou, vec![None, Some(0.5)]);
    }

    #[test]
    fn ap_toy_cases() {
        let gt = vec![vec![GtInstance {
            class_id: 1,
            mask: rect(0, 0, 10, 1),
        }]];
        let one = vec![DetectionSet::new(vec![det(1, 0.9, rect(0, 0, 9, 1))]).unwrap()];
        assert_eq!(instance_ap(&one, &gt, 0.5).unwrap().map, 1.0);

        // IoU 0.3 at score 0.9, IoU 0.7 at score 0.8
        let two = vec![DetectionSet::new(vec![det(1, 0.9, rect(0, 0, 3, 1)), det(1, 0.8, rect(0, 0, 7, 1))]).unwrap()];
        assert_eq!(instance_ap(&two, &gt, 0.5).unwrap().map, 0.5);
        assert_eq!(instance_ap(&two, &gt, 0.75).unwrap().map, 0.0);
        assert_eq!(abo(&two, &gt).unwrap(), 0.7);

        let none = vec![DetectionSet::default()];
        assert_eq!(instance_ap(&none, &gt, 0.5).unwrap().map, 0.0);
        assert_eq!(abo(&none, &gt).unwrap(), 0.0);

        let missing = vec![DetectionSet::new(vec![Detection {
            mask: None,
            ..det(1, 0.5, rect(0, 0, 1, 1))
        }])
        .unwrap()];
        assert_eq!(instance_ap(&missing, &gt, 0.5), Err(Error::MissingMask(0)));
    }

    #[test]
    fn abo_arithmetic() {
        let gt = vec![vec![
            GtInstance {
                class_id: 2,
                mask: rect(0, 0, 10, 1),
            },
            GtInstance {
                class_id: 2,
                mask: rect(0, 5, 10, 6),
            },
        ]];
        let dets = vec![DetectionSet::new(vec![det(2, 0.5, rect(0, 0, 8, 1)), det(2, 0.4, rect(0, 5, 4, 6))]).unwrap()];
        assert_eq!(abo(&dets, &gt).unwrap(), 0.6);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<GtInstance>>, Vec<DetectionSet>)> {
        let inst = (1u8..3, 0i32..8, 0i32..8, 1i32..4, 1i32..4)
            .prop_map(|(c, x, y, w, h)| (c, rect(x, y, (x + w).min(10), (y + h).min(10))));
        (
            prop::collection::vec(prop::collection::vec(inst.clone(), 1..4), 1..3),
            prop::collection::vec(prop::collection::vec((inst, 0u32..100), 0..5), 1..3),
        )
            .prop_map(|(g, d)| {
                let n = g.len().min(d.len());
                let gts = g[..n]
                    .iter()
                    .map(|v| {
                        v.iter()
                            .map(|(c, m)| GtInstance {
                                class_id: *c,
                                mask: m.clone(),
                            })
                            .collect()
                    })
                    .collect();
                let dets = d[..n]
                    .iter()
                    .map(|v| {
                        DetectionSet::new(v.iter().map(|((c, m), s)| det(*c, *s as f64, m.clone())).collect()).unwrap()
                    })
                    .collect();
                (gts, dets)
            })
    }

    proptest! {
        #[test]
        fn ap_monotone_in_threshold((gts, dets) in arb_case()) {
            let mut prev = f64::INFINITY;
            for t in [0.1, 0.3, 0.5, 0.75, 0.9] {
                let m = instance_ap(&dets, &gts, t).unwrap().map;
                prop_assert!((0.0..=1.0).contains(&m));
                prop_assert!(m <= prev + 1e-12);
                prev = m;
            }
        }

        #[test]
        fn abo_never_drops_with_more_detections((gts, dets) in arb_case(), extra in (1u8..3, 0i32..9, 0i32..9)) {
            let before = abo(&dets, &gts).unwrap();
            let mut more = dets.clone();
            let mut v = more[0].detections().to_vec();
            v.push(det(extra.0, 0.5, rect(extra.1, extra.2, extra.1 + 1, extra.2 + 1)));
            more[0] = DetectionSet::new(v).unwrap();
            prop_assert!(abo(&more, &gts).unwrap() >= before);
        }

        #[test]
        fn semantic_permutation_invariant(labels in prop::collection::vec((0u8..3, 0u8..3), 16)) {
            let gt = LabelMap::new(4, 4, labels.iter().map(|p| p.0).collect()).unwrap();
            let pred = LabelMap::new(4, 4, labels.iter().map(|p| p.1).collect()).unwrap();
            let perm = |m: &LabelMap| LabelMap::new(4, 4, m.labels().iter().map(|&l| [2u8, 0, 1][l as usize]).collect()).unwrap();
            let a = semantic_eval(core::slice::from_ref(&pred), core::slice::from_ref(&gt), 2).unwrap();
            let b = semantic_eval(&[perm(&pred)], &[perm(&gt)], 2).unwrap();
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
            for c in 0..3 {
                prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[[2usize, 0, 1][c]]);
            }
        }
    }
}
