//! Label synthesis from boxes.
//!
//! Generators produce one segment per box (a binary mask or a ternary
//! FG/BG/ignore segment) and [`compose_labelmap`] paints them back-to-front
//! onto an all-background canvas, so pixels outside every box are background
//! and smaller boxes win where boxes overlap.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::grabcut::{run_grabcut, GrabCutParams};
use crate::model::{
    BBox, BoundaryMap, BoxSet, Dims, Image, LabelMap, ProposalSet, Rect, SegmentMask, WeakLabelConfig, IGNORE,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TriState {
    Fg,
    Bg,
    Ignore,
}

/// Ternary labelling of the pixels of one box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriSegment {
    pub box_index: usize,
    pub rect: Rect,
    /// Box-local, row-major.
    pub states: Vec<TriState>,
}

impl TriSegment {
    pub fn filled(box_index: usize, rect: Rect, state: TriState) -> Self {
        Self {
            box_index,
            rect,
            states: vec![state; rect.area() as usize],
        }
    }

    /// FG where `mask` is set inside `rect`, BG elsewhere in `rect`.
    pub fn from_mask(box_index: usize, rect: Rect, mask: &SegmentMask) -> Self {
        let states = rect
            .pixels()
            .map(|(x, y)| {
                if mask.get(x as usize, y as usize) {
                    TriState::Fg
                } else {
                    TriState::Bg
                }
            })
            .collect();
        Self {
            box_index,
            rect,
            states,
        }
    }

    /// State at image coordinates, `None` outside the box.
    pub fn get(&self, x: i32, y: i32) -> Option<TriState> {
        if !self.rect.contains(x, y) {
            return None;
        }
        let w = self.rect.width();
        Some(self.states[((y - self.rect.y0) * w + (x - self.rect.x0)) as usize])
    }

    pub fn count(&self, state: TriState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    /// Image coordinates with their states.
    pub fn iter(&self) -> impl Iterator<Item = ((i32, i32), TriState)> + '_ {
        self.rect.pixels().zip(self.states.iter().copied())
    }
}

/// Per-box output of a generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Tri(TriSegment),
    Mask(SegmentMask),
}

/// Paints one segment per box, back to front: FG takes the box class,
/// IGNORE becomes 255 and BG leaves the canvas untouched.
pub fn compose_labelmap(segments: &[Segment], boxes: &BoxSet) -> Result<LabelMap> {
    if segments.len() != boxes.len() {
        return Err(Error::CountMismatch {
            expected: boxes.len(),
            got: segments.len(),
        });
    }
    let dims = boxes.dims();
    let mut map = LabelMap::background(dims);
    for (seg, b) in segments.iter().zip(boxes) {
        match seg {
            Segment::Tri(t) => {
                for ((x, y), s) in t.iter() {
                    if x < 0 || y < 0 || x as usize >= dims.width || y as usize >= dims.height {
                        continue;
                    }
                    match s {
                        TriState::Fg => map.set(x as usize, y as usize, b.class_id),
                        TriState::Ignore => map.set(x as usize, y as usize, IGNORE),
                        TriState::Bg => {}
                    }
                }
            }
            Segment::Mask(m) => {
                dims.check(m.dims())?;
                for (l, &f) in map.labels_mut().iter_mut().zip(m.bits()) {
                    if f {
                        *l = b.class_id;
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Filled boxes, smaller boxes in front.
pub fn rasterize_box_labels(boxes: &BoxSet) -> LabelMap {
    let segments: Vec<Segment> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Segment::Tri(TriSegment::filled(i, b.rect, TriState::Fg)))
        .collect();
    compose_labelmap(&segments, boxes).expect("one segment per box")
}

/// Centred rectangle with (close to) the box aspect ratio and `frac` of its area.
///
/// Integer sides are picked among the roundings of `sqrt(frac) * side` (+-1) to
/// minimise the area error, then the aspect-ratio error.
pub fn inner_rect(rect: Rect, frac: f64) -> Rect {
    let (w, h) = (rect.width() as i64, rect.height() as i64);
    let s = libm::sqrt(frac);
    let target = frac * (w * h) as f64;
    let (iw0, ih0) = (s * w as f64, s * h as f64);
    let range = |ideal: f64, max: i64| {
        let lo = (libm::floor(ideal) as i64 - 1).max(1);
        let hi = (libm::ceil(ideal) as i64 + 1).min(max);
        lo..=hi.max(lo)
    };
    let aspect = w as f64 / h as f64;
    let mut best = (f64::INFINITY, f64::INFINITY, 1i64, 1i64);
    for iw in range(iw0, w) {
        for ih in range(ih0, h) {
            let area_err = ((iw * ih) as f64 - target).abs();
            let aspect_err = (iw as f64 / ih as f64 - aspect).abs();
            if (area_err, aspect_err) < (best.0, best.1) {
                best = (area_err, aspect_err, iw, ih);
            }
        }
    }
    let (iw, ih) = (best.2 as i32, best.3 as i32);
    let x0 = rect.x0 + (rect.width() - iw) / 2;
    let y0 = rect.y0 + (rect.height() - ih) / 2;
    Rect::new(x0, y0, x0 + iw, y0 + ih)
}

/// Inner-region segment: the centred `inner_frac` of the box is FG, the rest of
/// the box is ignore.
pub fn inner_segment(box_index: usize, rect: Rect, inner_frac: f64) -> TriSegment {
    let inner = inner_rect(rect, inner_frac);
    let states = rect
        .pixels()
        .map(|(x, y)| {
            if inner.contains(x, y) {
                TriState::Fg
            } else {
                TriState::Ignore
            }
        })
        .collect();
    TriSegment {
        box_index,
        rect,
        states,
    }
}

pub fn rasterize_box_inner(boxes: &BoxSet, inner_frac: f64) -> LabelMap {
    let segments: Vec<Segment> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Segment::Tri(inner_segment(i, b.rect, inner_frac)))
        .collect();
    compose_labelmap(&segments, boxes).expect("one segment per box")
}

/// Maps a foreground vote fraction to a state: `>= fg` is FG, `< bg` is BG.
pub fn classify_vote(fraction: f64, cfg: &WeakLabelConfig) -> TriState {
    if fraction >= cfg.vote_fg_thresh {
        TriState::Fg
    } else if fraction < cfg.vote_bg_thresh {
        TriState::Bg
    } else {
        TriState::Ignore
    }
}

/// One perturbed GrabCut+ run of the voting ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub bbox: BBox,
    pub margin: f64,
    pub seed: u64,
}

/// Jitters each coordinate by `U(-j, j)` times the box side and draws a context
/// margin in `[margin_min, margin_max]`. Collapsed boxes are re-clipped to one pixel.
pub fn perturbation(bbox: &BBox, box_index: usize, k: usize, cfg: &WeakLabelConfig, dims: Dims) -> Perturbation {
    let mut rng = crate::seed::rng(&[cfg.rng_seed, box_index as u64, k as u64]);
    let j = cfg.jitter_frac;
    let r = bbox.rect;
    let (w, h) = (r.width() as f64, r.height() as f64);
    let mut shift = |side: f64| -> i32 {
        if j > 0.0 {
            libm::round(rng.random_range(-j..=j) * side) as i32
        } else {
            0
        }
    };
    let (dx0, dy0, dx1, dy1) = (shift(w), shift(h), shift(w), shift(h));
    let fix = |lo: i32, hi: i32, max: i32| -> (i32, i32) {
        let lo = lo.clamp(0, max);
        let hi = hi.clamp(0, max);
        if hi > lo {
            (lo, hi)
        } else if lo < max {
            (lo, lo + 1)
        } else {
            (max - 1, max)
        }
    };
    let (x0, x1) = fix(r.x0 + dx0, r.x1 + dx1, dims.width as i32);
    let (y0, y1) = fix(r.y0 + dy0, r.y1 + dy1, dims.height as i32);
    let margin = if cfg.margin_max > cfg.margin_min {
        rng.random_range(cfg.margin_min..=cfg.margin_max)
    } else {
        cfg.margin_min
    };
    Perturbation {
        bbox: BBox::new(bbox.class_id, x0, y0, x1, y1),
        margin,
        seed: crate::seed::derive(&[cfg.rng_seed, box_index as u64, k as u64, 1]),
    }
}

/// Converts per-pixel foreground vote counts over the box into a ternary segment.
pub fn tally_votes(box_index: usize, rect: Rect, votes: &[u32], n_runs: usize, cfg: &WeakLabelConfig) -> TriSegment {
    let states = votes
        .iter()
        .map(|&v| classify_vote(v as f64 / n_runs as f64, cfg))
        .collect();
    TriSegment {
        box_index,
        rect,
        states,
    }
}

/// Counts, for each pixel of `rect`, how many masks mark it foreground.
pub fn count_votes<'a>(rect: Rect, masks: impl IntoIterator<Item = &'a SegmentMask>) -> Vec<u32> {
    let mut votes = vec![0u32; rect.area() as usize];
    for m in masks {
        for (v, (x, y)) in votes.iter_mut().zip(rect.pixels()) {
            if m.get(x as usize, y as usize) {
                *v += 1;
            }
        }
    }
    votes
}

/// GrabCut+ voting over `cfg.n_perturbations` jittered runs.
pub fn grabcut_plus_i(
    image: &Image,
    bbox: &BBox,
    box_index: usize,
    cfg: &WeakLabelConfig,
    params: &GrabCutParams,
    boundary: Option<&BoundaryMap>,
) -> Result<TriSegment> {
    let dims = image.dims();
    if crate::model::clip_box(bbox, dims)? != *bbox {
        let r = bbox.rect;
        return Err(Error::DegenerateBox {
            xmin: r.x0 as i64,
            ymin: r.y0 as i64,
            xmax: r.x1 as i64,
            ymax: r.y1 as i64,
        });
    }
    let mut votes = vec![0u32; bbox.area() as usize];
    for k in 0..cfg.n_perturbations {
        let p = perturbation(bbox, box_index, k, cfg, dims);
        let run_params = GrabCutParams {
            margin: p.margin,
            ..params.clone()
        };
        let mask = run_grabcut(image, &p.bbox, &run_params, boundary, p.seed)?;
        for (v, (x, y)) in votes.iter_mut().zip(bbox.rect.pixels()) {
            if mask.get(x as usize, y as usize) {
                *v += 1;
            }
        }
    }
    Ok(tally_votes(box_index, bbox.rect, &votes, cfg.n_perturbations, cfg))
}

/// Index of the proposal whose tight bounding box best overlaps `bbox`.
/// Ties keep the lowest index; `None` when nothing overlaps.
pub fn pick_best_proposal(bbox: &BBox, proposals: &ProposalSet) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in proposals.masks.iter().enumerate() {
        let iou = m.tight_bounds().map_or(0.0, |r| r.iou(&bbox.rect));
        if iou > best.map_or(0.0, |b| b.1) {
            best = Some((i, iou));
        }
    }
    best.map(|b| b.0)
}

/// Proposal / GrabCut+ agreement inside the box: FG where both are foreground,
/// IGNORE elsewhere. Without a proposal the GrabCut+ mask is used as is.
pub fn intersect_mg(
    proposal: Option<&SegmentMask>,
    grabcut: &SegmentMask,
    bbox: &BBox,
    box_index: usize,
) -> Result<TriSegment> {
    let Some(proposal) = proposal else {
        log::warn!("no proposal for box {:?}, using the GrabCut+ segment", bbox.rect);
        return Ok(TriSegment::from_mask(box_index, bbox.rect, grabcut));
    };
    grabcut.dims().check(proposal.dims())?;
    let states = bbox
        .rect
        .pixels()
        .map(|(x, y)| {
            let (x, y) = (x as usize, y as usize);
            if proposal.get(x, y) && grabcut.get(x, y) {
                TriState::Fg
            } else {
                TriState::Ignore
            }
        })
        .collect();
    Ok(TriSegment {
        box_index,
        rect: bbox.rect,
        states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InstanceShape {
    Rectangle,
    Ellipse,
}

/// Training-free instance mask for a box: the filled box or its inscribed ellipse.
pub fn instance_baseline(bbox: &BBox, dims: Dims, shape: InstanceShape) -> Result<SegmentMask> {
    let r = crate::model::clip_box(bbox, dims)?.rect;
    match shape {
        InstanceShape::Rectangle => Ok(SegmentMask::from_rect(dims, r)),
        InstanceShape::Ellipse => {
            let cx = (r.x0 + r.x1) as f64 / 2.0;
            let cy = (r.y0 + r.y1) as f64 / 2.0;
            let a = r.width() as f64 / 2.0;
            let b = r.height() as f64 / 2.0;
            let mut m = SegmentMask::empty(dims);
            for (x, y) in r.pixels() {
                let u = (x as f64 + 0.5 - cx) / a;
                let v = (y as f64 + 0.5 - cy) / b;
                if u * u + v * v <= 1.0 {
                    m.set(x as usize, y as usize, true);
                }
            }
            Ok(m)
        }
    }
}

/// Label generators selectable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Box,
    BoxInner,
    GrabCut,
    GrabCutPlus,
    GrabCutPlusVote,
    Mcg,
    McgGrabCutPlus,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Box,
        Method::BoxInner,
        Method::GrabCut,
        Method::GrabCutPlus,
        Method::GrabCutPlusVote,
        Method::Mcg,
        Method::McgGrabCutPlus,
    ];

    /// CLI spelling.
    pub fn name(self) -> &'static str {
        match self {
            Method::Box => "box",
            Method::BoxInner => "boxi",
            Method::GrabCut => "grabcut",
            Method::GrabCutPlus => "grabcut+",
            Method::GrabCutPlusVote => "grabcut+i",
            Method::Mcg => "mcg",
            Method::McgGrabCutPlus => "mg+",
        }
    }

    pub fn from_name(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }

    pub fn needs_boundary(self) -> bool {
        matches!(
            self,
            Method::GrabCutPlus | Method::GrabCutPlusVote | Method::McgGrabCutPlus
        )
    }

    pub fn needs_proposals(self) -> bool {
        matches!(self, Method::Mcg | Method::McgGrabCutPlus)
    }
}

/// Per-image inputs of a generator.
#[derive(Debug, Clone, Copy)]
pub struct GenInputs<'a> {
    pub image: &'a Image,
    pub boxes: &'a BoxSet,
    pub boundary: Option<&'a BoundaryMap>,
    pub proposals: Option<&'a ProposalSet>,
}

/// Seed of the single GrabCut run for box `i`.
pub fn box_seed(cfg: &WeakLabelConfig, box_index: usize) -> u64 {
    cfg.rng_seed.wrapping_add(box_index as u64)
}

/// Per-box segments for `method`.
pub fn generate_segments(method: Method, inputs: GenInputs<'_>, cfg: &WeakLabelConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let GenInputs {
        image,
        boxes,
        boundary,
        proposals,
    } = inputs;
    image.dims().check(boxes.dims())?;
    if method.needs_boundary() && boundary.is_none() {
        return Err(Error::MissingBoundaryMap);
    }
    let proposals = match (method.needs_proposals(), proposals) {
        (true, None) => return Err(Error::MissingProposals),
        (_, p) => p,
    };
    let plus = GrabCutParams::grabcut_plus(cfg);
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| -> Result<Segment> {
            Ok(match method {
                Method::Box => Segment::Tri(TriSegment::filled(i, b.rect, TriState::Fg)),
                Method::BoxInner => Segment::Tri(inner_segment(i, b.rect, cfg.inner_region_frac)),
                Method::GrabCut => Segment::Mask(run_grabcut(
                    image,
                    b,
                    &GrabCutParams::grabcut(cfg),
                    None,
                    box_seed(cfg, i),
                )?),
                Method::GrabCutPlus => Segment::Mask(run_grabcut(image, b, &plus, boundary, box_seed(cfg, i))?),
                Method::GrabCutPlusVote => Segment::Tri(grabcut_plus_i(image, b, i, cfg, &plus, boundary)?),
                Method::Mcg => {
                    let props = proposals.expect("checked above");
                    match pick_best_proposal(b, props) {
                        Some(p) => Segment::Mask(props.masks[p].restricted(b.rect)),
                        None => {
                            log::warn!("no overlapping proposal for box {:?}, using the rectangle", b.rect);
                            Segment::Tri(TriSegment::filled(i, b.rect, TriState::Fg))
                        }
                    }
                }
                Method::McgGrabCutPlus => {
                    let props = proposals.expect("checked above");
                    let gc = run_grabcut(image, b, &plus, boundary, box_seed(cfg, i))?;
                    let best = pick_best_proposal(b, props).map(|p| &props.masks[p]);
                    Segment::Tri(intersect_mg(best, &gc, b, i)?)
                }
            })
        })
        .collect()
}

/// Label map for `method` over one image.
pub fn generate(method: Method, inputs: GenInputs<'_>, cfg: &WeakLabelConfig) -> Result<LabelMap> {
    let segments = generate_segments(method, inputs, cfg)?;
    compose_labelmap(&segments, inputs.boxes)
}
