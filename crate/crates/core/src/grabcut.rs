//! Box-initialised GrabCut.
//!
//! Each iteration refits a foreground and a background colour mixture to the
//! current labelling, then solves an 8-connected binary labelling by min-cut.
//! Pixels outside the box (inside the context crop) are fixed background, so
//! the foreground can never leave the box. Pairwise terms come either from
//! RGB contrast (classic GrabCut) or from a boundary probability map
//! (GrabCut+).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::SQRT_2;

use crate::gmm::{fit_gmm, Gmm};
use crate::maxflow::{min_cut, FlowNetwork, Side};
use crate::model::{BBox, BoundaryMap, Dims, Image, Rect, Rgb, SegmentMask, Trimap, TrimapState, WeakLabelConfig};
use crate::{Error, Result};

/// Stop iterating once fewer than this fraction of crop pixels change side.
pub const CONVERGENCE_FRAC: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PairwiseSource {
    RgbContrast,
    BoundaryMap,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrabCutParams {
    pub pairwise: PairwiseSource,
    pub lambda: f64,
    pub gamma_boundary: f64,
    pub iters: usize,
    /// Context added on each side, as a fraction of box width / height.
    pub margin: f64,
    pub gmm_components: usize,
}

impl GrabCutParams {
    /// Classic GrabCut with RGB-contrast pairwise terms.
    pub fn grabcut(cfg: &WeakLabelConfig) -> Self {
        Self {
            pairwise: PairwiseSource::RgbContrast,
            lambda: 50.0,
            gamma_boundary: 5.0,
            iters: cfg.grabcut_iters,
            margin: cfg.margin_default,
            gmm_components: cfg.gmm_components,
        }
    }

    /// GrabCut+ with boundary-probability pairwise terms.
    pub fn grabcut_plus(cfg: &WeakLabelConfig) -> Self {
        Self {
            pairwise: PairwiseSource::BoundaryMap,
            ..Self::grabcut(cfg)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma_boundary >= 0.0) {
            return Err(Error::InvalidConfig("lambda and gamma_boundary must be >= 0"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig("margin must be >= 0"));
        }
        if self.iters == 0 || self.gmm_components == 0 {
            return Err(Error::InvalidConfig("iters and gmm_components must be positive"));
        }
        Ok(())
    }
}

fn check_box(bbox: &BBox, dims: Dims) -> Result<()> {
    let r = bbox.rect;
    if r.is_empty() || r.clip(dims) != r {
        return Err(Error::DegenerateBox {
            xmin: r.x0 as i64,
            ymin: r.y0 as i64,
            xmax: r.x1 as i64,
            ymax: r.y1 as i64,
        });
    }
    Ok(())
}

/// Context crop around `bbox` and its trimap: box pixels probable foreground,
/// the surrounding ring definite background.
pub fn init_trimap(bbox: &BBox, margin: f64, dims: Dims) -> Result<(Rect, Trimap)> {
    check_box(bbox, dims)?;
    let r = bbox.rect;
    let mx = libm::round(margin * r.width() as f64) as i32;
    let my = libm::round(margin * r.height() as f64) as i32;
    let crop = Rect::new(r.x0 - mx, r.y0 - my, r.x1 + mx, r.y1 + my).clip(dims);
    let states = crop
        .pixels()
        .map(|(x, y)| {
            if r.contains(x, y) {
                TrimapState::ProbableFg
            } else {
                TrimapState::DefiniteBg
            }
        })
        .collect();
    Ok((
        crop,
        Trimap {
            width: crop.width() as usize,
            height: crop.height() as usize,
            states,
        },
    ))
}

/// `1 / (2 <|z_p - z_q|^2>)` over all 8-neighbour pairs in `crop`; 0 on flat crops.
pub fn contrast_beta(image: &Image, crop: Rect) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for_each_pair(crop, |p, q, _| {
        sum += colour_dist2(image.get(p.0, p.1), image.get(q.0, q.1));
        n += 1;
    });
    if n == 0 || sum == 0.0 {
        0.0
    } else {
        1.0 / (2.0 * sum / n as f64)
    }
}

fn colour_dist2(a: Rgb, b: Rgb) -> f64 {
    (0..3)
        .map(|c| {
            let d = a[c] as f64 - b[c] as f64;
            d * d
        })
        .sum()
}

/// Visits each unordered 8-neighbour pair inside `crop` once, with its distance.
fn for_each_pair(crop: Rect, mut f: impl FnMut((usize, usize), (usize, usize), f64)) {
    const OFFSETS: [(i32, i32, f64); 4] = [(1, 0, 1.0), (0, 1, 1.0), (1, 1, SQRT_2), (-1, 1, SQRT_2)];
    for (x, y) in crop.pixels() {
        for &(dx, dy, d) in &OFFSETS {
            let (qx, qy) = (x + dx, y + dy);
            if crop.contains(qx, qy) {
                f((x as usize, y as usize), (qx as usize, qy as usize), d);
            }
        }
    }
}

/// Smoothness weight between adjacent pixels `p` and `q`.
///
/// RGB mode: `lambda * exp(-beta |z_p - z_q|^2) / dist`.
/// Boundary mode: `lambda * exp(-gamma * max(pb_p, pb_q)) / dist`.
pub fn pairwise_weight(
    p: (usize, usize),
    q: (usize, usize),
    image: &Image,
    boundary: Option<&BoundaryMap>,
    params: &GrabCutParams,
    beta: f64,
) -> Result<f64> {
    let dx = p.0.abs_diff(q.0);
    let dy = p.1.abs_diff(q.1);
    debug_assert!(dx <= 1 && dy <= 1 && dx + dy > 0, "pixels must be 8-adjacent");
    let dist = if dx + dy == 2 { SQRT_2 } else { 1.0 };
    Ok(match params.pairwise {
        PairwiseSource::RgbContrast => {
            params.lambda * libm::exp(-beta * colour_dist2(image.get(p.0, p.1), image.get(q.0, q.1))) / dist
        }
        PairwiseSource::BoundaryMap => {
            let b = boundary.ok_or(Error::MissingBoundaryMap)?;
            let pb = b.get(p.0, p.1).max(b.get(q.0, q.1));
            params.lambda * libm::exp(-params.gamma_boundary * pb) / dist
        }
    })
}

/// Full record of one GrabCut run.
#[derive(Debug, Clone, PartialEq)]
pub struct GrabCutRun {
    pub mask: SegmentMask,
    /// Energy of the labelling after each min-cut.
    pub energies: Vec<f64>,
    /// True when the cut emptied the foreground and the box rectangle was returned.
    pub fell_back: bool,
    pub crop: Rect,
}

/// Segments the object in `bbox`. `seed` drives the colour-model fits.
pub fn run_grabcut(
    image: &Image,
    bbox: &BBox,
    params: &GrabCutParams,
    boundary: Option<&BoundaryMap>,
    seed: u64,
) -> Result<SegmentMask> {
    run_grabcut_detailed(image, bbox, params, boundary, seed).map(|r| r.mask)
}

struct Problem {
    crop: Rect,
    cw: usize,
    colours: Vec<Rgb>,
    fixed_bg: Vec<bool>,
    /// (p, q, w) in crop-local indices
    pairs: Vec<(usize, usize, f64)>,
}

impl Problem {
    fn energy(&self, fg: &[bool], fg_model: &Gmm, bg_model: &Gmm) -> f64 {
        let mut e = 0.0;
        for (i, &f) in fg.iter().enumerate() {
            let model = if f { fg_model } else { bg_model };
            e += model.neg_log_likelihood(self.colours[i]);
        }
        for &(p, q, w) in &self.pairs {
            if fg[p] != fg[q] {
                e += w;
            }
        }
        e
    }

    fn split(&self, fg: &[bool]) -> (Vec<Rgb>, Vec<Rgb>) {
        let mut f = Vec::new();
        let mut b = Vec::new();
        for (i, &is_fg) in fg.iter().enumerate() {
            if is_fg {
                f.push(self.colours[i]);
            } else {
                b.push(self.colours[i]);
            }
        }
        (f, b)
    }

    fn cut(&self, fg_model: &Gmm, bg_model: &Gmm) -> Vec<bool> {
        let n = self.colours.len();
        let mut node = vec![usize::MAX; n];
        let mut free = 0;
        for i in 0..n {
            if !self.fixed_bg[i] {
                node[i] = free;
                free += 1;
            }
        }
        let mut cost_fg = vec![0.0; free];
        let mut cost_bg = vec![0.0; free];
        for i in 0..n {
            if node[i] != usize::MAX {
                cost_fg[node[i]] = fg_model.neg_log_likelihood(self.colours[i]);
                cost_bg[node[i]] = bg_model.neg_log_likelihood(self.colours[i]);
            }
        }
        let mut net = FlowNetwork::with_capacity(free, self.pairs.len());
        for &(p, q, w) in &self.pairs {
            match (node[p], node[q]) {
                (usize::MAX, usize::MAX) => {}
                (a, usize::MAX) => cost_fg[a] += w,
                (usize::MAX, b) => cost_fg[b] += w,
                (a, b) => net.add_edge(a, b, w, w),
            }
        }
        for v in 0..free {
            // source side = foreground; a node on the sink side pays its source link
            let m = cost_fg[v].min(cost_bg[v]);
            net.add_terminal(v, cost_bg[v] - m, cost_fg[v] - m);
        }
        let cut = min_cut(&net);
        (0..n)
            .map(|i| node[i] != usize::MAX && cut.side[node[i]] == Side::Source)
            .collect()
    }
}

/// Fits a mixture, keeping `previous` when it explains `pixels` at least as well.
fn refit(pixels: &[Rgb], k: usize, seed: u64, previous: Option<Gmm>) -> Result<Gmm> {
    let fresh = fit_gmm(pixels, k, seed)?;
    Ok(match previous {
        Some(old) if old.log_likelihood(pixels) > fresh.log_likelihood(pixels) => old,
        _ => fresh,
    })
}

pub fn run_grabcut_detailed(
    image: &Image,
    bbox: &BBox,
    params: &GrabCutParams,
    boundary: Option<&BoundaryMap>,
    seed: u64,
) -> Result<GrabCutRun> {
    params.validate()?;
    let dims = image.dims();
    if params.pairwise == PairwiseSource::BoundaryMap {
        let b = boundary.ok_or(Error::MissingBoundaryMap)?;
        dims.check(b.dims())?;
    }
    let (crop, trimap) = init_trimap(bbox, params.margin, dims)?;
    let cw = crop.width() as usize;
    let ch = crop.height() as usize;
    let mut fixed_bg: Vec<bool> = trimap.states.iter().map(|&s| s == TrimapState::DefiniteBg).collect();
    if !fixed_bg.iter().any(|&b| b) {
        // no context ring: the crop border stands in for background
        for y in 0..ch {
            for x in 0..cw {
                if x == 0 || y == 0 || x + 1 == cw || y + 1 == ch {
                    fixed_bg[y * cw + x] = true;
                }
            }
        }
    }
    let colours: Vec<Rgb> = crop.pixels().map(|(x, y)| image.get(x as usize, y as usize)).collect();
    let beta = match params.pairwise {
        PairwiseSource::RgbContrast => contrast_beta(image, crop),
        PairwiseSource::BoundaryMap => 0.0,
    };
    let mut pairs = Vec::with_capacity(cw * ch * 4);
    let mut err = None;
    for_each_pair(crop, |p, q, _| {
        match pairwise_weight(p, q, image, boundary, params, beta) {
            Ok(w) => {
                let lp = (p.1 - crop.y0 as usize) * cw + (p.0 - crop.x0 as usize);
                let lq = (q.1 - crop.y0 as usize) * cw + (q.0 - crop.x0 as usize);
                pairs.push((lp, lq, w));
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let problem = Problem {
        crop,
        cw,
        colours,
        fixed_bg,
        pairs,
    };

    let rectangle = |energies| GrabCutRun {
        mask: SegmentMask::from_rect(dims, bbox.rect),
        energies,
        fell_back: true,
        crop,
    };

    let mut fg: Vec<bool> = problem.fixed_bg.iter().map(|&b| !b).collect();
    let mut fg_model: Option<Gmm> = None;
    let mut bg_model: Option<Gmm> = None;
    let mut energies = Vec::new();
    for iter in 0..params.iters {
        let (fg_px, bg_px) = problem.split(&fg);
        if fg_px.is_empty() {
            log::warn!("grabcut: empty foreground for box {:?}, using the rectangle", bbox.rect);
            return Ok(rectangle(energies));
        }
        let it = iter as u64;
        let f = refit(
            &fg_px,
            params.gmm_components,
            crate::seed::derive(&[seed, it, 1]),
            fg_model.take(),
        )?;
        let b = refit(
            &bg_px,
            params.gmm_components,
            crate::seed::derive(&[seed, it, 0]),
            bg_model.take(),
        )?;
        let next = problem.cut(&f, &b);
        energies.push(problem.energy(&next, &f, &b));
        let changed = next.iter().zip(&fg).filter(|(a, b)| a != b).count();
        fg = next;
        fg_model = Some(f);
        bg_model = Some(b);
        if (changed as f64) < CONVERGENCE_FRAC * fg.len() as f64 {
            break;
        }
    }
    if !fg.iter().any(|&f| f) {
        log::warn!("grabcut: empty foreground for box {:?}, using the rectangle", bbox.rect);
        return Ok(rectangle(energies));
    }
    let mut mask = SegmentMask::empty(dims);
    for (i, (x, y)) in problem.crop.pixels().enumerate() {
        if fg[i] {
            mask.set(x as usize, y as usize, true);
        }
    }
    debug_assert_eq!(problem.cw, cw);
    Ok(GrabCutRun {
        mask,
        energies,
        fell_back: false,
        crop,
    })
}
