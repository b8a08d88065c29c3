//! Seeded synthetic scenes with full ground truth.
//!
//! Objects are flat-coloured shapes on a flat background, optionally with
//! Gaussian texture noise. Boxes are the tight bounds of the visible part of
//! each object, the boundary map marks instance contours and the proposals
//! contain every true mask followed by eroded, dilated and shifted copies.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::metrics::GtInstance;
use crate::model::{BBox, BoundaryMap, BoxSet, Dims, Image, LabelMap, ProposalSet, Rect, Rgb, SegmentMask};
use crate::seed::{self, Rng};
use crate::{Error, Result};

/// Whole-scene placement attempts before giving up.
pub const MAX_ATTEMPTS: u32 = 1000;
/// Smallest visible share of an object's box.
pub const MIN_BOX_FILL: f64 = 0.55;
/// Largest canvas side supported.
pub const MAX_SIDE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Shape {
    Rectangle,
    Ellipse,
    Blob,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
    pub shapes: Vec<Shape>,
    /// Minimum RGB distance between any two of the background and object colours.
    pub colour_separation: f64,
    /// Per-channel standard deviation of the texture noise.
    pub noise_sigma: f64,
    pub occlusion: bool,
    pub num_classes: u8,
    /// Object side range as fractions of the canvas side.
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            n_objects: 2,
            shapes: vec![Shape::Rectangle, Shape::Ellipse, Shape::Blob],
            colour_separation: 60.0,
            noise_sigma: 0.0,
            occlusion: false,
            num_classes: 20,
            min_size: 0.25,
            max_size: 0.5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > MAX_SIDE || self.height > MAX_SIDE {
            return Err(Error::InvalidConfig("scene sides must lie in 1..=256"));
        }
        if self.n_objects > 0 && self.shapes.is_empty() {
            return Err(Error::InvalidConfig("no shapes to draw"));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::InvalidConfig("need 0 < min_size <= max_size <= 1"));
        }
        if !(self.colour_separation >= 0.0 && self.colour_separation <= 255.0) {
            return Err(Error::InvalidConfig("colour_separation must lie in [0, 255]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0"));
        }
        if self.num_classes == 0 || self.num_classes == crate::IGNORE {
            return Err(Error::InvalidConfig("num_classes must lie in 1..=254"));
        }
        Ok(())
    }

    /// Same spec with the seed of scene `index` of a corpus.
    pub fn for_scene(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: seed::derive(&[self.seed, index as u64]),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub image: Image,
    pub gt: LabelMap,
    /// Visible masks; `instances[k]` is the object boxed by `boxes.boxes()[k]`.
    pub instances: Vec<GtInstance>,
    pub boxes: BoxSet,
    pub boundary: BoundaryMap,
    pub proposals: ProposalSet,
}

struct Object {
    class_id: u8,
    colour: Rgb,
    mask: SegmentMask,
}

fn shape_mask(dims: Dims, rect: Rect, shape: Shape, rng: &mut Rng) -> SegmentMask {
    let mut m = SegmentMask::empty(dims);
    let cx = (rect.x0 + rect.x1) as f64 / 2.0;
    let cy = (rect.y0 + rect.y1) as f64 / 2.0;
    let a = rect.width() as f64 / 2.0;
    let b = rect.height() as f64 / 2.0;
    let (lobes, phase, depth) = (
        rng.random_range(3..6),
        rng.random_range(0.0..core::f64::consts::TAU),
        0.15,
    );
    for (x, y) in rect.pixels() {
        let u = (x as f64 + 0.5 - cx) / a;
        let v = (y as f64 + 0.5 - cy) / b;
        let inside = match shape {
            Shape::Rectangle => true,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Blob => {
                let r = libm::sqrt(u * u + v * v);
                let t = libm::atan2(v, u);
                r <= (1.0 - depth) + depth * libm::sin(lobes as f64 * t + phase)
            }
        };
        if inside {
            m.set(x as usize, y as usize, true);
        }
    }
    m
}

fn colour_dist(a: Rgb, b: Rgb) -> f64 {
    let d2: f64 = (0..3)
        .map(|c| {
            let d = a[c] as f64 - b[c] as f64;
            d * d
        })
        .sum();
    libm::sqrt(d2)
}

/// Colour at least `sep` away from every colour in `taken`.
fn pick_colour(rng: &mut Rng, taken: &[Rgb], sep: f64) -> Option<Rgb> {
    (0..200).find_map(|_| {
        let c: Rgb = [rng.random(), rng.random(), rng.random()];
        taken.iter().all(|&t| colour_dist(c, t) >= sep).then_some(c)
    })
}

fn try_place(spec: &SceneSpec, rng: &mut Rng) -> Option<(Rgb, Vec<Object>)> {
    let dims = Dims::new(spec.width, spec.height);
    let background = pick_colour(rng, &[], 0.0)?;
    let mut taken = vec![background];
    let mut objects = Vec::with_capacity(spec.n_objects);
    let side = |rng: &mut Rng, n: usize| -> i32 {
        let lo = (spec.min_size * n as f64).max(1.0);
        let hi = (spec.max_size * n as f64).max(lo);
        libm::round(rng.random_range(lo..=hi)) as i32
    };
    for _ in 0..spec.n_objects {
        let (w, h) = (side(rng, spec.width), side(rng, spec.height));
        let x0 = rng.random_range(0..=spec.width as i32 - w);
        let y0 = rng.random_range(0..=spec.height as i32 - h);
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let mask = shape_mask(dims, Rect::new(x0, y0, x0 + w, y0 + h), shape, rng);
        let colour = pick_colour(rng, &taken, spec.colour_separation)?;
        taken.push(colour);
        objects.push(Object {
            class_id: rng.random_range(1..=spec.num_classes),
            colour,
            mask,
        });
    }
    // larger objects behind smaller ones
    objects.sort_by_key(|o| core::cmp::Reverse(o.mask.count()));
    let mut visible: Vec<SegmentMask> = objects.iter().map(|o| o.mask.clone()).collect();
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            if objects[i].mask.intersection_count(&objects[j].mask) > 0 {
                if !spec.occlusion {
                    return None;
                }
                for (v, &f) in visible[i].bits_mut().iter_mut().zip(objects[j].mask.bits()) {
                    *v &= !f;
                }
            }
        }
    }
    for (o, v) in objects.iter_mut().zip(visible) {
        let bounds = v.tight_bounds()?;
        if (v.count() as f64) < MIN_BOX_FILL * bounds.area() as f64 {
            return None;
        }
        o.mask = v;
    }
    Some((background, objects))
}

fn instance_ids(dims: Dims, objects: &[Object]) -> Vec<usize> {
    let mut ids = vec![0usize; dims.len()];
    for (k, o) in objects.iter().enumerate() {
        for (id, &f) in ids.iter_mut().zip(o.mask.bits()) {
            if f {
                *id = k + 1;
            }
        }
    }
    ids
}

fn oracle_boundary(dims: Dims, ids: &[usize]) -> BoundaryMap {
    let (w, h) = (dims.width, dims.height);
    let mut contour = vec![false; dims.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let differs = (x > 0 && ids[i - 1] != ids[i])
                || (x + 1 < w && ids[i + 1] != ids[i])
                || (y > 0 && ids[i - w] != ids[i])
                || (y + 1 < h && ids[i + w] != ids[i]);
            contour[i] = differs;
        }
    }
    let thick = dilate(dims, &contour, 1);
    BoundaryMap::new(dims, thick.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()).expect("dims match")
}

/// Square-window dilation by `r` pixels.
fn dilate(dims: Dims, bits: &[bool], r: usize) -> Vec<bool> {
    let (w, h) = (dims.width, dims.height);
    let mut out = vec![false; bits.len()];
    for y in 0..h {
        for x in 0..w {
            if !bits[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

fn erode(dims: Dims, bits: &[bool], r: usize) -> Vec<bool> {
    let inv: Vec<bool> = bits.iter().map(|b| !b).collect();
    dilate(dims, &inv, r).into_iter().map(|b| !b).collect()
}

fn shifted(dims: Dims, m: &SegmentMask, dx: i32, dy: i32) -> SegmentMask {
    let mut out = SegmentMask::empty(dims);
    for y in 0..dims.height as i32 {
        for x in 0..dims.width as i32 {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0
                && sy >= 0
                && (sx as usize) < dims.width
                && (sy as usize) < dims.height
                && m.get(sx as usize, sy as usize)
            {
                out.set(x as usize, y as usize, true);
            }
        }
    }
    out
}

fn proposals(dims: Dims, objects: &[Object], rng: &mut Rng) -> ProposalSet {
    let mut masks = Vec::with_capacity(objects.len() * 4);
    for o in objects {
        masks.push(o.mask.clone());
        let variants = [erode(dims, o.mask.bits(), 2), dilate(dims, o.mask.bits(), 2)];
        for v in variants {
            let m = SegmentMask::from_bits(dims, v).expect("dims match");
            if !m.is_empty() {
                masks.push(m);
            }
        }
        let dx = if rng.random_bool(0.5) { 3 } else { -3 };
        let dy = if rng.random_bool(0.5) { 3 } else { -3 };
        let s = shifted(dims, &o.mask, dx, dy);
        if !s.is_empty() {
            masks.push(s);
        }
    }
    ProposalSet { masks }
}

fn channel(base: u8, noise: f64) -> u8 {
    libm::round(base as f64 + noise).clamp(0.0, 255.0) as u8
}

pub fn generate(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let dims = Dims::new(spec.width, spec.height);
    let (background, objects) = (0..MAX_ATTEMPTS)
        .find_map(|attempt| try_place(spec, &mut seed::rng(&[spec.seed, attempt as u64])))
        .ok_or(Error::SpecInfeasible(MAX_ATTEMPTS))?;
    let mut rng = seed::rng(&[spec.seed, u64::MAX]);

    let ids = instance_ids(dims, &objects);
    let mut gt = LabelMap::background(dims);
    let mut pixels = Vec::with_capacity(dims.len());
    for (i, &id) in ids.iter().enumerate() {
        let base = if id == 0 {
            background
        } else {
            gt.labels_mut()[i] = objects[id - 1].class_id;
            objects[id - 1].colour
        };
        let px = if spec.noise_sigma > 0.0 {
            let sigma = spec.noise_sigma;
            [
                channel(base[0], sigma * seed::normal(&mut rng)),
                channel(base[1], sigma * seed::normal(&mut rng)),
                channel(base[2], sigma * seed::normal(&mut rng)),
            ]
        } else {
            base
        };
        pixels.push(px);
    }
    let image = Image::new(dims.width, dims.height, pixels)?;

    let boxes = objects
        .iter()
        .map(|o| {
            let r = o.mask.tight_bounds().expect("visible objects are non-empty");
            BBox::new(o.class_id, r.x0, r.y0, r.x1, r.y1)
        })
        .collect();
    let boxes = BoxSet::new(boxes, dims)?;
    let boundary = oracle_boundary(dims, &ids);
    let proposals = proposals(dims, &objects, &mut rng);
    // box sets reorder their boxes, so pair each box with its object
    let mut pending: Vec<Option<GtInstance>> = objects
        .into_iter()
        .map(|o| {
            Some(GtInstance {
                class_id: o.class_id,
                mask: o.mask,
            })
        })
        .collect();
    let instances = boxes
        .iter()
        .map(|b| {
            let k = pending
                .iter()
                .position(|o| {
                    o.as_ref()
                        .is_some_and(|o| o.class_id == b.class_id && o.mask.tight_bounds() == Some(b.rect))
                })
                .expect("every box comes from an object");
            pending[k].take().expect("unused")
        })
        .collect();
    Ok(SceneBundle {
        image,
        gt,
        instances,
        boxes,
        boundary,
        proposals,
    })
}
