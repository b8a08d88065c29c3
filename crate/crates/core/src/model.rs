//! Domain value types shared by every stage of the pipeline.
//!
//! Label maps follow the Pascal VOC convention: `0` is background,
//! `1..=C` are object classes and `255` marks pixels excluded from training
//! and evaluation. Boxes are half-open pixel rectangles.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const IGNORE: u8 = 255;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub const fn len(&self) -> usize {
        self.width * self.height
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn full_rect(&self) -> Rect {
        Rect::new(0, 0, self.width as i32, self.height as i32)
    }

    /// Errors with `DimensionMismatch` unless `other` equals `self`.
    pub fn check(&self, other: Dims) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: *self,
                got: other,
            })
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub const fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i32 {
        (self.x1 - self.x0).max(0)
    }

    pub fn height(&self) -> i32 {
        (self.y1 - self.y0).max(0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
    }

    pub fn clip(&self, dims: Dims) -> Rect {
        self.intersect(&dims.full_rect())
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersect(other).area();
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        let (x0, x1) = (self.x0, self.x1);
        (self.y0..self.y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: Dims::new(width, height),
                got: Dims::new(pixels.len(), 1),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, colour: Rgb) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Self {
            width,
            height,
            pixels: vec![colour; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, colour: Rgb) {
        self.pixels[y * self.width + x] = colour;
    }
}

/// An annotated bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub class_id: u8,
    pub rect: Rect,
}

impl BBox {
    pub const fn new(class_id: u8, xmin: i32, ymin: i32, xmax: i32, ymax: i32) -> Self {
        Self {
            class_id,
            rect: Rect::new(xmin, ymin, xmax, ymax),
        }
    }

    pub fn area(&self) -> u64 {
        self.rect.area()
    }

    fn degenerate(&self) -> Error {
        Error::DegenerateBox {
            xmin: self.rect.x0 as i64,
            ymin: self.rect.y0 as i64,
            xmax: self.rect.x1 as i64,
            ymax: self.rect.y1 as i64,
        }
    }

    pub fn check_class(&self, num_classes: u8) -> Result<()> {
        if self.class_id == 0 || self.class_id > num_classes {
            return Err(Error::UnknownClassId {
                class_id: self.class_id as i64,
                max: num_classes,
            });
        }
        Ok(())
    }

    fn is_inside(&self, dims: Dims) -> bool {
        let r = &self.rect;
        r.x0 >= 0
            && r.y0 >= 0
            && r.x0 < r.x1
            && r.y0 < r.y1
            && r.x1 as i64 <= dims.width as i64
            && r.y1 as i64 <= dims.height as i64
    }
}

/// Clamps a box to the image; fails if nothing is left.
pub fn clip_box(bbox: &BBox, dims: Dims) -> Result<BBox> {
    if bbox.rect.is_empty() {
        return Err(bbox.degenerate());
    }
    let rect = bbox.rect.clip(dims);
    if rect.is_empty() {
        return Err(bbox.degenerate());
    }
    Ok(BBox {
        class_id: bbox.class_id,
        rect,
    })
}

fn paint_order(a: &BBox, b: &BBox) -> Ordering {
    b.area()
        .cmp(&a.area())
        .then(a.rect.y0.cmp(&b.rect.y0))
        .then(a.rect.x0.cmp(&b.rect.x0))
        .then(a.class_id.cmp(&b.class_id))
}

/// Sorts boxes back-to-front: larger boxes first so smaller ones are painted on top.
pub fn order_boxes(boxes: &mut [BBox]) {
    boxes.sort_by(paint_order);
}

/// Boxes of one image in painting order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxSet {
    boxes: Vec<BBox>,
    dims: Dims,
}

impl BoxSet {
    /// Validates that every box lies inside `dims` and sorts back-to-front.
    pub fn new(mut boxes: Vec<BBox>, dims: Dims) -> Result<Self> {
        if let Some(b) = boxes.iter().find(|b| !b.is_inside(dims)) {
            return Err(b.degenerate());
        }
        order_boxes(&mut boxes);
        Ok(Self { boxes, dims })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            boxes: Vec::new(),
            dims,
        }
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, BBox> {
        self.boxes.iter()
    }

    /// Per-pixel coverage: whether any box covers the pixel.
    pub fn coverage(&self) -> Vec<bool> {
        let mut covered = vec![false; self.dims.len()];
        for b in &self.boxes {
            for (x, y) in b.rect.pixels() {
                covered[y as usize * self.dims.width + x as usize] = true;
            }
        }
        covered
    }
}

impl<'a> IntoIterator for &'a BoxSet {
    type Item = &'a BBox;
    type IntoIter = core::slice::Iter<'a, BBox>;

    fn into_iter(self) -> Self::IntoIter {
        self.boxes.iter()
    }
}

/// Per-pixel class map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: Dims::new(width, height),
                got: Dims::new(labels.len(), 1),
            });
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(dims: Dims, label: u8) -> Self {
        Self {
            width: dims.width,
            height: dims.height,
            labels: vec![label; dims.len()],
        }
    }

    pub fn background(dims: Dims) -> Self {
        Self::filled(dims, BACKGROUND)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Checks every value is background, a class in `1..=num_classes`, or ignore.
    pub fn validate(&self, num_classes: u8) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l > num_classes) {
            Some(&value) => Err(Error::InvalidLabel {
                value,
                max: num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Binary mask of pixels carrying `label`.
    pub fn mask_of(&self, label: u8) -> SegmentMask {
        SegmentMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrimapState {
    DefiniteBg,
    ProbableFg,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    pub width: usize,
    pub height: usize,
    pub states: Vec<TrimapState>,
}

impl Trimap {
    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn count(&self, state: TrimapState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }
}

/// Binary foreground mask over a full image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl SegmentMask {
    pub fn empty(dims: Dims) -> Self {
        Self {
            width: dims.width,
            height: dims.height,
            bits: vec![false; dims.len()],
        }
    }

    pub fn from_bits(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: Dims::new(bits.len(), 1),
            });
        }
        Ok(Self {
            width: dims.width,
            height: dims.height,
            bits,
        })
    }

    /// Mask with every pixel of `rect` (clipped to `dims`) set.
    pub fn from_rect(dims: Dims, rect: Rect) -> Self {
        let mut m = Self::empty(dims);
        for (x, y) in rect.clip(dims).pixels() {
            m.set(x as usize, y as usize, true);
        }
        m
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding rectangle of the set pixels, `None` when empty.
    pub fn tight_bounds(&self) -> Option<Rect> {
        let mut r: Option<Rect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let (x, y) = (x as i32, y as i32);
                    r = Some(match r {
                        None => Rect::new(x, y, x + 1, y + 1),
                        Some(r) => Rect::new(r.x0.min(x), r.y0.min(y), r.x1.max(x + 1), r.y1.max(y + 1)),
                    });
                }
            }
        }
        r
    }

    pub fn intersection_count(&self, other: &SegmentMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    /// Restricts the mask to `rect`.
    pub fn restricted(&self, rect: Rect) -> SegmentMask {
        let mut out = SegmentMask::empty(self.dims());
        for (x, y) in rect.clip(self.dims()).pixels() {
            let (x, y) = (x as usize, y as usize);
            out.set(x, y, self.get(x, y));
        }
        out
    }
}

/// Per-pixel boundary probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMap {
    width: usize,
    height: usize,
    prob: Vec<f64>,
}

impl BoundaryMap {
    /// Builds a map, clamping every value into `[0, 1]` (NaN becomes 0).
    pub fn new(dims: Dims, prob: Vec<f64>) -> Result<Self> {
        if prob.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: Dims::new(prob.len(), 1),
            });
        }
        let prob = prob
            .into_iter()
            .map(|p| if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) })
            .collect();
        Ok(Self {
            width: dims.width,
            height: dims.height,
            prob,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            width: dims.width,
            height: dims.height,
            prob: vec![0.0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.prob
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.prob[y * self.width + x]
    }
}

/// Unranked segment proposals for one image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProposalSet {
    pub masks: Vec<SegmentMask>,
}

impl ProposalSet {
    pub fn new(masks: Vec<SegmentMask>, dims: Dims) -> Result<Self> {
        for m in &masks {
            dims.check(m.dims())?;
        }
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: u8,
    pub bbox: BBox,
    pub score: f64,
    pub mask: Option<SegmentMask>,
}

/// Detections of one image, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    detections: Vec<Detection>,
}

impl DetectionSet {
    /// Sorts by descending score; equal scores keep their input order.
    pub fn new(mut detections: Vec<Detection>) -> Result<Self> {
        if detections.iter().any(|d| !d.score.is_finite()) {
            return Err(Error::InvalidConfig("detection scores must be finite"));
        }
        detections.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(Self { detections })
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Every numeric knob of the weak-label generators.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct WeakLabelConfig {
    pub vote_fg_thresh: f64,
    pub vote_bg_thresh: f64,
    pub n_perturbations: usize,
    pub jitter_frac: f64,
    pub margin_min: f64,
    pub margin_max: f64,
    pub margin_default: f64,
    pub inner_region_frac: f64,
    pub outlier_iou_thresh: f64,
    pub gmm_components: usize,
    pub grabcut_iters: usize,
    pub rng_seed: u64,
    pub num_classes: u8,
}

impl Default for WeakLabelConfig {
    fn default() -> Self {
        Self {
            vote_fg_thresh: 0.70,
            vote_bg_thresh: 0.20,
            n_perturbations: 150,
            jitter_frac: 0.05,
            margin_min: 0.10,
            margin_max: 0.60,
            margin_default: 0.40,
            inner_region_frac: 0.20,
            outlier_iou_thresh: 0.50,
            gmm_components: 5,
            grabcut_iters: 5,
            rng_seed: 0,
            num_classes: 20,
        }
    }
}

impl WeakLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = Error::InvalidConfig;
        if !(0.0 < self.vote_bg_thresh && self.vote_bg_thresh < self.vote_fg_thresh && self.vote_fg_thresh <= 1.0) {
            return Err(bad("need 0 < vote_bg_thresh < vote_fg_thresh <= 1"));
        }
        if !(0.0..0.5).contains(&self.jitter_frac) {
            return Err(bad("need 0 <= jitter_frac < 0.5"));
        }
        if !(0.0 < self.margin_min && self.margin_min <= self.margin_default && self.margin_default <= self.margin_max)
        {
            return Err(bad("need 0 < margin_min <= margin_default <= margin_max"));
        }
        if !(self.inner_region_frac > 0.0 && self.inner_region_frac <= 1.0) {
            return Err(bad("need 0 < inner_region_frac <= 1"));
        }
        if !(0.0..=1.0).contains(&self.outlier_iou_thresh) {
            return Err(bad("need 0 <= outlier_iou_thresh <= 1"));
        }
        if self.n_perturbations == 0 || self.gmm_components == 0 || self.grabcut_iters == 0 {
            return Err(bad("counts must be positive"));
        }
        if self.num_classes == 0 || self.num_classes == IGNORE {
            return Err(bad("num_classes must be in 1..=254"));
        }
        Ok(())
    }
}
