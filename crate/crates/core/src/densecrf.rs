//! Fully connected CRF with Potts compatibility, solved by mean-field.
//!
//! Two Gaussian kernels couple every pixel pair: an appearance kernel over
//! position and colour and a smoothness kernel over position only. Kernels are
//! not normalised: a pixel's pull grows with the number of similar pixels
//! around it, which is what lets dense label noise be voted away.
//!
//! Labels whose unary columns are identical stay identical under every update,
//! so they are propagated once per group.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{Dims, Image, LabelMap, IGNORE};
use crate::{Error, Result};

/// Pixel count up to which message passing is exact over all pairs.
pub const EXACT_LIMIT: usize = 16_384;
/// Upper bound on `pixels * label groups` kept in memory during inference.
pub const MEMORY_BUDGET: usize = 1 << 28;
/// Spatial window, in standard deviations, used above [`EXACT_LIMIT`].
pub const WINDOW_SIGMAS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CrfParams {
    pub w_appearance: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub w_smooth: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
    pub unary_confidence: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_appearance: 5.0,
            theta_alpha: 60.0,
            theta_beta: 10.0,
            w_smooth: 3.0,
            theta_gamma: 3.0,
            iterations: 10,
            unary_confidence: 0.9,
        }
    }
}

impl CrfParams {
    pub fn validate(&self, n_labels: usize) -> Result<()> {
        let finite_nonneg = |w: f64| w >= 0.0 && w.is_finite();
        if !(finite_nonneg(self.w_appearance) && finite_nonneg(self.w_smooth)) {
            return Err(Error::InvalidConfig("CRF weights must be finite and >= 0"));
        }
        let positive = |t: f64| t > 0.0 && t.is_finite();
        if !(positive(self.theta_alpha) && positive(self.theta_beta) && positive(self.theta_gamma)) {
            return Err(Error::InvalidConfig("CRF kernel widths must be > 0"));
        }
        if n_labels < 2 {
            return Err(Error::InvalidConfig("CRF needs at least two labels"));
        }
        if !(self.unary_confidence > 1.0 / n_labels as f64 && self.unary_confidence < 1.0) {
            return Err(Error::InvalidConfig("unary_confidence must lie in (1/n_labels, 1)"));
        }
        Ok(())
    }
}

/// Per-pixel label distributions, row-major, `n_labels` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Unaries {
    dims: Dims,
    n_labels: usize,
    probs: Vec<f64>,
}

impl Unaries {
    pub fn new(dims: Dims, n_labels: usize, probs: Vec<f64>) -> Result<Self> {
        if n_labels == 0 || probs.len() != dims.len() * n_labels {
            return Err(Error::CountMismatch {
                expected: dims.len() * n_labels,
                got: probs.len(),
            });
        }
        let u = Self { dims, n_labels, probs };
        if u.max_normalisation_error() > 1e-6 || u.probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidConfig("unary probabilities must be >= 0 and sum to 1"));
        }
        Ok(u)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_labels..(i + 1) * self.n_labels]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Largest `|sum - 1|` over pixels.
    pub fn max_normalisation_error(&self) -> f64 {
        self.probs
            .chunks(self.n_labels)
            .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per-pixel argmax; exact ties between the top labels give [`IGNORE`].
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks(self.n_labels)
            .map(|c| {
                let mut best = 0;
                let mut tie = false;
                for (l, &p) in c.iter().enumerate().skip(1) {
                    if p > c[best] {
                        best = l;
                        tie = false;
                    } else if p == c[best] {
                        tie = true;
                    }
                }
                if tie {
                    IGNORE
                } else {
                    best as u8
                }
            })
            .collect();
        LabelMap::new(self.dims.width, self.dims.height, labels).expect("dims match")
    }
}

/// Hard labels to distributions: a labelled pixel puts `confidence` on its label
/// and spreads the rest evenly; an ignore pixel is uniform.
pub fn labelmap_to_unaries(map: &LabelMap, n_labels: usize, confidence: f64) -> Result<Unaries> {
    if !(2..=IGNORE as usize).contains(&n_labels) {
        return Err(Error::InvalidConfig("n_labels must lie in 2..=255"));
    }
    let other = (1.0 - confidence) / (n_labels - 1) as f64;
    let uniform = 1.0 / n_labels as f64;
    let mut probs = Vec::with_capacity(map.labels().len() * n_labels);
    for &l in map.labels() {
        if l == IGNORE {
            probs.extend(core::iter::repeat_n(uniform, n_labels));
        } else if (l as usize) < n_labels {
            probs.extend((0..n_labels).map(|k| if k == l as usize { confidence } else { other }));
        } else {
            return Err(Error::InvalidLabel {
                value: l,
                max: (n_labels - 1) as u8,
            });
        }
    }
    Ok(Unaries {
        dims: map.dims(),
        n_labels,
        probs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    pub q: Unaries,
    pub labels: LabelMap,
}

pub fn meanfield(unaries: &Unaries, image: &Image, params: &CrfParams) -> Result<CrfOutput> {
    meanfield_observed(unaries, image, params, |_, _| {})
}

/// Like [`meanfield`], calling `observe(iteration, q)` after every update.
pub fn meanfield_observed(
    unaries: &Unaries,
    image: &Image,
    params: &CrfParams,
    mut observe: impl FnMut(usize, &Unaries),
) -> Result<CrfOutput> {
    unaries.dims.check(image.dims())?;
    let n_labels = unaries.n_labels;
    if !(params.w_appearance >= 0.0 && params.w_smooth >= 0.0) {
        return Err(Error::InvalidConfig("CRF weights must be >= 0"));
    }
    if params.iterations == 0 || (params.w_appearance == 0.0 && params.w_smooth == 0.0) {
        let q = unaries.clone();
        for it in 0..params.iterations {
            observe(it, &q);
        }
        let labels = q.argmax();
        return Ok(CrfOutput { q, labels });
    }
    params.validate(n_labels)?;

    let n = unaries.dims.len();
    let groups = label_groups(unaries);
    let g = groups.reps.len();
    if n.saturating_mul(g) > MEMORY_BUDGET {
        return Err(Error::ImageTooLarge {
            pixels: n,
            labels: n_labels,
        });
    }
    let kernel = Kernel::new(image, params);
    let unary: Vec<f64> = (0..n)
        .flat_map(|i| groups.reps.iter().map(move |&l| unaries.probs[i * n_labels + l]))
        .collect();
    let mut q = unary.clone();
    let mut msg = vec![0.0; n * g];
    let mut full = Unaries {
        dims: unaries.dims,
        n_labels,
        probs: vec![0.0; n * n_labels],
    };
    for it in 0..params.iterations {
        kernel.message(&q, g, &mut msg);
        for i in 0..n {
            let m = &msg[i * g..(i + 1) * g];
            let peak = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..g {
                let v = unary[i * g + l] * libm::exp(m[l] - peak);
                q[i * g + l] = v;
                z += v * groups.sizes[l] as f64;
            }
            q[i * g..(i + 1) * g].iter_mut().for_each(|v| *v /= z);
        }
        expand(&q, &groups, &mut full);
        observe(it, &full);
    }
    let labels = full.argmax();
    Ok(CrfOutput { q: full, labels })
}

struct Groups {
    /// Representative label of each group.
    reps: Vec<usize>,
    sizes: Vec<usize>,
    /// Group index of each label.
    of: Vec<usize>,
}

/// Groups labels whose unary columns are identical.
fn label_groups(u: &Unaries) -> Groups {
    let n = u.dims.len();
    let nl = u.n_labels;
    let same = |a: usize, b: usize| (0..n).all(|i| u.probs[i * nl + a] == u.probs[i * nl + b]);
    let mut g = Groups {
        reps: Vec::new(),
        sizes: Vec::new(),
        of: Vec::with_capacity(nl),
    };
    for l in 0..nl {
        match g.reps.iter().position(|&r| same(r, l)) {
            Some(k) => {
                g.sizes[k] += 1;
                g.of.push(k);
            }
            None => {
                g.of.push(g.reps.len());
                g.reps.push(l);
                g.sizes.push(1);
            }
        }
    }
    g
}

fn expand(q: &[f64], groups: &Groups, out: &mut Unaries) {
    let nl = out.n_labels;
    let g = groups.reps.len();
    for (i, chunk) in out.probs.chunks_mut(nl).enumerate() {
        for (l, v) in chunk.iter_mut().enumerate() {
            *v = q[i * g + groups.of[l]];
        }
    }
}

/// How appearance messages are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AppearancePath {
    /// Every pair in the window, one colour lookup each.
    Pairs,
    /// One separable blur per distinct colour; cheap on flat-coloured images.
    ColourClasses,
}

/// Pixels grouped by exact colour.
struct ColourClasses {
    /// Class index of each pixel.
    of: Vec<usize>,
    /// Colour affinity between classes, row-major `classes x classes`.
    affinity: Vec<f64>,
    count: usize,
}

/// The two weighted Gaussian kernels; messages are `sum_{j != i} w * g_ij * q_j`.
struct Kernel<'a> {
    image: &'a Image,
    w_app: f64,
    w_smooth: f64,
    /// Spatial taps by axis offset, `0..=radius`.
    app_xy: Vec<f64>,
    smooth_xy: Vec<f64>,
    colour: [f64; 256],
    radius: usize,
    classes: Option<ColourClasses>,
}

impl<'a> Kernel<'a> {
    fn new(image: &'a Image, p: &CrfParams) -> Self {
        Self::with_path(image, p, None)
    }

    fn with_path(image: &'a Image, p: &CrfParams, path: Option<AppearancePath>) -> Self {
        let dims = image.dims();
        let n = dims.len();
        let span = dims.width.max(dims.height);
        let radius = if n <= EXACT_LIMIT {
            span
        } else {
            (libm::ceil(WINDOW_SIGMAS * p.theta_alpha.max(p.theta_gamma)) as usize).min(span)
        };
        let gauss = |d: f64, theta: f64| libm::exp(-d * d / (2.0 * theta * theta));
        let app_xy = (0..=radius).map(|d| gauss(d as f64, p.theta_alpha)).collect();
        let smooth_xy = (0..=radius).map(|d| gauss(d as f64, p.theta_gamma)).collect();
        let mut colour = [0.0; 256];
        for (d, c) in colour.iter_mut().enumerate() {
            *c = gauss(d as f64, p.theta_beta);
        }
        let mut k = Self {
            image,
            w_app: p.w_appearance,
            w_smooth: p.w_smooth,
            app_xy,
            smooth_xy,
            colour,
            radius,
            classes: None,
        };
        let path = path.unwrap_or_else(|| k.cheaper_path());
        if path == AppearancePath::ColourClasses {
            k.classes = Some(k.colour_classes(usize::MAX).expect("unbounded class count"));
        }
        k
    }

    fn window(&self, len: usize) -> usize {
        (2 * self.radius + 1).min(len)
    }

    fn cheaper_path(&self) -> AppearancePath {
        let dims = self.image.dims();
        let n = dims.len();
        let per_class = n * (self.window(dims.width) + self.window(dims.height) + 1);
        let pairs = n * (self.window(dims.width) * self.window(dims.height)).min(n) / 2;
        match self.colour_classes(pairs / per_class) {
            Some(c) if c.count * per_class < pairs => AppearancePath::ColourClasses,
            _ => AppearancePath::Pairs,
        }
    }

    /// Distinct colours, or `None` once there are more than `limit`.
    fn colour_classes(&self, limit: usize) -> Option<ColourClasses> {
        let mut index = alloc::collections::BTreeMap::new();
        let mut colours = Vec::new();
        let mut of = Vec::with_capacity(self.image.pixels().len());
        for &c in self.image.pixels() {
            let next = colours.len();
            let k = *index.entry(c).or_insert(next);
            if k == next {
                if next == limit {
                    return None;
                }
                colours.push(c);
            }
            of.push(k);
        }
        let count = colours.len();
        let mut affinity = vec![0.0; count * count];
        for (a, ca) in colours.iter().enumerate() {
            for (b, cb) in colours.iter().enumerate() {
                affinity[a * count + b] = self.colour_affinity(*ca, *cb);
            }
        }
        Some(ColourClasses { of, affinity, count })
    }

    fn colour_affinity(&self, a: crate::model::Rgb, b: crate::model::Rgb) -> f64 {
        self.colour[a[0].abs_diff(b[0]) as usize]
            * self.colour[a[1].abs_diff(b[1]) as usize]
            * self.colour[a[2].abs_diff(b[2]) as usize]
    }

    /// `out_i = sum_j taps(|x_i - x_j|) taps(|y_i - y_j|) field_j`, self included.
    fn blur(&self, field: &[f64], g: usize, taps: &[f64], tmp: &mut [f64], out: &mut [f64]) {
        let dims = self.image.dims();
        let (w, h) = (dims.width, dims.height);
        let r = self.radius;
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            let row = y * w;
            for x in 0..w {
                let dst = &mut tmp[(row + x) * g..(row + x + 1) * g];
                for xj in x.saturating_sub(r)..w.min(x + r + 1) {
                    let t = taps[x.abs_diff(xj)];
                    let src = &field[(row + xj) * g..(row + xj + 1) * g];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += t * s;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            for yj in y.saturating_sub(r)..h.min(y + r + 1) {
                let t = taps[y.abs_diff(yj)];
                let dst = &mut out[y * w * g..(y + 1) * w * g];
                let src = &tmp[yj * w * g..(yj + 1) * w * g];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += t * s;
                }
            }
        }
    }

    /// Smoothness sum over `j != i` of `field_j`.
    fn smooth_sum(&self, field: &[f64], g: usize) -> Vec<f64> {
        let mut tmp = vec![0.0; field.len()];
        let mut out = vec![0.0; field.len()];
        self.blur(field, g, &self.smooth_xy, &mut tmp, &mut out);
        // the centre tap is exactly 1
        out.iter_mut().zip(field).for_each(|(o, f)| *o -= f);
        out
    }

    /// Appearance sum over `j != i` of `field_j`.
    fn appearance_sum(&self, field: &[f64], g: usize) -> Vec<f64> {
        let mut out = vec![0.0; field.len()];
        match &self.classes {
            Some(classes) => {
                let mut masked = vec![0.0; field.len()];
                let mut tmp = vec![0.0; field.len()];
                let mut blurred = vec![0.0; field.len()];
                for c in 0..classes.count {
                    for (i, &k) in classes.of.iter().enumerate() {
                        let keep = k == c;
                        for l in 0..g {
                            masked[i * g + l] = if keep { field[i * g + l] } else { 0.0 };
                        }
                    }
                    self.blur(&masked, g, &self.app_xy, &mut tmp, &mut blurred);
                    for (i, &k) in classes.of.iter().enumerate() {
                        let a = classes.affinity[k * classes.count + c];
                        for l in 0..g {
                            out[i * g + l] += a * blurred[i * g + l];
                        }
                    }
                }
                // self affinity is exactly 1
                out.iter_mut().zip(field).for_each(|(o, f)| *o -= f);
            }
            None => self.for_each_pair(|i, j, a| {
                for l in 0..g {
                    out[i * g + l] += a * field[j * g + l];
                    out[j * g + l] += a * field[i * g + l];
                }
            }),
        }
        out
    }

    /// Visits every unordered pair `i < j` in the window with its raw appearance value.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, f64)) {
        let dims = self.image.dims();
        let (w, h) = (dims.width, dims.height);
        let px = self.image.pixels();
        let r = self.radius;
        for yi in 0..h {
            for xi in 0..w {
                let i = yi * w + xi;
                for yj in yi..h.min(yi + r + 1) {
                    let x_lo = if yj == yi { xi + 1 } else { xi.saturating_sub(r) };
                    let ay = self.app_xy[yj - yi];
                    for xj in x_lo..w.min(xi + r + 1) {
                        let j = yj * w + xj;
                        f(
                            i,
                            j,
                            ay * self.app_xy[xi.abs_diff(xj)] * self.colour_affinity(px[i], px[j]),
                        );
                    }
                }
            }
        }
    }

    /// Weighted message `sum_{j != i} k_ij q_j` for `g` interleaved channels.
    fn message(&self, q: &[f64], g: usize, msg: &mut [f64]) {
        msg.fill(0.0);
        if self.w_app != 0.0 {
            let sum = self.appearance_sum(q, g);
            msg.iter_mut().zip(&sum).for_each(|(m, s)| *m += self.w_app * s);
        }
        if self.w_smooth != 0.0 {
            let sum = self.smooth_sum(q, g);
            msg.iter_mut().zip(&sum).for_each(|(m, s)| *m += self.w_smooth * s);
        }
    }
}
