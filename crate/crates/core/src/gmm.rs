//! Full-covariance Gaussian mixture colour models.
//!
//! Fitting uses k-means++ seeding, a hard-assignment initial estimate and
//! then EM. Covariances are kept at or above `COV_FLOOR * I` by flooring
//! their eigenvalues, which is the exact constrained M-step: EM therefore
//! stays monotone in the data log-likelihood even on flat colour regions.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;

use crate::model::Rgb;
use crate::{Error, Result};

/// Minimum covariance eigenvalue (colour units squared).
pub const COV_FLOOR: f64 = 1e-3;
/// EM stops once the mean per-pixel log-likelihood gains less than this.
pub const EM_TOL: f64 = 1e-4;
pub const EM_MAX_ITERS: usize = 50;

type Vec3 = [f64; 3];
type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
struct Component {
    weight: f64,
    mean: Vec3,
    cov: Mat3,
    inv: Mat3,
    /// `ln w - 1.5 ln 2pi - 0.5 ln det`
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: Vec3, cov: Mat3) -> Option<Self> {
        let (vals, vecs) = sym_eigen3(&cov);
        Self::from_eigen(weight, mean, vals, &vecs)
    }

    /// Inverse and log-determinant come straight from the eigenvalues, which
    /// stays accurate for the near-flat covariances of sparse colour sets.
    fn from_eigen(weight: f64, mean: Vec3, vals: Vec3, vecs: &Mat3) -> Option<Self> {
        if !vals.iter().all(|&l| l > 0.0 && l.is_finite()) {
            return None;
        }
        let cov = compose(vecs, vals);
        let inv = compose(vecs, vals.map(|l| 1.0 / l));
        let log_det: f64 = vals.iter().map(|&l| libm::log(l)).sum();
        let log_norm = libm::log(weight) - 1.5 * libm::log(2.0 * PI) - 0.5 * log_det;
        Some(Self {
            weight,
            mean,
            cov,
            inv,
            log_norm,
        })
    }

    #[inline]
    fn log_density(&self, z: &Vec3) -> f64 {
        let d = [z[0] - self.mean[0], z[1] - self.mean[1], z[2] - self.mean[2]];
        let inv = &self.inv;
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1] + inv[0][2] * d[2])
            + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1] + inv[1][2] * d[2])
            + d[2] * (inv[2][0] * d[0] + inv[2][1] * d[1] + inv[2][2] * d[2]);
        self.log_norm - 0.5 * q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    components: Vec<Component>,
}

#[inline]
fn to_vec3(p: Rgb) -> Vec3 {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(vals.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

impl Gmm {
    /// Builds a mixture from explicit parameters; weights are renormalised.
    pub fn from_parts(weights: &[f64], means: &[Vec3], covs: &[Mat3]) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidConfig("mixture parameter lengths differ"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidConfig("mixture weights must be non-negative"));
        }
        let components = weights
            .iter()
            .zip(means)
            .zip(covs)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), c)| {
                Component::new(w / total, *m, *c).ok_or(Error::InvalidConfig("covariance must be positive definite"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vec3> {
        self.components.iter().map(|c| c.mean).collect()
    }

    pub fn covariances(&self) -> Vec<Mat3> {
        self.components.iter().map(|c| c.cov).collect()
    }

    /// `ln sum_k w_k N(z; mu_k, Sigma_k)` for a real-valued colour.
    pub fn log_density(&self, z: &Vec3) -> f64 {
        let mut buf = [0.0f64; 16];
        if self.components.len() <= buf.len() {
            for (b, c) in buf.iter_mut().zip(&self.components) {
                *b = c.log_density(z);
            }
            log_sum_exp(&buf[..self.components.len()])
        } else {
            let v: Vec<f64> = self.components.iter().map(|c| c.log_density(z)).collect();
            log_sum_exp(&v)
        }
    }

    pub fn neg_log_likelihood(&self, pixel: Rgb) -> f64 {
        -self.log_density(&to_vec3(pixel))
    }

    /// Total data log-likelihood.
    pub fn log_likelihood(&self, pixels: &[Rgb]) -> f64 {
        pixels.iter().map(|&p| self.log_density(&to_vec3(p))).sum()
    }
}

/// Distinct colours with multiplicities, in sorted colour order.
fn histogram(pixels: &[Rgb]) -> (Vec<Vec3>, Vec<f64>) {
    let mut sorted = pixels.to_vec();
    sorted.sort_unstable();
    let mut colours = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut prev: Option<Rgb> = None;
    for p in sorted {
        if prev == Some(p) {
            *counts.last_mut().unwrap() += 1.0;
        } else {
            colours.push(to_vec3(p));
            counts.push(1.0);
            prev = Some(p);
        }
    }
    (colours, counts)
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn kmeans_pp(colours: &[Vec3], counts: &[f64], k: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = crate::seed::rng(&[seed, 0x6b6d_6561_6e73]);
    let total: f64 = counts.iter().sum();
    let pick = |rng: &mut crate::seed::Rng, w: &[f64], total: f64| -> usize {
        let mut r = rng.random::<f64>() * total;
        for (i, wi) in w.iter().enumerate() {
            if r < *wi {
                return i;
            }
            r -= wi;
        }
        w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0)
    };
    let mut centres = vec![colours[pick(&mut rng, counts, total)]];
    let mut d2: Vec<f64> = colours.iter().map(|c| dist2(c, &centres[0])).collect();
    while centres.len() < k {
        let w: Vec<f64> = d2.iter().zip(counts).map(|(d, n)| d * n).collect();
        let wt: f64 = w.iter().sum();
        if !(wt > 0.0) {
            // fewer distinct colours than components
            break;
        }
        let c = colours[pick(&mut rng, &w, wt)];
        for (d, col) in d2.iter_mut().zip(colours) {
            *d = d.min(dist2(col, &c));
        }
        centres.push(c);
    }
    centres
}

/// Weighted moment estimate with eigenvalue-floored covariance.
fn estimate(colours: &[Vec3], counts: &[f64], resp: &[f64], k: usize, total: f64) -> Vec<Option<Component>> {
    let mut nk = vec![0.0; k];
    let mut sums = vec![[0.0; 3]; k];
    for (i, c) in colours.iter().enumerate() {
        for j in 0..k {
            let r = resp[i * k + j] * counts[i];
            nk[j] += r;
            for d in 0..3 {
                sums[j][d] += r * c[d];
            }
        }
    }
    let means: Vec<Vec3> = (0..k)
        .map(|j| {
            if nk[j] > 0.0 {
                [sums[j][0] / nk[j], sums[j][1] / nk[j], sums[j][2] / nk[j]]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let mut scatter = vec![[[0.0; 3]; 3]; k];
    for (i, c) in colours.iter().enumerate() {
        for j in 0..k {
            let r = resp[i * k + j] * counts[i];
            if r == 0.0 {
                continue;
            }
            let d = [c[0] - means[j][0], c[1] - means[j][1], c[2] - means[j][2]];
            for a in 0..3 {
                for b in 0..3 {
                    scatter[j][a][b] += r * d[a] * d[b];
                }
            }
        }
    }
    (0..k)
        .map(|j| {
            if nk[j] <= 1e-12 * total {
                return None;
            }
            let mut cov = scatter[j];
            for row in cov.iter_mut() {
                for v in row.iter_mut() {
                    *v /= nk[j];
                }
            }
            let (vals, vecs) = sym_eigen3(&cov);
            Component::from_eigen(nk[j] / total, means[j], vals.map(|l| l.max(COV_FLOOR)), &vecs)
        })
        .collect()
}

/// E-step: responsibilities and total log-likelihood.
fn expectation(components: &[Component], colours: &[Vec3], counts: &[f64], resp: &mut [f64]) -> f64 {
    let k = components.len();
    let mut ll = 0.0;
    let mut logs = vec![0.0; k];
    for (i, c) in colours.iter().enumerate() {
        for (l, comp) in logs.iter_mut().zip(components) {
            *l = comp.log_density(c);
        }
        let lse = log_sum_exp(&logs);
        ll += counts[i] * lse;
        for j in 0..k {
            resp[i * k + j] = libm::exp(logs[j] - lse);
        }
    }
    ll
}

/// Fits a `k`-component mixture. See [`fit_gmm_traced`] for the log-likelihood trace.
pub fn fit_gmm(pixels: &[Rgb], k: usize, seed: u64) -> Result<Gmm> {
    fit_gmm_traced(pixels, k, seed).map(|(g, _)| g)
}

/// Fits a mixture and returns the total data log-likelihood after the
/// initial estimate and after every EM iteration.
pub fn fit_gmm_traced(pixels: &[Rgb], k: usize, seed: u64) -> Result<(Gmm, Vec<f64>)> {
    if pixels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("component count must be positive"));
    }
    let (colours, counts) = histogram(pixels);
    let n = pixels.len() as f64;
    let centres = kmeans_pp(&colours, &counts, k.min(pixels.len()), seed);
    let k = centres.len();

    let mut resp = vec![0.0; colours.len() * k];
    for (i, c) in colours.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, m) in centres.iter().enumerate() {
            let d = dist2(c, m);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        resp[i * k + best] = 1.0;
    }
    let mut components: Vec<Component> = estimate(&colours, &counts, &resp, k, n).into_iter().flatten().collect();
    normalise_weights(&mut components);

    let mut trace = Vec::new();
    let mut resp = vec![0.0; colours.len() * components.len()];
    let mut ll = expectation(&components, &colours, &counts, &mut resp);
    trace.push(ll);
    for _ in 0..EM_MAX_ITERS {
        let k = components.len();
        let next = estimate(&colours, &counts, &resp, k, n);
        // components that lost all responsibility are dropped
        let mut updated: Vec<Component> = next.into_iter().flatten().collect();
        normalise_weights(&mut updated);
        components = updated;
        resp.resize(colours.len() * components.len(), 0.0);
        let new_ll = expectation(&components, &colours, &counts, &mut resp);
        trace.push(new_ll);
        let gain = (new_ll - ll) / n;
        ll = new_ll;
        if gain < EM_TOL {
            break;
        }
    }
    Ok((Gmm { components }, trace))
}

fn normalise_weights(components: &mut [Component]) {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in components.iter_mut() {
        let lw_old = libm::log(c.weight);
        c.weight /= total;
        c.log_norm += libm::log(c.weight) - lw_old;
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric 3x3 matrix.
/// Returns eigenvalues and eigenvectors (as columns).
fn sym_eigen3(m: &Mat3) -> (Vec3, Mat3) {
    let mut a = *m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..50 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let scale = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / libm::sqrt(t * t + 1.0);
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vkp = row[p];
                let vkq = row[q];
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// `V diag(vals) V^T`, exactly symmetric.
fn compose(vecs: &Mat3, vals: Vec3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in a..3 {
            let v = (0..3).map(|k| vecs[a][k] * vals[k] * vecs[b][k]).sum();
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    out
}
