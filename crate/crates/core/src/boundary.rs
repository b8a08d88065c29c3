//! Built-in boundary maps for runs without an external edge detector.

use alloc::vec::Vec;

use crate::model::{BoundaryMap, Image};

/// Sobel gradient magnitude of the luminance, scaled so the strongest edge is 1.
pub fn sobel_boundary(image: &Image) -> BoundaryMap {
    let (w, h) = (image.width(), image.height());
    // integer luminance (x1000) keeps flat regions at exactly zero gradient
    let lum: Vec<i64> = image
        .pixels()
        .iter()
        .map(|p| 299 * p[0] as i64 + 587 * p[1] as i64 + 114 * p[2] as i64)
        .collect();
    let at = |x: isize, y: isize| -> i64 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        lum[y * w + x]
    };
    let mut mag = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2 * at(x, y - 1)
                - at(x + 1, y - 1);
            mag.push(libm::sqrt((gx * gx + gy * gy) as f64));
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for m in mag.iter_mut() {
            *m /= max;
        }
    }
    BoundaryMap::new(image.dims(), mag).expect("dims match by construction")
}
