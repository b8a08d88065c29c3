//! Label overlays for inspection.

use boxlabel_core::{Image, LabelMap, BACKGROUND};

use crate::palette::PALETTE;

/// Blends palette colours over non-background pixels; background pixels keep
/// the image colour.
pub fn overlay(image: &Image, labels: &LabelMap, alpha: f64) -> Image {
    let mut out = image.clone();
    for (px, &l) in out.pixels_mut().iter_mut().zip(labels.labels()) {
        if l == BACKGROUND {
            continue;
        }
        let c = PALETTE[l as usize];
        for k in 0..3 {
            px[k] = ((1.0 - alpha) * px[k] as f64 + alpha * c[k] as f64)
                .round()
                .clamp(0.0, 255.0) as u8;
        }
    }
    out
}
