//! The Pascal VOC colour map.

/// Colour of every label value; 0 is black and 255 (ignore) is beige.
pub static PALETTE: [[u8; 3]; 256] = build();

const fn build() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i;
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut j = 0;
        while j < 8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
            j += 1;
        }
        out[i] = [r, g, b];
        i += 1;
    }
    out
}
