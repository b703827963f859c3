//! Baseline JPEG round trip without the (lossless) entropy stage.
//!
//! RGB → YCbCr, 4:2:0 chroma subsampling, 8×8 DCT, quantization with the
//! standard luminance/chrominance tables scaled by quality, then the inverse
//! path back to 8-bit RGB.

use std::f64::consts::PI;
use std::sync::OnceLock;

const LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_Q: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality-scaled quantization table (IJG convention).
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

/// `basis[u][x] = c(u)/2 · cos((2x+1)uπ/16)`, the orthonormal 8-point DCT-II.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

fn round_trip_block(block: &mut [f64; 64], table: &[f64; 64]) {
    let b = basis();
    let mut tmp = [0.0; 64];
    // forward: F = B · X · Bᵀ
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| b[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut coef = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            coef[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * b[v][x]).sum();
        }
    }
    for (c, q) in coef.iter_mut().zip(table) {
        *c = (*c / q).round() * q;
    }
    // inverse: X = Bᵀ · F · B
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| b[u][y] * coef[u * 8 + v]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * b[v][x]).sum();
        }
    }
}

/// Round-trips one plane of size `h×w` (multiples of 8), in place.
fn round_trip_plane(plane: &mut [f64], h: usize, w: usize, table: &[f64; 64]) {
    let mut block = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = plane[(by + y) * w + bx + x] - 128.0;
                }
            }
            round_trip_block(&mut block, table);
            for y in 0..8 {
                for x in 0..8 {
                    plane[(by + y) * w + bx + x] = block[y * 8 + x] + 128.0;
                }
            }
        }
    }
}

fn to_u8(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

/// Compresses and decompresses an interleaved 8-bit RGB image of `h×w`.
pub fn round_trip(rgb: &[u8], h: usize, w: usize, quality: u8) -> Vec<u8> {
    // pad to whole 16×16 MCUs by edge replication
    let (ph, pw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
    let mut planes = [vec![0.0; ph * pw], vec![0.0; ph * pw], vec![0.0; ph * pw]];
    for y in 0..ph {
        for x in 0..pw {
            let s = (y.min(h - 1) * w + x.min(w - 1)) * 3;
            let (r, g, b) = (f64::from(rgb[s]), f64::from(rgb[s + 1]), f64::from(rgb[s + 2]));
            let i = y * pw + x;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
            planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
        }
    }
    let luma_table = scaled_table(&LUMA_Q, quality);
    let chroma_table = scaled_table(&CHROMA_Q, quality);
    round_trip_plane(&mut planes[0], ph, pw, &luma_table);

    let (ch, cw) = (ph / 2, pw / 2);
    for plane in &mut planes[1..] {
        let mut sub = vec![0.0; ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                let i = 2 * y * pw + 2 * x;
                sub[y * cw + x] = (plane[i] + plane[i + 1] + plane[i + pw] + plane[i + pw + 1]) / 4.0;
            }
        }
        round_trip_plane(&mut sub, ch, cw, &chroma_table);
        for y in 0..ph {
            for x in 0..pw {
                plane[y * pw + x] = sub[(y / 2) * cw + x / 2];
            }
        }
    }

    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let i = y * pw + x;
            let (yy, cb, cr) = (to_u8(planes[0][i]), to_u8(planes[1][i]) - 128.0, to_u8(planes[2][i]) - 128.0);
            let o = (y * w + x) * 3;
            out[o] = to_u8(yy + 1.402 * cr) as u8;
            out[o + 1] = to_u8(yy - 0.344_136 * cb - 0.714_136 * cr) as u8;
            out[o + 2] = to_u8(yy + 1.772 * cb) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_scaling_matches_reference_values() {
        // IJG: quality 50 is the base table, 100 is all ones
        assert_eq!(scaled_table(&LUMA_Q, 50)[0], 16.0);
        assert!(scaled_table(&LUMA_Q, 100).iter().all(|&q| q == 1.0));
        // quality 25 → scale 200: 16·2 = 32, 99·2 = 198
        assert_eq!(scaled_table(&LUMA_Q, 25)[0], 32.0);
        assert_eq!(scaled_table(&CHROMA_Q, 25)[63], 198.0);
        // quality 80 → scale 40: (16·40+50)/100 = 6
        assert_eq!(scaled_table(&LUMA_Q, 80)[0], 6.0);
    }

    #[test]
    fn dct_is_orthonormal() {
        let b = basis();
        for u in 0..8 {
            for v in 0..8 {
                let dot: f64 = (0..8).map(|x| b[u][x] * b[v][x]).sum();
                let expect = if u == v { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_images_survive_unchanged() {
        for v in [0u8, 37, 128, 255] {
            let rgb = vec![v; 28 * 28 * 3];
            for q in [25, 50, 80] {
                let out = round_trip(&rgb, 28, 28, q);
                assert!(out.iter().all(|&o| (i16::from(o) - i16::from(v)).abs() <= 1), "{v} at {q}");
            }
        }
    }

    #[test]
    fn lower_quality_loses_more() {
        let rgb: Vec<u8> = (0..28 * 28 * 3).map(|i| ((i * 37 + (i / 84) * 11) % 256) as u8).collect();
        let err = |q| -> f64 {
            round_trip(&rgb, 28, 28, q).iter().zip(&rgb).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum()
        };
        let (e80, e50, e25) = (err(80), err(50), err(25));
        assert!(e80 > 0.0 && e80 < e50 && e50 < e25, "{e80} {e50} {e25}");
    }
}
