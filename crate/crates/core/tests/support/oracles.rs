//! Independent reference implementations.

use std::f64::consts::PI;

use apex_core::spectral::Image;
use num_complex::Complex64;

/// Direct O(N²) DFT per plane, unshifted layout.
pub fn naive_dft(img: &Image) -> Vec<Complex64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        acc += Complex64::from_polar(plane[y * w + x], ang);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}
