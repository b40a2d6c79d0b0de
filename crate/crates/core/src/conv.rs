//! Separable valid-region filtering shared by the SSIM loss and the metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;

/// Normalized 1-D Gaussian taps of odd length `len` with standard deviation
/// `sigma` (in pixels).
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    debug_assert!(len % 2 == 1);
    let half = (len / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| libm::exp(-(i as f64) * (i as f64) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable filtering keeping only the fully covered (valid) region.
/// Output is `(W - len + 1) x (H - len + 1)`.
pub fn filter_valid(img: &Image, taps: &[f64]) -> Image {
    let len = taps.len();
    let ow = img.width + 1 - len;
    let oh = img.height + 1 - len;
    // Horizontal pass.
    let mut tmp = vec![0.0; ow * img.height];
    for y in 0..img.height {
        let row = &img.data[y * img.width..(y + 1) * img.width];
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * row[x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = Image::zeros(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[(y + k) * ow + x];
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Transpose of `filter_valid`: scatters a valid-region map back onto the
/// full image grid with the same separable taps. This is the adjoint used by
/// the SSIM backward pass: `⟨filter_valid(a), m⟩ = ⟨a, filter_adjoint(m)⟩`.
pub fn filter_adjoint(map: &Image, taps: &[f64], full_w: usize, full_h: usize) -> Image {
    let len = taps.len();
    debug_assert_eq!(map.width + len - 1, full_w);
    debug_assert_eq!(map.height + len - 1, full_h);
    // Vertical scatter.
    let mut tmp = vec![0.0; map.width * full_h];
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.at(x, y);
            for (k, &t) in taps.iter().enumerate() {
                tmp[(y + k) * map.width + x] += t * v;
            }
        }
    }
    // Horizontal scatter.
    let mut out = Image::zeros(full_w, full_h);
    for y in 0..full_h {
        for x in 0..map.width {
            let v = tmp[y * map.width + x];
            if v != 0.0 {
                let row = &mut out.data[y * full_w..(y + 1) * full_w];
                for (k, &t) in taps.iter().enumerate() {
                    row[x + k] += t * v;
                }
            }
        }
    }
    out
}

/// Elementwise product of two images.
pub fn hadamard(a: &Image, b: &Image) -> Image {
    debug_assert!(a.same_shape(b));
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Image {
        width: a.width,
        height: a.height,
        data,
    }
}

/// Prewitt gradient magnitudes over the valid interior, `(W-2) x (H-2)`.
pub fn prewitt_magnitude(img: &Image) -> Image {
    let ow = img.width - 2;
    let oh = img.height - 2;
    let mut out = Image::zeros(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let p = |dx: usize, dy: usize| img.at(x + dx, y + dy);
            let gx = (p(2, 0) + p(2, 1) + p(2, 2)) - (p(0, 0) + p(0, 1) + p(0, 2));
            let gy = (p(0, 2) + p(1, 2) + p(2, 2)) - (p(0, 0) + p(1, 0) + p(2, 0));
            // Prewitt taps are 1/3 smoothing x central difference /2.
            let gx = gx / 3.0;
            let gy = gy / 3.0;
            out.set(x, y, libm::sqrt(gx * gx + gy * gy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        let sum: f64 = t.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((t[i] - t[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_of_constant_is_constant() {
        let img = Image::filled(16, 13, 0.7);
        let out = filter_valid(&img, &gaussian_taps(11, 1.5));
        assert_eq!((out.width, out.height), (6, 3));
        for &v in &out.data {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // <F a, m> == <a, F^T m> for random a, m.
        let mut s = Stream::new(3, "adjoint");
        let taps = gaussian_taps(5, 1.0);
        let mut a = Image::zeros(9, 8);
        for v in &mut a.data {
            *v = s.uniform();
        }
        let fa = filter_valid(&a, &taps);
        let mut m = Image::zeros(fa.width, fa.height);
        for v in &mut m.data {
            *v = s.uniform() - 0.5;
        }
        let lhs: f64 = fa.data.iter().zip(&m.data).map(|(x, y)| x * y).sum();
        let back = filter_adjoint(&m, &taps, 9, 8);
        let rhs: f64 = a.data.iter().zip(&back.data).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn prewitt_flat_image_has_zero_gradient() {
        let img = Image::filled(6, 6, 0.4);
        let m = prewitt_magnitude(&img);
        assert!(m.data.iter().all(|&v| v == 0.0));
    }
}
