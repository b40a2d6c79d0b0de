//! Single-scale SSIM with an analytic gradient, used by the training loss.
//!
//! 11x11 Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03² on the [0, 1]
//! range, valid-region windows only. The gradient is exact, so the whole
//! training loss survives a central finite-difference check.

use alloc::vec::Vec;

use crate::conv::{filter_adjoint, filter_valid, gaussian_taps, hadamard};
use crate::image::Image;
use crate::CoreError;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn check_dims(a: &Image, b: &Image) -> Result<(), CoreError> {
    a.require_same_shape(b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(CoreError::Contract(alloc::format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            a.width,
            a.height
        )));
    }
    Ok(())
}

struct WindowStats {
    mu_x: Image,
    mu_y: Image,
    sigma_x2: Image,
    sigma_y2: Image,
    sigma_xy: Image,
}

fn window_stats(a: &Image, b: &Image, taps: &[f64]) -> WindowStats {
    let mu_x = filter_valid(a, taps);
    let mu_y = filter_valid(b, taps);
    let xx = filter_valid(&hadamard(a, a), taps);
    let yy = filter_valid(&hadamard(b, b), taps);
    let xy = filter_valid(&hadamard(a, b), taps);
    let mut sigma_x2 = xx;
    let mut sigma_y2 = yy;
    let mut sigma_xy = xy;
    for i in 0..mu_x.data.len() {
        sigma_x2.data[i] -= mu_x.data[i] * mu_x.data[i];
        sigma_y2.data[i] -= mu_y.data[i] * mu_y.data[i];
        sigma_xy.data[i] -= mu_x.data[i] * mu_y.data[i];
    }
    WindowStats {
        mu_x,
        mu_y,
        sigma_x2,
        sigma_y2,
        sigma_xy,
    }
}

/// Mean SSIM over the valid window map.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, CoreError> {
    check_dims(a, b)?;
    let taps = gaussian_taps(WINDOW, SIGMA);
    let st = window_stats(a, b, &taps);
    let mut sum = 0.0;
    for i in 0..st.mu_x.data.len() {
        let (mx, my) = (st.mu_x.data[i], st.mu_y.data[i]);
        let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        let cs = (2.0 * st.sigma_xy.data[i] + C2) / (st.sigma_x2.data[i] + st.sigma_y2.data[i] + C2);
        sum += l * cs;
    }
    Ok(sum / st.mu_x.data.len() as f64)
}

/// SSIM and its gradient with respect to the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), CoreError> {
    check_dims(a, b)?;
    let taps = gaussian_taps(WINDOW, SIGMA);
    let st = window_stats(a, b, &taps);
    let m = st.mu_x.data.len();

    // Per-window coefficient maps for the three chains into a:
    //   dS/dμx, dS/dσx² (as a factor on 2(a_i - μx)), dS/dσxy (on (b_i - μy)).
    let mut sum = 0.0;
    let mut c_mu = Image::zeros(st.mu_x.width, st.mu_x.height);
    let mut c_sx = Image::zeros(st.mu_x.width, st.mu_x.height);
    let mut c_sxy = Image::zeros(st.mu_x.width, st.mu_x.height);
    for i in 0..m {
        let (mx, my) = (st.mu_x.data[i], st.mu_y.data[i]);
        let a1 = 2.0 * mx * my + C1;
        let b1 = mx * mx + my * my + C1;
        let a2 = 2.0 * st.sigma_xy.data[i] + C2;
        let b2 = st.sigma_x2.data[i] + st.sigma_y2.data[i] + C2;
        let l = a1 / b1;
        let cs = a2 / b2;
        sum += l * cs;
        c_mu.data[i] = cs * (2.0 * my * b1 - 2.0 * mx * a1) / (b1 * b1);
        c_sx.data[i] = -l * cs / b2;
        c_sxy.data[i] = 2.0 * l / b2;
    }
    let value = sum / m as f64;

    // dSSIM/da = (1/M) adj[ c_mu ] + (2a/M) adj[c_sx] - (2/M) adj[c_sx μx]
    //          + (b/M) adj[c_sxy] - (1/M) adj[c_sxy μy]
    let adj_mu = filter_adjoint(&c_mu, &taps, a.width, a.height);
    let adj_sx = filter_adjoint(&c_sx, &taps, a.width, a.height);
    let adj_sx_mx = filter_adjoint(&hadamard(&c_sx, &st.mu_x), &taps, a.width, a.height);
    let adj_sxy = filter_adjoint(&c_sxy, &taps, a.width, a.height);
    let adj_sxy_my = filter_adjoint(&hadamard(&c_sxy, &st.mu_y), &taps, a.width, a.height);
    let inv_m = 1.0 / m as f64;
    let mut grad = Image::zeros(a.width, a.height);
    for i in 0..grad.data.len() {
        grad.data[i] = inv_m
            * (adj_mu.data[i]
                + 2.0 * (a.data[i] * adj_sx.data[i] - adj_sx_mx.data[i])
                + b.data[i] * adj_sxy.data[i]
                - adj_sxy_my.data[i]);
    }
    Ok((value, grad))
}

/// Plain direct-formula SSIM used as an independent oracle in tests: one
/// explicit double loop per window, no shared filtering code.
pub fn ssim_reference(a: &Image, b: &Image) -> Result<f64, CoreError> {
    check_dims(a, b)?;
    let taps = gaussian_taps(WINDOW, SIGMA);
    let ow = a.width - WINDOW + 1;
    let oh = a.height - WINDOW + 1;
    let mut sum = 0.0;
    for wy in 0..oh {
        for wx in 0..ow {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let w = taps[dy] * taps[dx];
                    let av = a.at(wx + dx, wy + dy);
                    let bv = b.at(wx + dx, wy + dy);
                    mx += w * av;
                    my += w * bv;
                    xx += w * av * av;
                    yy += w * bv * bv;
                    xy += w * av * bv;
                }
            }
            let sx = xx - mx * mx;
            let sy = yy - my * my;
            let sxy = xy - mx * my;
            let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
            let cs = (2.0 * sxy + C2) / (sx + sy + C2);
            sum += l * cs;
        }
    }
    Ok(sum / (ow * oh) as f64)
}

/// Gaussian window taps shared with MS-SSIM.
pub fn window_taps() -> Vec<f64> {
    gaussian_taps(WINDOW, SIGMA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = Stream::new(seed, "ssim-test");
        let mut img = Image::zeros(w, h);
        for v in &mut img.data {
            *v = rng.uniform();
        }
        img
    }

    #[test]
    fn identical_images_score_one() {
        let a = random_image(24, 20, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_independent_reference() {
        let a = random_image(20, 18, 2);
        let b = random_image(20, 18, 3);
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b).unwrap();
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = random_image(16, 16, 4);
        let b = random_image(16, 16, 5);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn small_images_rejected() {
        let a = Image::zeros(8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = random_image(14, 14, 6);
        let b = random_image(14, 14, 7);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for idx in [0usize, 7, 13 * 14 + 5, 14 * 14 - 1, 6 * 14 + 6] {
            let mut ap = a.clone();
            ap.data[idx] += h;
            let mut am = a.clone();
            am.data[idx] -= h;
            let fd = (ssim(&ap, &b).unwrap() - ssim(&am, &b).unwrap()) / (2.0 * h);
            worst = worst.max((fd - grad.data[idx]).abs());
        }
        assert!(worst < 1e-8, "worst {worst}");
    }
}
