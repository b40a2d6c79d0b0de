//! Image-quality metrics: PSNR, 5-scale MS-SSIM, and the gradient-magnitude
//! similarity pair (GMS mean, GMSD deviation), with dataset aggregation.
//!
//! All metrics operate on the [0, 255] range; internal [0, 1] images are
//! scaled by 255 without rounding so the metrics stay continuous in the
//! render output.

use crate::conv::{filter_valid, hadamard, prewitt_magnitude};
use crate::image::Image;
use crate::ssim::window_taps;
use crate::CoreError;

/// MS-SSIM per-scale weights (5 scales).
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// GMSD regularization constant for the 8-bit range.
pub const GMSD_C: f64 = 170.0;

/// Scales an internal [0, 1] image onto the metric range.
pub fn to_255(img: &Image) -> Image {
    Image {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| v * 255.0).collect(),
    }
}

/// Peak signal-to-noise ratio in dB on the [0, 255] range; +inf for
/// identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, CoreError> {
    a.require_same_shape(b)?;
    let mut mse = 0.0;
    for i in 0..a.data.len() {
        let d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(255.0 * 255.0 / mse))
}

/// Mean luminance and contrast-structure terms of one SSIM scale, on the
/// [0, 255] range (C1 = (0.01·255)², C2 = (0.03·255)²).
fn scale_terms(a: &Image, b: &Image, taps: &[f64]) -> (f64, f64) {
    const C1: f64 = 6.5025; // (0.01 * 255)^2
    const C2: f64 = 58.5225; // (0.03 * 255)^2
    let mu_x = filter_valid(a, taps);
    let mu_y = filter_valid(b, taps);
    let xx = filter_valid(&hadamard(a, a), taps);
    let yy = filter_valid(&hadamard(b, b), taps);
    let xy = filter_valid(&hadamard(a, b), taps);
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    let m = mu_x.data.len();
    for i in 0..m {
        let (mx, my) = (mu_x.data[i], mu_y.data[i]);
        let sx = xx.data[i] - mx * mx;
        let sy = yy.data[i] - my * my;
        let sxy = xy.data[i] - mx * my;
        l_sum += (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        cs_sum += (2.0 * sxy + C2) / (sx + sy + C2);
    }
    (l_sum / m as f64, cs_sum / m as f64)
}

/// Number of usable MS-SSIM scales for the given dimensions: each scale
/// needs at least an 11-pixel minimum side after dyadic 2x2 mean pooling.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut dim = width.min(height);
    let mut scales = 0;
    while scales < 5 && dim >= 11 {
        scales += 1;
        dim /= 2;
    }
    scales
}

/// Multi-scale SSIM on the [0, 255] range: contrast-structure terms over up
/// to five dyadic scales and the luminance term at the coarsest, combined
/// with the standard exponents. When the image is too small for five
/// scales, the leading weights are renormalized over the usable scales.
/// Terms are clamped at zero so the weighted product stays in [0, 1].
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64, CoreError> {
    a.require_same_shape(b)?;
    let scales = ms_ssim_scales(a.width, a.height);
    if scales == 0 {
        return Err(CoreError::Contract(alloc::format!(
            "image {}x{} too small for MS-SSIM",
            a.width,
            a.height
        )));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let taps = window_taps();
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut value = 1.0;
    for s in 0..scales {
        let (l, cs) = scale_terms(&cur_a, &cur_b, &taps);
        let w = MS_SSIM_WEIGHTS[s] / wsum;
        if s + 1 == scales {
            value *= libm::pow(l.max(0.0) * cs.max(0.0), w);
        } else {
            value *= libm::pow(cs.max(0.0), w);
            cur_a = cur_a.downsample2();
            cur_b = cur_b.downsample2();
        }
    }
    Ok(value)
}

/// Gradient-magnitude similarity: Prewitt magnitudes, pointwise similarity
/// `(2 m_a m_b + c)/(m_a² + m_b² + c)`, returning `(mean, population std)`.
pub fn gms_gmsd(a: &Image, b: &Image) -> Result<(f64, f64), CoreError> {
    a.require_same_shape(b)?;
    if a.width < 3 || a.height < 3 {
        return Err(CoreError::Contract(alloc::format!(
            "image {}x{} too small for Prewitt gradients",
            a.width,
            a.height
        )));
    }
    let ma = prewitt_magnitude(a);
    let mb = prewitt_magnitude(b);
    let n = ma.data.len() as f64;
    let mut mean = 0.0;
    for i in 0..ma.data.len() {
        let (x, y) = (ma.data[i], mb.data[i]);
        mean += (2.0 * x * y + GMSD_C) / (x * x + y * y + GMSD_C);
    }
    mean /= n;
    let mut var = 0.0;
    for i in 0..ma.data.len() {
        let (x, y) = (ma.data[i], mb.data[i]);
        let s = (2.0 * x * y + GMSD_C) / (x * x + y * y + GMSD_C);
        var += (s - mean) * (s - mean);
    }
    Ok((mean, libm::sqrt(var / n)))
}

/// All four metrics of one frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ms_ssim: f64,
    pub gms: f64,
    pub gmsd: f64,
}

/// Evaluates a rendered/reference pair given internally scaled [0, 1] images.
pub fn evaluate_pair(rendered01: &Image, reference01: &Image) -> Result<FrameMetrics, CoreError> {
    let a = to_255(rendered01);
    let b = to_255(reference01);
    let (gms, gmsd) = gms_gmsd(&a, &b)?;
    Ok(FrameMetrics {
        psnr: psnr(&a, &b)?,
        ms_ssim: ms_ssim(&a, &b)?,
        gms,
        gmsd,
    })
}

/// Dataset mean ± population std per metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: FrameMetrics,
    pub std: FrameMetrics,
}

pub fn summarize(frames: &[FrameMetrics]) -> MetricSummary {
    let n = frames.len().max(1) as f64;
    let mut mean = FrameMetrics {
        psnr: 0.0,
        ms_ssim: 0.0,
        gms: 0.0,
        gmsd: 0.0,
    };
    for f in frames {
        mean.psnr += f.psnr / n;
        mean.ms_ssim += f.ms_ssim / n;
        mean.gms += f.gms / n;
        mean.gmsd += f.gmsd / n;
    }
    let mut var = FrameMetrics {
        psnr: 0.0,
        ms_ssim: 0.0,
        gms: 0.0,
        gmsd: 0.0,
    };
    for f in frames {
        var.psnr += (f.psnr - mean.psnr) * (f.psnr - mean.psnr) / n;
        var.ms_ssim += (f.ms_ssim - mean.ms_ssim) * (f.ms_ssim - mean.ms_ssim) / n;
        var.gms += (f.gms - mean.gms) * (f.gms - mean.gms) / n;
        var.gmsd += (f.gmsd - mean.gmsd) * (f.gmsd - mean.gmsd) / n;
    }
    MetricSummary {
        mean,
        std: FrameMetrics {
            psnr: libm::sqrt(var.psnr),
            ms_ssim: libm::sqrt(var.ms_ssim),
            gms: libm::sqrt(var.gms),
            gmsd: libm::sqrt(var.gmsd),
        },
    }
}
