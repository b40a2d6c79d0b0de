//! Physics-based forward model: per-ray line integrals, transmittance
//! accumulation, view-dependent echo, soft coverage, and B-mode composition.
//!
//! Every scan line is swept top-down once. A Gaussian joins the sweep when
//! the depth reaches its support window and leaves it when both its line
//! integral is fully accumulated and its echo weight has fallen under the
//! cutoff; its finished transmittance factor is then folded into a running
//! product so per-pixel work stays proportional to the locally overlapping
//! Gaussians.
//!
//! ψ quadrature: the integrand `exp(-||o_g + t d_g||²/2)` is integrated in
//! the world ray parameter t over a window of ±`WINDOW_SIGMAS`·σ_t around
//! the closest approach t*, where σ_t = 1/||d_g||. The window is split into
//! panels of width σ_t and each panel is evaluated with the 3-point
//! Gauss-Legendre rule, which keeps the estimate within ~1e-5 of the exact
//! integral on the same window. Partial integrals ψ(z) reuse the same panel
//! grid, so the transmittance ramps in smoothly and monotonically as the ray
//! passes through each Gaussian.

use alloc::vec::Vec;

use crate::image::Image;
use crate::math::{self, M3, V3};
use crate::probe::{self, Pose, ProbeGeometry, RayBundle};
use crate::scene::{GaussianField, SceneMeta};
use crate::CoreError;

/// Echo contributors with Mahalanobis weight below this are skipped.
pub const W_CUTOFF: f64 = 1e-8;
/// Gaussians whose full analytic line integral falls below this are skipped
/// in the transmittance product.
pub const PSI_CUTOFF: f64 = 1e-10;
/// Half-width of the ψ quadrature window in units of σ_t. Wide enough that
/// the truncated tail mass (≈ 2e-9 of the total) and the window-edge terms
/// ignored by the backward pass (both of order exp(-k²/2) ≈ 1.5e-8) sit far
/// below the gradient-check tolerance.
pub const WINDOW_SIGMAS: f64 = 6.0;

pub const SQRT_2PI: f64 = 2.5066282746310002;

/// Mahalanobis² beyond which an echo weight is under `W_CUTOFF`.
const B2_MAX_ECHO: f64 = 36.841361487904734; // 2 ln(1e8)

// 3-point Gauss-Legendre rule on [-1, 1].
const GL_X: f64 = 0.7745966692414834; // sqrt(3/5)
const GL_W0: f64 = 5.0 / 9.0;
const GL_W1: f64 = 8.0 / 9.0;

/// Real spherical-harmonic constants: Y₀ and the degree-1 band.
pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;

/// Mahalanobis support radius that clears both cutoffs for a Gaussian whose
/// largest axis scale is `smax`: outside it the echo weight is below
/// `W_CUTOFF` and the analytic line integral √(2π)·σ_t·exp(-b²/2) (with
/// σ_t ≤ smax) is below `PSI_CUTOFF`.
pub fn support_radius(smax: f64) -> f64 {
    let r_w2 = B2_MAX_ECHO;
    let peak = SQRT_2PI * smax / PSI_CUTOFF;
    let r_psi2 = if peak > 1.0 { 2.0 * libm::log(peak) } else { 0.0 };
    libm::sqrt(r_w2.max(r_psi2))
}

/// A single scan-line ray.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: V3,
    /// Unit direction.
    pub direction: V3,
    /// Segment length ℓ, mm.
    pub length: f64,
}

impl Ray {
    pub fn from_bundle(bundle: &RayBundle, k: usize) -> Ray {
        Ray {
            origin: bundle.origins[k],
            direction: bundle.direction,
            length: bundle.segment_length,
        }
    }
}

/// Ray mapped into a Gaussian's canonical frame, where the Gaussian is a
/// standard normal: `o_g = S⁻¹Rᵀ(o - μ)`, `d_g = S⁻¹Rᵀ d`, `ℓ_g = ||d_g|| ℓ`.
/// The canonical point at world depth t along the ray is `o_g + t d_g`, so
/// integrals below keep t in world units.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalRay {
    pub o_g: V3,
    pub d_g: V3,
    pub l_g: f64,
}

pub fn to_canonical(field: &GaussianField, i: usize, ray: &Ray) -> CanonicalRay {
    let rot = math::quat_to_rot(math::quat_normalize(field.quaternions[i]));
    let s = field.scales(i);
    let rel = math::sub(ray.origin, field.means[i]);
    let yo = math::mat_tvec(&rot, rel);
    let yd = math::mat_tvec(&rot, ray.direction);
    let o_g = [yo[0] / s[0], yo[1] / s[1], yo[2] / s[2]];
    let d_g = [yd[0] / s[0], yd[1] / s[1], yd[2] / s[2]];
    CanonicalRay {
        o_g,
        d_g,
        l_g: math::norm(d_g) * ray.length,
    }
}

/// One panel of the composite 3-point Gauss-Legendre rule over [a, b].
#[inline]
pub(crate) fn gl3_panel(o_g: V3, d_g: V3, a: f64, b: f64) -> f64 {
    let h = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let x = GL_X * h;
    let f = |t: f64| {
        let c = [
            o_g[0] + t * d_g[0],
            o_g[1] + t * d_g[1],
            o_g[2] + t * d_g[2],
        ];
        math::fexp(-0.5 * math::norm2(c))
    };
    ((GL_W0 * f(mid - x) + GL_W1 * f(mid)) + GL_W0 * f(mid + x)) * h
}

/// Quadrature panel boundaries in units of σ_t around the closest approach.
/// The grid narrows toward the window edges so the 3-point rule stays within
/// a few 1e-4 relative error on every individual panel, even when a clipped
/// window leaves only steep tail mass.
pub(crate) const PANEL_U: [f64; 19] = [
    -6.0, -5.6, -5.15, -4.65, -4.1, -3.5, -2.8, -2.0, -1.0, 0.0, 1.0, 2.0, 2.8, 3.5, 4.1, 4.65,
    5.15, 5.6, 6.0,
];

/// Sensitivity of one panel boundary to `(t*, σ_t)`: interior boundaries
/// sit at `t* + U·σ_t`, so their coefficients are `(1, U)`; boundaries
/// clipped by the segment are constants `(0, 0)`.
pub(crate) type BoundaryCoeff = (f64, f64);

/// Incremental sweep over the panel grid of one ray-Gaussian window.
/// Completed panels accumulate through a caller-supplied rule so the forward
/// pass (value only) and the backward pass (value, parameter gradients, and
/// boundary-motion terms) replay the identical panel sequence.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PanelSweep {
    /// Start of the first panel not yet completed.
    pub panel_a: f64,
    u_idx: usize,
    pub psi_completed: f64,
    pub done: bool,
    /// Sensitivity of the current left boundary.
    pub left: BoundaryCoeff,
    hi_clipped: bool,
}

impl PanelSweep {
    pub fn new(
        win_lo: f64,
        win_hi: f64,
        t_star: f64,
        sigma_t: f64,
        active: bool,
    ) -> PanelSweep {
        let mut u_idx = 0;
        if active {
            while u_idx < PANEL_U.len() - 2 && t_star + PANEL_U[u_idx + 1] * sigma_t <= win_lo {
                u_idx += 1;
            }
        }
        let lo_clipped = t_star + PANEL_U[0] * sigma_t < win_lo;
        let hi_clipped = t_star + PANEL_U[PANEL_U.len() - 1] * sigma_t > win_hi;
        PanelSweep {
            panel_a: win_lo,
            u_idx,
            psi_completed: 0.0,
            done: !active,
            left: if lo_clipped { (0.0, 0.0) } else { (1.0, PANEL_U[0]) },
            hi_clipped,
        }
    }

    /// Completes every panel that ends at or before depth `z`, accumulating
    /// `complete(a, b, left, right)` where `left`/`right` carry the boundary
    /// sensitivities of the panel ends.
    #[inline]
    pub fn advance<F: FnMut(f64, f64, BoundaryCoeff, BoundaryCoeff) -> f64>(
        &mut self,
        t_star: f64,
        sigma_t: f64,
        win_hi: f64,
        z: f64,
        mut complete: F,
    ) {
        while !self.done {
            let table_b = t_star + PANEL_U[self.u_idx + 1] * sigma_t;
            let panel_b = table_b.min(win_hi);
            if panel_b > z {
                break;
            }
            let right: BoundaryCoeff = if table_b < win_hi {
                (1.0, PANEL_U[self.u_idx + 1])
            } else if self.hi_clipped {
                (0.0, 0.0)
            } else {
                (1.0, PANEL_U[PANEL_U.len() - 1])
            };
            self.psi_completed += complete(self.panel_a, panel_b, self.left, right);
            self.panel_a = panel_b;
            self.left = right;
            if panel_b >= win_hi {
                self.done = true;
            } else {
                self.u_idx += 1;
            }
        }
    }
}

/// Geometry of one ray against one Gaussian in canonical space.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RayHit {
    pub o_g: V3,
    pub d_g: V3,
    pub sigma_t: f64,
    pub t_star: f64,
    pub b2: f64,
}

pub(crate) fn ray_hit(canon: &CanonicalRay) -> RayHit {
    let dg2 = math::norm2(canon.d_g);
    let dot_od = math::dot(canon.o_g, canon.d_g);
    let t_star = -dot_od / dg2;
    let b2 = (math::norm2(canon.o_g) - t_star * t_star * dg2).max(0.0);
    RayHit {
        o_g: canon.o_g,
        d_g: canon.d_g,
        sigma_t: 1.0 / libm::sqrt(dg2),
        t_star,
        b2,
    }
}

/// ψ window for a hit, clipped to the segment `[0, z_limit]`; empty windows
/// come back with `hi <= lo`.
#[inline]
pub(crate) fn psi_window(hit: &RayHit, z_limit: f64) -> (f64, f64) {
    let half = WINDOW_SIGMAS * hit.sigma_t;
    ((hit.t_star - half).max(0.0), (hit.t_star + half).min(z_limit))
}

/// Composite quadrature over `[lo, min(hi, z)]` on the panel grid. The
/// incremental sweep in the renderer reproduces these panels exactly, so the
/// standalone value and the swept value agree bitwise.
pub(crate) fn psi_quadrature(hit: &RayHit, lo: f64, hi: f64, z: f64) -> f64 {
    let top = hi.min(z);
    if top <= lo {
        return 0.0;
    }
    let mut sweep = PanelSweep::new(lo, hi, hit.t_star, hit.sigma_t, true);
    sweep.advance(hit.t_star, hit.sigma_t, hi, top, |a, b, _, _| {
        gl3_panel(hit.o_g, hit.d_g, a, b)
    });
    if sweep.done || top <= sweep.panel_a {
        sweep.psi_completed
    } else {
        sweep.psi_completed + gl3_panel(hit.o_g, hit.d_g, sweep.panel_a, top)
    }
}

/// Line integral of the Gaussian density along the ray up to depth
/// `z_limit`, estimated with the composite 3-point Gauss-Legendre rule over
/// a window of ±`WINDOW_SIGMAS`·σ_t around the closest approach. Returns 0
/// for an empty window.
pub fn psi(field: &GaussianField, i: usize, ray: &Ray, z_limit: f64) -> f64 {
    let hit = ray_hit(&to_canonical(field, i, ray));
    let (lo, hi) = psi_window(&hit, z_limit);
    psi_quadrature(&hit, lo, hi, z_limit)
}

/// Transmittance factor of one Gaussian given its partial line integral.
#[inline]
pub(crate) fn trans_factor(tau: f64, psi_z: f64) -> f64 {
    tau + (1.0 - tau) * math::fexp(-psi_z)
}

/// Cumulative transmittance T(z) = Π τ_i + (1-τ_i)exp(-ψ_i(z)) over the
/// given Gaussians, with ψ taken as the partial integral up to z. Gaussians
/// whose full analytic integral is below `PSI_CUTOFF` are skipped.
pub fn transmittance_at(field: &GaussianField, ray: &Ray, ids: &[usize], z: f64) -> f64 {
    let mut t = 1.0;
    for &i in ids {
        let hit = ray_hit(&to_canonical(field, i, ray));
        let analytic = SQRT_2PI * hit.sigma_t * libm::exp(-0.5 * hit.b2);
        if analytic < PSI_CUTOFF {
            continue;
        }
        let (lo, hi) = psi_window(&hit, ray.length);
        let psi_z = psi_quadrature(&hit, lo, hi, z);
        t *= trans_factor(field.transmittance(i), psi_z);
    }
    t
}

/// Real SH basis `[Y₀, Y₁₋₁, Y₁₀, Y₁₁]` at a unit direction.
#[inline]
pub fn sh_basis(direction: V3) -> [f64; 4] {
    [
        SH_C0,
        SH_C1 * direction[1],
        SH_C1 * direction[2],
        SH_C1 * direction[0],
    ]
}

/// View-dependent echo amplitude: degree-1 SH expansion, clamped to ≥ 0.
pub fn sh_intensity(coeffs: [f64; 4], direction: V3) -> f64 {
    let y = sh_basis(direction);
    let pre = coeffs[0] * y[0] + coeffs[1] * y[1] + coeffs[2] * y[2] + coeffs[3] * y[3];
    pre.max(0.0)
}

/// Echo at a world point: coverage-weighted mean of per-Gaussian intensities
/// blended with the background. Returns `(E, S, γ)` where S is the total
/// footprint and γ = 1 - exp(-S) the soft coverage.
pub fn echo_at(
    field: &GaussianField,
    meta: &SceneMeta,
    ids: &[usize],
    point: V3,
    direction: V3,
) -> (f64, f64, f64) {
    let mut s = 0.0;
    let mut q = 0.0;
    for &i in ids {
        let rot = math::quat_to_rot(math::quat_normalize(field.quaternions[i]));
        let sc = field.scales(i);
        let rel = math::sub(point, field.means[i]);
        let y = math::mat_tvec(&rot, rel);
        let c = [y[0] / sc[0], y[1] / sc[1], y[2] / sc[2]];
        let w = libm::exp(-0.5 * math::norm2(c));
        if w < W_CUTOFF {
            continue;
        }
        s += w;
        q += sh_intensity(field.sh_coeffs[i], direction) * w;
    }
    let gamma = -libm::expm1(-s);
    let e = (1.0 - gamma) * meta.background_intensity + gamma * q / (s + meta.coverage_epsilon);
    (e, s, gamma)
}

/// Out-of-plane ray-origin perturbation settings.
#[derive(Debug, Clone, Copy)]
pub struct OopPerturb {
    pub delta_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderOptions {
    pub oop: Option<OopPerturb>,
    pub retain_backward: bool,
}

/// Per-Gaussian, per-frame precomputation.
#[derive(Debug, Clone)]
pub(crate) struct PrepGauss {
    /// Global Gaussian id.
    pub id: usize,
    /// S⁻¹Rᵀ.
    pub srt: M3,
    /// S⁻¹Rᵀ μ, so `o_g = srt·o - srt_mu`.
    pub srt_mu: V3,
    pub d_g: V3,
    pub dg2: f64,
    pub sigma_t: f64,
    /// Mahalanobis² above which the analytic ψ is under `PSI_CUTOFF`;
    /// negative when the Gaussian can never pass the cutoff.
    pub b2_max_psi: f64,
    pub tau: f64,
    pub intensity: f64,
    pub pre_act: f64,
    // Backward chains.
    pub rot: M3,
    pub inv_s: V3,
    /// Normalized quaternion and the norm of the raw stored one.
    pub quat: [f64; 4],
    pub quat_norm: f64,
}

/// One ray-Gaussian encounter, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct RayGauss {
    /// Index into `FramePrep::gauss`.
    pub gi: u32,
    pub o_g: V3,
    pub t_star: f64,
    pub win_lo: f64,
    pub win_hi: f64,
    pub echo_lo: f64,
    pub echo_hi: f64,
    pub act_lo: f64,
    pub act_hi: f64,
    pub psi_active: bool,
    pub echo_active: bool,
    /// Full windowed line integral, filled when the sweep passes the window.
    pub psi_full: f64,
    /// exp(-ψ_full).
    pub x_full: f64,
    /// Final transmittance factor τ + (1-τ)·x_full.
    pub t_full: f64,
}

/// Everything a scanline render needs, owned (no borrow of the field), so a
/// frame's backward pass can outlive scene mutation.
#[derive(Debug, Clone)]
pub struct FramePrep {
    pub(crate) meta: SceneMeta,
    pub(crate) geometry: ProbeGeometry,
    pub(crate) bundle: RayBundle,
    pub(crate) sh_dir: [f64; 4],
    /// Sorted global ids that survived frame-level culling.
    pub culled: Vec<usize>,
    pub(crate) gauss: Vec<PrepGauss>,
    /// Per-scanline candidate lists into `gauss` (CSR layout).
    pub(crate) ray_offsets: Vec<usize>,
    pub(crate) ray_items: Vec<u32>,
}

impl FramePrep {
    pub fn n_scanlines(&self) -> usize {
        self.geometry.n_scanlines
    }

    pub fn n_depth_samples(&self) -> usize {
        self.geometry.n_depth_samples
    }
}

/// Builds the per-frame acceleration structure: NaN guard, frame-level
/// culling (widened by the bundle's actual elevational offsets), per-frame
/// canonical precomputation, and per-scanline candidate binning.
pub fn prepare(
    field: &GaussianField,
    meta: &SceneMeta,
    geometry: &ProbeGeometry,
    pose: &Pose,
    bundle: RayBundle,
) -> Result<FramePrep, CoreError> {
    geometry.validate()?;
    pose.validate(1e-9)?;
    if let Some((gaussian, what)) = field.find_non_finite() {
        return Err(CoreError::NumericFault { gaussian, what });
    }
    if bundle.origins.len() != geometry.n_scanlines
        || bundle.depth_samples.len() != geometry.n_depth_samples
    {
        return Err(CoreError::Contract(alloc::format!(
            "bundle shape {}x{} does not match geometry {}x{}",
            bundle.origins.len(),
            bundle.depth_samples.len(),
            geometry.n_scanlines,
            geometry.n_depth_samples
        )));
    }

    // Widen the culling slab by the actual out-of-plane offsets.
    let mut elev_margin: f64 = 0.0;
    for o in &bundle.origins {
        elev_margin = elev_margin.max(pose.to_probe(*o)[1].abs());
    }

    let w = geometry.n_scanlines;
    let pitch = geometry.lateral_pitch();
    let half_w = 0.5 * geometry.lateral_width;
    let mut culled = Vec::new();
    let mut gauss: Vec<PrepGauss> = Vec::new();
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut counts = alloc::vec![0usize; w];

    for i in 0..field.len() {
        let quat_norm = math::quat_norm(field.quaternions[i]);
        let q = math::quat_normalize(field.quaternions[i]);
        let rot = math::quat_to_rot(q);
        let s = field.scales(i);
        let inv_s = [1.0 / s[0], 1.0 / s[1], 1.0 / s[2]];
        let smax = s[0].max(s[1]).max(s[2]);
        let radius = support_radius(smax);

        // Probe-frame center and per-axis sigmas.
        let center = pose.to_probe(field.means[i]);
        let b = math::mat_mul(&math::transpose(&pose.rotation), &rot);
        let mut axis_sigma = [0.0; 3];
        for a in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                let v = b[a][k] * s[k];
                acc += v * v;
            }
            axis_sigma[a] = libm::sqrt(acc);
        }

        let lateral_ok = center[0].abs() <= half_w + radius * axis_sigma[0];
        let elev_ok =
            center[1].abs() <= geometry.elevational_slab + elev_margin + radius * axis_sigma[1];
        let axial_ok = center[2] >= -radius * axis_sigma[2]
            && center[2] <= geometry.imaging_depth + radius * axis_sigma[2];
        if !(lateral_ok && elev_ok && axial_ok) {
            continue;
        }

        // Canonical precomputation shared by all rays of the frame.
        let mut srt = [[0.0; 3]; 3];
        for a in 0..3 {
            for c in 0..3 {
                srt[a][c] = inv_s[a] * rot[c][a];
            }
        }
        let d_g = math::mat_vec(&srt, bundle.direction);
        let dg2 = math::norm2(d_g);
        if !(dg2 > 0.0) {
            continue;
        }
        let sigma_t = 1.0 / libm::sqrt(dg2);
        let peak = SQRT_2PI * sigma_t / PSI_CUTOFF;
        let b2_max_psi = if peak > 1.0 {
            2.0 * libm::log(peak)
        } else {
            -1.0
        };
        let pre_act = {
            let y = sh_basis(bundle.direction);
            let c = field.sh_coeffs[i];
            c[0] * y[0] + c[1] * y[1] + c[2] * y[2] + c[3] * y[3]
        };

        // Scanline range from the lateral extent.
        let ext = radius * axis_sigma[0];
        let k_lo = libm::ceil((center[0] - ext + half_w) / pitch - 0.5).max(0.0) as usize;
        let k_hi_f = libm::floor((center[0] + ext + half_w) / pitch - 0.5);
        culled.push(i);
        if k_hi_f < 0.0 || k_lo >= w {
            continue;
        }
        let k_hi = (k_hi_f as usize).min(w - 1);
        if k_lo > k_hi {
            continue;
        }

        let gi = gauss.len();
        gauss.push(PrepGauss {
            id: i,
            srt,
            srt_mu: math::mat_vec(&srt, field.means[i]),
            d_g,
            dg2,
            sigma_t,
            b2_max_psi,
            tau: field.transmittance(i),
            intensity: pre_act.max(0.0),
            pre_act,
            rot,
            inv_s,
            quat: q,
            quat_norm,
        });
        ranges.push((k_lo, k_hi));
        for c in counts.iter_mut().take(k_hi + 1).skip(k_lo) {
            *c += 1;
        }
        let _ = gi;
    }

    // CSR per-scanline lists, ascending Gaussian order within each line.
    let mut ray_offsets = alloc::vec![0usize; w + 1];
    for k in 0..w {
        ray_offsets[k + 1] = ray_offsets[k] + counts[k];
    }
    let mut cursor = ray_offsets.clone();
    let mut ray_items = alloc::vec![0u32; ray_offsets[w]];
    for (gi, &(k_lo, k_hi)) in ranges.iter().enumerate() {
        for k in k_lo..=k_hi {
            ray_items[cursor[k]] = gi as u32;
            cursor[k] += 1;
        }
    }

    Ok(FramePrep {
        meta: meta.clone(),
        geometry: *geometry,
        sh_dir: sh_basis(bundle.direction),
        bundle,
        culled,
        gauss,
        ray_offsets,
        ray_items,
    })
}

/// Raw scanline output: one column of each map plus the backward record.
pub struct ScanlineRender {
    pub bmode: Vec<f64>,
    pub echo: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub coverage: Vec<f64>,
    pub(crate) backward: Option<RayBackward>,
}

/// Per-ray record kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct RayBackward {
    pub gaussians: Vec<RayGauss>,
    /// CSR offsets (length H+1) into `contribs`.
    pub contrib_offsets: Vec<u32>,
    /// Echo contributors per pixel: (index into `gaussians`, weight).
    pub contribs: Vec<(u32, f64)>,
}

struct ActState {
    rg: u32,
    sweep: PanelSweep,
}

/// Builds the per-ray encounter list for scanline `k`, sorted by activation
/// depth with Gaussian order as the tie-break.
fn build_ray_gaussians(prep: &FramePrep, k: usize) -> Vec<RayGauss> {
    let origin = prep.bundle.origins[k];
    let length = prep.bundle.segment_length;
    let mut list: Vec<RayGauss> = Vec::new();
    for &gi in &prep.ray_items[prep.ray_offsets[k]..prep.ray_offsets[k + 1]] {
        let g = &prep.gauss[gi as usize];
        let o_g = math::sub(math::mat_vec(&g.srt, origin), g.srt_mu);
        let dot_od = math::dot(o_g, g.d_g);
        let t_star = -dot_od / g.dg2;
        let b2 = (math::norm2(o_g) - t_star * t_star * g.dg2).max(0.0);

        let half = WINDOW_SIGMAS * g.sigma_t;
        let win_lo = (t_star - half).max(0.0);
        let win_hi = (t_star + half).min(length);
        let psi_active = b2 <= g.b2_max_psi && win_hi > win_lo;

        let (echo_lo, echo_hi, echo_active) = if b2 <= B2_MAX_ECHO {
            let hw = g.sigma_t * libm::sqrt(B2_MAX_ECHO - b2);
            let lo = (t_star - hw).max(0.0);
            let hi = (t_star + hw).min(length);
            (lo, hi, hi >= lo)
        } else {
            (0.0, -1.0, false)
        };

        if !psi_active && !echo_active {
            continue;
        }
        let act_lo = match (psi_active, echo_active) {
            (true, true) => win_lo.min(echo_lo),
            (true, false) => win_lo,
            (false, true) => echo_lo,
            _ => unreachable!(),
        };
        let act_hi = match (psi_active, echo_active) {
            (true, true) => win_hi.max(echo_hi),
            (true, false) => win_hi,
            (false, true) => echo_hi,
            _ => unreachable!(),
        };
        list.push(RayGauss {
            gi,
            o_g,
            t_star,
            win_lo,
            win_hi,
            echo_lo,
            echo_hi,
            act_lo,
            act_hi,
            psi_active,
            echo_active,
            psi_full: 0.0,
            x_full: 1.0,
            t_full: 1.0,
        });
    }
    list.sort_unstable_by(|a, b| {
        a.act_lo
            .total_cmp(&b.act_lo)
            .then_with(|| a.gi.cmp(&b.gi))
    });
    list
}

/// Advances the panel sweep of one active Gaussian to depth `z` and returns
/// the partial integral ψ(z).
#[inline]
fn advance_psi(sweep: &mut PanelSweep, rg: &RayGauss, g: &PrepGauss, z: f64) -> f64 {
    sweep.advance(rg.t_star, g.sigma_t, rg.win_hi, z, |a, b, _, _| {
        gl3_panel(rg.o_g, g.d_g, a, b)
    });
    if sweep.done || z <= sweep.panel_a {
        sweep.psi_completed
    } else {
        sweep.psi_completed + gl3_panel(rg.o_g, g.d_g, sweep.panel_a, z)
    }
}

/// Completes all remaining panels of an active Gaussian.
fn finish_psi(sweep: &mut PanelSweep, rg: &RayGauss, g: &PrepGauss) {
    sweep.advance(rg.t_star, g.sigma_t, rg.win_hi, f64::INFINITY, |a, b, _, _| {
        gl3_panel(rg.o_g, g.d_g, a, b)
    });
}

/// Renders one scan line. Pure in `(prep, k)`; columns of the output maps.
pub fn render_scanline(prep: &FramePrep, k: usize, retain_backward: bool) -> ScanlineRender {
    let h = prep.geometry.n_depth_samples;
    let depths = &prep.bundle.depth_samples;
    let mut ray_gauss = build_ray_gaussians(prep, k);

    let mut bmode = Vec::with_capacity(h);
    let mut echo = Vec::with_capacity(h);
    let mut transmittance = Vec::with_capacity(h);
    let mut coverage = Vec::with_capacity(h);
    let mut contrib_offsets: Vec<u32> = Vec::with_capacity(h + 1);
    let mut contribs: Vec<(u32, f64)> = Vec::new();
    contrib_offsets.push(0);

    let mut active: Vec<ActState> = Vec::new();
    let mut completed_t = 1.0f64;
    let mut next = 0usize;
    let i_bkg = prep.meta.background_intensity;
    let eps = prep.meta.coverage_epsilon;

    for j in 0..h {
        let z = depths[j];
        while next < ray_gauss.len() && ray_gauss[next].act_lo <= z {
            let rg = &ray_gauss[next];
            active.push(ActState {
                rg: next as u32,
                sweep: PanelSweep::new(
                    rg.win_lo,
                    rg.win_hi,
                    rg.t_star,
                    prep.gauss[rg.gi as usize].sigma_t,
                    rg.psi_active,
                ),
            });
            next += 1;
        }

        let mut t = completed_t;
        let mut s_sum = 0.0;
        let mut q_sum = 0.0;
        for st in &mut active {
            let rg = &ray_gauss[st.rg as usize];
            let g = &prep.gauss[rg.gi as usize];
            if rg.psi_active {
                let psi_z = advance_psi(&mut st.sweep, rg, g, z);
                t *= trans_factor(g.tau, psi_z);
            }
            if rg.echo_active && z >= rg.echo_lo && z <= rg.echo_hi {
                let c = [
                    rg.o_g[0] + z * g.d_g[0],
                    rg.o_g[1] + z * g.d_g[1],
                    rg.o_g[2] + z * g.d_g[2],
                ];
                let w = math::fexp(-0.5 * math::norm2(c));
                if w >= W_CUTOFF {
                    s_sum += w;
                    q_sum += g.intensity * w;
                    if retain_backward {
                        contribs.push((st.rg, w));
                    }
                }
            }
        }

        let gamma = -libm::expm1(-s_sum);
        let e = (1.0 - gamma) * i_bkg + gamma * q_sum / (s_sum + eps);
        let b_pre = t * e;
        bmode.push(b_pre.clamp(0.0, 1.0));
        echo.push(e);
        transmittance.push(t);
        coverage.push(gamma);
        contrib_offsets.push(contribs.len() as u32);

        // Fold Gaussians the sweep has passed into the running product.
        let peek = if j + 1 < h { depths[j + 1] } else { f64::INFINITY };
        let mut idx = 0;
        while idx < active.len() {
            let rg_idx = active[idx].rg as usize;
            if ray_gauss[rg_idx].act_hi < peek {
                let mut st = active.remove(idx);
                let rg = &mut ray_gauss[rg_idx];
                let g = &prep.gauss[rg.gi as usize];
                if rg.psi_active {
                    finish_psi(&mut st.sweep, rg, g);
                    rg.psi_full = st.sweep.psi_completed;
                    rg.x_full = math::fexp(-rg.psi_full);
                    rg.t_full = g.tau + (1.0 - g.tau) * rg.x_full;
                    completed_t *= rg.t_full;
                }
            } else {
                idx += 1;
            }
        }
    }

    // Finish ψ bookkeeping for Gaussians still active at the bottom.
    for st in &mut active {
        let rg = &mut ray_gauss[st.rg as usize];
        let g = &prep.gauss[rg.gi as usize];
        if rg.psi_active {
            finish_psi(&mut st.sweep, rg, g);
            rg.psi_full = st.sweep.psi_completed;
            rg.x_full = math::fexp(-rg.psi_full);
            rg.t_full = g.tau + (1.0 - g.tau) * rg.x_full;
        }
    }

    ScanlineRender {
        bmode,
        echo,
        transmittance,
        coverage,
        backward: retain_backward.then_some(RayBackward {
            gaussians: ray_gauss,
            contrib_offsets,
            contribs,
        }),
    }
}

/// Maps of one rendered pose plus the retained per-ray state for backward.
#[derive(Debug)]
pub struct RenderOutput {
    pub bmode: Image,
    pub echo: Image,
    pub transmittance: Image,
    pub coverage: Image,
    pub backward: Option<FrameBackward>,
}

/// Frame preparation plus per-ray sweep records; everything the backward
/// pass needs, detached from the field.
#[derive(Debug)]
pub struct FrameBackward {
    pub prep: FramePrep,
    pub(crate) rays: Vec<RayBackward>,
}

/// Assembles per-scanline results (in scanline order) into images.
pub fn assemble(prep: FramePrep, mut columns: Vec<ScanlineRender>) -> RenderOutput {
    let w = prep.geometry.n_scanlines;
    let h = prep.geometry.n_depth_samples;
    debug_assert_eq!(columns.len(), w);
    let mut bmode = Image::zeros(w, h);
    let mut echo = Image::zeros(w, h);
    let mut transmittance = Image::zeros(w, h);
    let mut coverage = Image::zeros(w, h);
    let retain = columns.first().is_some_and(|c| c.backward.is_some());
    let mut rays = Vec::with_capacity(if retain { w } else { 0 });
    for (k, col) in columns.iter_mut().enumerate() {
        for j in 0..h {
            bmode.set(k, j, col.bmode[j]);
            echo.set(k, j, col.echo[j]);
            transmittance.set(k, j, col.transmittance[j]);
            coverage.set(k, j, col.coverage[j]);
        }
        if retain {
            rays.push(col.backward.take().expect("uniform retain flag"));
        }
    }
    RenderOutput {
        bmode,
        echo,
        transmittance,
        coverage,
        backward: retain.then_some(FrameBackward { prep, rays }),
    }
}

/// Serial reference renderer over a prepared frame.
pub fn render_prepared(prep: FramePrep, retain_backward: bool) -> RenderOutput {
    let w = prep.geometry.n_scanlines;
    let columns = (0..w)
        .map(|k| render_scanline(&prep, k, retain_backward))
        .collect();
    assemble(prep, columns)
}

/// Renders the field at a pose: builds rays (optionally perturbed
/// out-of-plane), prepares the frame, and sweeps every scan line.
pub fn render(
    field: &GaussianField,
    meta: &SceneMeta,
    geometry: &ProbeGeometry,
    pose: &Pose,
    options: &RenderOptions,
) -> Result<RenderOutput, CoreError> {
    let mut bundle = probe::make_rays(geometry, pose)?;
    if let Some(oop) = options.oop {
        bundle = probe::perturb_out_of_plane(&bundle, oop.delta_max, oop.seed);
    }
    let prep = prepare(field, meta, geometry, pose, bundle)?;
    Ok(render_prepared(prep, options.retain_backward))
}
