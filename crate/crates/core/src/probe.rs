//! Transducer geometry, poses, scan-line rays, out-of-plane perturbation,
//! and conservative culling of Gaussians against the imaging slab.
//!
//! Probe-frame convention: x lateral, y elevational, z axial (depth). A pose
//! maps probe coordinates into world coordinates.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math::{self, M3, V3};
use crate::render;
use crate::rng::Stream;
use crate::scene::GaussianField;
use crate::CoreError;

/// Linear-array geometry; pixel (k, j) spans the image column k (scan line)
/// and row j (depth sample).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeGeometry {
    /// Footprint of the array along the lateral axis, mm.
    pub lateral_width: f64,
    /// Imaging depth (ray segment length), mm.
    pub imaging_depth: f64,
    /// Number of scan lines == image width in pixels.
    pub n_scanlines: usize,
    /// Number of depth samples == image height in pixels.
    pub n_depth_samples: usize,
    /// Culling slab half-thickness along the elevational axis, mm.
    pub elevational_slab: f64,
}

impl ProbeGeometry {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.lateral_width <= 0.0
            || self.imaging_depth <= 0.0
            || self.n_scanlines == 0
            || self.n_depth_samples == 0
            || self.elevational_slab <= 0.0
        {
            return Err(CoreError::Config(format!(
                "probe geometry must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Lateral pixel spacing, mm.
    pub fn lateral_pitch(&self) -> f64 {
        self.lateral_width / self.n_scanlines as f64
    }

    /// Axial pixel spacing, mm.
    pub fn axial_pitch(&self) -> f64 {
        self.imaging_depth / self.n_depth_samples as f64
    }

    /// Lateral center of scan line `k` in probe coordinates.
    pub fn scanline_x(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.lateral_pitch() - 0.5 * self.lateral_width
    }

    /// Cell-centered depth of row `j`, mm.
    pub fn depth_z(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.axial_pitch()
    }
}

/// Rigid transform mapping probe coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: M3,
    pub translation: V3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: math::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: M3, translation: V3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Checks RᵀR = I and det R = 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), CoreError> {
        let r = &self.rotation;
        let rtr = math::mat_mul(&math::transpose(r), r);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - want).abs() > tol {
                    return Err(CoreError::Pose(format!(
                        "rotation is not orthonormal: (RᵀR)[{i}][{j}] = {}",
                        rtr[i][j]
                    )));
                }
            }
        }
        let det = math::det3(r);
        if (det - 1.0).abs() > tol {
            return Err(CoreError::Pose(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    pub fn to_world(&self, p: V3) -> V3 {
        math::add(math::mat_vec(&self.rotation, p), self.translation)
    }

    pub fn to_probe(&self, p: V3) -> V3 {
        math::mat_tvec(&self.rotation, math::sub(p, self.translation))
    }

    pub fn lateral_axis(&self) -> V3 {
        math::mat_vec(&self.rotation, [1.0, 0.0, 0.0])
    }

    pub fn elevational_axis(&self) -> V3 {
        math::mat_vec(&self.rotation, [0.0, 1.0, 0.0])
    }

    pub fn axial_axis(&self) -> V3 {
        math::mat_vec(&self.rotation, [0.0, 0.0, 1.0])
    }
}

/// One ray per scan line, all sharing the axial direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub origins: Vec<V3>,
    /// Shared unit direction (the transducer surface normal).
    pub direction: V3,
    /// Unit elevational axis; out-of-plane offsets move origins along it.
    pub elevational: V3,
    /// Ray segment length ℓ = imaging depth, mm.
    pub segment_length: f64,
    /// Cell-centered sample depths, mm.
    pub depth_samples: Vec<f64>,
}

/// Builds the scan-line rays for a pose: origin k sits at the lateral center
/// of column k on the transducer face, direction is the surface normal, and
/// pixel (k, j) is the world point `origin_k + z_j * direction`.
pub fn make_rays(geometry: &ProbeGeometry, pose: &Pose) -> Result<RayBundle, CoreError> {
    geometry.validate()?;
    pose.validate(1e-9)?;
    let origins = (0..geometry.n_scanlines)
        .map(|k| pose.to_world([geometry.scanline_x(k), 0.0, 0.0]))
        .collect();
    let depth_samples = (0..geometry.n_depth_samples)
        .map(|j| geometry.depth_z(j))
        .collect();
    Ok(RayBundle {
        origins,
        direction: pose.axial_axis(),
        elevational: pose.elevational_axis(),
        segment_length: geometry.imaging_depth,
        depth_samples,
    })
}

/// Draws one offset `u * delta_max` with `u` in [-1, 1] distributed with
/// density proportional to cos(πu/2), by inverting the CDF (1 + sin(πu/2))/2.
#[inline]
pub fn cosine_weighted_offset(rng: &mut Stream, delta_max: f64) -> f64 {
    let v = rng.uniform();
    let u = core::f64::consts::FRAC_2_PI * libm::asin(2.0 * v - 1.0);
    u * delta_max
}

/// Shifts every ray origin along the elevational axis by an i.i.d.
/// cosine-weighted offset of magnitude at most `delta_max`. Directions and
/// depth samples are untouched; `delta_max = 0` returns the bundle unchanged.
pub fn perturb_out_of_plane(bundle: &RayBundle, delta_max: f64, seed: u64) -> RayBundle {
    if delta_max == 0.0 {
        return bundle.clone();
    }
    let mut rng = Stream::new(seed, "oop");
    let mut out = bundle.clone();
    for origin in &mut out.origins {
        let off = cosine_weighted_offset(&mut rng, delta_max);
        *origin = math::add(*origin, math::scale(bundle.elevational, off));
    }
    out
}

/// Per-Gaussian footprint statistics in probe coordinates, shared between
/// culling and render preparation.
pub(crate) struct ProbeFootprint {
    /// Gaussian center in probe coordinates.
    pub center: V3,
    /// Standard deviation of the Gaussian along each probe axis.
    pub axis_sigma: V3,
    /// Mahalanobis radius beyond which the Gaussian clears both the echo
    /// weight cutoff and the transmittance cutoff on any ray.
    pub radius: f64,
}

pub(crate) fn probe_footprint(field: &GaussianField, i: usize, pose: &Pose) -> ProbeFootprint {
    let center = pose.to_probe(field.means[i]);
    let rot = math::quat_to_rot(math::quat_normalize(field.quaternions[i]));
    let s = field.scales(i);
    // B = Rpᵀ R; axis variance along probe axis a is Σ_k (B[a][k] s_k)².
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
    let smax = s[0].max(s[1]).max(s[2]);
    ProbeFootprint {
        center,
        axis_sigma,
        radius: render::support_radius(smax),
    }
}

/// Ids of Gaussians whose support can reach the imaging slab of this pose.
///
/// The test bounds the Mahalanobis distance from the Gaussian to every ray
/// point by the per-axis separation over the axis sigma, so the returned set
/// is a superset of every Gaussian whose echo weight or line integral clears
/// the renderer's cutoffs ([`render::W_CUTOFF`], [`render::PSI_CUTOFF`]).
/// `elev_margin` widens the slab for perturbed ray origins.
pub fn cull_gaussians_with_margin(
    field: &GaussianField,
    geometry: &ProbeGeometry,
    pose: &Pose,
    elev_margin: f64,
) -> Vec<usize> {
    let half_w = 0.5 * geometry.lateral_width;
    let mut out = Vec::new();
    for i in 0..field.len() {
        let fp = probe_footprint(field, i, pose);
        let lateral_ok = fp.center[0].abs() <= half_w + fp.radius * fp.axis_sigma[0];
        let elev_ok = fp.center[1].abs()
            <= geometry.elevational_slab + elev_margin + fp.radius * fp.axis_sigma[1];
        let axial_ok = fp.center[2] >= -fp.radius * fp.axis_sigma[2]
            && fp.center[2] <= geometry.imaging_depth + fp.radius * fp.axis_sigma[2];
        if lateral_ok && elev_ok && axial_ok {
            out.push(i);
        }
    }
    out
}

/// Culling against the unperturbed slab; ids are sorted ascending.
pub fn cull_gaussians(field: &GaussianField, geometry: &ProbeGeometry, pose: &Pose) -> Vec<usize> {
    cull_gaussians_with_margin(field, geometry, pose, 0.0)
}

/// Parses a row-major 4x4 rigid matrix (mm translation) into a pose.
pub fn pose_from_rows(rows: &[f64; 16]) -> Pose {
    Pose {
        rotation: [
            [rows[0], rows[1], rows[2]],
            [rows[4], rows[5], rows[6]],
            [rows[8], rows[9], rows[10]],
        ],
        translation: [rows[3], rows[7], rows[11]],
    }
}

/// Re-orthonormalizes a rotation by iterated polar averaging; converges
/// quadratically for matrices close to orthonormal.
pub fn orthonormalize(r: &M3) -> M3 {
    let mut q = *r;
    for _ in 0..32 {
        let qi = math::transpose(&q);
        // Newton-Schulz iteration for the polar factor.
        let qtq = math::mat_mul(&qi, &q);
        let mut three_i_minus = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                three_i_minus[a][b] = if a == b { 3.0 } else { 0.0 } - qtq[a][b];
            }
        }
        let mut next = math::mat_mul(&q, &three_i_minus);
        for row in &mut next {
            for v in row.iter_mut() {
                *v *= 0.5;
            }
        }
        let mut delta: f64 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                delta = delta.max((next[a][b] - q[a][b]).abs());
            }
        }
        q = next;
        if delta < 1e-14 {
            break;
        }
    }
    q
}

/// Describes how far a pose's rotation deviates from orthonormality.
pub fn rigidity_error(r: &M3) -> f64 {
    let rtr = math::mat_mul(&math::transpose(r), r);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((rtr[i][j] - want).abs());
        }
    }
    worst
}

pub fn describe_pose_error(r: &M3) -> String {
    format!(
        "rigidity error {:.3e}, determinant {:.6}",
        rigidity_error(r),
        math::det3(r)
    )
}
