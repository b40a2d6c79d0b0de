//! Procedural synthetic phantom: an independent reference simulator that
//! produces pose-annotated B-mode sweeps for training and evaluation.
//!
//! The simulator is deliberately disjoint from the Gaussian renderer: frames
//! come from dense ray marching through a layered medium with Beer-Lambert
//! attenuation, plus speckle from a fixed scatterer field convolved with a
//! small separable Gaussian PSF, followed by log-style compression
//! `y = log(1 + a x)/log(1 + a)`. Only the probe geometry helpers are shared
//! with the rest of the crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::image::Image;
use crate::math::{self, V3};
use crate::probe::{self, Pose, ProbeGeometry};
use crate::rng::Stream;
use crate::scene::BoundingBox;
use crate::CoreError;

/// Horizontal slab of the background medium, from `z_top` down to the next
/// layer (or the bottom of the phantom volume).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layer {
    pub z_top: f64,
    pub echogenicity: f64,
    /// Beer-Lambert attenuation coefficient, 1/mm.
    pub attenuation: f64,
}

/// Axis-aligned ellipsoid overriding the layer material.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inclusion {
    pub center: V3,
    pub axes: V3,
    pub echogenicity: f64,
    pub attenuation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Scatterer and material domain, mm.
    pub extent: BoundingBox,
    pub layers: Vec<Layer>,
    pub inclusions: Vec<Inclusion>,
    /// Scatterers per mm³.
    pub speckle_density: f64,
    /// Uniform amplitude range of one scatterer.
    pub speckle_amp: (f64, f64),
    /// In-plane PSF std, mm.
    pub psf_sigma: f64,
    /// Elevational PSF std, mm.
    pub psf_sigma_elev: f64,
    /// Log-compression strength `a`.
    pub compression: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !self.extent.has_volume() {
            return Err(CoreError::Config(String::from(
                "phantom extent must have positive volume",
            )));
        }
        if self.layers.is_empty() {
            return Err(CoreError::Config(String::from(
                "phantom needs at least one layer",
            )));
        }
        if self.psf_sigma <= 0.0 || self.psf_sigma_elev <= 0.0 || self.compression <= 0.0 {
            return Err(CoreError::Config(String::from(
                "phantom PSF sigmas and compression must be positive",
            )));
        }
        Ok(())
    }

    /// Material (echogenicity, attenuation) at a world point.
    pub fn material_at(&self, p: V3) -> (f64, f64) {
        for inc in &self.inclusions {
            let d = [
                (p[0] - inc.center[0]) / inc.axes[0],
                (p[1] - inc.center[1]) / inc.axes[1],
                (p[2] - inc.center[2]) / inc.axes[2],
            ];
            if math::norm2(d) <= 1.0 {
                return (inc.echogenicity, inc.attenuation);
            }
        }
        let mut mat = (0.0, 0.0);
        for layer in &self.layers {
            if p[2] >= layer.z_top {
                mat = (layer.echogenicity, layer.attenuation);
            }
        }
        if p[2] < self.layers[0].z_top
            || p[0] < self.extent.min[0]
            || p[0] > self.extent.max[0]
            || p[1] < self.extent.min[1]
            || p[1] > self.extent.max[1]
            || p[2] > self.extent.max[2]
        {
            return (0.0, 0.0);
        }
        mat
    }
}

struct Scatterer {
    pos: V3,
    amp: f64,
}

fn scatterers(spec: &PhantomSpec) -> Vec<Scatterer> {
    let e = spec.extent.extent();
    let volume = e[0] * e[1] * e[2];
    let count = libm::floor(spec.speckle_density * volume) as usize;
    let mut rng = Stream::new(spec.seed, "phantom/scatterers");
    (0..count)
        .map(|_| Scatterer {
            pos: [
                rng.uniform_in(spec.extent.min[0], spec.extent.max[0]),
                rng.uniform_in(spec.extent.min[1], spec.extent.max[1]),
                rng.uniform_in(spec.extent.min[2], spec.extent.max[2]),
            ],
            amp: rng.uniform_in(spec.speckle_amp.0, spec.speckle_amp.1),
        })
        .collect()
}

/// Synthesizes one B-mode frame at a pose by dense ray marching (two
/// substeps per pixel) with multiplicative attenuation, attenuated additive
/// speckle, and log compression. Deterministic in `(spec, geometry, pose)`.
pub fn generate_frame(spec: &PhantomSpec, geometry: &ProbeGeometry, pose: &Pose) -> Result<Image, CoreError> {
    spec.validate()?;
    let bundle = probe::make_rays(geometry, pose)?;
    generate_frame_with(spec, geometry, pose, &scatterers(spec), &bundle)
}

fn generate_frame_with(
    spec: &PhantomSpec,
    geometry: &ProbeGeometry,
    pose: &Pose,
    scat: &[Scatterer],
    bundle: &probe::RayBundle,
) -> Result<Image, CoreError> {
    let w = geometry.n_scanlines;
    let h = geometry.n_depth_samples;
    let pitch = geometry.axial_pitch();
    let substeps = 2usize;
    let dt = pitch / substeps as f64;

    // Per-column cumulative transmission at pixel depths, and the base
    // layered image.
    let mut img = Image::zeros(w, h);
    let mut trans = alloc::vec![0.0f64; w * h];
    for k in 0..w {
        let o = bundle.origins[k];
        let d = bundle.direction;
        let mut optical_depth = 0.0;
        for j in 0..h {
            for s in 0..substeps {
                let t = j as f64 * pitch + (s as f64 + 0.5) * dt;
                let (_, alpha) = spec.material_at(math::add(o, math::scale(d, t)));
                optical_depth += alpha * dt;
            }
            let a = libm::exp(-optical_depth);
            trans[j * w + k] = a;
            let p = math::add(o, math::scale(d, bundle.depth_samples[j]));
            let (echo, _) = spec.material_at(p);
            img.set(k, j, echo * a);
        }
    }

    // Speckle: each scatterer splats an attenuated PSF into nearby pixels.
    let half_w = 0.5 * geometry.lateral_width;
    let lat_pitch = geometry.lateral_pitch();
    let reach = 3.0 * spec.psf_sigma;
    let inv2s2 = 1.0 / (2.0 * spec.psf_sigma * spec.psf_sigma);
    let inv2e2 = 1.0 / (2.0 * spec.psf_sigma_elev * spec.psf_sigma_elev);
    for s in scat {
        let q = pose.to_probe(s.pos);
        if q[1].abs() > 3.0 * spec.psf_sigma_elev {
            continue;
        }
        if q[0] < -half_w - reach || q[0] > half_w + reach {
            continue;
        }
        if q[2] < -reach || q[2] > geometry.imaging_depth + reach {
            continue;
        }
        let elev_w = libm::exp(-q[1] * q[1] * inv2e2);
        // Attenuation sampled on the nearest column at the scatterer depth.
        let k0 = (q[0] + half_w) / lat_pitch - 0.5;
        let k0 = (libm::round(k0).max(0.0) as usize).min(w - 1);
        let jf = q[2] / pitch - 0.5;
        let a_s = if jf <= 0.0 {
            trans[k0]
        } else if jf >= (h - 1) as f64 {
            trans[(h - 1) * w + k0]
        } else {
            let j0 = jf as usize;
            let f = jf - j0 as f64;
            trans[j0 * w + k0] * (1.0 - f) + trans[(j0 + 1) * w + k0] * f
        };
        let amp = s.amp * elev_w * a_s;
        if amp == 0.0 {
            continue;
        }
        let k_lo = (((q[0] - reach + half_w) / lat_pitch - 0.5).max(0.0)) as usize;
        let k_hi = ((((q[0] + reach + half_w) / lat_pitch - 0.5)) as usize).min(w - 1);
        let j_lo = (((q[2] - reach) / pitch - 0.5).max(0.0)) as usize;
        let j_hi = ((((q[2] + reach) / pitch - 0.5)) as usize).min(h - 1);
        for j in j_lo..=j_hi {
            let dz = geometry.depth_z(j) - q[2];
            for k in k_lo..=k_hi {
                let dx = geometry.scanline_x(k) - q[0];
                let r2 = dx * dx + dz * dz;
                if r2 <= reach * reach {
                    let v = img.at(k, j) + amp * libm::exp(-r2 * inv2s2);
                    img.set(k, j, v);
                }
            }
        }
    }

    // Log compression onto [0, 1].
    let norm = libm::log(1.0 + spec.compression);
    for v in &mut img.data {
        *v = (libm::log(1.0 + spec.compression * *v) / norm).clamp(0.0, 1.0);
    }
    Ok(img)
}

/// One frame of a sweep with its pose and the sweep label.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepFrame {
    pub image: Image,
    pub pose: Pose,
    pub sweep: String,
}

/// A pose-annotated dataset sharing one probe geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepDataset {
    pub geometry: ProbeGeometry,
    pub frames: Vec<SweepFrame>,
}

impl SweepDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One sweep's orientation: `tilt_deg` rotates the imaging plane about the
/// lateral axis (out-of-plane), `inplane_deg` rotates the rays about the
/// elevational axis within the plane, so shadows and speckle become
/// view-dependent the way multi-angle acquisitions are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSpec {
    pub tilt_deg: f64,
    pub inplane_deg: f64,
}

impl SweepSpec {
    pub fn oop(tilt_deg: f64) -> Self {
        SweepSpec {
            tilt_deg,
            inplane_deg: 0.0,
        }
    }

    pub fn label(&self) -> String {
        let mut out = tilt_label(self.tilt_deg);
        if self.inplane_deg != 0.0 {
            let sign = if self.inplane_deg < 0.0 { '-' } else { '+' };
            out.push_str(&format!("_in{sign}{:04.1}", self.inplane_deg.abs()));
        }
        out
    }
}

/// Label like `tilt+03.0` used in manifests and directory names.
pub fn tilt_label(tilt_deg: f64) -> String {
    let sign = if tilt_deg < 0.0 { '-' } else { '+' };
    format!("tilt{sign}{:04.1}", tilt_deg.abs())
}

/// Poses of one sweep: `R = Rx(tilt)·Ry(inplane)` (so the out-of-plane tilt
/// sets the slice orientation and the in-plane angle rotates rays within
/// it), translated along world y in `spacing` steps centered on zero.
pub fn sweep_poses(sweep: SweepSpec, n_frames: usize, spacing: f64) -> Vec<Pose> {
    let deg = core::f64::consts::PI / 180.0;
    let rot = math::mat_mul(
        &math::axis_rotation(0, sweep.tilt_deg * deg),
        &math::axis_rotation(1, sweep.inplane_deg * deg),
    );
    (0..n_frames)
        .map(|f| {
            let y = (f as f64 - 0.5 * (n_frames as f64 - 1.0)) * spacing;
            Pose::new(rot, [0.0, y, 0.0])
        })
        .collect()
}

/// Generates all frames of the given sweeps into one dataset.
pub fn generate_sweeps(
    spec: &PhantomSpec,
    geometry: &ProbeGeometry,
    sweeps: &[SweepSpec],
    frames_per_sweep: usize,
    frame_spacing: f64,
) -> Result<SweepDataset, CoreError> {
    spec.validate()?;
    geometry.validate()?;
    let scat = scatterers(spec);
    let mut frames = Vec::new();
    for sweep in sweeps {
        let label = sweep.label();
        for pose in sweep_poses(*sweep, frames_per_sweep, frame_spacing) {
            let bundle = probe::make_rays(geometry, &pose)?;
            let image = generate_frame_with(spec, geometry, &pose, &scat, &bundle)?;
            frames.push(SweepFrame {
                image,
                pose,
                sweep: label.clone(),
            });
        }
    }
    Ok(SweepDataset {
        geometry: *geometry,
        frames,
    })
}

/// Out-of-plane-only sweep list.
pub fn oop_sweeps(tilts_deg: &[f64]) -> Vec<SweepSpec> {
    tilts_deg.iter().map(|&t| SweepSpec::oop(t)).collect()
}

/// Pixel rectangle `(x0, x1, y0, y1)`, end-exclusive.
pub type PixelRect = (usize, usize, usize, usize);

/// Shadow and laterally matched control strips under the first inclusion,
/// in pixel coordinates of an untilted frame. The strips share depth rows
/// (below the inclusion) and width; the control sits on whichever side has
/// more lateral room.
pub fn shadow_strips(spec: &PhantomSpec, geometry: &ProbeGeometry) -> Option<(PixelRect, PixelRect)> {
    let inc = spec.inclusions.first()?;
    let pitch = geometry.lateral_pitch();
    let half_w = 0.5 * geometry.lateral_width;
    let to_col = |x: f64| -> i64 { libm::round((x + half_w) / pitch - 0.5) as i64 };
    let to_row = |z: f64| -> i64 { libm::round(z / geometry.axial_pitch() - 0.5) as i64 };

    let clamp_col = |c: i64| -> usize { c.clamp(0, geometry.n_scanlines as i64 - 1) as usize };
    let clamp_row = |r: i64| -> usize { r.clamp(0, geometry.n_depth_samples as i64 - 1) as usize };

    let x0 = clamp_col(to_col(inc.center[0] - 0.6 * inc.axes[0]));
    let x1 = clamp_col(to_col(inc.center[0] + 0.6 * inc.axes[0])) + 1;
    let margin_mm = 2.0;
    let y0 = clamp_row(to_row(inc.center[2] + inc.axes[2] + margin_mm));
    let y1 = clamp_row(to_row(geometry.imaging_depth - 1.0)) + 1;
    if y1 <= y0 + 1 || x1 <= x0 + 1 {
        return None;
    }
    let width = x1 - x0;

    // Control strip: same rows, offset laterally past the inclusion.
    let offset_mm = inc.axes[0] + margin_mm + 0.6 * inc.axes[0];
    let room_right = geometry.lateral_width / 2.0 - (inc.center[0] + offset_mm);
    let room_left = (inc.center[0] - offset_mm) + geometry.lateral_width / 2.0;
    let cx0 = if room_right >= room_left {
        clamp_col(to_col(inc.center[0] + offset_mm - 0.6 * inc.axes[0]))
    } else {
        clamp_col(to_col(inc.center[0] - offset_mm - 0.6 * inc.axes[0]))
    };
    let cx1 = (cx0 + width).min(geometry.n_scanlines);
    Some(((x0, x1, y0, y1), (cx0, cx1, y0, y1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> PhantomSpec {
        PhantomSpec {
            extent: BoundingBox::new([-16.0, -8.0, 0.0], [16.0, 8.0, 28.0]),
            layers: alloc::vec![
                Layer {
                    z_top: 0.0,
                    echogenicity: 0.25,
                    attenuation: 0.01,
                },
                Layer {
                    z_top: 14.0,
                    echogenicity: 0.45,
                    attenuation: 0.02,
                },
            ],
            inclusions: alloc::vec![],
            speckle_density: 0.4,
            speckle_amp: (0.1, 0.5),
            psf_sigma: 0.3,
            psf_sigma_elev: 0.5,
            compression: 100.0,
            seed: 9,
        }
    }

    fn geo() -> ProbeGeometry {
        ProbeGeometry {
            lateral_width: 25.6,
            imaging_depth: 25.6,
            n_scanlines: 64,
            n_depth_samples: 64,
            elevational_slab: 0.5,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = base_spec();
        let a = generate_frame(&spec, &geo(), &Pose::identity()).unwrap();
        let b = generate_frame(&spec, &geo(), &Pose::identity()).unwrap();
        assert_eq!(a.data, b.data);
        let mut spec2 = spec.clone();
        spec2.seed = 10;
        let c = generate_frame(&spec2, &geo(), &Pose::identity()).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn homogeneous_medium_without_speckle_is_depth_profile() {
        let mut spec = base_spec();
        spec.speckle_density = 0.0;
        spec.layers = alloc::vec![Layer {
            z_top: 0.0,
            echogenicity: 0.3,
            attenuation: 0.02,
        }];
        let img = generate_frame(&spec, &geo(), &Pose::identity()).unwrap();
        // Constant across each row, decreasing down the columns.
        for j in 0..img.height {
            let v0 = img.at(0, j);
            for k in 1..img.width {
                assert!((img.at(k, j) - v0).abs() < 1e-12);
            }
        }
        for j in 1..img.height {
            assert!(img.at(3, j) < img.at(3, j - 1));
        }
    }

    #[test]
    fn strong_inclusion_casts_shadow() {
        let mut spec = base_spec();
        spec.inclusions = alloc::vec![Inclusion {
            center: [-4.0, 0.0, 10.0],
            axes: [4.0, 4.0, 2.5],
            echogenicity: 0.9,
            attenuation: 0.6,
        }];
        let img = generate_frame(&spec, &geo(), &Pose::identity()).unwrap();
        let (shadow, control) = shadow_strips(&spec, &geo()).unwrap();
        let sh = img.region_mean(shadow.0, shadow.1, shadow.2, shadow.3);
        let ct = img.region_mean(control.0, control.1, control.2, control.3);
        assert!(
            sh < 0.5 * ct,
            "shadow {sh} not dark enough vs control {ct}"
        );
    }

    #[test]
    fn sweep_generation_labels_and_counts() {
        let spec = base_spec();
        let ds = generate_sweeps(&spec, &geo(), &oop_sweeps(&[0.0, 3.0]), 3, 0.5).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.frames[0].sweep, "tilt+00.0");
        assert_eq!(ds.frames[3].sweep, "tilt+03.0");
        // Frames within a sweep differ (different elevational slices).
        assert_ne!(ds.frames[0].image.data, ds.frames[1].image.data);
    }

    #[test]
    fn tilt_labels() {
        assert_eq!(tilt_label(0.0), "tilt+00.0");
        assert_eq!(tilt_label(-7.0), "tilt-07.0");
        assert_eq!(tilt_label(1.5), "tilt+01.5");
    }

    #[test]
    fn tilted_pose_is_rigid() {
        for pose in sweep_poses(
            SweepSpec {
                tilt_deg: -10.0,
                inplane_deg: 8.0,
            },
            5,
            0.5,
        ) {
            pose.validate(1e-9).unwrap();
        }
    }

    #[test]
    fn inplane_tilt_keeps_the_slice_plane() {
        // Rotating in-plane leaves the plane normal (elevational axis)
        // unchanged when the out-of-plane tilt is zero.
        let p = sweep_poses(
            SweepSpec {
                tilt_deg: 0.0,
                inplane_deg: 12.0,
            },
            1,
            0.5,
        )[0];
        let n = p.elevational_axis();
        assert!((n[0]).abs() < 1e-12 && (n[1] - 1.0).abs() < 1e-12 && n[2].abs() < 1e-12);
        // And the shadow-relevant part: rays tilt within the plane.
        let d = p.axial_axis();
        assert!(d[0].abs() > 0.1 && d[1].abs() < 1e-12);
    }
}
