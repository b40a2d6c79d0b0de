//! Classical non-learning baselines: scatter compounding of pose-annotated
//! frames into an isotropic voxel volume (median or max) and trilinear
//! re-slicing back to arbitrary probe poses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;
use crate::math::V3;
use crate::probe::{Pose, ProbeGeometry};
use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompoundMode {
    Median,
    Max,
}

impl CompoundMode {
    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "median" => Ok(CompoundMode::Median),
            "max" => Ok(CompoundMode::Max),
            other => Err(CoreError::Config(alloc::format!(
                "unknown compounding mode {other:?} (expected median or max)"
            ))),
        }
    }
}

/// Isotropic voxel volume; voxel (x, y, z) is centered at
/// `origin + (index + 0.5) * spacing` and stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub origin: V3,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl VoxelVolume {
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }
}

/// World position of pixel (k, j) of a frame.
#[inline]
pub fn pixel_world(geometry: &ProbeGeometry, pose: &Pose, k: usize, j: usize) -> V3 {
    pose.to_world([geometry.scanline_x(k), 0.0, geometry.depth_z(j)])
}

/// Scatters every frame pixel into its containing voxel and aggregates the
/// per-voxel sample lists with the requested statistic; untouched voxels
/// stay 0. The volume origin is offset by half a voxel from the minimum
/// pixel position, so an axis-aligned frame at matched spacing lands exactly
/// on voxel centers.
pub fn compound(
    frames: &[(Image, Pose)],
    geometry: &ProbeGeometry,
    mode: CompoundMode,
    spacing: f64,
) -> Result<VoxelVolume, CoreError> {
    if frames.is_empty() {
        return Err(CoreError::Contract(String::from(
            "compounding requires at least one frame",
        )));
    }
    if spacing <= 0.0 {
        return Err(CoreError::Config(String::from("voxel spacing must be positive")));
    }
    geometry.validate()?;
    for (img, pose) in frames {
        pose.validate(1e-6)?;
        if img.width != geometry.n_scanlines || img.height != geometry.n_depth_samples {
            return Err(CoreError::Contract(alloc::format!(
                "frame {}x{} does not match geometry {}x{}",
                img.width,
                img.height,
                geometry.n_scanlines,
                geometry.n_depth_samples
            )));
        }
    }

    // Bounds from the frame corners (pixel positions are affine in (k, j)).
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (_, pose) in frames {
        for &k in &[0, geometry.n_scanlines - 1] {
            for &j in &[0, geometry.n_depth_samples - 1] {
                let p = pixel_world(geometry, pose, k, j);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
    }
    let origin = [
        lo[0] - 0.5 * spacing,
        lo[1] - 0.5 * spacing,
        lo[2] - 0.5 * spacing,
    ];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = (libm::ceil((hi[a] - origin[a]) / spacing) as usize).max(1);
    }

    let n_vox = dims[0] * dims[1] * dims[2];
    let voxel_of = |p: V3| -> usize {
        let mut ix = [0usize; 3];
        for a in 0..3 {
            let g = libm::floor((p[a] - origin[a]) / spacing);
            ix[a] = (g.max(0.0) as usize).min(dims[a] - 1);
        }
        (ix[2] * dims[1] + ix[1]) * dims[0] + ix[0]
    };

    // CSR sample buckets: count, then fill in deterministic frame order.
    let mut counts = vec![0u32; n_vox];
    for (_, pose) in frames {
        for j in 0..geometry.n_depth_samples {
            for k in 0..geometry.n_scanlines {
                counts[voxel_of(pixel_world(geometry, pose, k, j))] += 1;
            }
        }
    }
    let mut offsets = vec![0usize; n_vox + 1];
    for i in 0..n_vox {
        offsets[i + 1] = offsets[i] + counts[i] as usize;
    }
    let mut samples = vec![0.0f64; offsets[n_vox]];
    let mut cursor = offsets.clone();
    for (img, pose) in frames {
        for j in 0..geometry.n_depth_samples {
            for k in 0..geometry.n_scanlines {
                let v = voxel_of(pixel_world(geometry, pose, k, j));
                samples[cursor[v]] = img.at(k, j);
                cursor[v] += 1;
            }
        }
    }

    let mut data = vec![0.0f64; n_vox];
    for v in 0..n_vox {
        let bucket = &mut samples[offsets[v]..offsets[v + 1]];
        if bucket.is_empty() {
            continue;
        }
        data[v] = match mode {
            CompoundMode::Max => bucket.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            CompoundMode::Median => {
                bucket.sort_unstable_by(f64::total_cmp);
                let n = bucket.len();
                if n % 2 == 1 {
                    bucket[n / 2]
                } else {
                    0.5 * (bucket[n / 2 - 1] + bucket[n / 2])
                }
            }
        };
    }

    Ok(VoxelVolume {
        origin,
        spacing,
        dims,
        data,
    })
}

/// Trilinear sample at a world point; 0 outside the volume's center grid.
pub fn sample_trilinear(volume: &VoxelVolume, p: V3) -> f64 {
    let mut g = [0.0f64; 3];
    for a in 0..3 {
        g[a] = (p[a] - volume.origin[a]) / volume.spacing - 0.5;
        if g[a] < 0.0 || g[a] > (volume.dims[a] - 1) as f64 {
            return 0.0;
        }
    }
    let ix = [
        (g[0] as usize).min(volume.dims[0].saturating_sub(2)),
        (g[1] as usize).min(volume.dims[1].saturating_sub(2)),
        (g[2] as usize).min(volume.dims[2].saturating_sub(2)),
    ];
    let fx = g[0] - ix[0] as f64;
    let fy = g[1] - ix[1] as f64;
    let fz = g[2] - ix[2] as f64;
    let d = &volume.dims;
    let step_x = if d[0] > 1 { 1 } else { 0 };
    let step_y = if d[1] > 1 { 1 } else { 0 };
    let step_z = if d[2] > 1 { 1 } else { 0 };
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (step_z, fz)] {
        for (dy, wy) in [(0, 1.0 - fy), (step_y, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (step_x, fx)] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    acc += w * volume.at(ix[0] + dx, ix[1] + dy, ix[2] + dz);
                }
            }
        }
    }
    acc
}

/// Extracts the image plane of a pose by trilinear interpolation; pixels
/// outside the volume are 0.
pub fn reslice(volume: &VoxelVolume, geometry: &ProbeGeometry, pose: &Pose) -> Image {
    let mut out = Image::zeros(geometry.n_scanlines, geometry.n_depth_samples);
    for j in 0..geometry.n_depth_samples {
        for k in 0..geometry.n_scanlines {
            out.set(k, j, sample_trilinear(volume, pixel_world(geometry, pose, k, j)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::rng::Stream;
    use std::collections::HashMap;

    fn geo(n: usize) -> ProbeGeometry {
        ProbeGeometry {
            lateral_width: n as f64,
            imaging_depth: n as f64,
            n_scanlines: n,
            n_depth_samples: n,
            elevational_slab: 0.5,
        }
    }

    fn random_frame(n: usize, seed: u64) -> Image {
        let mut rng = Stream::new(seed, "frame");
        let mut img = Image::zeros(n, n);
        for v in &mut img.data {
            *v = rng.uniform();
        }
        img
    }

    #[test]
    fn identity_scatter_preserves_pixels() {
        // Spacing equal to the pixel pitch: each voxel holds one sample.
        let g = geo(8);
        let frame = random_frame(8, 1);
        let vol = compound(
            &[(frame.clone(), Pose::identity())],
            &g,
            CompoundMode::Median,
            1.0,
        )
        .unwrap();
        for j in 0..8 {
            for k in 0..8 {
                let p = pixel_world(&g, &Pose::identity(), k, j);
                let got = sample_trilinear(&vol, p);
                assert!((got - frame.at(k, j)).abs() < 1e-12, "pixel {k},{j}");
            }
        }
    }

    #[test]
    fn two_colocated_frames_statistics() {
        let g = geo(4);
        let a = Image::filled(4, 4, 0.2);
        let b = Image::filled(4, 4, 0.6);
        let frames = [(a, Pose::identity()), (b, Pose::identity())];
        let vmax = compound(&frames, &g, CompoundMode::Max, 1.0).unwrap();
        let vmed = compound(&frames, &g, CompoundMode::Median, 1.0).unwrap();
        let p = pixel_world(&g, &Pose::identity(), 1, 1);
        assert!((sample_trilinear(&vmax, p) - 0.6).abs() < 1e-12);
        // Even count: mean of the two middle samples.
        assert!((sample_trilinear(&vmed, p) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn compound_matches_bruteforce_bucket_oracle() {
        let g = geo(6);
        let poses = [
            Pose::identity(),
            Pose::new(math::IDENTITY, [0.3, 0.2, -0.4]),
            Pose::new(math::axis_rotation(0, 0.1), [0.0, -0.5, 0.2]),
        ];
        let frames: Vec<(Image, Pose)> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| (random_frame(6, i as u64), *p))
            .collect();
        let spacing = 0.8;
        let vol = compound(&frames, &g, CompoundMode::Median, spacing).unwrap();

        // Brute-force: independent per-voxel sample collection.
        let mut buckets: HashMap<usize, Vec<f64>> = HashMap::new();
        for (img, pose) in &frames {
            for j in 0..6 {
                for k in 0..6 {
                    let p = pixel_world(&g, pose, k, j);
                    let mut ix = [0usize; 3];
                    let mut ok = true;
                    for a in 0..3 {
                        let f = libm::floor((p[a] - vol.origin[a]) / spacing);
                        if f < 0.0 {
                            ok = false;
                            break;
                        }
                        ix[a] = (f as usize).min(vol.dims[a] - 1);
                    }
                    assert!(ok);
                    buckets
                        .entry(vol.index(ix[0], ix[1], ix[2]))
                        .or_default()
                        .push(img.at(k, j));
                }
            }
        }
        for (idx, mut vals) in buckets {
            vals.sort_unstable_by(f64::total_cmp);
            let n = vals.len();
            let want = if n % 2 == 1 {
                vals[n / 2]
            } else {
                0.5 * (vals[n / 2 - 1] + vals[n / 2])
            };
            assert!((vol.data[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn compound_is_permutation_invariant() {
        let g = geo(6);
        let frames: Vec<(Image, Pose)> = (0..3)
            .map(|i| {
                (
                    random_frame(6, 40 + i),
                    Pose::new(math::IDENTITY, [0.1 * i as f64, 0.0, 0.0]),
                )
            })
            .collect();
        let a = compound(&frames, &g, CompoundMode::Median, 0.7).unwrap();
        let rev: Vec<(Image, Pose)> = frames.iter().rev().cloned().collect();
        let b = compound(&rev, &g, CompoundMode::Median, 0.7).unwrap();
        assert_eq!(a.data, b.data);
        let am = compound(&frames, &g, CompoundMode::Max, 0.7).unwrap();
        let bm = compound(&rev, &g, CompoundMode::Max, 0.7).unwrap();
        assert_eq!(am.data, bm.data);
    }

    #[test]
    fn reslice_constant_volume_is_constant() {
        let vol = VoxelVolume {
            origin: [-5.0, -5.0, -1.0],
            spacing: 0.5,
            dims: [40, 40, 40],
            data: vec![0.7; 40 * 40 * 40],
        };
        let g = geo(8);
        // Interior pose: probe face at z=1mm, well inside the volume.
        let img = reslice(&vol, &g, &Pose::new(math::IDENTITY, [0.0, 0.0, 1.0]));
        for &v in img.data.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn reslice_outside_volume_is_zero() {
        let vol = VoxelVolume {
            origin: [0.0; 3],
            spacing: 1.0,
            dims: [4, 4, 4],
            data: vec![1.0; 64],
        };
        let g = geo(4);
        let img = reslice(&vol, &g, &Pose::new(math::IDENTITY, [100.0, 0.0, 0.0]));
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reslice_is_linear_in_volume_values() {
        let mut rng = Stream::new(9, "lin");
        let dims = [6, 6, 6];
        let n = 216;
        let mk = |rng: &mut Stream| VoxelVolume {
            origin: [-3.0, -3.0, 0.0],
            spacing: 1.0,
            dims,
            data: (0..n).map(|_| rng.uniform()).collect(),
        };
        let va = mk(&mut rng);
        let vb = mk(&mut rng);
        let mut vsum = va.clone();
        for i in 0..n {
            vsum.data[i] = 2.0 * va.data[i] + 3.0 * vb.data[i];
        }
        let g = geo(5);
        let pose = Pose::new(math::axis_rotation(0, 0.2), [0.0, 0.0, 0.5]);
        let ia = reslice(&va, &g, &pose);
        let ib = reslice(&vb, &g, &pose);
        let isum = reslice(&vsum, &g, &pose);
        for i in 0..ia.data.len() {
            let want = 2.0 * ia.data[i] + 3.0 * ib.data[i];
            assert!((isum.data[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_frame_list_rejected() {
        assert!(matches!(
            compound(&[], &geo(4), CompoundMode::Max, 1.0),
            Err(CoreError::Contract(_))
        ));
    }
}
