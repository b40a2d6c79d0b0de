//! The learnable Gaussian scene: parameterization, initialization, and a
//! bit-exact binary codec.
//!
//! Scales are stored as natural logs and transmittances as logits, so plain
//! gradient steps can never leave the feasible region; covariances are always
//! rebuilt as `R S SᵀRᵀ` and are positive definite by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math::{self, M3, V3};
use crate::rng::Stream;
use crate::CoreError;

/// Default isotropic scale at initialization, in mm.
pub const INIT_SCALE_MM: f64 = 0.5;
/// Default per-Gaussian transmittance at initialization.
pub const INIT_TRANSMITTANCE: f64 = 0.99;
/// Degree-0 echo coefficient is drawn uniformly from this range so a freshly
/// initialized scene is not uniformly black.
pub const INIT_SH0_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: V3,
    pub max: V3,
}

impl BoundingBox {
    pub fn new(min: V3, max: V3) -> Self {
        BoundingBox { min, max }
    }

    pub fn extent(&self) -> V3 {
        math::sub(self.max, self.min)
    }

    pub fn has_volume(&self) -> bool {
        let e = self.extent();
        e[0] > 0.0 && e[1] > 0.0 && e[2] > 0.0
    }
}

/// Fixed per-scene rendering constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub bounding_box: BoundingBox,
    /// Echo intensity of regions without Gaussian support (black by default).
    pub background_intensity: f64,
    /// Stabilizer in the coverage-weighted echo mean.
    pub coverage_epsilon: f64,
}

impl SceneMeta {
    pub fn new(bounding_box: BoundingBox) -> Self {
        SceneMeta {
            bounding_box,
            background_intensity: 0.0,
            coverage_epsilon: 1e-3,
        }
    }
}

/// Structure-of-arrays of N Gaussians; the learnable scene.
///
/// Immutable during a render pass (readable from any number of workers);
/// optimizer steps and refinement take `&mut`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianField {
    /// World-space centers, mm.
    pub means: Vec<V3>,
    /// Natural log of per-axis standard deviations, mm.
    pub log_scales: Vec<V3>,
    /// Orientation quaternions `[w, x, y, z]`, unit norm after every step.
    pub quaternions: Vec<[f64; 4]>,
    /// Unconstrained logits; `sigmoid` maps them to transmittance in (0,1).
    pub trans_logits: Vec<f64>,
    /// Degree-0 and degree-1 real spherical-harmonic echo coefficients.
    pub sh_coeffs: Vec<[f64; 4]>,
}

impl GaussianField {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn with_capacity(n: usize) -> Self {
        GaussianField {
            means: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            quaternions: Vec::with_capacity(n),
            trans_logits: Vec::with_capacity(n),
            sh_coeffs: Vec::with_capacity(n),
        }
    }

    /// Transmittance τ of Gaussian `i`.
    #[inline]
    pub fn transmittance(&self, i: usize) -> f64 {
        math::sigmoid(self.trans_logits[i])
    }

    /// Per-axis standard deviations of Gaussian `i`, mm.
    #[inline]
    pub fn scales(&self, i: usize) -> V3 {
        let ls = self.log_scales[i];
        [libm::exp(ls[0]), libm::exp(ls[1]), libm::exp(ls[2])]
    }

    /// Full world-space covariance `R S SᵀRᵀ` of Gaussian `i`.
    pub fn covariance_of(&self, i: usize) -> Result<M3, CoreError> {
        if i >= self.len() {
            return Err(CoreError::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        let r = math::quat_to_rot(math::quat_normalize(self.quaternions[i]));
        let s = self.scales(i);
        // R diag(s²) Rᵀ
        let mut out = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                out[a][b] = (0..3).map(|k| r[a][k] * s[k] * s[k] * r[b][k]).sum();
            }
        }
        Ok(out)
    }

    /// Renormalize every quaternion in place.
    pub fn renormalize_quaternions(&mut self) {
        for q in &mut self.quaternions {
            *q = math::quat_normalize(*q);
        }
    }

    /// First Gaussian holding a non-finite parameter, with the array name.
    pub fn find_non_finite(&self) -> Option<(usize, &'static str)> {
        for i in 0..self.len() {
            if self.means[i].iter().any(|v| !v.is_finite()) {
                return Some((i, "mean"));
            }
            if self.log_scales[i].iter().any(|v| !v.is_finite()) {
                return Some((i, "log_scale"));
            }
            if self.quaternions[i].iter().any(|v| !v.is_finite()) {
                return Some((i, "quaternion"));
            }
            if !self.trans_logits[i].is_finite() {
                return Some((i, "transmittance logit"));
            }
            if self.sh_coeffs[i].iter().any(|v| !v.is_finite()) {
                return Some((i, "sh coefficient"));
            }
        }
        None
    }

    /// Append one Gaussian; used by refinement.
    pub fn push(
        &mut self,
        mean: V3,
        log_scale: V3,
        quaternion: [f64; 4],
        trans_logit: f64,
        sh: [f64; 4],
    ) {
        self.means.push(mean);
        self.log_scales.push(log_scale);
        self.quaternions.push(quaternion);
        self.trans_logits.push(trans_logit);
        self.sh_coeffs.push(sh);
    }

    /// Keep only the flagged Gaussians, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.len());
        let mut w = 0;
        for r in 0..self.len() {
            if keep[r] {
                self.means[w] = self.means[r];
                self.log_scales[w] = self.log_scales[r];
                self.quaternions[w] = self.quaternions[r];
                self.trans_logits[w] = self.trans_logits[r];
                self.sh_coeffs[w] = self.sh_coeffs[r];
                w += 1;
            }
        }
        self.means.truncate(w);
        self.log_scales.truncate(w);
        self.quaternions.truncate(w);
        self.trans_logits.truncate(w);
        self.sh_coeffs.truncate(w);
    }

    /// Random initialization: means uniform in `bbox`, isotropic 0.5 mm
    /// scales, τ = 0.99, degree-0 echo uniform in [0.1, 0.5], degree-1 zero.
    pub fn init_random(count: usize, bbox: BoundingBox, seed: u64) -> Result<Self, CoreError> {
        if count == 0 {
            return Err(CoreError::Config(String::from(
                "initial Gaussian count must be at least 1",
            )));
        }
        if !bbox.has_volume() {
            return Err(CoreError::Config(format!(
                "bounding box must have positive extent, got min {:?} max {:?}",
                bbox.min, bbox.max
            )));
        }
        let mut field = GaussianField::with_capacity(count);
        let mut means_rng = Stream::new(seed, "init/means");
        let mut sh_rng = Stream::new(seed, "init/sh0");
        let ls = libm::log(INIT_SCALE_MM);
        let tl = math::logit(INIT_TRANSMITTANCE);
        for _ in 0..count {
            let mean = [
                means_rng.uniform_in(bbox.min[0], bbox.max[0]),
                means_rng.uniform_in(bbox.min[1], bbox.max[1]),
                means_rng.uniform_in(bbox.min[2], bbox.max[2]),
            ];
            let sh0 = sh_rng.uniform_in(INIT_SH0_RANGE.0, INIT_SH0_RANGE.1);
            field.push(mean, [ls, ls, ls], [1.0, 0.0, 0.0, 0.0], tl, [sh0, 0.0, 0.0, 0.0]);
        }
        Ok(field)
    }

    /// Random scene with varied shapes, orientations, transmittances, and
    /// view-dependent echo coefficients; exercises every gradient path.
    /// Used by the gradient-check harness and the property suites.
    pub fn random_varied(count: usize, bbox: BoundingBox, seed: u64) -> Result<Self, CoreError> {
        let mut field = GaussianField::init_random(count, bbox, seed)?;
        let mut rng = Stream::new(seed, "varied");
        for i in 0..count {
            field.log_scales[i] = [
                rng.uniform_in(-1.2, 0.4),
                rng.uniform_in(-1.2, 0.4),
                rng.uniform_in(-1.2, 0.4),
            ];
            field.quaternions[i] = math::quat_normalize([
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
            ]);
            field.trans_logits[i] = rng.uniform_in(-1.0, 3.0);
            field.sh_coeffs[i] = [
                rng.uniform_in(0.1, 0.9),
                rng.uniform_in(-0.2, 0.2),
                rng.uniform_in(-0.2, 0.2),
                rng.uniform_in(-0.2, 0.2),
            ];
        }
        Ok(field)
    }
}

pub mod codec {
    //! Little-endian binary scene blob.
    //!
    //! Layout: 8-byte magic `ERAYGSC\0`, u32 version, u64 count, bounding box
    //! (6 f64), background intensity (f64), coverage epsilon (f64), then the
    //! parameter arrays in declaration order: means (Nx3), log scales (Nx3),
    //! quaternions (Nx4), transmittance logits (Nx1), SH coefficients (Nx4).
    //! Round trips are bitwise exact.

    use super::*;

    pub const MAGIC: [u8; 8] = *b"ERAYGSC\0";
    pub const VERSION: u32 = 1;

    pub fn encode(field: &GaussianField, meta: &SceneMeta) -> Vec<u8> {
        let n = field.len();
        let mut out = Vec::with_capacity(8 + 4 + 8 + 8 * 8 + n * 15 * 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in meta
            .bounding_box
            .min
            .iter()
            .chain(meta.bounding_box.max.iter())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&meta.background_intensity.to_le_bytes());
        out.extend_from_slice(&meta.coverage_epsilon.to_le_bytes());
        for m in &field.means {
            for v in m {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &field.log_scales {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for q in &field.quaternions {
            for v in q {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &field.trans_logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &field.sh_coeffs {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], CoreError> {
            if self.pos + n > self.bytes.len() {
                return Err(CoreError::CorruptScene(format!(
                    "truncated: needed {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                )));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn f64(&mut self) -> Result<f64, CoreError> {
            let b = self.take(8)?;
            Ok(f64::from_le_bytes(b.try_into().unwrap()))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<(GaussianField, SceneMeta), CoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CoreError::CorruptScene(String::from("bad magic bytes")));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::UnsupportedVersion(version));
        }
        let n = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let min = [r.f64()?, r.f64()?, r.f64()?];
        let max = [r.f64()?, r.f64()?, r.f64()?];
        let background_intensity = r.f64()?;
        let coverage_epsilon = r.f64()?;
        let mut field = GaussianField::with_capacity(n);
        for _ in 0..n {
            field.means.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        for _ in 0..n {
            field.log_scales.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        for _ in 0..n {
            field
                .quaternions
                .push([r.f64()?, r.f64()?, r.f64()?, r.f64()?]);
        }
        for _ in 0..n {
            field.trans_logits.push(r.f64()?);
        }
        for _ in 0..n {
            field.sh_coeffs.push([r.f64()?, r.f64()?, r.f64()?, r.f64()?]);
        }
        if r.pos != bytes.len() {
            return Err(CoreError::CorruptScene(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let meta = SceneMeta {
            bounding_box: BoundingBox::new(min, max),
            background_intensity,
            coverage_epsilon,
        };
        Ok((field, meta))
    }
}
