//! On-disk dataset, scene, and volume formats.
//!
//! A dataset directory holds `manifest.txt` (geometry fields plus one
//! `frame <path> <sweep>` line per frame), `poses.txt` (one row-major 4x4
//! rigid matrix per line, mm), and the 8-bit PGM frames. All writers emit
//! shortest-roundtrip decimal floats, so save(load(dir)) reproduces the
//! files byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use echoray_core::baseline::VoxelVolume;
use echoray_core::phantom::{SweepDataset, SweepFrame};
use echoray_core::probe::{self, Pose, ProbeGeometry};
use echoray_core::scene::{codec, GaussianField, SceneMeta};
use echoray_core::Image;

use crate::pgm;
use crate::IoError;

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "echoray-sweep-v1";
const VOLUME_FORMAT: &str = "echoray-volume-v1";

/// Pose rigidity beyond this is a validation error; smaller deviations are
/// re-orthonormalized (with a warning above the silent threshold).
const POSE_TOLERANCE: f64 = 1e-6;
const POSE_SILENT: f64 = 1e-12;

pub fn save_scene(field: &GaussianField, meta: &SceneMeta, path: &Path) -> Result<(), IoError> {
    fs::write(path, codec::encode(field, meta))
        .map_err(|e| IoError::io(format!("writing scene {}", path.display()), e))
}

pub fn load_scene(path: &Path) -> Result<(GaussianField, SceneMeta), IoError> {
    let bytes =
        fs::read(path).map_err(|e| IoError::io(format!("reading scene {}", path.display()), e))?;
    codec::decode(&bytes).map_err(crate::core_err("scene"))
}

fn fmt_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").expect("string write");
    }
}

/// Writes a dataset directory: manifest, poses, and PGM frames.
pub fn save_dataset(dataset: &SweepDataset, dir: &Path) -> Result<(), IoError> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)
        .map_err(|e| IoError::io(format!("creating {}", frames_dir.display()), e))?;
    let g = &dataset.geometry;
    let mut manifest = String::new();
    writeln!(manifest, "format {MANIFEST_FORMAT}").unwrap();
    writeln!(manifest, "lateral_width_mm {}", g.lateral_width).unwrap();
    writeln!(manifest, "imaging_depth_mm {}", g.imaging_depth).unwrap();
    writeln!(manifest, "n_scanlines {}", g.n_scanlines).unwrap();
    writeln!(manifest, "n_depth_samples {}", g.n_depth_samples).unwrap();
    writeln!(manifest, "elevational_slab_mm {}", g.elevational_slab).unwrap();
    writeln!(manifest, "poses poses.txt").unwrap();

    let mut poses = String::new();
    for (i, frame) in dataset.frames.iter().enumerate() {
        let rel = format!("frames/{i:06}.pgm");
        writeln!(manifest, "frame {rel} {}", frame.sweep).unwrap();
        pgm::write_pgm(&frame.image, &dir.join(&rel))?;
        let r = &frame.pose.rotation;
        let t = &frame.pose.translation;
        let row = [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2], 0.0, 0.0, 0.0, 1.0,
        ];
        fmt_floats(&mut poses, &row);
        poses.push('\n');
    }
    fs::write(dir.join("poses.txt"), poses)
        .map_err(|e| IoError::io("writing poses.txt", e))?;
    fs::write(dir.join(MANIFEST_NAME), manifest)
        .map_err(|e| IoError::io("writing manifest.txt", e))
}

/// Loads and validates a dataset directory; returns loader warnings (e.g.
/// poses that needed re-orthonormalization).
pub fn load_dataset(dir: &Path) -> Result<(SweepDataset, Vec<String>), IoError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| IoError::io(format!("reading {}", manifest_path.display()), e))?;

    let mut fields = std::collections::BTreeMap::new();
    let mut frames: Vec<(PathBuf, String)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        if key == "frame" {
            let rel = parts
                .next()
                .ok_or_else(|| IoError::format(format!("manifest line {}: missing frame path", ln + 1)))?;
            let sweep = parts.next().unwrap_or("default").to_string();
            frames.push((dir.join(rel), sweep));
        } else {
            let value = parts
                .next()
                .ok_or_else(|| IoError::format(format!("manifest line {}: missing value for {key}", ln + 1)))?;
            fields.insert(key.to_string(), value.to_string());
        }
    }

    let get = |key: &str| -> Result<&String, IoError> {
        fields
            .get(key)
            .ok_or_else(|| IoError::format(format!("manifest missing field {key}")))
    };
    if get("format")? != MANIFEST_FORMAT {
        return Err(IoError::format(format!(
            "unsupported manifest format {:?}",
            get("format")?
        )));
    }
    let parse_f64 = |key: &str| -> Result<f64, IoError> {
        get(key)?
            .parse::<f64>()
            .map_err(|_| IoError::format(format!("manifest field {key} is not a number")))
    };
    let parse_usize = |key: &str| -> Result<usize, IoError> {
        get(key)?
            .parse::<usize>()
            .map_err(|_| IoError::format(format!("manifest field {key} is not an integer")))
    };
    let geometry = ProbeGeometry {
        lateral_width: parse_f64("lateral_width_mm")?,
        imaging_depth: parse_f64("imaging_depth_mm")?,
        n_scanlines: parse_usize("n_scanlines")?,
        n_depth_samples: parse_usize("n_depth_samples")?,
        elevational_slab: parse_f64("elevational_slab_mm")?,
    };
    geometry.validate().map_err(crate::core_err("dataio"))?;

    let poses_path = dir.join(get("poses")?);
    let poses_text = fs::read_to_string(&poses_path)
        .map_err(|e| IoError::io(format!("reading {}", poses_path.display()), e))?;
    let mut poses: Vec<Pose> = Vec::new();
    let mut warnings = Vec::new();
    for (ln, line) in poses_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::format(format!("poses line {}: bad number", ln + 1)))?;
        if nums.len() != 16 {
            return Err(IoError::format(format!(
                "poses line {}: expected 16 numbers, got {}",
                ln + 1,
                nums.len()
            )));
        }
        let mut rows = [0.0; 16];
        rows.copy_from_slice(&nums);
        let pose = probe::pose_from_rows(&rows);
        let det = echoray_core::math::det3(&pose.rotation);
        if det < 0.0 {
            return Err(IoError::format(format!(
                "poses line {}: rotation has negative determinant (reflection)",
                ln + 1
            )));
        }
        let err = probe::rigidity_error(&pose.rotation);
        if err > POSE_TOLERANCE {
            return Err(IoError::format(format!(
                "poses line {}: rotation is not rigid ({})",
                ln + 1,
                probe::describe_pose_error(&pose.rotation)
            )));
        }
        let pose = if err > POSE_SILENT {
            warnings.push(format!(
                "poses line {}: re-orthonormalized rotation ({})",
                ln + 1,
                probe::describe_pose_error(&pose.rotation)
            ));
            Pose::new(probe::orthonormalize(&pose.rotation), pose.translation)
        } else {
            pose
        };
        poses.push(pose);
    }

    if poses.len() != frames.len() {
        return Err(IoError::format(format!(
            "{} poses for {} frames",
            poses.len(),
            frames.len()
        )));
    }

    let mut out_frames = Vec::with_capacity(frames.len());
    for ((path, sweep), pose) in frames.into_iter().zip(poses) {
        let image = pgm::read_pgm(&path)?;
        if image.width != geometry.n_scanlines || image.height != geometry.n_depth_samples {
            return Err(IoError::format(format!(
                "frame {} is {}x{} but geometry says {}x{}",
                path.display(),
                image.width,
                image.height,
                geometry.n_scanlines,
                geometry.n_depth_samples
            )));
        }
        out_frames.push(SweepFrame {
            image,
            pose,
            sweep,
        });
    }
    Ok((
        SweepDataset {
            geometry,
            frames: out_frames,
        },
        warnings,
    ))
}

/// Writes `<base>.raw` (f32 little-endian, x-fastest) plus `<base>.meta`.
pub fn save_volume(volume: &VoxelVolume, base: &Path) -> Result<(), IoError> {
    let raw_path = base.with_extension("raw");
    let mut raw = Vec::with_capacity(volume.data.len() * 4);
    for &v in &volume.data {
        raw.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&raw_path, raw)
        .map_err(|e| IoError::io(format!("writing {}", raw_path.display()), e))?;
    let mut meta = String::new();
    writeln!(meta, "format {VOLUME_FORMAT}").unwrap();
    let mut origin = String::new();
    fmt_floats(&mut origin, &volume.origin);
    writeln!(meta, "origin_mm {origin}").unwrap();
    writeln!(meta, "spacing_mm {}", volume.spacing).unwrap();
    writeln!(
        meta,
        "dims {} {} {}",
        volume.dims[0], volume.dims[1], volume.dims[2]
    )
    .unwrap();
    writeln!(
        meta,
        "data {}",
        raw_path.file_name().unwrap().to_string_lossy()
    )
    .unwrap();
    let meta_path = base.with_extension("meta");
    fs::write(&meta_path, meta)
        .map_err(|e| IoError::io(format!("writing {}", meta_path.display()), e))
}

pub fn load_volume(meta_path: &Path) -> Result<VoxelVolume, IoError> {
    let text = fs::read_to_string(meta_path)
        .map_err(|e| IoError::io(format!("reading {}", meta_path.display()), e))?;
    let mut origin = None;
    let mut spacing = None;
    let mut dims = None;
    let mut data_name = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some(VOLUME_FORMAT) {
                    return Err(IoError::format("unsupported volume format".to_string()));
                }
            }
            Some("origin_mm") => {
                let v: Vec<f64> = parts.map(|t| t.parse().unwrap_or(f64::NAN)).collect();
                if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
                    return Err(IoError::format("bad origin_mm".to_string()));
                }
                origin = Some([v[0], v[1], v[2]]);
            }
            Some("spacing_mm") => {
                spacing = parts.next().and_then(|t| t.parse::<f64>().ok());
            }
            Some("dims") => {
                let v: Vec<usize> = parts.map(|t| t.parse().unwrap_or(0)).collect();
                if v.len() != 3 || v.iter().any(|&x| x == 0) {
                    return Err(IoError::format("bad dims".to_string()));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            Some("data") => data_name = parts.next().map(String::from),
            _ => {}
        }
    }
    let origin = origin.ok_or_else(|| IoError::format("volume meta missing origin_mm"))?;
    let spacing = spacing.ok_or_else(|| IoError::format("volume meta missing spacing_mm"))?;
    let dims = dims.ok_or_else(|| IoError::format("volume meta missing dims"))?;
    let data_name = data_name.ok_or_else(|| IoError::format("volume meta missing data"))?;
    let raw_path = meta_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_name);
    let raw = fs::read(&raw_path)
        .map_err(|e| IoError::io(format!("reading {}", raw_path.display()), e))?;
    let n = dims[0] * dims[1] * dims[2];
    if raw.len() != n * 4 {
        return Err(IoError::format(format!(
            "volume raw has {} bytes, expected {}",
            raw.len(),
            n * 4
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(VoxelVolume {
        origin,
        spacing,
        dims,
        data,
    })
}

/// Dumps a float image as raw f32 plus a small text sidecar.
pub fn save_float_image(img: &Image, base: &Path) -> Result<(), IoError> {
    let raw_path = base.with_extension("f32");
    let mut raw = Vec::with_capacity(img.data.len() * 4);
    for &v in &img.data {
        raw.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&raw_path, raw)
        .map_err(|e| IoError::io(format!("writing {}", raw_path.display()), e))?;
    let meta = format!(
        "format echoray-image-f32-v1\nwidth {}\nheight {}\ndata {}\n",
        img.width,
        img.height,
        raw_path.file_name().unwrap().to_string_lossy()
    );
    fs::write(base.with_extension("fmeta"), meta)
        .map_err(|e| IoError::io("writing image sidecar", e))
}
