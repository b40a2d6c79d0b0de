//! Training config files (plain `key=value` lines) and phantom specs (TOML).

use std::fs;
use std::path::Path;

use echoray_core::phantom::{Inclusion, Layer, PhantomSpec, SweepSpec};
use echoray_core::probe::ProbeGeometry;
use echoray_core::scene::BoundingBox;
use echoray_core::train::TrainConfig;
use serde::Deserialize;

use crate::IoError;

/// Loads a `key=value` config file; `#` starts a comment.
pub fn load_train_config(path: &Path) -> Result<TrainConfig, IoError> {
    let text = fs::read_to_string(path)
        .map_err(|e| IoError::io(format!("reading config {}", path.display()), e))?;
    let mut config = TrainConfig::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            IoError::format(format!("config line {}: expected key=value", ln + 1))
        })?;
        config
            .set(key.trim(), value.trim())
            .map_err(crate::core_err("config"))?;
    }
    Ok(config)
}

/// Applies `--set key=value` overrides after any file load.
pub fn apply_overrides(config: &mut TrainConfig, sets: &[String]) -> Result<(), IoError> {
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| IoError::format(format!("--set {s:?}: expected key=value")))?;
        config
            .set(key.trim(), value.trim())
            .map_err(crate::core_err("config"))?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhantomFile {
    seed: u64,
    compression: Option<f64>,
    extent: ExtentFile,
    #[serde(rename = "layer")]
    layers: Vec<LayerFile>,
    #[serde(default, rename = "inclusion")]
    inclusions: Vec<InclusionFile>,
    speckle: SpeckleFile,
    psf: PsfFile,
    geometry: GeometryFile,
    sweeps: SweepsFile,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtentFile {
    min_mm: [f64; 3],
    max_mm: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    z_top_mm: f64,
    echogenicity: f64,
    attenuation_per_mm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InclusionFile {
    center_mm: [f64; 3],
    axes_mm: [f64; 3],
    echogenicity: f64,
    attenuation_per_mm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeckleFile {
    density_per_mm3: f64,
    amp_min: f64,
    amp_max: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PsfFile {
    sigma_mm: f64,
    sigma_elev_mm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryFile {
    lateral_width_mm: f64,
    imaging_depth_mm: f64,
    n_scanlines: usize,
    n_depth_samples: usize,
    elevational_slab_mm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepsFile {
    train_tilts_deg: Vec<f64>,
    /// In-plane ray angles crossed with every training tilt (default [0]).
    #[serde(default)]
    train_inplane_deg: Vec<f64>,
    #[serde(default)]
    eval_tilts_deg: Vec<f64>,
    frames_per_sweep: usize,
    frame_spacing_mm: f64,
}

/// Parsed phantom description: the medium, the probe, and the sweep plan.
#[derive(Debug, Clone)]
pub struct PhantomPlan {
    pub spec: PhantomSpec,
    pub geometry: ProbeGeometry,
    pub train_sweeps: Vec<SweepSpec>,
    pub eval_tilts: Vec<f64>,
    pub frames_per_sweep: usize,
    pub frame_spacing: f64,
}

pub fn load_phantom_plan(path: &Path) -> Result<PhantomPlan, IoError> {
    let text = fs::read_to_string(path)
        .map_err(|e| IoError::io(format!("reading phantom spec {}", path.display()), e))?;
    let file: PhantomFile = toml::from_str(&text)
        .map_err(|e| IoError::format(format!("{}: {e}", path.display())))?;
    let spec = PhantomSpec {
        extent: BoundingBox::new(file.extent.min_mm, file.extent.max_mm),
        layers: file
            .layers
            .iter()
            .map(|l| Layer {
                z_top: l.z_top_mm,
                echogenicity: l.echogenicity,
                attenuation: l.attenuation_per_mm,
            })
            .collect(),
        inclusions: file
            .inclusions
            .iter()
            .map(|i| Inclusion {
                center: i.center_mm,
                axes: i.axes_mm,
                echogenicity: i.echogenicity,
                attenuation: i.attenuation_per_mm,
            })
            .collect(),
        speckle_density: file.speckle.density_per_mm3,
        speckle_amp: (file.speckle.amp_min, file.speckle.amp_max),
        psf_sigma: file.psf.sigma_mm,
        psf_sigma_elev: file.psf.sigma_elev_mm,
        compression: file.compression.unwrap_or(100.0),
        seed: file.seed,
    };
    spec.validate().map_err(crate::core_err("phantom"))?;
    let geometry = ProbeGeometry {
        lateral_width: file.geometry.lateral_width_mm,
        imaging_depth: file.geometry.imaging_depth_mm,
        n_scanlines: file.geometry.n_scanlines,
        n_depth_samples: file.geometry.n_depth_samples,
        elevational_slab: file.geometry.elevational_slab_mm,
    };
    geometry.validate().map_err(crate::core_err("phantom"))?;
    let inplane = if file.sweeps.train_inplane_deg.is_empty() {
        vec![0.0]
    } else {
        file.sweeps.train_inplane_deg.clone()
    };
    let train_sweeps = file
        .sweeps
        .train_tilts_deg
        .iter()
        .flat_map(|&tilt| {
            inplane.iter().map(move |&ip| SweepSpec {
                tilt_deg: tilt,
                inplane_deg: ip,
            })
        })
        .collect();
    Ok(PhantomPlan {
        spec,
        geometry,
        train_sweeps,
        eval_tilts: file.sweeps.eval_tilts_deg,
        frames_per_sweep: file.sweeps.frames_per_sweep,
        frame_spacing: file.sweeps.frame_spacing_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    #[test]
    fn train_config_file_and_overrides() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "# comment\ntotal_iters = 500\nlambda_ssim=0.4  # inline").unwrap();
        let mut cfg = load_train_config(f.path()).unwrap();
        assert_eq!(cfg.total_iters, 500);
        assert_eq!(cfg.lambda_ssim, 0.4);
        apply_overrides(&mut cfg, &["n_max=1000".into()]).unwrap();
        assert_eq!(cfg.n_max, 1000);
        assert!(apply_overrides(&mut cfg, &["bogus".into()]).is_err());
    }

    #[test]
    fn phantom_plan_parses() {
        let mut f = NamedTempFile::new().unwrap();
        write!(
            f,
            r#"
seed = 7

[extent]
min_mm = [-12.8, -6.0, 0.0]
max_mm = [12.8, 6.0, 25.6]

[[layer]]
z_top_mm = 0.0
echogenicity = 0.3
attenuation_per_mm = 0.01

[[inclusion]]
center_mm = [0.0, 0.0, 10.0]
axes_mm = [4.0, 4.0, 2.0]
echogenicity = 0.9
attenuation_per_mm = 0.5

[speckle]
density_per_mm3 = 1.0
amp_min = 0.1
amp_max = 0.4

[psf]
sigma_mm = 0.3
sigma_elev_mm = 0.5

[geometry]
lateral_width_mm = 25.6
imaging_depth_mm = 25.6
n_scanlines = 64
n_depth_samples = 64
elevational_slab_mm = 0.5

[sweeps]
train_tilts_deg = [0.0, 3.0]
eval_tilts_deg = [1.5]
frames_per_sweep = 5
frame_spacing_mm = 0.5
"#
        )
        .unwrap();
        let plan = load_phantom_plan(f.path()).unwrap();
        assert_eq!(plan.spec.seed, 7);
        assert_eq!(plan.spec.layers.len(), 1);
        assert_eq!(plan.spec.inclusions.len(), 1);
        assert_eq!(plan.geometry.n_scanlines, 64);
        assert_eq!(plan.eval_tilts, vec![1.5]);
        assert_eq!(plan.train_sweeps.len(), 2); // 2 tilts x default in-plane [0]
    }
}
