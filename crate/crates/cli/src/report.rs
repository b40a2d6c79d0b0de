//! CSV reports, metric summaries, and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use echoray_core::metrics::{FrameMetrics, MetricSummary};
use echoray_core::train::TrainConfig;

use crate::IoError;

/// Formats one metric value; infinite PSNR prints as the `inf` sentinel.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

pub const PER_FRAME_HEADER: &str = "frame,sweep,psnr,ms_ssim,gms,gmsd";
pub const SUMMARY_HEADER: &str =
    "label,n_frames,psnr_mean,psnr_std,ms_ssim_mean,ms_ssim_std,gms_mean,gms_std,gmsd_mean,gmsd_std";

pub fn per_frame_rows(rows: &[(usize, String, FrameMetrics)]) -> String {
    let mut out = String::from(PER_FRAME_HEADER);
    out.push('\n');
    for (frame, sweep, m) in rows {
        writeln!(
            out,
            "{frame},{sweep},{},{},{},{}",
            fmt_metric(m.psnr),
            fmt_metric(m.ms_ssim),
            fmt_metric(m.gms),
            fmt_metric(m.gmsd)
        )
        .unwrap();
    }
    out
}

pub fn summary_row(label: &str, n_frames: usize, s: &MetricSummary) -> String {
    format!(
        "{label},{n_frames},{},{},{},{},{},{},{},{}",
        fmt_metric(s.mean.psnr),
        fmt_metric(s.std.psnr),
        fmt_metric(s.mean.ms_ssim),
        fmt_metric(s.std.ms_ssim),
        fmt_metric(s.mean.gms),
        fmt_metric(s.std.gms),
        fmt_metric(s.mean.gmsd),
        fmt_metric(s.std.gmsd),
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| IoError::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, text).map_err(|e| IoError::io(format!("writing {}", path.display()), e))
}

/// Writes the reproducibility manifest that accompanies every command's
/// outputs: version, full argv, seed, thread cap, and the config snapshot.
pub fn write_run_manifest(
    dir: &Path,
    command: &str,
    argv: &[String],
    seed: u64,
    threads: usize,
    config: Option<&TrainConfig>,
    inputs: &[(&str, String)],
) -> Result<(), IoError> {
    let mut text = String::new();
    writeln!(text, "tool echoray {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(text, "command {command}").unwrap();
    writeln!(text, "argv {}", argv.join(" ")).unwrap();
    writeln!(text, "seed {seed}").unwrap();
    writeln!(
        text,
        "threads {}",
        if threads == 0 {
            "auto".to_string()
        } else {
            threads.to_string()
        }
    )
    .unwrap();
    for (k, v) in inputs {
        writeln!(text, "input {k} {v}").unwrap();
    }
    if let Some(config) = config {
        for (k, v) in config.entries() {
            writeln!(text, "config {k} {v}").unwrap();
        }
    }
    write_text(&dir.join("run-manifest.txt"), &text)
}
