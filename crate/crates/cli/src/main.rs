//! Command-line entry point wiring all stages into reproducible experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use echoray::config::{apply_overrides, load_phantom_plan, load_train_config};
use echoray::core::baseline::{self, CompoundMode};
use echoray::core::grad;
use echoray::core::metrics::{self, FrameMetrics};
use echoray::core::phantom::{self, SweepDataset, SweepFrame};
use echoray::core::probe::{Pose, ProbeGeometry};
use echoray::core::render;
use echoray::core::scene::{BoundingBox, GaussianField, SceneMeta};
use echoray::core::train::TrainConfig;
use echoray::core::Image;
use echoray::dataio;
use echoray::parallel::par_render;
use echoray::pgm;
use echoray::report::{self, write_run_manifest, write_text};
use echoray::trainer::{self, TrainSetup};

#[derive(Parser)]
#[command(
    name = "echoray",
    version,
    about = "Gaussian-field ray-cast B-mode synthesis: phantom generation, training, rendering, evaluation, and classical compounding baselines"
)]
struct Cli {
    /// Cap the worker thread count (0 = hardware parallelism). Outputs are
    /// bitwise identical at any setting.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Median,
    Max,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom sweeps into train/ and eval_* datasets.
    Phantom {
        /// Phantom spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a Gaussian field on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides applied after the file, e.g. --set n_max=10000.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Shorthand for --set total_iters=N.
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset whose frames drive the periodic GMSD telemetry.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Render a scene checkpoint at every pose of a dataset.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the echo map per frame.
        #[arg(long)]
        dump_echo: bool,
        /// Also write the transmittance map per frame.
        #[arg(long)]
        dump_trans: bool,
        /// Additionally dump 32-bit float raster (with sidecar) per map.
        #[arg(long)]
        dump_float: bool,
    },
    /// Image-quality metrics of a scene (or rendered images) against a
    /// reference dataset; emits per-frame and summary CSVs.
    Eval {
        #[arg(long, conflicts_with = "renders")]
        scene: Option<PathBuf>,
        /// Directory of pre-rendered frames named 000000.pgm, ...
        #[arg(long)]
        renders: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label for the summary row.
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Compound a dataset into an isotropic voxel volume.
    Compound {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Isotropic voxel size, mm.
        #[arg(long, default_value_t = 0.25)]
        spacing: f64,
        /// Output base path (writes <out>.raw and <out>.meta).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-slice a compounded volume at every pose of a dataset.
    Reslice {
        /// Volume sidecar (.meta).
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    GradCheck {
        /// Gaussian counts to test, comma separated.
        #[arg(long, default_value = "1,5,20")]
        counts: String,
        /// Seeds to test, comma separated.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Render size (pixels per side).
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Where to write the text report (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one scene across several tilt datasets (angle
    /// generalization); one summary row per dataset.
    AblateAngles {
        #[arg(long)]
        scene: PathBuf,
        /// Evaluation dataset directories, one per tilt.
        #[arg(long = "data", required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate at several Gaussian-count caps; one summary row
    /// per cap.
    AblateCount {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        /// Caps, comma separated, e.g. 10000,100000.
        #[arg(long)]
        caps: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore the error if a pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn argv() -> Vec<String> {
    std::env::args().collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("bad {what} entry {t:?}"))
        })
        .collect()
}

fn load_dataset(path: &Path) -> Result<SweepDataset> {
    let (dataset, warnings) =
        dataio::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(dataset)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("creating directory {}", path.display()))
}

fn frame_metrics(rendered: &Image, reference: &Image) -> Result<FrameMetrics> {
    Ok(metrics::evaluate_pair(rendered, reference)?)
}

fn eval_dataset_with(
    mut render_frame: impl FnMut(usize, &SweepFrame) -> Result<Image>,
    dataset: &SweepDataset,
) -> Result<Vec<(usize, String, FrameMetrics)>> {
    let mut rows = Vec::new();
    for (i, frame) in dataset.frames.iter().enumerate() {
        let img = render_frame(i, frame)?;
        rows.push((i, frame.sweep.clone(), frame_metrics(&img, &frame.image)?));
    }
    Ok(rows)
}

fn render_scene_frame(
    field: &GaussianField,
    meta: &SceneMeta,
    geometry: &ProbeGeometry,
    pose: &Pose,
) -> Result<render::RenderOutput> {
    let bundle = echoray::core::probe::make_rays(geometry, pose)?;
    let prep = render::prepare(field, meta, geometry, pose, bundle)?;
    Ok(par_render(prep, false))
}

fn write_eval_reports(
    out: &Path,
    label: &str,
    rows: &[(usize, String, FrameMetrics)],
) -> Result<()> {
    ensure_dir(out)?;
    write_text(&out.join("per_frame.csv"), &report::per_frame_rows(rows))?;
    let frames: Vec<FrameMetrics> = rows.iter().map(|(_, _, m)| *m).collect();
    let summary = metrics::summarize(&frames);
    let mut text = String::from(report::SUMMARY_HEADER);
    text.push('\n');
    text.push_str(&report::summary_row(label, frames.len(), &summary));
    text.push('\n');
    write_text(&out.join("summary.csv"), &text)?;
    println!(
        "{label}: PSNR {:.2}±{:.2} dB, MS-SSIM {:.4}±{:.4}, GMS {:.4}±{:.4}, GMSD {:.4}±{:.4} ({} frames)",
        summary.mean.psnr,
        summary.std.psnr,
        summary.mean.ms_ssim,
        summary.std.ms_ssim,
        summary.mean.gms,
        summary.std.gms,
        summary.mean.gmsd,
        summary.std.gmsd,
        frames.len()
    );
    Ok(())
}

fn run_train(
    data: &Path,
    out: &Path,
    config_path: Option<&Path>,
    sets: &[String],
    iters: Option<u64>,
    seed: u64,
    eval_data: Option<&Path>,
    threads: usize,
) -> Result<(GaussianField, SceneMeta)> {
    let dataset = load_dataset(data)?;
    let mut config = match config_path {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut config, sets)?;
    if let Some(n) = iters {
        config.total_iters = n;
    }
    let eval_dataset = eval_data.map(load_dataset).transpose()?;
    let eval_frames: Vec<SweepFrame> = eval_dataset
        .as_ref()
        .map(|d| d.frames.clone())
        .unwrap_or_default();
    ensure_dir(out)?;
    write_run_manifest(
        out,
        "train",
        &argv(),
        seed,
        threads,
        Some(&config),
        &[
            ("data", data.display().to_string()),
            (
                "eval_data",
                eval_data
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "-".into()),
            ),
        ],
    )?;
    let outputs = trainer::train(&TrainSetup {
        dataset: &dataset,
        eval_frames: &eval_frames,
        config,
        seed,
        checkpoint_dir: Some(out.to_path_buf()),
        quiet: false,
    })?;
    trainer::write_telemetry(&out.join("telemetry.csv"), &outputs.telemetry)?;
    let mut refine_text = String::from("iteration,pruned,duplicated,split\n");
    for (iter, r) in &outputs.refine_events {
        refine_text.push_str(&format!("{iter},{},{},{}\n", r.pruned, r.duplicated, r.split));
    }
    write_text(&out.join("refinements.csv"), &refine_text)?;
    dataio::save_scene(&outputs.field, &outputs.meta, &out.join("scene_final.gsc"))?;
    println!(
        "trained {} iterations, final {} Gaussians -> {}",
        outputs.telemetry.len(),
        outputs.field.len(),
        out.display()
    );
    Ok((outputs.field, outputs.meta))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Phantom { spec, out, seed } => {
            let mut plan = load_phantom_plan(&spec)?;
            if let Some(s) = seed {
                plan.spec.seed = s;
            }
            ensure_dir(&out)?;
            write_run_manifest(
                &out,
                "phantom",
                &argv(),
                plan.spec.seed,
                cli.threads,
                None,
                &[("spec", spec.display().to_string())],
            )?;
            let train_ds = phantom::generate_sweeps(
                &plan.spec,
                &plan.geometry,
                &plan.train_sweeps,
                plan.frames_per_sweep,
                plan.frame_spacing,
            )?;
            let train_dir = out.join("train");
            ensure_dir(&train_dir)?;
            dataio::save_dataset(&train_ds, &train_dir)?;
            println!(
                "wrote {} training frames ({} sweeps) -> {}",
                train_ds.len(),
                plan.train_sweeps.len(),
                train_dir.display()
            );
            for &tilt in &plan.eval_tilts {
                let ds = phantom::generate_sweeps(
                    &plan.spec,
                    &plan.geometry,
                    &phantom::oop_sweeps(&[tilt]),
                    plan.frames_per_sweep,
                    plan.frame_spacing,
                )?;
                let dir = out.join(format!("eval_{}", phantom::tilt_label(tilt)));
                ensure_dir(&dir)?;
                dataio::save_dataset(&ds, &dir)?;
                println!("wrote {} eval frames -> {}", ds.len(), dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Train {
            data,
            out,
            config,
            sets,
            iters,
            seed,
            eval_data,
        } => {
            run_train(
                &data,
                &out,
                config.as_deref(),
                &sets,
                iters,
                seed,
                eval_data.as_deref(),
                cli.threads,
            )?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Render {
            scene,
            data,
            out,
            dump_echo,
            dump_trans,
            dump_float,
        } => {
            let (field, meta) = dataio::load_scene(&scene)?;
            let dataset = load_dataset(&data)?;
            ensure_dir(&out)?;
            write_run_manifest(
                &out,
                "render",
                &argv(),
                0,
                cli.threads,
                None,
                &[
                    ("scene", scene.display().to_string()),
                    ("data", data.display().to_string()),
                ],
            )?;
            for (i, frame) in dataset.frames.iter().enumerate() {
                let r = render_scene_frame(&field, &meta, &dataset.geometry, &frame.pose)?;
                pgm::write_pgm(&r.bmode, &out.join(format!("{i:06}.pgm")))?;
                if dump_echo {
                    pgm::write_pgm(&r.echo, &out.join(format!("{i:06}_echo.pgm")))?;
                }
                if dump_trans {
                    pgm::write_pgm(&r.transmittance, &out.join(format!("{i:06}_trans.pgm")))?;
                }
                if dump_float {
                    dataio::save_float_image(&r.bmode, &out.join(format!("{i:06}_bmode")))?;
                    if dump_echo {
                        dataio::save_float_image(&r.echo, &out.join(format!("{i:06}_echo")))?;
                    }
                    if dump_trans {
                        dataio::save_float_image(
                            &r.transmittance,
                            &out.join(format!("{i:06}_trans")),
                        )?;
                    }
                }
            }
            println!("rendered {} frames -> {}", dataset.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            scene,
            renders,
            data,
            out,
            label,
        } => {
            let dataset = load_dataset(&data)?;
            let rows = if let Some(scene_path) = scene {
                let (field, meta) = dataio::load_scene(&scene_path)?;
                eval_dataset_with(
                    |_, frame| {
                        Ok(render_scene_frame(&field, &meta, &dataset.geometry, &frame.pose)?
                            .bmode)
                    },
                    &dataset,
                )?
            } else if let Some(renders_dir) = renders {
                eval_dataset_with(
                    |i, _| Ok(pgm::read_pgm(&renders_dir.join(format!("{i:06}.pgm")))?),
                    &dataset,
                )?
            } else {
                bail!("eval requires either --scene or --renders");
            };
            ensure_dir(&out)?;
            write_run_manifest(
                &out,
                "eval",
                &argv(),
                0,
                cli.threads,
                None,
                &[("data", data.display().to_string())],
            )?;
            write_eval_reports(&out, &label, &rows)?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Compound {
            data,
            mode,
            spacing,
            out,
        } => {
            let dataset = load_dataset(&data)?;
            let frames: Vec<(Image, Pose)> = dataset
                .frames
                .iter()
                .map(|f| (f.image.clone(), f.pose))
                .collect();
            let mode = match mode {
                Mode::Median => CompoundMode::Median,
                Mode::Max => CompoundMode::Max,
            };
            let volume = baseline::compound(&frames, &dataset.geometry, mode, spacing)?;
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            dataio::save_volume(&volume, &out)?;
            if let Some(dir) = out.parent() {
                write_run_manifest(
                    dir,
                    "compound",
                    &argv(),
                    0,
                    cli.threads,
                    None,
                    &[("data", data.display().to_string())],
                )?;
            }
            println!(
                "compounded {} frames into {}x{}x{} voxels -> {}",
                frames.len(),
                volume.dims[0],
                volume.dims[1],
                volume.dims[2],
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Reslice { volume, data, out } => {
            let vol = dataio::load_volume(&volume)?;
            let dataset = load_dataset(&data)?;
            ensure_dir(&out)?;
            write_run_manifest(
                &out,
                "reslice",
                &argv(),
                0,
                cli.threads,
                None,
                &[
                    ("volume", volume.display().to_string()),
                    ("data", data.display().to_string()),
                ],
            )?;
            for (i, frame) in dataset.frames.iter().enumerate() {
                let img = baseline::reslice(&vol, &dataset.geometry, &frame.pose);
                pgm::write_pgm(&img, &out.join(format!("{i:06}.pgm")))?;
            }
            println!("resliced {} frames -> {}", dataset.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::GradCheck {
            counts,
            seeds,
            tolerance,
            size,
            out,
        } => {
            let counts: Vec<usize> = parse_list(&counts, "count")?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let geometry = ProbeGeometry {
                lateral_width: 16.0,
                imaging_depth: 16.0,
                n_scanlines: size,
                n_depth_samples: size,
                elevational_slab: 0.5,
            };
            let bbox = BoundingBox::new([-8.0, -1.5, 0.0], [8.0, 1.5, 16.0]);
            let meta = SceneMeta::new(bbox);
            let mut text = String::new();
            let mut all_pass = true;
            for &n in &counts {
                for &seed in &seeds {
                    let field = GaussianField::random_varied(n, bbox, seed)?;
                    let report =
                        grad::grad_check(&field, &meta, &geometry, &Pose::identity(), tolerance, seed)?;
                    for c in &report.classes {
                        let status = if c.pass { "pass" } else { "FAIL" };
                        text.push_str(&format!(
                            "N={n} seed={seed} {:<12} worst_rel {:.3e} (analytic {:+.6e} vs fd {:+.6e}) {status}\n",
                            c.class, c.worst, c.analytic, c.numeric
                        ));
                        all_pass &= c.pass;
                    }
                }
            }
            text.push_str(&format!(
                "tolerance {tolerance:.1e} (abs floor 1e-8): {}\n",
                if all_pass { "ALL PASS" } else { "FAILURES" }
            ));
            print!("{text}");
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                write_text(&dir.join("grad_check.txt"), &text)?;
            }
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }

        Command::AblateAngles {
            scene,
            datasets,
            out,
        } => {
            let (field, meta) = dataio::load_scene(&scene)?;
            let mut text = String::from(report::SUMMARY_HEADER);
            text.push('\n');
            for dir in &datasets {
                let dataset = load_dataset(dir)?;
                let rows = eval_dataset_with(
                    |_, frame| {
                        Ok(render_scene_frame(&field, &meta, &dataset.geometry, &frame.pose)?
                            .bmode)
                    },
                    &dataset,
                )?;
                let frames: Vec<FrameMetrics> = rows.iter().map(|(_, _, m)| *m).collect();
                let label = dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dir.display().to_string());
                text.push_str(&report::summary_row(
                    &label,
                    frames.len(),
                    &metrics::summarize(&frames),
                ));
                text.push('\n');
            }
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            write_text(&out, &text)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }

        Command::AblateCount {
            data,
            eval_data,
            caps,
            config,
            sets,
            iters,
            seed,
            out,
        } => {
            let caps: Vec<usize> = parse_list(&caps, "cap")?;
            ensure_dir(&out)?;
            let eval_dataset = load_dataset(&eval_data)?;
            let mut text = String::from(report::SUMMARY_HEADER);
            text.push('\n');
            for &cap in &caps {
                let run_dir = out.join(format!("cap_{cap}"));
                let mut cap_sets = sets.to_vec();
                cap_sets.push(format!("n_max={cap}"));
                let (field, meta) = run_train(
                    &data,
                    &run_dir,
                    config.as_deref(),
                    &cap_sets,
                    iters,
                    seed,
                    Some(&eval_data),
                    cli.threads,
                )?;
                let rows = eval_dataset_with(
                    |_, frame| {
                        Ok(render_scene_frame(
                            &field,
                            &meta,
                            &eval_dataset.geometry,
                            &frame.pose,
                        )?
                        .bmode)
                    },
                    &eval_dataset,
                )?;
                let frames: Vec<FrameMetrics> = rows.iter().map(|(_, _, m)| *m).collect();
                text.push_str(&report::summary_row(
                    &format!("{cap}"),
                    frames.len(),
                    &metrics::summarize(&frames),
                ));
                text.push('\n');
            }
            write_text(&out.join("ablate_count.csv"), &text)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

