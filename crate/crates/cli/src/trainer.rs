//! The training loop: batched rendering with out-of-plane perturbation,
//! loss and backward, Adam, importance-driven refinement, telemetry, and
//! checkpoints. All randomness flows from the run seed through named
//! sub-streams, and every reduction has a fixed order, so two runs with the
//! same seed and config produce byte-identical telemetry at any thread
//! count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use echoray_core::grad::{self, GradientBuffer};
use echoray_core::metrics;
use echoray_core::phantom::{SweepDataset, SweepFrame};
use echoray_core::probe::{self, Pose};
use echoray_core::render;
use echoray_core::rng::Stream;
use echoray_core::scene::{BoundingBox, GaussianField, SceneMeta};
use echoray_core::train::{self, RefineReport, TrainConfig, TrainState};
use echoray_core::CoreError;

use crate::parallel::par_render;
use rayon::prelude::*;
use crate::report::write_text;
use crate::{dataio, IoError};

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub iteration: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim_term: f64,
    pub scale_term: f64,
    pub n_gaussians: usize,
    pub eval_gmsd: Option<f64>,
}

pub struct TrainOutputs {
    pub field: GaussianField,
    pub meta: SceneMeta,
    pub telemetry: Vec<TelemetryRow>,
    pub refine_events: Vec<(u64, RefineReport)>,
}

pub struct TrainSetup<'a> {
    pub dataset: &'a SweepDataset,
    /// Frames used for the periodic GMSD snapshot; falls back to the first
    /// training frame when empty.
    pub eval_frames: &'a [SweepFrame],
    pub config: TrainConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub quiet: bool,
}

/// Scene bounds from the union of frame footprints, padded laterally and
/// axially by 1 mm and elevationally by `elev_pad` (typically the slab plus
/// the out-of-plane magnitude, or more to seed the whole scene volume).
pub fn dataset_bounding_box(dataset: &SweepDataset, elev_pad: f64) -> BoundingBox {
    let g = &dataset.geometry;
    let e = elev_pad;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for frame in &dataset.frames {
        for &x in &[-0.5 * g.lateral_width, 0.5 * g.lateral_width] {
            for &y in &[-e, e] {
                for &z in &[0.0, g.imaging_depth] {
                    let p = frame.pose.to_world([x, y, z]);
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    let pad = [1.0, 0.5, 1.0];
    BoundingBox::new(
        [lo[0] - pad[0], lo[1] - pad[1], lo[2] - pad[2]],
        [hi[0] + pad[0], hi[1] + pad[1], hi[2] + pad[2]],
    )
}

fn render_plain(
    field: &GaussianField,
    meta: &SceneMeta,
    dataset: &SweepDataset,
    pose: &Pose,
) -> Result<render::RenderOutput, CoreError> {
    let bundle = probe::make_rays(&dataset.geometry, pose)?;
    let prep = render::prepare(field, meta, &dataset.geometry, pose, bundle)?;
    Ok(par_render(prep, false))
}

/// Mean GMSD of the rendered field against the eval frames.
fn eval_gmsd(
    field: &GaussianField,
    meta: &SceneMeta,
    dataset: &SweepDataset,
    eval_frames: &[&SweepFrame],
) -> Result<f64, CoreError> {
    let mut sum = 0.0;
    for frame in eval_frames {
        let out = render_plain(field, meta, dataset, &frame.pose)?;
        let (_, gmsd) = metrics::gms_gmsd(
            &metrics::to_255(&out.bmode),
            &metrics::to_255(&frame.image),
        )?;
        sum += gmsd;
    }
    Ok(sum / eval_frames.len() as f64)
}

/// Full optimization loop over a dataset; deterministic in (config, seed).
pub fn train(setup: &TrainSetup) -> Result<TrainOutputs, IoError> {
    let dataset = setup.dataset;
    if dataset.is_empty() {
        return Err(IoError::Core {
            module: "train",
            source: CoreError::Config("training dataset is empty".into()),
        });
    }
    let config = &setup.config;
        let bbox = dataset_bounding_box(
        dataset,
        dataset.geometry.elevational_slab + config.delta_oop + config.elev_pad_mm,
    );
    let meta = SceneMeta::new(bbox);
    let mut field =
        GaussianField::init_random(config.init_count, bbox, setup.seed).map_err(crate::core_err("train"))?;
    let mut state = TrainState::new(field.len());
    let default_eval: Vec<&SweepFrame> = vec![&dataset.frames[0]];
    let eval_frames: Vec<&SweepFrame> = if setup.eval_frames.is_empty() {
        default_eval
    } else {
        setup.eval_frames.iter().collect()
    };

    let mut telemetry = Vec::with_capacity(config.total_iters as usize);
    let mut refine_events = Vec::new();
    let progress_every = (config.total_iters / 20).max(1);

    for i in 0..config.total_iters {
        let mut batch_rng = Stream::with_indices(setup.seed, "batch", &[i]);
        let slots: Vec<(usize, usize)> = (0..config.batch_size)
            .map(|slot| (slot, batch_rng.below(dataset.len())))
            .collect();
        // One task per batch slot: render, loss, backward. Results merge in
        // slot order, so the reduction is identical at any thread count.
        let per_slot: Result<Vec<(f64, f64, GradientBuffer)>, CoreError> = slots
            .par_iter()
            .map(|&(slot, frame_idx)| {
                let frame = &dataset.frames[frame_idx];
                let mut bundle = probe::make_rays(&dataset.geometry, &frame.pose)?;
                if config.delta_oop > 0.0 {
                    let oop_seed =
                        Stream::with_indices(setup.seed, "oop", &[i, slot as u64]).next_u64();
                    bundle = probe::perturb_out_of_plane(&bundle, config.delta_oop, oop_seed);
                }
                let prep =
                    render::prepare(&field, &meta, &dataset.geometry, &frame.pose, bundle)?;
                let out = render::render_prepared(prep, true);
                let (l1, ssim_term, mut grad_img) =
                    train::image_loss_parts(&out.bmode, &frame.image, config.lambda_ssim)?;
                let inv_b = 1.0 / config.batch_size as f64;
                for v in &mut grad_img.data {
                    *v *= inv_b;
                }
                let g = grad::backward(&out, &grad_img, field.len())?;
                Ok((l1, ssim_term, g))
            })
            .collect();
        let per_slot = per_slot.map_err(crate::core_err("train"))?;
        let mut grads = GradientBuffer::zeros(field.len());
        let mut l1_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (l1, ssim_term, g) in &per_slot {
            grads.add(g);
            l1_sum += l1;
            ssim_sum += ssim_term;
        }
        let b = config.batch_size as f64;
        let l1_mean = l1_sum / b;
        let ssim_mean = ssim_sum / b;
        let scale_term =
            train::scale_regularizer(&field, config.lambda_scale, &mut grads.log_scales);
        let loss =
            (1.0 - config.lambda_ssim) * l1_mean + config.lambda_ssim * ssim_mean + scale_term;

        train::adam_step(&mut field, &grads, &mut state, config, i).map_err(crate::core_err("train"))?;
        if let Some((gaussian, what)) = field.find_non_finite() {
            return Err(IoError::Core {
                module: "train",
                source: CoreError::NumericFault { gaussian, what },
            });
        }
        train::accumulate_importance(&mut state, &grads);

        let iter1 = i + 1;
        if train::refine_due(config, iter1) {
            let report = train::refine(&mut field, &mut state, config, setup.seed, iter1);
            refine_events.push((iter1, report));
        }

        let eval = if iter1 % config.eval_interval == 0 || iter1 == config.total_iters {
            Some(eval_gmsd(&field, &meta, dataset, &eval_frames).map_err(crate::core_err("train"))?)
        } else {
            None
        };
        telemetry.push(TelemetryRow {
            iteration: iter1,
            loss,
            l1: l1_mean,
            ssim_term: ssim_mean,
            scale_term,
            n_gaussians: field.len(),
            eval_gmsd: eval,
        });

        if let Some(dir) = &setup.checkpoint_dir {
            if iter1 % config.checkpoint_interval == 0 {
                let path = dir.join(format!("ckpt_{iter1:06}.gsc"));
                dataio::save_scene(&field, &meta, &path)?;
            }
        }
        if !setup.quiet && (iter1 % progress_every == 0 || iter1 == config.total_iters) {
            eprintln!(
                "iter {iter1}/{} loss {loss:.6} n_gaussians {}",
                config.total_iters,
                field.len()
            );
        }
    }

    Ok(TrainOutputs {
        field,
        meta,
        telemetry,
        refine_events,
    })
}

pub const TELEMETRY_HEADER: &str = "iteration,loss,l1,ssim_term,scale_term,n_gaussians,eval_gmsd";

pub fn telemetry_csv(rows: &[TelemetryRow]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in rows {
        let eval = match r.eval_gmsd {
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{eval}",
            r.iteration, r.loss, r.l1, r.ssim_term, r.scale_term, r.n_gaussians
        )
        .unwrap();
    }
    out
}

pub fn write_telemetry(path: &Path, rows: &[TelemetryRow]) -> Result<(), IoError> {
    write_text(path, &telemetry_csv(rows))
}
