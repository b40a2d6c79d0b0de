//! Calibration probe: trains on the shadow phantom and reports the
//! shadow/control intensity ratio of a held-out view, for the full model and
//! for the ablation that forces every transmittance to 1.

use echoray::config::load_phantom_plan;
use echoray::core::phantom::{self, SweepFrame};
use echoray::core::probe;
use echoray::core::render;
use echoray::core::scene::GaussianField;
use echoray::core::train::TrainConfig;
use echoray::parallel::par_render;
use echoray::trainer::{self, TrainSetup};
use std::path::Path;

fn render_bmode(
    field: &GaussianField,
    meta: &echoray::core::scene::SceneMeta,
    geometry: &probe::ProbeGeometry,
    pose: &probe::Pose,
) -> echoray::core::Image {
    let bundle = probe::make_rays(geometry, pose).unwrap();
    let prep = render::prepare(field, meta, geometry, pose, bundle).unwrap();
    par_render(prep, false).bmode
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr_trans: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let plan = load_phantom_plan(Path::new("specs/shadow.toml")).unwrap();
    let train_ds = phantom::generate_sweeps(
        &plan.spec,
        &plan.geometry,
        &plan.train_sweeps,
        plan.frames_per_sweep,
        plan.frame_spacing,
    )
    .unwrap();
    let eval_ds = phantom::generate_sweeps(
        &plan.spec,
        &plan.geometry,
        &phantom::oop_sweeps(&[plan.eval_tilts[0]]),
        plan.frames_per_sweep,
        plan.frame_spacing,
    )
    .unwrap();

    let mut config = TrainConfig::default();
    config.total_iters = iters;
    config.init_count = 1200;
    config.batch_size = 4;
    config.n_max = 10_000;
    config.eval_interval = 500;
    config.refine_start = 500;
    config.refine_interval = 500;
    config.refine_end = iters.saturating_sub(200);
    config.s_min = 0.125;
    config.lr_trans = lr_trans;
    config.elev_pad_mm = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    config.importance_threshold = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-6);

    let t0 = std::time::Instant::now();
    let out = trainer::train(&TrainSetup {
        dataset: &train_ds,
        eval_frames: &eval_ds.frames,
        config,
        seed,
        checkpoint_dir: None,
        quiet: true,
    })
    .unwrap();
    println!(
        "trained {iters} iters in {:.1}s, final N = {}",
        t0.elapsed().as_secs_f64(),
        out.field.len()
    );
    for (it, r) in &out.refine_events {
        println!("refine @{it}: pruned {} dup {} split {}", r.pruned, r.duplicated, r.split);
    }
    let telemetry_tail: Vec<String> = out
        .telemetry
        .iter()
        .filter(|r| r.eval_gmsd.is_some())
        .map(|r| format!("it {} loss {:.4} N {} gmsd {:.4}", r.iteration, r.loss, r.n_gaussians, r.eval_gmsd.unwrap()))
        .collect();
    println!("{}", telemetry_tail.join("\n"));

    let (shadow, control) = phantom::shadow_strips(&plan.spec, &plan.geometry).unwrap();
    let measure = |img: &echoray::core::Image, label: &str| -> (f64, f64) {
        let s = img.region_mean(shadow.0, shadow.1, shadow.2, shadow.3);
        let c = img.region_mean(control.0, control.1, control.2, control.3);
        println!("{label}: shadow {s:.4} control {c:.4} ratio {:.4}", s / c);
        (s, c)
    };

    // Target statistics on the held-out frame.
    let eval_frame: &SweepFrame = &eval_ds.frames[eval_ds.len() / 2];
    measure(&eval_frame.image, "target   ");

    let full = render_bmode(&out.field, &out.meta, &plan.geometry, &eval_frame.pose);
    measure(&full, "full     ");

    let mut ablated = out.field.clone();
    for t in &mut ablated.trans_logits {
        *t = 40.0; // sigmoid saturates to exactly 1.0
    }
    let no_trans = render_bmode(&ablated, &out.meta, &plan.geometry, &eval_frame.pose);
    measure(&no_trans, "tau-one  ");

    // Transmittance statistics: how far did tau move?
    let mut taus: Vec<f64> = (0..out.field.len()).map(|i| out.field.transmittance(i)).collect();
    taus.sort_by(f64::total_cmp);
    let q = |p: f64| taus[((taus.len() - 1) as f64 * p) as usize];
    println!(
        "tau quantiles: min {:.4} p5 {:.4} p25 {:.4} median {:.4} max {:.4}",
        q(0.0), q(0.05), q(0.25), q(0.5), q(1.0)
    );
}
