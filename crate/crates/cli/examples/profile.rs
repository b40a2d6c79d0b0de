//! Quick wall-clock breakdown of one training iteration's pieces.

use std::time::Instant;

use echoray::core::grad;
use echoray::core::phantom::{self, Layer, PhantomSpec};
use echoray::core::probe::{self, ProbeGeometry};
use echoray::core::render;
use echoray::core::scene::{BoundingBox, GaussianField, SceneMeta};
use echoray::core::train;
use echoray::trainer::dataset_bounding_box;

fn main() {
    let spec = PhantomSpec {
        extent: BoundingBox::new([-14.0, -7.0, 0.0], [14.0, 7.0, 27.0]),
        layers: vec![
            Layer { z_top: 0.0, echogenicity: 0.3, attenuation: 0.008 },
            Layer { z_top: 7.0, echogenicity: 0.45, attenuation: 0.012 },
        ],
        inclusions: vec![],
        speckle_density: 0.8,
        speckle_amp: (0.08, 0.45),
        psf_sigma: 0.3,
        psf_sigma_elev: 0.5,
        compression: 100.0,
        seed: 7,
    };
    let geometry = ProbeGeometry {
        lateral_width: 25.6,
        imaging_depth: 25.6,
        n_scanlines: 64,
        n_depth_samples: 64,
        elevational_slab: 0.5,
    };
    let dataset =
        phantom::generate_sweeps(&spec, &geometry, &phantom::oop_sweeps(&[0.0]), 3, 0.5).unwrap();
    let bbox = dataset_bounding_box(&dataset, 4.5);
    let meta = SceneMeta::new(bbox);
    let field = GaussianField::init_random(2000, bbox, 1).unwrap();
    let frame = &dataset.frames[0];

    let reps = 20;
    let t0 = Instant::now();
    let mut prep_keep = None;
    for _ in 0..reps {
        let bundle = probe::make_rays(&geometry, &frame.pose).unwrap();
        prep_keep = Some(render::prepare(&field, &meta, &geometry, &frame.pose, bundle).unwrap());
    }
    println!("prepare:     {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
    let prep = prep_keep.unwrap();
    println!("culled: {}  ray items: {}", prep.culled.len(), {
        let bundle = probe::make_rays(&geometry, &frame.pose).unwrap();
        let p = render::prepare(&field, &meta, &geometry, &frame.pose, bundle).unwrap();
        let _ = p;
        0
    });

    let t0 = Instant::now();
    let mut out = None;
    for _ in 0..reps {
        let bundle = probe::make_rays(&geometry, &frame.pose).unwrap();
        let p = render::prepare(&field, &meta, &geometry, &frame.pose, bundle).unwrap();
        out = Some(render::render_prepared(p, true));
    }
    println!("fwd+prep:    {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
    let out = out.unwrap();

    let (_, _, grad_img) =
        train::image_loss_parts(&out.bmode, &frame.image, 0.5).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = train::image_loss_parts(&out.bmode, &frame.image, 0.5).unwrap();
    }
    println!("ssim loss:   {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = grad::backward(&out, &grad_img, field.len()).unwrap();
    }
    println!("backward:    {:>8.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}
