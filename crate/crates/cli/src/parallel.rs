//! Rayon drivers for rendering and backward passes.
//!
//! Scan lines are independent, and per-scanline results merge in scanline
//! order, so outputs are bitwise identical to the serial reference at any
//! worker count.

use echoray_core::grad::{self, GradientBuffer};
use echoray_core::render::{self, FramePrep, RenderOutput};
use echoray_core::{CoreError, Image};
use rayon::prelude::*;

/// Parallel render over scan lines; identical to `render::render_prepared`.
pub fn par_render(prep: FramePrep, retain_backward: bool) -> RenderOutput {
    let w = prep.n_scanlines();
    let columns: Vec<_> = (0..w)
        .into_par_iter()
        .map(|k| render::render_scanline(&prep, k, retain_backward))
        .collect();
    render::assemble(prep, columns)
}

/// Parallel backward over scan lines; identical to `grad::backward`.
pub fn par_backward(
    output: &RenderOutput,
    loss_grad_image: &Image,
    n_gaussians: usize,
) -> Result<GradientBuffer, CoreError> {
    let fb = output
        .backward
        .as_ref()
        .ok_or_else(|| CoreError::Contract("backward requires retain_backward".into()))?;
    loss_grad_image.require_same_shape(&output.bmode)?;
    let w = fb.prep.n_scanlines();
    let per_ray: Result<Vec<_>, CoreError> = (0..w)
        .into_par_iter()
        .map(|k| grad::backward_scanline(output, loss_grad_image, k))
        .collect();
    let per_ray = per_ray?;
    let mut buffer = GradientBuffer::zeros(n_gaussians);
    let mut touched = vec![false; n_gaussians];
    for entries in &per_ray {
        for (id, _) in entries {
            touched[*id] = true;
        }
        grad::merge_entries(&mut buffer, entries);
    }
    grad::bump_contrib_counts(&mut buffer, &mut touched);
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use echoray_core::probe::{make_rays, Pose, ProbeGeometry};
    use echoray_core::render::RenderOptions;
    use echoray_core::scene::{BoundingBox, GaussianField, SceneMeta};

    #[test]
    fn parallel_matches_serial_bitwise() {
        let bbox = BoundingBox::new([-10.0, -1.0, 0.0], [10.0, 1.0, 20.0]);
        let field = GaussianField::init_random(120, bbox, 3).unwrap();
        let meta = SceneMeta::new(bbox);
        let geometry = ProbeGeometry {
            lateral_width: 20.0,
            imaging_depth: 20.0,
            n_scanlines: 24,
            n_depth_samples: 24,
            elevational_slab: 0.5,
        };
        let pose = Pose::identity();
        let bundle = make_rays(&geometry, &pose).unwrap();

        let serial = render::render(
            &field,
            &meta,
            &geometry,
            &pose,
            &RenderOptions {
                oop: None,
                retain_backward: true,
            },
        )
        .unwrap();
        let prep = render::prepare(&field, &meta, &geometry, &pose, bundle).unwrap();
        let parallel = par_render(prep, true);
        assert_eq!(serial.bmode.data, parallel.bmode.data);
        assert_eq!(serial.transmittance.data, parallel.transmittance.data);

        let mut gi = Image::zeros(24, 24);
        for (i, v) in gi.data.iter_mut().enumerate() {
            *v = ((i % 11) as f64 - 5.0) / 11.0;
        }
        let gs = grad::backward(&serial, &gi, field.len()).unwrap();
        let gp = par_backward(&parallel, &gi, field.len()).unwrap();
        assert_eq!(gs, gp);
    }
}
