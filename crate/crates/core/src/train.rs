//! Training machinery: the composite loss, Adam with per-parameter learning
//! rates and smooth decay, importance accumulation, and the prune /
//! duplicate / split refinement of the Gaussian set.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::grad::GradientBuffer;
use crate::image::Image;
use crate::math::{self, V3};
use crate::rng::Stream;
use crate::scene::GaussianField;
use crate::ssim;
use crate::CoreError;

/// Hyperparameters; defaults follow the training recipe exactly and every
/// field is overridable through `set`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_ssim: f64,
    pub lambda_scale: f64,
    pub lr_means: f64,
    pub lr_scales: f64,
    pub lr_quats: f64,
    pub lr_trans: f64,
    pub lr_sh0: f64,
    pub lr_sh1: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub sh1_enable_iter: u64,
    pub refine_interval: u64,
    pub refine_start: u64,
    pub refine_end: u64,
    /// Prune when the largest axis scale leaves [s_min, s_max], mm.
    pub s_min: f64,
    pub s_max: f64,
    pub n_max: usize,
    /// Out-of-plane perturbation magnitude, mm.
    pub delta_oop: f64,
    /// Learning rates decay smoothly to this fraction at `total_iters`.
    pub lr_final_fraction: f64,
    /// Mean positional-gradient norm above which a Gaussian is refined.
    pub importance_threshold: f64,
    /// Below this largest-axis scale a refined Gaussian is duplicated
    /// rather than split, mm.
    pub split_scale_threshold: f64,
    /// Initial Gaussian count at random initialization.
    pub init_count: usize,
    /// Extra elevational padding of the initialization box beyond the swept
    /// slabs, mm. Gaussians seeded past the culling reach never render,
    /// shrink under the scale regularizer, and are pruned at the first
    /// refinement.
    pub elev_pad_mm: f64,
    /// Telemetry/eval snapshot interval, iterations.
    pub eval_interval: u64,
    /// Checkpoint interval, iterations.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ssim: 0.5,
            lambda_scale: 1e-3,
            lr_means: 1e-4,
            lr_scales: 5e-3,
            lr_quats: 5e-3,
            lr_trans: 5e-4,
            lr_sh0: 5e-3,
            lr_sh1: 1e-5,
            batch_size: 8,
            total_iters: 30_000,
            sh1_enable_iter: 1000,
            refine_interval: 2500,
            refine_start: 1000,
            refine_end: 20_000,
            s_min: 5e-5,
            s_max: 5.0,
            n_max: 500_000,
            delta_oop: 2.0,
            lr_final_fraction: 0.1,
            importance_threshold: 2e-6,
            split_scale_threshold: 1.0,
            init_count: 2000,
            elev_pad_mm: 3.0,
            eval_interval: 500,
            checkpoint_interval: 5000,
        }
    }
}

impl TrainConfig {
    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CoreError> {
        let bad = |what: &str| {
            CoreError::Config(format!("invalid value {value:?} for {what}"))
        };
        macro_rules! num {
            ($field:ident, f64) => {
                self.$field = value.parse::<f64>().map_err(|_| bad(key))?
            };
            ($field:ident, u64) => {
                self.$field = value.parse::<u64>().map_err(|_| bad(key))?
            };
            ($field:ident, usize) => {
                self.$field = value.parse::<usize>().map_err(|_| bad(key))?
            };
        }
        match key {
            "lambda_ssim" => num!(lambda_ssim, f64),
            "lambda_scale" => num!(lambda_scale, f64),
            "lr_means" => num!(lr_means, f64),
            "lr_scales" => num!(lr_scales, f64),
            "lr_quats" => num!(lr_quats, f64),
            "lr_trans" => num!(lr_trans, f64),
            "lr_sh0" => num!(lr_sh0, f64),
            "lr_sh1" => num!(lr_sh1, f64),
            "batch_size" => num!(batch_size, usize),
            "total_iters" => num!(total_iters, u64),
            "sh1_enable_iter" => num!(sh1_enable_iter, u64),
            "refine_interval" => num!(refine_interval, u64),
            "refine_start" => num!(refine_start, u64),
            "refine_end" => num!(refine_end, u64),
            "s_min" => num!(s_min, f64),
            "s_max" => num!(s_max, f64),
            "n_max" => num!(n_max, usize),
            "delta_oop" => num!(delta_oop, f64),
            "lr_final_fraction" => num!(lr_final_fraction, f64),
            "importance_threshold" => num!(importance_threshold, f64),
            "split_scale_threshold" => num!(split_scale_threshold, f64),
            "init_count" => num!(init_count, usize),
            "elev_pad_mm" => num!(elev_pad_mm, f64),
            "eval_interval" => num!(eval_interval, u64),
            "checkpoint_interval" => num!(checkpoint_interval, u64),
            _ => return Err(CoreError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Sorted `key=value` lines for run manifests.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", format!("{}", self.batch_size)),
            ("checkpoint_interval", format!("{}", self.checkpoint_interval)),
            ("delta_oop", format!("{}", self.delta_oop)),
            ("elev_pad_mm", format!("{}", self.elev_pad_mm)),
            ("eval_interval", format!("{}", self.eval_interval)),
            ("importance_threshold", format!("{}", self.importance_threshold)),
            ("init_count", format!("{}", self.init_count)),
            ("lambda_scale", format!("{}", self.lambda_scale)),
            ("lambda_ssim", format!("{}", self.lambda_ssim)),
            ("lr_final_fraction", format!("{}", self.lr_final_fraction)),
            ("lr_means", format!("{}", self.lr_means)),
            ("lr_quats", format!("{}", self.lr_quats)),
            ("lr_scales", format!("{}", self.lr_scales)),
            ("lr_sh0", format!("{}", self.lr_sh0)),
            ("lr_sh1", format!("{}", self.lr_sh1)),
            ("lr_trans", format!("{}", self.lr_trans)),
            ("n_max", format!("{}", self.n_max)),
            ("refine_end", format!("{}", self.refine_end)),
            ("refine_interval", format!("{}", self.refine_interval)),
            ("refine_start", format!("{}", self.refine_start)),
            ("s_max", format!("{}", self.s_max)),
            ("s_min", format!("{}", self.s_min)),
            ("sh1_enable_iter", format!("{}", self.sh1_enable_iter)),
            ("split_scale_threshold", format!("{}", self.split_scale_threshold)),
            ("total_iters", format!("{}", self.total_iters)),
        ]
    }
}

/// Mean absolute difference and its gradient contribution.
fn l1_parts(rendered: &Image, target: &Image) -> (f64, Image) {
    let n = rendered.data.len() as f64;
    let mut grad = Image::zeros(rendered.width, rendered.height);
    let mut sum = 0.0;
    for i in 0..rendered.data.len() {
        let d = rendered.data[i] - target.data[i];
        sum += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    (sum / n, grad)
}

/// Image parts of the loss: `(L1, 1 - SSIM, grad image)` where the gradient
/// already carries the λ weighting.
pub fn image_loss_parts(
    rendered: &Image,
    target: &Image,
    lambda_ssim: f64,
) -> Result<(f64, f64, Image), CoreError> {
    rendered.require_same_shape(target)?;
    let (l1, l1_grad) = l1_parts(rendered, target);
    let (ssim_value, ssim_grad) = ssim::ssim_with_grad(rendered, target)?;
    let ssim_term = 1.0 - ssim_value;
    let mut grad = l1_grad;
    for i in 0..grad.data.len() {
        grad.data[i] = (1.0 - lambda_ssim) * grad.data[i] - lambda_ssim * ssim_grad.data[i];
    }
    Ok((l1, ssim_term, grad))
}

/// `(1-λ)L1 + λ(1-SSIM)` and its gradient image.
pub fn image_loss(
    rendered: &Image,
    target: &Image,
    lambda_ssim: f64,
) -> Result<(f64, Image), CoreError> {
    let (l1, ssim_term, grad) = image_loss_parts(rendered, target, lambda_ssim)?;
    Ok(((1.0 - lambda_ssim) * l1 + lambda_ssim * ssim_term, grad))
}

/// Mean of exp(log_scale) over all Gaussians and axes (linear mm).
pub fn mean_exp_scale(field: &GaussianField) -> f64 {
    if field.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for ls in &field.log_scales {
        for &v in ls {
            sum += libm::exp(v);
        }
    }
    sum / (3 * field.len()) as f64
}

/// Adds λ_scale gradients of the scale regularizer directly onto the
/// log-scale gradients and returns the regularizer's loss term.
pub fn scale_regularizer(
    field: &GaussianField,
    lambda_scale: f64,
    grad_log_scales: &mut [V3],
) -> f64 {
    if field.is_empty() {
        return 0.0;
    }
    let denom = (3 * field.len()) as f64;
    for (i, ls) in field.log_scales.iter().enumerate() {
        for a in 0..3 {
            grad_log_scales[i][a] += lambda_scale * libm::exp(ls[a]) / denom;
        }
    }
    lambda_scale * mean_exp_scale(field)
}

/// Full single-frame loss: `(1-λ)L1 + λ(1-SSIM) + λ_scale E[exp S]`; scale
/// gradients are accumulated into `grads.log_scales`.
pub fn loss(
    rendered: &Image,
    target: &Image,
    config: &TrainConfig,
    field: &GaussianField,
    grads: &mut GradientBuffer,
) -> Result<(f64, Image), CoreError> {
    let (image_part, grad_image) = image_loss(rendered, target, config.lambda_ssim)?;
    let scale_part = scale_regularizer(field, config.lambda_scale, &mut grads.log_scales);
    Ok((image_part + scale_part, grad_image))
}

/// Adam first/second moments mirroring the learnable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamMoments {
    pub means: Vec<V3>,
    pub log_scales: Vec<V3>,
    pub quaternions: Vec<[f64; 4]>,
    pub trans_logits: Vec<f64>,
    pub sh_coeffs: Vec<[f64; 4]>,
}

impl ParamMoments {
    pub fn zeros(n: usize) -> Self {
        ParamMoments {
            means: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            quaternions: vec![[0.0; 4]; n],
            trans_logits: vec![0.0; n],
            sh_coeffs: vec![[0.0; 4]; n],
        }
    }

    fn retain_mask(&mut self, keep: &[bool]) {
        let mut w = 0;
        for r in 0..keep.len() {
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

    fn push_zero(&mut self) {
        self.means.push([0.0; 3]);
        self.log_scales.push([0.0; 3]);
        self.quaternions.push([0.0; 4]);
        self.trans_logits.push(0.0);
        self.sh_coeffs.push([0.0; 4]);
    }
}

/// Optimizer state plus refinement bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Adam step counter (1-based after the first step) for bias correction.
    pub step: u64,
    pub m: ParamMoments,
    pub v: ParamMoments,
    /// Accumulated positional-gradient norms since the last refinement.
    pub importance: Vec<f64>,
    /// Iterations with a nonzero positional gradient since last refinement.
    pub importance_count: Vec<u32>,
}

impl TrainState {
    pub fn new(n: usize) -> Self {
        TrainState {
            step: 0,
            m: ParamMoments::zeros(n),
            v: ParamMoments::zeros(n),
            importance: vec![0.0; n],
            importance_count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.importance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.importance.is_empty()
    }

    fn reset_importance(&mut self) {
        for v in &mut self.importance {
            *v = 0.0;
        }
        for c in &mut self.importance_count {
            *c = 0;
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Effective learning rate at `iteration`: exponential decay reaching
/// `lr_final_fraction` exactly at `total_iters`.
pub fn lr_decay(config: &TrainConfig, iteration: u64) -> f64 {
    libm::exp(libm::log(config.lr_final_fraction) * iteration as f64 / config.total_iters as f64)
}

#[inline]
fn adam_update(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, bc1: f64, bc2: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *p -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
}

/// One Adam step with per-class learning rates, bias correction, the decay
/// schedule, the SH degree-1 freeze, and quaternion renormalization.
pub fn adam_step(
    field: &mut GaussianField,
    grads: &GradientBuffer,
    state: &mut TrainState,
    config: &TrainConfig,
    iteration: u64,
) -> Result<(), CoreError> {
    if grads.len() != field.len() || state.len() != field.len() {
        return Err(CoreError::Contract(format!(
            "shape mismatch: field {} / grads {} / state {}",
            field.len(),
            grads.len(),
            state.len()
        )));
    }
    for (class, finite) in [
        ("means", grads.means.iter().flatten().all(|v| v.is_finite())),
        (
            "log_scales",
            grads.log_scales.iter().flatten().all(|v| v.is_finite()),
        ),
        (
            "quaternions",
            grads.quaternions.iter().flatten().all(|v| v.is_finite()),
        ),
        (
            "trans_logits",
            grads.trans_logits.iter().all(|v| v.is_finite()),
        ),
        (
            "sh_coeffs",
            grads.sh_coeffs.iter().flatten().all(|v| v.is_finite()),
        ),
    ] {
        if !finite {
            return Err(CoreError::Contract(format!(
                "non-finite gradient in parameter class {class}"
            )));
        }
    }

    state.step += 1;
    let bc1 = 1.0 - libm::pow(BETA1, state.step as f64);
    let bc2 = 1.0 - libm::pow(BETA2, state.step as f64);
    let decay = lr_decay(config, iteration);
    let sh1_on = iteration >= config.sh1_enable_iter;

    for i in 0..field.len() {
        for a in 0..3 {
            adam_update(
                &mut field.means[i][a],
                &mut state.m.means[i][a],
                &mut state.v.means[i][a],
                grads.means[i][a],
                config.lr_means * decay,
                bc1,
                bc2,
            );
            adam_update(
                &mut field.log_scales[i][a],
                &mut state.m.log_scales[i][a],
                &mut state.v.log_scales[i][a],
                grads.log_scales[i][a],
                config.lr_scales * decay,
                bc1,
                bc2,
            );
        }
        for a in 0..4 {
            adam_update(
                &mut field.quaternions[i][a],
                &mut state.m.quaternions[i][a],
                &mut state.v.quaternions[i][a],
                grads.quaternions[i][a],
                config.lr_quats * decay,
                bc1,
                bc2,
            );
        }
        adam_update(
            &mut field.trans_logits[i],
            &mut state.m.trans_logits[i],
            &mut state.v.trans_logits[i],
            grads.trans_logits[i],
            config.lr_trans * decay,
            bc1,
            bc2,
        );
        adam_update(
            &mut field.sh_coeffs[i][0],
            &mut state.m.sh_coeffs[i][0],
            &mut state.v.sh_coeffs[i][0],
            grads.sh_coeffs[i][0],
            config.lr_sh0 * decay,
            bc1,
            bc2,
        );
        if sh1_on {
            for a in 1..4 {
                adam_update(
                    &mut field.sh_coeffs[i][a],
                    &mut state.m.sh_coeffs[i][a],
                    &mut state.v.sh_coeffs[i][a],
                    grads.sh_coeffs[i][a],
                    config.lr_sh1 * decay,
                    bc1,
                    bc2,
                );
            }
        }
    }
    field.renormalize_quaternions();
    Ok(())
}

/// Accumulates per-Gaussian importance: the L2 norm of the positional
/// gradient this iteration, counting iterations with nonzero gradient.
pub fn accumulate_importance(state: &mut TrainState, grads: &GradientBuffer) {
    debug_assert_eq!(state.len(), grads.len());
    for i in 0..grads.len() {
        let n = math::norm(grads.means[i]);
        if n > 0.0 {
            state.importance[i] += n;
            state.importance_count[i] += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RefineReport {
    pub pruned: usize,
    pub duplicated: usize,
    pub split: usize,
}

/// Is `iteration` a refinement event under the schedule?
pub fn refine_due(config: &TrainConfig, iteration: u64) -> bool {
    config.refine_interval > 0
        && iteration >= config.refine_start
        && iteration <= config.refine_end
        && iteration % config.refine_interval == 0
}

/// Importance-driven refinement: prune Gaussians with out-of-range scales,
/// then duplicate (small) or split (large) the high-importance survivors,
/// respecting the `n_max` cap in descending-importance order. Importance is
/// reset and optimizer moments are kept consistent with the new layout.
pub fn refine(
    field: &mut GaussianField,
    state: &mut TrainState,
    config: &TrainConfig,
    seed: u64,
    iteration: u64,
) -> RefineReport {
    let n = field.len();
    let mut report = RefineReport::default();

    // Mean importance before any mutation.
    let mean_importance: Vec<f64> = (0..n)
        .map(|i| state.importance[i] / state.importance_count[i].max(1) as f64)
        .collect();

    // Prune on the largest axis scale.
    let mut keep = vec![true; n];
    for i in 0..n {
        let s = field.scales(i);
        let smax = s[0].max(s[1]).max(s[2]);
        if smax < config.s_min || smax > config.s_max {
            keep[i] = false;
            report.pruned += 1;
        }
    }
    field.retain_mask(&keep);
    state.m.retain_mask(&keep);
    state.v.retain_mask(&keep);
    let surviving_importance: Vec<f64> = mean_importance
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| *v)
        .collect();

    // High-importance survivors, most important first (index breaks ties).
    let mut candidates: Vec<usize> = (0..field.len())
        .filter(|&i| surviving_importance[i] > config.importance_threshold)
        .collect();
    candidates.sort_by(|&a, &b| {
        surviving_importance[b]
            .total_cmp(&surviving_importance[a])
            .then(a.cmp(&b))
    });

    let mut rng = Stream::with_indices(seed, "refine", &[iteration]);
    for &i in &candidates {
        if field.len() >= config.n_max {
            break;
        }
        let s = field.scales(i);
        let smax = s[0].max(s[1]).max(s[2]);
        let rot = math::quat_to_rot(math::quat_normalize(field.quaternions[i]));
        if smax < config.split_scale_threshold {
            // Duplicate: clone offset by 0.3·scale along a random local axis.
            let axis = rng.below(3);
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let dir = [rot[0][axis], rot[1][axis], rot[2][axis]];
            let mean = math::add(field.means[i], math::scale(dir, sign * 0.3 * s[axis]));
            field.push(
                mean,
                field.log_scales[i],
                field.quaternions[i],
                field.trans_logits[i],
                field.sh_coeffs[i],
            );
            report.duplicated += 1;
        } else {
            // Split into two at μ ± 0.5 σ_major along the major axis, both
            // shrunk by 1/1.6.
            let ls = field.log_scales[i];
            let major = if ls[0] >= ls[1] && ls[0] >= ls[2] {
                0
            } else if ls[1] >= ls[2] {
                1
            } else {
                2
            };
            let dir = [rot[0][major], rot[1][major], rot[2][major]];
            let offset = math::scale(dir, 0.5 * s[major]);
            let shrink = libm::log(1.6);
            let new_ls = [ls[0] - shrink, ls[1] - shrink, ls[2] - shrink];
            let mean_a = math::add(field.means[i], offset);
            let mean_b = math::sub(field.means[i], offset);
            field.means[i] = mean_a;
            field.log_scales[i] = new_ls;
            field.push(
                mean_b,
                new_ls,
                field.quaternions[i],
                field.trans_logits[i],
                field.sh_coeffs[i],
            );
            report.split += 1;
        }
        state.m.push_zero();
        state.v.push_zero();
    }

    state.importance = vec![0.0; field.len()];
    state.importance_count = vec![0; field.len()];
    state.reset_importance();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::BoundingBox;

    fn bbox() -> BoundingBox {
        BoundingBox::new([0.0; 3], [10.0, 10.0, 10.0])
    }

    #[test]
    fn identical_images_leave_only_scale_term() {
        let field = GaussianField::init_random(5, bbox(), 1).unwrap();
        let img = Image::filled(16, 16, 0.4);
        let config = TrainConfig::default();
        let mut grads = GradientBuffer::zeros(field.len());
        let (l, grad_img) = loss(&img, &img, &config, &field, &mut grads).unwrap();
        let want = config.lambda_scale * mean_exp_scale(&field);
        assert!((l - want).abs() < 1e-15);
        assert!(grad_img.data.iter().all(|&v| v == 0.0));
        assert!(grads.log_scales.iter().flatten().all(|&v| v > 0.0));
    }

    #[test]
    fn constant_offset_l1_part() {
        let a = Image::filled(16, 16, 0.5);
        let b = Image::filled(16, 16, 0.4);
        let (l1, _, _) = image_loss_parts(&a, &b, 0.5).unwrap();
        assert!((l1 - 0.1).abs() < 1e-12);
        // (1-λ)·L1 contribution is 0.05 for λ = 0.5.
        let (total, _) = image_loss(&a, &b, 0.5).unwrap();
        let ssim_term = total - 0.5 * 0.1;
        assert!(ssim_term >= 0.0);
    }

    #[test]
    fn ssim_part_matches_reference_implementation() {
        let mut rng = Stream::new(4, "loss");
        let mut a = Image::zeros(20, 16);
        let mut b = Image::zeros(20, 16);
        for v in &mut a.data {
            *v = rng.uniform();
        }
        for v in &mut b.data {
            *v = rng.uniform();
        }
        let (_, ssim_term, _) = image_loss_parts(&a, &b, 0.5).unwrap();
        let reference = 1.0 - ssim::ssim_reference(&a, &b).unwrap();
        assert!((ssim_term - reference).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let a = Image::zeros(16, 16);
        let b = Image::zeros(16, 12);
        assert!(matches!(
            image_loss(&a, &b, 0.5),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn adam_first_step_identity() {
        let mut field = GaussianField::init_random(1, bbox(), 0).unwrap();
        let before = field.trans_logits[0];
        let mut state = TrainState::new(1);
        let mut grads = GradientBuffer::zeros(1);
        grads.trans_logits[0] = 1.0;
        let mut config = TrainConfig::default();
        config.lr_trans = 0.01;
        adam_step(&mut field, &grads, &mut state, &config, 0).unwrap();
        let delta = field.trans_logits[0] - before;
        // First step: m̂ = v̂ = 1 ⇒ update = -lr/(1+eps).
        assert!((delta + 0.01 / (1.0 + ADAM_EPS)).abs() < 1e-12, "delta {delta}");
    }

    #[test]
    fn lr_reaches_ten_percent_at_total_iters() {
        let config = TrainConfig::default();
        let d = lr_decay(&config, config.total_iters);
        assert!((d - 0.1).abs() < 1e-12);
        assert!((lr_decay(&config, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_only_renormalize_quaternions() {
        let mut field = GaussianField::init_random(3, bbox(), 2).unwrap();
        field.quaternions[1] = [2.0, 0.0, 0.0, 0.0]; // non-unit on purpose
        let snapshot = field.clone();
        let mut state = TrainState::new(3);
        let grads = GradientBuffer::zeros(3);
        adam_step(&mut field, &grads, &mut state, &TrainConfig::default(), 0).unwrap();
        assert_eq!(field.means, snapshot.means);
        assert_eq!(field.trans_logits, snapshot.trans_logits);
        assert_eq!(field.quaternions[1], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn nan_gradient_aborts_naming_class() {
        let mut field = GaussianField::init_random(1, bbox(), 3).unwrap();
        let mut state = TrainState::new(1);
        let mut grads = GradientBuffer::zeros(1);
        grads.log_scales[0][1] = f64::NAN;
        let err = adam_step(&mut field, &grads, &mut state, &TrainConfig::default(), 0)
            .unwrap_err();
        match err {
            CoreError::Contract(msg) => assert!(msg.contains("log_scales"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn sh1_frozen_until_enable_iteration() {
        let mut field = GaussianField::init_random(1, bbox(), 4).unwrap();
        let mut state = TrainState::new(1);
        let mut grads = GradientBuffer::zeros(1);
        grads.sh_coeffs[0] = [1.0, 1.0, 1.0, 1.0];
        let config = TrainConfig::default();
        adam_step(&mut field, &grads, &mut state, &config, 10).unwrap();
        assert_eq!(&field.sh_coeffs[0][1..], &[0.0, 0.0, 0.0]);
        adam_step(&mut field, &grads, &mut state, &config, config.sh1_enable_iter).unwrap();
        assert!(field.sh_coeffs[0][1] != 0.0);
    }

    #[test]
    fn importance_accumulates_means_norms() {
        let mut state = TrainState::new(2);
        let mut g = GradientBuffer::zeros(2);
        g.means[0] = [1.0, 0.0, 0.0];
        accumulate_importance(&mut state, &g);
        g.means[0] = [3.0, 0.0, 0.0];
        accumulate_importance(&mut state, &g);
        assert!((state.importance[0] - 4.0).abs() < 1e-15);
        assert_eq!(state.importance_count[0], 2);
        // Mean = 2. Gaussian 1 never rendered: zero importance.
        assert_eq!(state.importance[1], 0.0);
        assert_eq!(state.importance_count[1], 0);
    }

    #[test]
    fn refine_prunes_scale_outliers() {
        let mut field = GaussianField::init_random(3, bbox(), 5).unwrap();
        field.log_scales[0] = [libm::log(1e-6); 3];
        field.log_scales[1] = [libm::log(6.0); 3];
        let mut state = TrainState::new(3);
        let report = refine(&mut field, &mut state, &TrainConfig::default(), 0, 2500);
        assert_eq!(report.pruned, 2);
        assert_eq!(field.len(), 1);
        assert_eq!(state.m.means.len(), 1);
        assert_eq!(state.importance.len(), 1);
    }

    #[test]
    fn refine_respects_cap() {
        let mut field = GaussianField::init_random(4, bbox(), 6).unwrap();
        let mut state = TrainState::new(4);
        for i in 0..4 {
            state.importance[i] = 1.0;
            state.importance_count[i] = 1;
        }
        let mut config = TrainConfig::default();
        config.n_max = 4;
        let report = refine(&mut field, &mut state, &config, 0, 2500);
        assert_eq!(report.duplicated + report.split, 0);
        assert_eq!(field.len(), 4);
    }

    #[test]
    fn refine_duplicates_small_and_splits_large() {
        let mut field = GaussianField::init_random(2, bbox(), 7).unwrap();
        // Gaussian 0 small (0.5mm default), Gaussian 1 large (2mm).
        field.log_scales[1] = [libm::log(2.0), libm::log(1.5), libm::log(0.2)];
        let mut state = TrainState::new(2);
        state.importance = vec![1.0, 1.0];
        state.importance_count = vec![1, 1];
        let before_means = field.means.clone();
        let report = refine(&mut field, &mut state, &TrainConfig::default(), 0, 2500);
        assert_eq!(report.duplicated, 1);
        assert_eq!(report.split, 1);
        assert_eq!(field.len(), 4);
        // Split halves shrink by ln(1.6) on every axis.
        assert!((field.log_scales[1][0] - (libm::log(2.0) - libm::log(1.6))).abs() < 1e-12);
        // The split pair straddles the original mean.
        let mid = math::scale(math::add(field.means[1], field.means[3]), 0.5);
        for a in 0..3 {
            assert!((mid[a] - before_means[1][a]).abs() < 1e-9);
        }
        // Importance reset.
        assert!(state.importance.iter().all(|&v| v == 0.0));
        assert_eq!(state.m.means.len(), 4);
    }

    #[test]
    fn refine_schedule() {
        let config = TrainConfig::default();
        assert!(!refine_due(&config, 0));
        assert!(!refine_due(&config, 1000)); // not divisible by 2500
        assert!(refine_due(&config, 2500));
        assert!(refine_due(&config, 20_000));
        assert!(!refine_due(&config, 22_500)); // past refine_end
    }

    #[test]
    fn config_set_overrides() {
        let mut c = TrainConfig::default();
        c.set("total_iters", "200").unwrap();
        c.set("lambda_ssim", "0.25").unwrap();
        assert_eq!(c.total_iters, 200);
        assert_eq!(c.lambda_ssim, 0.25);
        assert!(c.set("no_such_key", "1").is_err());
        assert!(c.set("total_iters", "abc").is_err());
    }

    use crate::rng::Stream;
}
