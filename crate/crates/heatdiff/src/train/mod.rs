//! Training loop: diffuse keypoints, render the noised heatmaps and masks,
//! build the condition, predict clean heatmaps, and descend the two-term
//! heatmap reconstruction loss.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::geometry::{
    crop_transform, render_heatmaps, render_masks, Keypoints, MaskPair, Skeleton,
};
use crate::net::build::{
    build_aux_head, build_condition, build_encoder, build_sc_ca, build_sgdd, mask_features,
    TapeBindings,
};
use crate::net::params::ParameterStore;
use crate::net::{ModelConfig, PoseModel};
use crate::schedule::{
    denormalize_keypoints, diffuse_keypoints, normalize_keypoints, sample_coord_noise,
    DiffusionSchedule,
};

/// Optimization hyperparameters for [`fit`] and [`train_step`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Epoch indices at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    /// Weight of the decoder reconstruction term.
    pub weight_diffusion: f64,
    /// Weight of the auxiliary-head term.
    pub weight_aux: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Emit a metrics line every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_epochs(10)
    }
}

impl TrainConfig {
    /// Defaults with the decay milestones placed proportionally to the
    /// reference 170/210-epoch schedule (roughly 81% and 95% of the run).
    pub fn for_epochs(epochs: usize) -> Self {
        let mut lr_milestones = vec![epochs * 81 / 100, epochs * 95 / 100];
        lr_milestones.dedup();
        lr_milestones.retain(|&m| m > 0);
        Self {
            epochs,
            batch_size: 4,
            lr: 5e-4,
            lr_milestones,
            lr_decay: 0.1,
            seed: 0,
            weight_diffusion: 1.0,
            weight_aux: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1".to_string()));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate {} and decay {} must be positive",
                self.lr, self.lr_decay
            )));
        }
        if !self.lr_milestones.is_sorted() {
            return Err(Error::invalid(
                "lr_milestones must be sorted ascending".to_string(),
            ));
        }
        if !(self.weight_diffusion >= 0.0 && self.weight_aux >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative".to_string()));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid(format!(
                "adam betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive".to_string()));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1".to_string()));
        }
        Ok(())
    }

    /// Learning rate in force during `epoch` (0-based), after milestone decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(hits as i32)
    }
}

/// One training example: a cropped input image plus its keypoints in the
/// input frame.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Array3<f32>,
    pub keypoints: Keypoints,
}

/// Crops/normalizes dataset records into model-frame training samples.
pub fn prepare_samples(
    records: &[crate::data::AnnotationRecord],
    cfg: &ModelConfig,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let image = rec.load_image()?;
        let (crop, kps, _) =
            crop_transform(&image, rec.bbox, cfg.input_h, cfg.input_w, &rec.keypoints)?;
        out.push(TrainSample {
            image: crop,
            keypoints: kps,
        });
    }
    Ok(out)
}

/// Everything the loss graph consumes for one sample, with stochastic parts
/// (step index, noise) already drawn.
#[derive(Debug, Clone)]
pub struct LossInputs<T> {
    pub image: Array3<T>,
    /// Rendered heatmaps of the diffused keypoints `y_t`.
    pub noised_hm: Array3<T>,
    /// Rendered heatmaps of the clean keypoints `y_0` (regression target).
    pub target_hm: Array3<T>,
    pub masks: MaskPair,
    pub visible: Vec<bool>,
    pub t: usize,
}

impl<T: Real> LossInputs<T> {
    /// Element-wise cast (e.g. to f64 for finite-difference checks).
    pub fn cast<U: Real>(&self) -> LossInputs<U> {
        let cast3 = |a: &Array3<T>| a.mapv(|v| U::from_f64(v.to_f64_()));
        LossInputs {
            image: cast3(&self.image),
            noised_hm: cast3(&self.noised_hm),
            target_hm: cast3(&self.target_hm),
            masks: self.masks.clone(),
            visible: self.visible.clone(),
            t: self.t,
        }
    }
}

/// Draws the per-sample stochastic state and renders the loss inputs:
/// `t ~ U{1..T}`, diffuse the normalized keypoints to `y_t`, render `y_t` and
/// `y_0` heatmaps, and render the masks from `y_t`.
pub fn prepare_loss_inputs<R: Rng + ?Sized>(
    sample: &TrainSample,
    cfg: &ModelConfig,
    schedule: &DiffusionSchedule,
    skeleton: &Skeleton,
    rng: &mut R,
) -> Result<LossInputs<f32>> {
    if sample.image.dim() != (3, cfg.input_h, cfg.input_w) {
        return Err(Error::shape(format!(
            "image {:?} does not match configured input (3, {}, {})",
            sample.image.dim(),
            cfg.input_h,
            cfg.input_w
        )));
    }
    if sample.keypoints.len() != cfg.joints {
        return Err(Error::shape(format!(
            "sample has {} joints, model expects {}",
            sample.keypoints.len(),
            cfg.joints
        )));
    }
    let (h, w) = (cfg.heat_h(), cfg.heat_w());
    let inv_s = 1.0 / cfg.scale as f64;
    let gt_hm_frame = sample.keypoints.scaled(inv_s, inv_s);
    let visible = gt_hm_frame.visibility.clone();
    if !visible.iter().any(|&v| v) {
        return Err(Error::invalid(
            "sample has no visible joints to supervise".to_string(),
        ));
    }
    let t = rng.random_range(1..=schedule.steps());
    let y0 = normalize_keypoints(&gt_hm_frame, h, w, cfg.zeta)?;
    let noise = sample_coord_noise(cfg.joints, rng);
    let noised = diffuse_keypoints(schedule, &y0, &visible, t, &noise)?;
    let yt_kps = denormalize_keypoints(&noised.coords, h, w, cfg.zeta)?
        .with_visibility(visible.clone())?;
    let noised_hm = render_heatmaps::<f32>(&yt_kps, cfg.sigma, h, w)?;
    let target_hm = render_heatmaps::<f32>(&gt_hm_frame, cfg.sigma, h, w)?;
    let masks = render_masks(&yt_kps, skeleton, cfg.delta_kps, cfg.delta_ske, h, w)?;
    Ok(LossInputs {
        image: sample.image.clone(),
        noised_hm: noised_hm.values,
        target_hm: target_hm.values,
        masks,
        visible,
        t,
    })
}

/// Builds the full forward pass plus the two-term loss on one tape.
///
/// Returns `(loss_total, loss_diffusion, loss_aux)` node ids. Both terms are
/// mean squared heatmap errors over the visible-joint channels; invisible
/// channels carry zero weight.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    weights: (f64, f64),
    inputs: &LossInputs<T>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let (h, w) = (cfg.heat_h(), cfg.heat_w());
    let n_vis = inputs.visible.iter().filter(|&&v| v).count();
    if n_vis == 0 {
        return Err(Error::invalid("no visible joints in loss".to_string()));
    }
    let channel_weight = |term_weight: f64| -> ArrayD<T> {
        Array3::from_shape_fn((cfg.joints, h, w), |(j, _, _)| {
            if inputs.visible[j] {
                T::from_f64(term_weight / (n_vis * h * w) as f64)
            } else {
                T::zero()
            }
        })
        .into_dyn()
    };
    let img = g.leaf(inputs.image.clone().into_dyn());
    let fea = build_encoder(g, binds, store, cfg, img)?;
    let aux = build_aux_head(g, binds, store, fea)?;
    let (x_kps, x_ske) = mask_features(g, fea, &inputs.masks)?;
    let attended = build_sc_ca(g, binds, store, cfg, x_kps, x_ske)?;
    let cond = build_condition(g, fea, x_kps, attended)?;
    let noised = g.leaf(inputs.noised_hm.clone().into_dyn());
    let pred = build_sgdd(g, binds, store, cfg, noised, cond, Some(inputs.t))?;
    let target = g.leaf(inputs.target_hm.clone().into_dyn());
    let neg_target = g.scale(target, T::from_f64(-1.0));
    let diff_d = g.add(pred, neg_target);
    let sq_d = g.square(diff_d);
    let loss_d = g.weighted_sum(sq_d, channel_weight(weights.0));
    let diff_a = g.add(aux, neg_target);
    let sq_a = g.square(diff_a);
    let loss_a = g.weighted_sum(sq_a, channel_weight(weights.1));
    let total = g.add(loss_d, loss_a);
    Ok((total, loss_d, loss_a))
}

/// Adaptive-moment optimizer state over a named parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Update count (for bias correction).
    pub step: u64,
    pub m: ParameterStore<f32>,
    pub v: ParameterStore<f32>,
}

impl Adam {
    pub fn new(params: &ParameterStore<f32>, cfg: &TrainConfig) -> Self {
        let mut m = ParameterStore::new();
        let mut v = ParameterStore::new();
        for (name, arr) in params.iter() {
            m.insert(name.to_string(), ArrayD::zeros(arr.raw_dim()))
                .expect("unique names");
            v.insert(name.to_string(), ArrayD::zeros(arr.raw_dim()))
                .expect("unique names");
        }
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m,
            v,
        }
    }

    /// Rebuilds optimizer state from checkpointed moments.
    pub fn from_state(
        step: u64,
        m: ParameterStore<f32>,
        v: ParameterStore<f32>,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step,
            m,
            v,
        }
    }

    /// One update over all parameters that received a gradient.
    pub fn apply(
        &mut self,
        params: &mut ParameterStore<f32>,
        grads: &HashMap<String, ArrayD<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let p = params.get_mut(name)?;
            if grad.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for '{name}' has shape {:?}, parameter {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((pv, mv), vv), gv) in
                p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.iter())
            {
                let g = *gv as f64;
                let mn = self.beta1 * (*mv as f64) + (1.0 - self.beta1) * g;
                let vn = self.beta2 * (*vv as f64) + (1.0 - self.beta2) * g * g;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// The three loss scalars from one step: total, decoder term, auxiliary term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub diffusion: f64,
    pub aux: f64,
}

/// Per-sample gradients averaged over a batch, plus the mean losses. The
/// model is not modified.
pub fn batch_gradients(
    model: &PoseModel,
    batch_inputs: &[LossInputs<f32>],
    weights: (f64, f64),
) -> Result<(HashMap<String, ArrayD<f32>>, LossBreakdown)> {
    if batch_inputs.is_empty() {
        return Err(Error::invalid("empty batch".to_string()));
    }
    let mut accum: HashMap<String, ArrayD<f32>> = HashMap::new();
    let mut losses = LossBreakdown {
        total: 0.0,
        diffusion: 0.0,
        aux: 0.0,
    };
    let inv_n = 1.0 / batch_inputs.len() as f64;
    for inputs in batch_inputs {
        let mut g = Graph::new();
        let mut binds = TapeBindings::new();
        let (total, loss_d, loss_a) =
            build_loss(&mut g, &mut binds, &model.params, &model.config, weights, inputs)?;
        let grads = g.backward(total)?;
        losses.total += g.scalar(total) as f64 * inv_n;
        losses.diffusion += g.scalar(loss_d) as f64 * inv_n;
        losses.aux += g.scalar(loss_a) as f64 * inv_n;
        for (name, id) in binds.iter() {
            if let Some(grad) = &grads[id.0] {
                let scaled = grad.mapv(|v| v * inv_n as f32);
                match accum.get_mut(name) {
                    Some(acc) => *acc += &scaled,
                    None => {
                        accum.insert(name.to_string(), scaled);
                    }
                }
            }
        }
    }
    if !losses.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite batch loss {}",
            losses.total
        )));
    }
    Ok((accum, losses))
}

/// One optimization step over a batch: draw the stochastic state per sample,
/// compute gradients, and apply one optimizer update at learning rate `lr`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut PoseModel,
    batch: &[TrainSample],
    skeleton: &Skeleton,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    lr: f64,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch".to_string()));
    }
    let inputs: Vec<LossInputs<f32>> = batch
        .iter()
        .map(|s| prepare_loss_inputs(s, &model.config, schedule, skeleton, rng))
        .collect::<Result<_>>()?;
    let weights = (cfg.weight_diffusion, cfg.weight_aux);
    let (grads, losses) = batch_gradients(model, &inputs, weights)?;
    opt.apply(&mut model.params, &grads, lr)?;
    Ok(losses)
}

/// Runs the full training loop: shuffled mini-batch epochs with milestone
/// learning-rate decay, periodic metric lines, and a final checkpoint.
pub fn fit(
    model: &mut PoseModel,
    dataset: &[TrainSample],
    skeleton: &Skeleton,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset must be non-empty".to_string()));
    }
    let mut log = match log_path {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg);
    let mut step: u64 = 0;
    let mut epoch = 0;
    while epoch < cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let losses = train_step(model, &batch, skeleton, schedule, cfg, lr, &mut opt, &mut rng)?;
            step += 1;
            if step % cfg.log_every as u64 == 0 {
                if let Some(f) = log.as_mut() {
                    writeln!(
                        f,
                        "step={step} epoch={epoch} lr={lr:e} loss={:.8} loss_diffusion={:.8} loss_aux={:.8}",
                        losses.total, losses.diffusion, losses.aux
                    )?;
                }
            }
        }
        epoch += 1;
    }
    Ok(Checkpoint::capture(model, schedule, epoch, step, &opt, &rng))
}
