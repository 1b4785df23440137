//! Reverse-process inference: initialize heatmaps from the auxiliary head,
//! then iterate decode -> mask -> condition -> denoise over a decreasing step
//! schedule, in either the literal direct mode or deterministic skip-step
//! (DDIM) mode.

use ndarray::Array3;

use crate::data::AnnotationRecord;
use crate::error::{Error, Result};
use crate::geometry::{
    crop_transform, decode_argmax_with_peaks, render_heatmaps, render_masks, HeatmapStack,
    HeatmapVariant, Keypoints, Skeleton,
};
use crate::net::{ModelConfig, PoseModel, SamplerMode};
use crate::schedule::{
    ddim_step, denormalize_keypoints, normalize_keypoints, DiffusionSchedule,
};

/// A resolved sampling plan: the mode plus the decreasing list of step
/// indices to visit, starting at the schedule's final step `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub mode: SamplerMode,
    pub t_schedule: Vec<usize>,
}

impl SamplerPlan {
    pub fn new(mode: SamplerMode, t_schedule: Vec<usize>) -> Result<Self> {
        if t_schedule.is_empty() {
            return Err(Error::invalid("step schedule must be non-empty".to_string()));
        }
        for pair in t_schedule.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::invalid(format!(
                    "step schedule must be strictly decreasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if *t_schedule.last().unwrap() == 0 {
            return Err(Error::invalid(
                "step schedule must end above 0; the final prediction is decoded directly"
                    .to_string(),
            ));
        }
        Ok(Self { mode, t_schedule })
    }

    /// `steps` values spaced evenly from `t_total` down to `t_total / steps`.
    pub fn evenly_spaced(mode: SamplerMode, t_total: usize, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("need at least one sampling step".to_string()));
        }
        if t_total == 0 {
            return Err(Error::invalid("schedule has no steps".to_string()));
        }
        let mut t_schedule = Vec::with_capacity(steps);
        if steps == 1 {
            t_schedule.push(t_total);
        } else {
            let last = (t_total / steps).max(1) as f64;
            let spacing = (t_total as f64 - last) / (steps - 1) as f64;
            for i in 0..steps {
                t_schedule.push((t_total as f64 - spacing * i as f64).round() as usize);
            }
        }
        Self::new(mode, t_schedule)
    }

    /// Checks the plan against the schedule it will drive.
    pub fn validate_for(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.t_schedule[0] != schedule.steps() {
            return Err(Error::invalid(format!(
                "step schedule starts at {}, but the diffusion schedule has T = {}",
                self.t_schedule[0],
                schedule.steps()
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.t_schedule.len()
    }
}

/// The auxiliary head's coarse heatmaps, used as the reverse-process start.
pub fn init_heatmaps(fea: &Array3<f32>, model: &PoseModel) -> Result<HeatmapStack<f32>> {
    let hm = model.aux_head(fea)?;
    Ok(HeatmapStack::new(hm.values, HeatmapVariant::Initialized))
}

/// Output of a reverse run, in the heatmap frame.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub keypoints: Keypoints,
    /// Peak heatmap value per joint (confidence proxy).
    pub peaks: Vec<f64>,
    pub final_heatmaps: HeatmapStack<f32>,
    /// The predicted clean heatmaps from each scheduled step, in order.
    pub trajectory: Vec<HeatmapStack<f32>>,
}

/// Drives the reverse loop over an arbitrary per-step predictor.
///
/// `predict(iterate, t)` must return the predicted clean heatmaps for the
/// iterate at step `t`; it is called exactly once per scheduled step. In
/// direct mode the prediction becomes the next iterate; in ddim mode the
/// prediction is decoded, deterministically re-noised to the next scheduled
/// step in coordinate space, and re-rendered.
pub fn run_reverse<F>(
    schedule: &DiffusionSchedule,
    plan: &SamplerPlan,
    cfg: &ModelConfig,
    init: HeatmapStack<f32>,
    mut predict: F,
) -> Result<InferenceResult>
where
    F: FnMut(&HeatmapStack<f32>, usize) -> Result<HeatmapStack<f32>>,
{
    plan.validate_for(schedule)?;
    let (h, w) = (cfg.heat_h(), cfg.heat_w());
    if init.values.dim() != (cfg.joints, h, w) {
        return Err(Error::shape(format!(
            "init heatmaps {:?} do not match configured ({}, {h}, {w})",
            init.values.dim(),
            cfg.joints
        )));
    }
    let mut iterate = init;
    let mut trajectory = Vec::with_capacity(plan.steps());
    for (i, &t) in plan.t_schedule.iter().enumerate() {
        let prediction = predict(&iterate, t)?;
        if prediction.values.dim() != (cfg.joints, h, w) {
            return Err(Error::shape(format!(
                "predictor returned {:?}, expected ({}, {h}, {w})",
                prediction.values.dim(),
                cfg.joints
            )));
        }
        trajectory.push(prediction.clone());
        let last = i + 1 == plan.steps();
        iterate = if last {
            prediction
        } else {
            match plan.mode {
                SamplerMode::Direct => prediction,
                SamplerMode::Ddim => {
                    let t_next = plan.t_schedule[i + 1];
                    let (y_t_kps, _) = decode_argmax_with_peaks(&iterate);
                    let (y0_kps, _) = decode_argmax_with_peaks(&prediction);
                    let y_t = normalize_keypoints(&y_t_kps, h, w, cfg.zeta)?;
                    let y0 = normalize_keypoints(&y0_kps, h, w, cfg.zeta)?;
                    let y_next = ddim_step(schedule, &y_t, &y0, t, t_next)?;
                    let kps = denormalize_keypoints(&y_next, h, w, cfg.zeta)?
                        .with_visibility(y0_kps.visibility.clone())?;
                    render_heatmaps(&kps, cfg.sigma, h, w)?
                }
            }
        };
    }
    let (keypoints, peaks) = decode_argmax_with_peaks(&iterate);
    Ok(InferenceResult {
        keypoints,
        peaks,
        final_heatmaps: iterate,
        trajectory,
    })
}

/// Full reverse inference on one cropped model-frame image.
///
/// Returns keypoints in the heatmap frame; multiply by `scale` for the input
/// frame. Deterministic given parameters and input.
pub fn reverse_infer(
    image: &Array3<f32>,
    model: &PoseModel,
    schedule: &DiffusionSchedule,
    skeleton: &Skeleton,
    plan: &SamplerPlan,
) -> Result<InferenceResult> {
    let cfg = &model.config;
    if image.dim() != (3, cfg.input_h, cfg.input_w) {
        return Err(Error::shape(format!(
            "image {:?} does not match configured input (3, {}, {})",
            image.dim(),
            cfg.input_h,
            cfg.input_w
        )));
    }
    if skeleton.oks_k.len() != cfg.joints {
        return Err(Error::invalid(format!(
            "skeleton describes {} joints, model has {}",
            skeleton.oks_k.len(),
            cfg.joints
        )));
    }
    let (h, w) = (cfg.heat_h(), cfg.heat_w());
    let fea = model.encoder_forward(image)?;
    let init = init_heatmaps(&fea, model)?;
    run_reverse(schedule, plan, cfg, init, |iterate, t| {
        let (kps, _) = decode_argmax_with_peaks(iterate);
        let masks = render_masks(&kps, skeleton, cfg.delta_kps, cfg.delta_ske, h, w)?;
        let cond = model.condition_from_features(&fea, &masks)?;
        model.sgdd_forward(iterate, &cond, Some(t))
    })
}

/// One record's keypoints mapped back to the original image frame.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub keypoints: Keypoints,
    pub peaks: Vec<f64>,
}

/// Crop the record's box, run reverse inference, and map the decoded joints
/// back through the crop transform into original image coordinates.
pub fn predict_record(
    rec: &AnnotationRecord,
    model: &PoseModel,
    schedule: &DiffusionSchedule,
    skeleton: &Skeleton,
    plan: &SamplerPlan,
) -> Result<Prediction> {
    let image = rec.load_image()?;
    let cfg = &model.config;
    let (crop, _, map) = crop_transform(&image, rec.bbox, cfg.input_h, cfg.input_w, &rec.keypoints)?;
    let result = reverse_infer(&crop, model, schedule, skeleton, plan)?;
    let s = cfg.scale as f64;
    let input_frame = result.keypoints.scaled(s, s);
    Ok(Prediction {
        keypoints: map.invert_keypoints(&input_frame),
        peaks: result.peaks,
    })
}

/// Structured-text report: one line per joint.
pub fn format_prediction(pred: &Prediction) -> String {
    let mut out = String::new();
    for j in 0..pred.keypoints.len() {
        let (x, y) = pred.keypoints.xy(j);
        out.push_str(&format!(
            "joint={j} x={x:.3} y={y:.3} visible={} peak={:.4}\n",
            pred.keypoints.visibility[j], pred.peaks[j]
        ));
    }
    out
}
