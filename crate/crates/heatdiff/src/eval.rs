//! OKS-based keypoint metrics (AP/AR over the COCO threshold grid) and PCK.

use crate::error::{Error, Result};
use crate::geometry::Keypoints;

/// A predicted pose with its confidence (mean heatmap peak value).
#[derive(Debug, Clone)]
pub struct ScoredPose {
    pub kps: Keypoints,
    pub score: f64,
}

/// A ground-truth pose with its object area (bbox area in pixels).
#[derive(Debug, Clone)]
pub struct GtPose {
    pub kps: Keypoints,
    pub area: f64,
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub predictions: Vec<ScoredPose>,
    pub ground_truth: Vec<GtPose>,
}

/// One row of the per-threshold curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub ap: f64,
    pub recall: f64,
}

/// Aggregate metrics over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean AP over the OKS thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean final recall over the thresholds.
    pub ar: f64,
    pub per_threshold: Vec<ThresholdPoint>,
    /// Filled in by callers that also measure PCK.
    pub pck: Option<f64>,
}

/// The COCO threshold grid 0.50:0.05:0.95.
pub fn standard_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Object Keypoint Similarity: mean over labeled GT joints of
/// `exp(-d_i^2 / (2 * area * k_i^2))`.
pub fn oks(pred: &Keypoints, gt: &Keypoints, area: f64, k: &[f64]) -> Result<f64> {
    if !(area > 0.0) {
        return Err(Error::invalid(format!("area must be positive, got {area}")));
    }
    if pred.len() != gt.len() || k.len() != gt.len() {
        return Err(Error::shape(format!(
            "joint counts disagree: pred {}, gt {}, k {}",
            pred.len(),
            gt.len(),
            k.len()
        )));
    }
    let mut total = 0.0;
    let mut labeled = 0usize;
    for j in 0..gt.len() {
        if !gt.visibility[j] {
            continue;
        }
        let (px, py) = pred.xy(j);
        let (gx, gy) = gt.xy(j);
        let d2 = (px - gx).powi(2) + (py - gy).powi(2);
        total += (-d2 / (2.0 * area * k[j] * k[j])).exp();
        labeled += 1;
    }
    if labeled == 0 {
        return Err(Error::invalid("OKS undefined without labeled joints".to_string()));
    }
    Ok(total / labeled as f64)
}

/// Fraction of labeled GT joints predicted within `r * normalizer`
/// (inclusive); the normalizer is conventionally the bbox diagonal.
pub fn pck(pred: &Keypoints, gt: &Keypoints, r: f64, normalizer: f64) -> Result<f64> {
    if !(normalizer > 0.0) {
        return Err(Error::invalid(format!(
            "normalizer must be positive, got {normalizer}"
        )));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "joint counts disagree: pred {}, gt {}",
            pred.len(),
            gt.len()
        )));
    }
    let limit = r * normalizer;
    let mut hits = 0usize;
    let mut labeled = 0usize;
    for j in 0..gt.len() {
        if !gt.visibility[j] {
            continue;
        }
        let (px, py) = pred.xy(j);
        let (gx, gy) = gt.xy(j);
        let d = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
        labeled += 1;
        if d <= limit {
            hits += 1;
        }
    }
    if labeled == 0 {
        return Err(Error::invalid("PCK undefined without labeled joints".to_string()));
    }
    Ok(hits as f64 / labeled as f64)
}

/// Greedy per-image matching of score-ordered predictions to ground truth at
/// each OKS threshold, followed by 101-point interpolated AP and mean final
/// recall (AR).
pub fn average_precision(images: &[ImageEval], k: &[f64], thresholds: &[f64]) -> Result<EvalResult> {
    // Global prediction order: score descending, ties by (image, index).
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (ii, img) in images.iter().enumerate() {
        for pi in 0..img.predictions.len() {
            order.push((ii, pi));
        }
    }
    order.sort_by(|&(ia, pa), &(ib, pb)| {
        let sa = images[ia].predictions[pa].score;
        let sb = images[ib].predictions[pb].score;
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (ia, pa).cmp(&(ib, pb)))
    });
    // Ground truth with no labeled joints cannot be matched; drop it from
    // both matching and the recall denominator.
    let usable_gt: Vec<Vec<usize>> = images
        .iter()
        .map(|img| {
            (0..img.ground_truth.len())
                .filter(|&gi| img.ground_truth[gi].kps.visibility.iter().any(|&v| v))
                .collect()
        })
        .collect();
    let total_gt: usize = usable_gt.iter().map(Vec::len).sum();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut matched: Vec<Vec<bool>> = images
            .iter()
            .map(|img| vec![false; img.ground_truth.len()])
            .collect();
        // true-positive flag per prediction, in global score order
        let mut tp_flags = Vec::with_capacity(order.len());
        for &(ii, pi) in &order {
            let pred = &images[ii].predictions[pi];
            let mut best: Option<(usize, f64)> = None;
            for &gi in &usable_gt[ii] {
                if matched[ii][gi] {
                    continue;
                }
                let gt = &images[ii].ground_truth[gi];
                let score = oks(&pred.kps, &gt.kps, gt.area, k)?;
                if best.map_or(true, |(_, b)| score > b) {
                    best = Some((gi, score));
                }
            }
            match best {
                Some((gi, score)) if score >= tau => {
                    matched[ii][gi] = true;
                    tp_flags.push(true);
                }
                _ => tp_flags.push(false),
            }
        }
        let (ap, recall) = interpolated_ap(&tp_flags, total_gt);
        per_threshold.push(ThresholdPoint {
            threshold: tau,
            ap,
            recall,
        });
    }
    let mean = |f: fn(&ThresholdPoint) -> f64| {
        if per_threshold.is_empty() {
            0.0
        } else {
            per_threshold.iter().map(f).sum::<f64>() / per_threshold.len() as f64
        }
    };
    let at = |tau: f64| {
        per_threshold
            .iter()
            .find(|p| (p.threshold - tau).abs() < 1e-9)
            .map_or(0.0, |p| p.ap)
    };
    Ok(EvalResult {
        ap: mean(|p| p.ap),
        ap50: at(0.5),
        ap75: at(0.75),
        ar: mean(|p| p.recall),
        per_threshold,
        pck: None,
    })
}

/// 101-point interpolated AP from score-ordered TP flags, plus final recall.
fn interpolated_ap(tp_flags: &[bool], total_gt: usize) -> (f64, f64) {
    if total_gt == 0 {
        return (0.0, 0.0);
    }
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len()); // (recall, precision)
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let final_recall = tp as f64 / total_gt as f64;
    // Precision envelope: max precision at recall >= r.
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|&&(rec, _)| rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max);
        ap += best;
    }
    (ap / 101.0, final_recall)
}
