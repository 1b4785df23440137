//! Shared test helpers: a deliberately naive re-implementation of the
//! OKS average-precision metric, written straight from its definition so the
//! library implementation can be checked against it, plus a random instance
//! generator for metric inputs.

#![allow(dead_code)]

use heatdiff::eval::{GtPose, ImageEval, ScoredPose};
use heatdiff::geometry::Keypoints;
use ndarray::Array2;
use rand::Rng;

/// OKS from the definition: mean over labeled GT joints of
/// `exp(-d^2 / (2 * area * k^2))`.
pub fn oks_reference(pred: &Keypoints, gt: &Keypoints, area: f64, k: &[f64]) -> f64 {
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
    total / labeled as f64
}

/// Per-threshold (ap, final recall) plus the aggregate means, computed with
/// plain nested loops:
///
/// 1. order all predictions across images by score descending, ties broken by
///    (image index, prediction index);
/// 2. per threshold, walk them in order and greedily claim the unmatched
///    ground truth (among those with at least one labeled joint) of highest
///    OKS; the claim is a true positive when that OKS reaches the threshold;
/// 3. 101-point interpolated AP over the precision/recall curve, recall
///    measured against the labeled ground-truth count.
pub struct ApReference {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub per_threshold: Vec<(f64, f64, f64)>, // (threshold, ap, recall)
}

pub fn average_precision_reference(
    images: &[ImageEval],
    k: &[f64],
    thresholds: &[f64],
) -> ApReference {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (ii, img) in images.iter().enumerate() {
        for pi in 0..img.predictions.len() {
            order.push((ii, pi));
        }
    }
    order.sort_by(|&a, &b| {
        let sa = images[a.0].predictions[a.1].score;
        let sb = images[b.0].predictions[b.1].score;
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let gt_usable = |gt: &GtPose| gt.kps.visibility.iter().any(|&v| v);
    let total_gt: usize = images
        .iter()
        .map(|img| img.ground_truth.iter().filter(|g| gt_usable(g)).count())
        .sum();

    let mut per_threshold = Vec::new();
    for &tau in thresholds {
        let mut claimed: Vec<Vec<bool>> = images
            .iter()
            .map(|img| vec![false; img.ground_truth.len()])
            .collect();
        let mut hits: Vec<bool> = Vec::new();
        for &(ii, pi) in &order {
            let pred = &images[ii].predictions[pi];
            let mut best_gi: Option<usize> = None;
            let mut best_oks = f64::NEG_INFINITY;
            for (gi, gt) in images[ii].ground_truth.iter().enumerate() {
                if claimed[ii][gi] || !gt_usable(gt) {
                    continue;
                }
                let s = oks_reference(&pred.kps, &gt.kps, gt.area, k);
                if s > best_oks {
                    best_oks = s;
                    best_gi = Some(gi);
                }
            }
            if let Some(gi) = best_gi {
                if best_oks >= tau {
                    claimed[ii][gi] = true;
                    hits.push(true);
                    continue;
                }
            }
            hits.push(false);
        }
        // precision/recall after each prediction, then the 101-point envelope
        let (ap, recall) = if total_gt == 0 {
            (0.0, 0.0)
        } else {
            let mut tp = 0usize;
            let mut curve = Vec::new();
            for (rank, &hit) in hits.iter().enumerate() {
                if hit {
                    tp += 1;
                }
                curve.push((tp as f64 / total_gt as f64, tp as f64 / (rank + 1) as f64));
            }
            let mut sum = 0.0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                let mut best = 0.0f64;
                for &(rec, prec) in &curve {
                    if rec >= r - 1e-12 && prec > best {
                        best = prec;
                    }
                }
                sum += best;
            }
            (sum / 101.0, tp as f64 / total_gt as f64)
        };
        per_threshold.push((tau, ap, recall));
    }
    let n = per_threshold.len() as f64;
    let pick = |tau: f64| {
        per_threshold
            .iter()
            .find(|p| (p.0 - tau).abs() < 1e-9)
            .map_or(0.0, |p| p.1)
    };
    ApReference {
        ap: if per_threshold.is_empty() {
            0.0
        } else {
            per_threshold.iter().map(|p| p.1).sum::<f64>() / n
        },
        ap50: pick(0.5),
        ap75: pick(0.75),
        ar: if per_threshold.is_empty() {
            0.0
        } else {
            per_threshold.iter().map(|p| p.2).sum::<f64>() / n
        },
        per_threshold,
    }
}

/// Draws a random small metric instance: up to `max_images` images, each with
/// up to `max_people` ground-truth poses and predictions. Every third call
/// site can pass `snap_scores` to quantize scores and force ordering ties.
pub fn random_eval_instance<R: Rng + ?Sized>(
    rng: &mut R,
    max_images: usize,
    max_people: usize,
    snap_scores: bool,
) -> (Vec<ImageEval>, Vec<f64>) {
    let joints = rng.random_range(1..=4);
    let k: Vec<f64> = (0..joints).map(|_| rng.random_range(0.05..0.15)).collect();
    let n_images = rng.random_range(1..=max_images.max(1));
    let mut images = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let n_gt = rng.random_range(0..=max_people);
        let n_pred = rng.random_range(0..=max_people);
        let mut ground_truth = Vec::with_capacity(n_gt);
        for _ in 0..n_gt {
            ground_truth.push(GtPose {
                kps: random_pose(rng, joints, 0.75),
                area: rng.random_range(50.0..2000.0),
            });
        }
        let mut predictions = Vec::with_capacity(n_pred);
        for _ in 0..n_pred {
            let score = if snap_scores {
                (rng.random_range(0..=4) as f64) / 4.0
            } else {
                rng.random_range(0.0..1.0)
            };
            predictions.push(ScoredPose {
                kps: random_pose(rng, joints, 1.0),
                score,
            });
        }
        images.push(ImageEval {
            predictions,
            ground_truth,
        });
    }
    (images, k)
}

fn random_pose<R: Rng + ?Sized>(rng: &mut R, joints: usize, p_visible: f64) -> Keypoints {
    let coords = Array2::from_shape_fn((joints, 2), |_| rng.random_range(0.0..48.0));
    let visibility = (0..joints).map(|_| rng.random_bool(p_visible)).collect();
    Keypoints::new(coords, visibility).expect("matching dims")
}
