//! Keypoint geometry: Gaussian heatmap rendering, keypoint/skeleton mask
//! rasterization, argmax decoding, and crop transforms for top-down inputs.
//!
//! Heatmaps and masks are indexed `[row, col]` = `[v, u]`; keypoint
//! coordinates are `(x, y)` = `(u, v)` in pixels of the same frame.

use ndarray::{Array2, Array3};
use num_traits::Float;

use crate::error::{Error, Result};

/// Joint coordinates with visibility flags, in pixels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints {
    /// `J x 2` array of `(x, y)` positions.
    pub coords: Array2<f64>,
    /// One flag per joint; invisible joints carry coordinates but are
    /// excluded from losses and metrics.
    pub visibility: Vec<bool>,
}

impl Keypoints {
    pub fn new(coords: Array2<f64>, visibility: Vec<bool>) -> Result<Self> {
        if coords.nrows() != visibility.len() || coords.ncols() != 2 {
            return Err(Error::shape(format!(
                "keypoints coords {:?} do not match {} visibility flags",
                coords.dim(),
                visibility.len()
            )));
        }
        Ok(Self { coords, visibility })
    }

    /// All-visible keypoints from a flat list of `(x, y)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mut coords = Array2::zeros((pairs.len(), 2));
        for (j, (x, y)) in pairs.iter().enumerate() {
            coords[[j, 0]] = *x;
            coords[[j, 1]] = *y;
        }
        Self {
            visibility: vec![true; pairs.len()],
            coords,
        }
    }

    pub fn len(&self) -> usize {
        self.visibility.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visibility.is_empty()
    }

    pub fn xy(&self, j: usize) -> (f64, f64) {
        (self.coords[[j, 0]], self.coords[[j, 1]])
    }

    /// Coordinates multiplied per-axis (e.g. image frame -> heatmap frame).
    pub fn scaled(&self, sx: f64, sy: f64) -> Keypoints {
        let mut out = self.clone();
        for j in 0..out.len() {
            out.coords[[j, 0]] *= sx;
            out.coords[[j, 1]] *= sy;
        }
        out
    }

    /// Same coordinates with replaced visibility flags.
    pub fn with_visibility(&self, visibility: Vec<bool>) -> Result<Keypoints> {
        Keypoints::new(self.coords.clone(), visibility)
    }
}

/// Skeleton connectivity plus per-joint OKS falloff constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    /// Bone segments as pairs of joint indices.
    pub edges: Vec<(usize, usize)>,
    /// Per-joint OKS `k` constants (dimensionless).
    pub oks_k: Vec<f64>,
}

impl Skeleton {
    pub fn new(edges: Vec<(usize, usize)>, oks_k: Vec<f64>) -> Result<Self> {
        let joints = oks_k.len();
        for &(a, b) in &edges {
            if a == b {
                return Err(Error::invalid(format!("skeleton self-loop at joint {a}")));
            }
            if a >= joints || b >= joints {
                return Err(Error::invalid(format!(
                    "skeleton edge ({a},{b}) out of range for {joints} joints"
                )));
            }
        }
        Ok(Self { edges, oks_k })
    }

    pub fn joints(&self) -> usize {
        self.oks_k.len()
    }

    /// The 17-joint COCO person skeleton with its published OKS constants.
    pub fn coco17() -> Self {
        let sigmas = [
            0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
            0.107, 0.087, 0.087, 0.089, 0.089,
        ];
        let edges = vec![
            (15, 13),
            (13, 11),
            (16, 14),
            (14, 12),
            (11, 12),
            (5, 11),
            (6, 12),
            (5, 6),
            (5, 7),
            (6, 8),
            (7, 9),
            (8, 10),
            (1, 2),
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (3, 5),
            (4, 6),
        ];
        Self {
            edges,
            oks_k: sigmas.iter().map(|s| 2.0 * s).collect(),
        }
    }

    /// Uniform-falloff skeleton for synthetic datasets.
    pub fn uniform(edges: Vec<(usize, usize)>, joints: usize, k: f64) -> Result<Self> {
        Self::new(edges, vec![k; joints])
    }
}

/// How a heatmap stack was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapVariant {
    Rendered,
    Predicted,
    Initialized,
}

/// A `J x H x W` stack of per-joint heatmaps.
#[derive(Debug, Clone)]
pub struct HeatmapStack<T> {
    pub values: Array3<T>,
    pub variant: HeatmapVariant,
}

impl<T: Float> HeatmapStack<T> {
    pub fn new(values: Array3<T>, variant: HeatmapVariant) -> Self {
        Self { values, variant }
    }

    pub fn joints(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// Binary keypoint and skeleton masks over a feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    /// Union of discs of radius `delta_kps` around visible joints.
    pub m_kps: Array2<u8>,
    /// Union of thickened bone segments of half-width `delta_ske`.
    pub m_ske: Array2<u8>,
}

impl MaskPair {
    /// All-ones pair: every feature passes through unmasked.
    pub fn full(h: usize, w: usize) -> MaskPair {
        MaskPair {
            m_kps: Array2::ones((h, w)),
            m_ske: Array2::ones((h, w)),
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.m_kps.dim()
    }

    /// Mask as a numeric array for feature multiplication.
    pub fn kps_as<T: Float>(&self) -> Array2<T> {
        self.m_kps.mapv(|b| if b != 0 { T::one() } else { T::zero() })
    }

    pub fn ske_as<T: Float>(&self) -> Array2<T> {
        self.m_ske.mapv(|b| if b != 0 { T::one() } else { T::zero() })
    }
}

/// Renders per-joint Gaussian heatmaps centered on the keypoints.
///
/// Channel `j` holds `exp(-((u-x_j)^2 + (v-y_j)^2) / (2 sigma^2))` at pixel
/// centers, truncated to zero outside a `3 sigma` radius. Invisible joints
/// produce all-zero channels.
pub fn render_heatmaps<T: Float>(
    kps: &Keypoints,
    sigma: f64,
    h: usize,
    w: usize,
) -> Result<HeatmapStack<T>> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let j = kps.len();
    let mut values = Array3::zeros((j, h, w));
    let radius = 3.0 * sigma;
    let r2 = radius * radius;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for joint in 0..j {
        if !kps.visibility[joint] {
            continue;
        }
        let (x, y) = kps.xy(joint);
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        let u0 = ((x - radius).ceil().max(0.0)) as i64;
        let u1 = ((x + radius).floor().min(w as f64 - 1.0)) as i64;
        let v0 = ((y - radius).ceil().max(0.0)) as i64;
        let v1 = ((y + radius).floor().min(h as f64 - 1.0)) as i64;
        for v in v0..=v1 {
            for u in u0..=u1 {
                let du = u as f64 - x;
                let dv = v as f64 - y;
                let d2 = du * du + dv * dv;
                if d2 <= r2 {
                    values[[joint, v as usize, u as usize]] =
                        T::from((-d2 * inv).exp()).unwrap();
                }
            }
        }
    }
    Ok(HeatmapStack::new(values, HeatmapVariant::Rendered))
}

/// Distance from point `p` to segment `a`-`b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let dx = bx - ax;
    let dy = by - ay;
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = ax + t * dx;
    let cy = ay + t * dy;
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Rasterizes the keypoint disc mask and the skeleton segment mask.
///
/// `m_kps[v][u] = 1` iff the pixel center lies within `delta_kps` of a
/// visible joint; `m_ske[v][u] = 1` iff it lies within `delta_ske` of a bone
/// whose both endpoints are visible.
pub fn render_masks(
    kps: &Keypoints,
    skeleton: &Skeleton,
    delta_kps: f64,
    delta_ske: f64,
    h: usize,
    w: usize,
) -> Result<MaskPair> {
    if delta_kps <= 0.0 || delta_ske <= 0.0 {
        return Err(Error::invalid(format!(
            "mask widths must be positive, got delta_kps={delta_kps} delta_ske={delta_ske}"
        )));
    }
    if skeleton.joints() != kps.len() {
        return Err(Error::shape(format!(
            "skeleton has {} joints but keypoints have {}",
            skeleton.joints(),
            kps.len()
        )));
    }
    let mut m_kps = Array2::zeros((h, w));
    let dk2 = delta_kps * delta_kps;
    for joint in 0..kps.len() {
        if !kps.visibility[joint] {
            continue;
        }
        let (x, y) = kps.xy(joint);
        let u0 = ((x - delta_kps).ceil().max(0.0)) as i64;
        let u1 = ((x + delta_kps).floor().min(w as f64 - 1.0)) as i64;
        let v0 = ((y - delta_kps).ceil().max(0.0)) as i64;
        let v1 = ((y + delta_kps).floor().min(h as f64 - 1.0)) as i64;
        for v in v0..=v1 {
            for u in u0..=u1 {
                let du = u as f64 - x;
                let dv = v as f64 - y;
                if du * du + dv * dv <= dk2 {
                    m_kps[[v as usize, u as usize]] = 1u8;
                }
            }
        }
    }
    let mut m_ske = Array2::zeros((h, w));
    for &(a, b) in &skeleton.edges {
        if !kps.visibility[a] || !kps.visibility[b] {
            continue;
        }
        let pa = kps.xy(a);
        let pb = kps.xy(b);
        let u0 = ((pa.0.min(pb.0) - delta_ske).ceil().max(0.0)) as i64;
        let u1 = ((pa.0.max(pb.0) + delta_ske).floor().min(w as f64 - 1.0)) as i64;
        let v0 = ((pa.1.min(pb.1) - delta_ske).ceil().max(0.0)) as i64;
        let v1 = ((pa.1.max(pb.1) + delta_ske).floor().min(h as f64 - 1.0)) as i64;
        for v in v0..=v1 {
            for u in u0..=u1 {
                if point_segment_distance((u as f64, v as f64), pa, pb) <= delta_ske {
                    m_ske[[v as usize, u as usize]] = 1u8;
                }
            }
        }
    }
    Ok(MaskPair { m_kps, m_ske })
}

/// Decodes per-channel peak coordinates with quarter-pixel refinement.
///
/// Channels whose maximum is `<= 0` are marked invisible; ties go to the
/// smallest row-major index.
pub fn decode_argmax<T: Float>(hm: &HeatmapStack<T>) -> Keypoints {
    decode_argmax_with_peaks(hm).0
}

/// Like [`decode_argmax`] but also returns each channel's peak value.
pub fn decode_argmax_with_peaks<T: Float>(hm: &HeatmapStack<T>) -> (Keypoints, Vec<f64>) {
    let (j, h, w) = hm.values.dim();
    let mut coords = Array2::zeros((j, 2));
    let mut visibility = vec![false; j];
    let mut peaks = vec![0.0f64; j];
    for joint in 0..j {
        let chan = hm.values.index_axis(ndarray::Axis(0), joint);
        let mut best = T::neg_infinity();
        let mut best_vu = (0usize, 0usize);
        for v in 0..h {
            for u in 0..w {
                let val = chan[[v, u]];
                if val > best {
                    best = val;
                    best_vu = (v, u);
                }
            }
        }
        let peak = best.to_f64().unwrap_or(f64::NEG_INFINITY);
        peaks[joint] = peak;
        if !(peak > 0.0) {
            continue;
        }
        visibility[joint] = true;
        let (v, u) = best_vu;
        let mut x = u as f64;
        let mut y = v as f64;
        if u > 0 && u + 1 < w {
            let diff = chan[[v, u + 1]] - chan[[v, u - 1]];
            if diff > T::zero() {
                x += 0.25;
            } else if diff < T::zero() {
                x -= 0.25;
            }
        }
        if v > 0 && v + 1 < h {
            let diff = chan[[v + 1, u]] - chan[[v - 1, u]];
            if diff > T::zero() {
                y += 0.25;
            } else if diff < T::zero() {
                y -= 0.25;
            }
        }
        coords[[joint, 0]] = x;
        coords[[joint, 1]] = y;
    }
    (
        Keypoints {
            coords,
            visibility,
        },
        peaks,
    )
}

/// Affine map produced by [`crop_transform`]; invertible scale + translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropMap {
    pub x0: f64,
    pub y0: f64,
    pub sx: f64,
    pub sy: f64,
}

impl CropMap {
    /// Original-frame point to output-frame point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * self.sx, (y - self.y0) * self.sy)
    }

    /// Output-frame point back to the original frame.
    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.sx + self.x0, y / self.sy + self.y0)
    }

    pub fn apply_keypoints(&self, kps: &Keypoints) -> Keypoints {
        let mut out = kps.clone();
        for j in 0..out.len() {
            let (x, y) = kps.xy(j);
            let (nx, ny) = self.apply(x, y);
            out.coords[[j, 0]] = nx;
            out.coords[[j, 1]] = ny;
        }
        out
    }

    pub fn invert_keypoints(&self, kps: &Keypoints) -> Keypoints {
        let mut out = kps.clone();
        for j in 0..out.len() {
            let (x, y) = kps.xy(j);
            let (nx, ny) = self.invert(x, y);
            out.coords[[j, 0]] = nx;
            out.coords[[j, 1]] = ny;
        }
        out
    }
}

fn bilinear(chan: &ndarray::ArrayView2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = chan.dim();
    let x = x.clamp(0.0, w as f64 - 1.0);
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let top = chan[[y0, x0]] * (1.0 - fx) + chan[[y0, x1]] * fx;
    let bot = chan[[y1, x0]] * (1.0 - fx) + chan[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crops `image` (`C x H x W`) to the bbox expanded to the output aspect
/// ratio around its center, mapping keypoints by the same affine transform.
///
/// Returns the resampled crop, the transformed keypoints, and the affine map
/// whose inverse recovers original-frame coordinates exactly.
pub fn crop_transform(
    image: &Array3<f32>,
    bbox: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
    kps: &Keypoints,
) -> Result<(Array3<f32>, Keypoints, CropMap)> {
    let (bx, by, bw, bh) = bbox;
    if !(bw > 0.0 && bh > 0.0) {
        return Err(Error::invalid(format!(
            "bbox must have positive area, got w={bw} h={bh}"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be positive".to_string()));
    }
    let aspect = out_w as f64 / out_h as f64;
    let (mut cw, mut ch) = (bw, bh);
    if cw / ch > aspect {
        ch = cw / aspect;
    } else {
        cw = ch * aspect;
    }
    let cx = bx + bw / 2.0;
    let cy = by + bh / 2.0;
    let map = CropMap {
        x0: cx - cw / 2.0,
        y0: cy - ch / 2.0,
        sx: out_w as f64 / cw,
        sy: out_h as f64 / ch,
    };
    let channels = image.dim().0;
    let mut out = Array3::zeros((channels, out_h, out_w));
    for c in 0..channels {
        let chan = image.index_axis(ndarray::Axis(0), c);
        for v in 0..out_h {
            for u in 0..out_w {
                let (sxp, syp) = map.invert(u as f64, v as f64);
                out[[c, v, u]] = bilinear(&chan, sxp, syp);
            }
        }
    }
    Ok((out, map.apply_keypoints(kps), map))
}
