//! Dataset records, synthetic figure generation, and COCO-format ingestion.

pub mod coco;
pub mod synth;

use std::path::PathBuf;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{Keypoints, Skeleton};

/// Where a record's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// On-disk image, loaded lazily.
    Path(PathBuf),
    /// Embedded raster (`3 x H x W`, values in `[0, 1]`).
    Raster(Array3<f32>),
}

/// One annotated person instance.
#[derive(Debug, Clone)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub ann_id: u64,
    pub image: ImageSource,
    /// Full image size as `(height, width)`.
    pub image_size: (usize, usize),
    /// `(x, y, w, h)` in image pixels.
    pub bbox: (f64, f64, f64, f64),
    pub keypoints: Keypoints,
    /// COCO visibility codes per joint: 0 unlabeled, 1 occluded, 2 visible.
    pub v_flags: Vec<u8>,
    pub area: f64,
    /// Skeleton preset name (resolved via [`skeleton_for`]).
    pub skeleton: String,
}

impl AnnotationRecord {
    /// Pixels as `3 x H x W` floats in `[0, 1]`.
    pub fn load_image(&self) -> Result<Array3<f32>> {
        match &self.image {
            ImageSource::Raster(r) => Ok(r.clone()),
            ImageSource::Path(p) => {
                let img = image::open(p)
                    .map_err(|e| Error::Parse(format!("cannot read image {}: {e}", p.display())))?
                    .to_rgb8();
                let (w, h) = img.dimensions();
                let mut out = Array3::zeros((3, h as usize, w as usize));
                for (x, y, px) in img.enumerate_pixels() {
                    for c in 0..3 {
                        out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Bbox diagonal, the PCK normalizer.
    pub fn bbox_diagonal(&self) -> f64 {
        let (_, _, w, h) = self.bbox;
        (w * w + h * h).sqrt()
    }
}

/// Default skeleton preset name for a joint count.
pub fn default_skeleton_name(joints: usize) -> String {
    match joints {
        17 => "coco17".to_string(),
        13 => "humanoid13".to_string(),
        j => format!("synth{j}"),
    }
}

/// Resolves a skeleton preset name for a record.
///
/// `"coco17"` yields the COCO person skeleton with its published OKS
/// constants; any other name yields the named synthetic preset (or a uniform
/// fallback) with k = 0.08 everywhere.
pub fn skeleton_for(name: &str, joints: usize) -> Result<Skeleton> {
    match name {
        "coco17" => {
            if joints != 17 {
                return Err(Error::invalid(format!(
                    "coco17 skeleton needs 17 joints, got {joints}"
                )));
            }
            Ok(Skeleton::coco17())
        }
        "humanoid13" => {
            if joints != 13 {
                return Err(Error::invalid(format!(
                    "humanoid13 skeleton needs 13 joints, got {joints}"
                )));
            }
            Skeleton::uniform(synth::humanoid13_edges(), 13, synth::SYNTH_OKS_K)
        }
        _ => Skeleton::uniform(Vec::new(), joints, synth::SYNTH_OKS_K),
    }
}
