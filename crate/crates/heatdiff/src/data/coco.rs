//! COCO-keypoints-format JSON ingestion and the matching subset writer.
//!
//! Only the fields needed for single-person keypoint work are parsed: images
//! (id, file_name, width, height) and annotations (id, image_id, bbox,
//! keypoints, area, num_keypoints). Everything else in a real COCO file is
//! ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Keypoints;

use super::{AnnotationRecord, ImageSource};

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    keypoints: Vec<f64>,
    area: f64,
    num_keypoints: usize,
}

/// Result of ingesting an annotation file: the usable records plus the image
/// files that were referenced but not found on disk.
#[derive(Debug)]
pub struct CocoSubset {
    pub records: Vec<AnnotationRecord>,
    pub missing_images: Vec<PathBuf>,
}


/// Loads annotations from a COCO-style keypoints JSON file.
///
/// Annotations with no labeled joints are skipped; bboxes are clipped to the
/// image bounds; records are ordered by `(image_id, annotation id)` and then
/// truncated to `limit` if given. Structural problems are reported as parse
/// errors naming the offending field; references to image files that do not
/// exist under `image_root` skip the affected records and are listed in
/// `missing_images`.
pub fn load_coco_subset(
    json_path: &Path,
    image_root: &Path,
    limit: Option<usize>,
) -> Result<CocoSubset> {
    let text = std::fs::read_to_string(json_path)?;
    let doc: CocoDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", json_path.display())))?;

    let mut images = BTreeMap::new();
    for img in &doc.images {
        if images.insert(img.id, img).is_some() {
            return Err(Error::Parse(format!("duplicate image id {}", img.id)));
        }
    }

    let mut anns = doc.annotations.iter().collect::<Vec<_>>();
    anns.sort_by_key(|a| (a.image_id, a.id));

    let mut joints: Option<usize> = None;
    let mut records = Vec::new();
    let mut missing_images = Vec::new();
    for ann in anns {
        let img = images.get(&ann.image_id).ok_or_else(|| {
            Error::Parse(format!(
                "annotation {}: image_id {} not present in images",
                ann.id, ann.image_id
            ))
        })?;
        if ann.keypoints.len() % 3 != 0 || ann.keypoints.is_empty() {
            return Err(Error::Parse(format!(
                "annotation {}: keypoints length {} is not a positive multiple of 3",
                ann.id,
                ann.keypoints.len()
            )));
        }
        let j = ann.keypoints.len() / 3;
        match joints {
            None => joints = Some(j),
            Some(expect) if expect != j => {
                return Err(Error::Parse(format!(
                    "annotation {}: keypoints describe {j} joints, earlier records had {expect}",
                    ann.id
                )));
            }
            Some(_) => {}
        }
        let mut pairs = Vec::with_capacity(j);
        let mut v_flags = Vec::with_capacity(j);
        for i in 0..j {
            let v = ann.keypoints[3 * i + 2];
            if v != 0.0 && v != 1.0 && v != 2.0 {
                return Err(Error::Parse(format!(
                    "annotation {}: keypoints visibility flag {v} is not in {{0, 1, 2}}",
                    ann.id
                )));
            }
            pairs.push((ann.keypoints[3 * i], ann.keypoints[3 * i + 1]));
            v_flags.push(v as u8);
        }
        if ann.num_keypoints == 0 || v_flags.iter().all(|&v| v == 0) {
            continue; // nothing labeled, no supervision to extract
        }
        let (iw, ih) = (img.width as f64, img.height as f64);
        let x0 = ann.bbox[0].clamp(0.0, iw);
        let y0 = ann.bbox[1].clamp(0.0, ih);
        let x1 = (ann.bbox[0] + ann.bbox[2]).clamp(0.0, iw);
        let y1 = (ann.bbox[1] + ann.bbox[3]).clamp(0.0, ih);
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Parse(format!(
                "annotation {}: bbox {:?} is empty after clipping to the image",
                ann.id, ann.bbox
            )));
        }
        if !(ann.area > 0.0) {
            return Err(Error::Parse(format!(
                "annotation {}: area {} must be positive",
                ann.id, ann.area
            )));
        }
        let path = image_root.join(&img.file_name);
        if !path.is_file() {
            if !missing_images.contains(&path) {
                missing_images.push(path);
            }
            continue;
        }
        let visibility: Vec<bool> = v_flags.iter().map(|&v| v > 0).collect();
        records.push(AnnotationRecord {
            image_id: img.id,
            ann_id: ann.id,
            image: ImageSource::Path(path),
            image_size: (img.height, img.width),
            bbox: (x0, y0, x1 - x0, y1 - y0),
            keypoints: Keypoints::from_pairs(&pairs).with_visibility(visibility)?,
            v_flags,
            area: ann.area,
            skeleton: super::default_skeleton_name(j),
        });
    }
    if let Some(n) = limit {
        records.truncate(n);
    }
    Ok(CocoSubset {
        records,
        missing_images,
    })
}

/// Writes records as PNG files plus an `annotations.json` in the same schema
/// that [`load_coco_subset`] reads, so the output round-trips.
pub fn write_coco_subset(records: &[AnnotationRecord], out_dir: &Path) -> Result<PathBuf> {
    if records.is_empty() {
        return Err(Error::invalid("no records to write".to_string()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut images = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut annotations = Vec::new();
    for rec in records {
        let file_name = format!("{:06}.png", rec.image_id);
        if seen.insert(rec.image_id) {
            let raster = rec.load_image()?;
            let (h, w) = (raster.shape()[1], raster.shape()[2]);
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, px) in buf.enumerate_pixels_mut() {
                for c in 0..3 {
                    px.0[c] =
                        (raster[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            buf.save(out_dir.join(&file_name))
                .map_err(|e| Error::invalid(format!("writing {file_name}: {e}")))?;
            images.push(CocoImage {
                id: rec.image_id,
                file_name,
                width: w,
                height: h,
            });
        }
        let j = rec.keypoints.len();
        let mut flat = Vec::with_capacity(3 * j);
        for i in 0..j {
            let (x, y) = rec.keypoints.xy(i);
            flat.extend_from_slice(&[x, y, rec.v_flags[i] as f64]);
        }
        annotations.push(CocoAnnotation {
            id: rec.ann_id,
            image_id: rec.image_id,
            bbox: [rec.bbox.0, rec.bbox.1, rec.bbox.2, rec.bbox.3],
            keypoints: flat,
            area: rec.area,
            num_keypoints: rec.v_flags.iter().filter(|&&v| v > 0).count(),
        });
    }
    let doc = CocoDoc {
        images,
        annotations,
    };
    let json_path = out_dir.join("annotations.json");
    let body = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&json_path, body)?;
    Ok(json_path)
}
