use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use heatdiff::config::AppConfig;
use heatdiff::data::coco::{load_coco_subset, write_coco_subset};
use heatdiff::data::synth::{synth_generate, SyntheticSpec};
use heatdiff::data::{default_skeleton_name, skeleton_for, AnnotationRecord, ImageSource};
use heatdiff::eval::{average_precision, oks, pck, standard_thresholds, GtPose, ImageEval, ScoredPose};
use heatdiff::geometry::Keypoints;
use heatdiff::net::{PoseModel, SamplerMode};
use heatdiff::sample::{format_prediction, predict_record, SamplerPlan};
use heatdiff::train::{fit, load_checkpoint, prepare_samples, save_checkpoint};

#[derive(Parser)]
#[command(
    name = "heatdiff",
    about = "Structure-guided diffusion for 2D keypoint heatmaps",
    version
)]
struct Cli {
    /// Config file; defaults to $HEATDIFF_CONFIG if set, else built-ins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it in the COCO-subset schema.
    MakeSynth {
        /// Generator spec file (falls back to the config's [data] section).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of records to generate.
        #[arg(long)]
        n: Option<usize>,
        /// Output directory for images plus annotations.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the final checkpoint.
    Train {
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path (append-only).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Epoch count; also rescales the decay milestones proportionally.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// COCO-format annotations (overrides [data] annotations).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Image root for the annotations file.
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        /// Record count when generating synthetic data.
        #[arg(long)]
        synth_count: Option<usize>,
    },
    /// Run reverse inference on one image or dataset record.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image file (mutually exclusive with --record).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Person box "x,y,w,h" for --image; defaults to the full image.
        #[arg(long)]
        bbox: Option<String>,
        /// Annotation id to sample from --annotations.
        #[arg(long)]
        record: Option<u64>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        mode: Option<SamplerMode>,
        /// Directory for per-step predicted heatmap dumps.
        #[arg(long)]
        dump_trajectory: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a dataset and print AP/AR/PCK.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        synth_count: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        mode: Option<SamplerMode>,
        /// PCK radius as a fraction of the box diagonal.
        #[arg(long, default_value_t = 0.1)]
        pck_radius: f64,
        /// Write per-record OKS lines to this file.
        #[arg(long)]
        oks_dump: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = AppConfig::load(cli.config.as_deref())?;
    cfg.validate()?;
    match cli.cmd {
        Cmd::MakeSynth { spec, n, out } => make_synth(&cfg, spec.as_deref(), n, &out),
        Cmd::Train {
            out,
            log,
            epochs,
            batch_size,
            lr,
            seed,
            annotations,
            image_root,
            limit,
            synth_count,
        } => {
            let mut cfg = cfg;
            if let Some(v) = epochs {
                cfg.train.epochs = v;
                cfg.train.lr_milestones =
                    heatdiff::train::TrainConfig::for_epochs(v).lr_milestones;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = annotations {
                cfg.data.annotations = Some(v);
            }
            if let Some(v) = image_root {
                cfg.data.image_root = Some(v);
            }
            if let Some(v) = limit {
                cfg.data.limit = Some(v);
            }
            if let Some(v) = synth_count {
                cfg.data.synth_count = Some(v);
            }
            train(&cfg, &out, log.as_deref())
        }
        Cmd::Sample {
            checkpoint,
            image,
            bbox,
            record,
            annotations,
            image_root,
            steps,
            mode,
            dump_trajectory,
        } => {
            let mut cfg = cfg;
            if let Some(v) = annotations {
                cfg.data.annotations = Some(v);
            }
            if let Some(v) = image_root {
                cfg.data.image_root = Some(v);
            }
            if let Some(v) = steps {
                cfg.sampler.steps = v;
            }
            if let Some(v) = mode {
                cfg.sampler.mode = v;
            }
            sample(
                &cfg,
                &checkpoint,
                image.as_deref(),
                bbox.as_deref(),
                record,
                dump_trajectory.as_deref(),
            )
        }
        Cmd::Eval {
            checkpoint,
            annotations,
            image_root,
            limit,
            synth_count,
            steps,
            mode,
            pck_radius,
            oks_dump,
        } => {
            let mut cfg = cfg;
            if let Some(v) = annotations {
                cfg.data.annotations = Some(v);
            }
            if let Some(v) = image_root {
                cfg.data.image_root = Some(v);
            }
            if let Some(v) = limit {
                cfg.data.limit = Some(v);
            }
            if let Some(v) = synth_count {
                cfg.data.synth_count = Some(v);
            }
            if let Some(v) = steps {
                cfg.sampler.steps = v;
            }
            if let Some(v) = mode {
                cfg.sampler.mode = v;
            }
            evaluate(&cfg, &checkpoint, pck_radius, oks_dump.as_deref())
        }
    }
}

/// Loads the configured dataset: COCO annotations when given, else synthetic.
fn load_records(cfg: &AppConfig) -> Result<Vec<AnnotationRecord>> {
    match &cfg.data.annotations {
        Some(json) => {
            let root = cfg
                .data
                .image_root
                .clone()
                .unwrap_or_else(|| json.parent().unwrap_or(Path::new(".")).to_path_buf());
            let subset = load_coco_subset(json, &root, cfg.data.limit)?;
            for missing in &subset.missing_images {
                eprintln!("warning: missing image {}", missing.display());
            }
            if !subset.missing_images.is_empty() {
                eprintln!(
                    "warning: skipped {} missing image(s)",
                    subset.missing_images.len()
                );
            }
            if subset.records.is_empty() {
                bail!("no usable records in {}", json.display());
            }
            Ok(subset.records)
        }
        None => {
            let spec = cfg.synth_spec();
            let n = cfg.data.synth_count.unwrap_or(16);
            let mut records = synth_generate(&spec, n)?;
            if let Some(limit) = cfg.data.limit {
                records.truncate(limit);
            }
            Ok(records)
        }
    }
}

fn make_synth(cfg: &AppConfig, spec_path: Option<&Path>, n: Option<usize>, out: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading spec {}", p.display()))?;
            // Accept either a bare generator spec or a full config file.
            match toml::from_str::<SyntheticSpec>(&text) {
                Ok(s) => s,
                Err(_) => AppConfig::from_toml(&text)?.synth_spec(),
            }
        }
        None => cfg.synth_spec(),
    };
    let n = n.or(cfg.data.synth_count).unwrap_or(16);
    let records = synth_generate(&spec, n)?;
    let json = write_coco_subset(&records, out)?;
    println!(
        "wrote {} records ({} joints, {}x{}) to {}",
        records.len(),
        spec.joints,
        spec.image_w,
        spec.image_h,
        json.display()
    );
    Ok(())
}

fn train(cfg: &AppConfig, out: &Path, log: Option<&Path>) -> Result<()> {
    let records = load_records(cfg)?;
    if records[0].keypoints.len() != cfg.model.joints {
        bail!(
            "dataset has {} joints but [model] joints = {}",
            records[0].keypoints.len(),
            cfg.model.joints
        );
    }
    let skeleton = skeleton_for(&records[0].skeleton, cfg.model.joints)?;
    let samples = prepare_samples(&records, &cfg.model)?;
    let schedule = cfg.make_schedule()?;
    let mut model = PoseModel::new(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training on {} samples for {} epochs ({} parameters)",
        samples.len(),
        cfg.train.epochs,
        model.params.num_scalars()
    );
    let ckpt = fit(&mut model, &samples, &skeleton, &schedule, &cfg.train, log)?;
    save_checkpoint(&ckpt, out)?;
    println!(
        "saved checkpoint after {} steps to {}",
        ckpt.step,
        out.display()
    );
    Ok(())
}

fn parse_bbox(text: &str) -> Result<(f64, f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bbox '{text}' must be x,y,w,h"))?;
    if parts.len() != 4 {
        bail!("bbox '{text}' must have exactly four components");
    }
    Ok((parts[0], parts[1], parts[2], parts[3]))
}

fn sample(
    cfg: &AppConfig,
    checkpoint: &Path,
    image: Option<&Path>,
    bbox: Option<&str>,
    record_id: Option<u64>,
    dump: Option<&Path>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let schedule = ckpt.schedule()?;
    let plan = SamplerPlan::evenly_spaced(cfg.sampler.mode, schedule.steps(), cfg.sampler.steps)?;
    let rec = match (image, record_id) {
        (Some(path), None) => {
            let raster = image::open(path)
                .with_context(|| format!("reading {}", path.display()))?
                .to_rgb8();
            let (w, h) = (raster.width() as usize, raster.height() as usize);
            let mut arr = ndarray::Array3::<f32>::zeros((3, h, w));
            for (x, y, px) in raster.enumerate_pixels() {
                for c in 0..3 {
                    arr[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
                }
            }
            let bbox = match bbox {
                Some(b) => parse_bbox(b)?,
                None => (0.0, 0.0, w as f64, h as f64),
            };
            let joints = model.config.joints;
            AnnotationRecord {
                image_id: 0,
                ann_id: 0,
                image: ImageSource::Raster(arr),
                image_size: (h, w),
                bbox,
                keypoints: Keypoints::from_pairs(&vec![(0.0, 0.0); joints]),
                v_flags: vec![0; joints],
                area: bbox.2 * bbox.3,
                skeleton: default_skeleton_name(joints),
            }
        }
        (None, Some(id)) => {
            let records = load_records(cfg)?;
            records
                .into_iter()
                .find(|r| r.ann_id == id)
                .with_context(|| format!("no record with annotation id {id}"))?
        }
        _ => bail!("pass exactly one of --image or --record"),
    };
    let skeleton = skeleton_for(&rec.skeleton, model.config.joints)?;
    let pred = predict_record(&rec, &model, &schedule, &skeleton, &plan)?;
    print!("{}", format_prediction(&pred));
    if let Some(dir) = dump {
        // Re-run on the crop to capture the trajectory for inspection.
        let raster = rec.load_image()?;
        let (crop, _, _) = heatdiff::geometry::crop_transform(
            &raster,
            rec.bbox,
            model.config.input_h,
            model.config.input_w,
            &rec.keypoints,
        )?;
        let result = heatdiff::sample::reverse_infer(&crop, &model, &schedule, &skeleton, &plan)?;
        std::fs::create_dir_all(dir)?;
        for (i, hm) in result.trajectory.iter().enumerate() {
            let dump = serde_json::json!({
                "step_index": i,
                "t": plan.t_schedule[i],
                "shape": hm.values.shape(),
                "data": hm.values.iter().collect::<Vec<_>>(),
            });
            std::fs::write(
                dir.join(format!("step_{i:03}.json")),
                serde_json::to_string(&dump)?,
            )?;
        }
        println!("wrote {} trajectory dumps to {}", result.trajectory.len(), dir.display());
    }
    Ok(())
}

fn evaluate(cfg: &AppConfig, checkpoint: &Path, pck_radius: f64, oks_dump: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let schedule = ckpt.schedule()?;
    let plan = SamplerPlan::evenly_spaced(cfg.sampler.mode, schedule.steps(), cfg.sampler.steps)?;
    let records = load_records(cfg)?;
    if records[0].keypoints.len() != model.config.joints {
        bail!(
            "dataset has {} joints but the checkpoint expects {}",
            records[0].keypoints.len(),
            model.config.joints
        );
    }
    let skeleton = skeleton_for(&records[0].skeleton, model.config.joints)?;

    let mut by_image: std::collections::BTreeMap<u64, ImageEval> = std::collections::BTreeMap::new();
    let mut pck_sum = 0.0;
    let mut pck_count = 0usize;
    let mut oks_lines = Vec::new();
    for rec in &records {
        let pred = predict_record(rec, &model, &schedule, &skeleton, &plan)?;
        let vis_peaks: Vec<f64> = pred
            .peaks
            .iter()
            .zip(&pred.keypoints.visibility)
            .filter(|(_, &v)| v)
            .map(|(&p, _)| p)
            .collect();
        let score = if vis_peaks.is_empty() {
            0.0
        } else {
            vis_peaks.iter().sum::<f64>() / vis_peaks.len() as f64
        };
        let entry = by_image.entry(rec.image_id).or_insert_with(|| ImageEval {
            predictions: Vec::new(),
            ground_truth: Vec::new(),
        });
        entry.predictions.push(ScoredPose {
            kps: pred.keypoints.clone(),
            score,
        });
        entry.ground_truth.push(GtPose {
            kps: rec.keypoints.clone(),
            area: rec.area,
        });
        let record_oks = oks(&pred.keypoints, &rec.keypoints, rec.area, &skeleton.oks_k)?;
        oks_lines.push(format!(
            "image={} ann={} oks={record_oks:.6} score={score:.4}",
            rec.image_id, rec.ann_id
        ));
        pck_sum += pck(&pred.keypoints, &rec.keypoints, pck_radius, rec.bbox_diagonal())?;
        pck_count += 1;
    }
    let images: Vec<ImageEval> = by_image.into_values().collect();
    let result = average_precision(&images, &skeleton.oks_k, &standard_thresholds())?;
    let mean_pck = pck_sum / pck_count.max(1) as f64;
    println!("records={} images={}", records.len(), images.len());
    println!(
        "ap={:.4} ap50={:.4} ap75={:.4} ar={:.4} pck@{pck_radius}={mean_pck:.4}",
        result.ap, result.ap50, result.ap75, result.ar
    );
    if let Some(path) = oks_dump {
        std::fs::write(path, oks_lines.join("\n") + "\n")?;
        println!("wrote per-record oks to {}", path.display());
    }
    Ok(())
}
