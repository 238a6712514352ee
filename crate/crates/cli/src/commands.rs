//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use msdet_core::arch::{compose_rf, trace_shapes};
use msdet_core::checkpoint;
use msdet_core::data::io as dio;
use msdet_core::data::preprocess::{hu_clip, lung_mask, normalize_255};
use msdet_core::data::{generate_scene, SceneSpec};
use msdet_core::metrics::nms;
use msdet_core::model::{decode, image_to_tensor, ModelConfig, MsDetModel};
use msdet_core::train::{evaluate_model, log_to_csv, train as run_train, TrainConfig};
use msdet_core::verify;

use crate::manifest::RunManifest;

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn gen_data(
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    count: usize,
    val_count: usize,
    size: Option<usize>,
) -> Result<()> {
    ensure_out(out)?;
    let mut spec = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
            SceneSpec::parse(&text, &path.display().to_string())?
        }
        None => SceneSpec::desk(0),
    };
    if let Some(s) = size {
        spec.size = s;
    }

    let write_split = |name: &str, base: u64, n: usize| -> Result<()> {
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let sample = generate_scene(&spec.clone().with_seed(base + i as u64))?;
            let stem = format!("{name}{i:05}");
            dio::write_sample(out, &stem, &sample)?;
            entries.push((
                PathBuf::from(format!("{stem}.pgm")),
                PathBuf::from(format!("{stem}.txt")),
            ));
        }
        dio::write_manifest(&out.join(format!("{name}.manifest")), &entries)?;
        Ok(())
    };
    write_split("train", seed, count)?;
    write_split("val", seed + 1_000_000, val_count)?;

    RunManifest::new("gen-data")
        .field("seed", seed)
        .field("count", count)
        .field("val_count", val_count)
        .config(&spec.clone().with_seed(seed).serialize())
        .write(out)?;
    println!(
        "wrote {count} train + {val_count} val samples of size {} to {}",
        spec.size,
        out.display()
    );
    Ok(())
}

pub fn preprocess(
    input: &Path,
    out: &Path,
    mask: bool,
    mask_threshold: u8,
    mask_erosions: usize,
    mask_dilations: usize,
) -> Result<()> {
    ensure_out(out)?;
    let mut files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .with_context(|| input.display().to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "raw"))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        bail!(msdet_core::CoreError::InvalidArgument(format!(
            "no .raw files under {}",
            input.display()
        )));
    }
    files.sort();
    for path in &files {
        let raw = dio::read_raw(path)?;
        let image = normalize_255(&hu_clip(&raw))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("plane")
            .to_string();
        dio::write_pgm(&out.join(format!("{stem}.pgm")), &image)?;
        if mask {
            let m = lung_mask(&image, mask_threshold, mask_erosions, mask_dilations)?;
            let vis = msdet_core::data::Plane {
                width: m.width,
                height: m.height,
                data: m.data.iter().map(|&v| v * 255).collect(),
            };
            dio::write_pgm(&out.join(format!("{stem}_mask.pgm")), &vis)?;
        }
    }
    RunManifest::new("preprocess")
        .field("inputs", files.len())
        .field("mask", mask)
        .config(&format!(
            "mask_threshold {mask_threshold}\nmask_erosions {mask_erosions}\nmask_dilations {mask_dilations}\n"
        ))
        .write(out)?;
    println!("preprocessed {} plane(s) into {}", files.len(), out.display());
    Ok(())
}

fn load_model_config(profile: Option<&str>, config: Option<&Path>) -> Result<ModelConfig> {
    match (config, profile) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
            Ok(ModelConfig::parse(&text, &path.display().to_string())?)
        }
        (None, Some(name)) => Ok(ModelConfig::by_profile(name)?),
        (None, None) => Ok(ModelConfig::desk()),
    }
}

pub fn analyze(
    profile: Option<&str>,
    config: Option<&Path>,
    out: Option<&Path>,
    target_size: Option<f64>,
) -> Result<()> {
    let cfg = load_model_config(profile, config)?;
    let mut arch = cfg.to_arch_config();
    if target_size.is_some() {
        arch.target_size = target_size;
    }
    let table = trace_shapes(&arch)?;
    let rf = compose_rf(&arch)?;
    println!("model: {} (input {})", cfg.profile, cfg.input_size);
    print!("{}", table.to_table());
    println!();
    print!("{}", rf.to_table());
    if let Some(dir) = out {
        ensure_out(dir)?;
        fs::write(dir.join("shape_table.txt"), table.to_table())?;
        fs::write(dir.join("rf_report.csv"), rf.to_csv())?;
        fs::write(dir.join("model.arch"), cfg.serialize())?;
        RunManifest::new("analyze").config(&cfg.serialize()).write(dir)?;
    }
    Ok(())
}

pub fn gradcheck(all: bool, op: Option<&str>, out: Option<&Path>) -> Result<()> {
    if !all && op.is_none() {
        bail!(msdet_core::CoreError::InvalidArgument(
            "pass --all or --op <name>".into()
        ));
    }
    let reports = verify::run_gradient_suite(op)?;
    if reports.is_empty() {
        bail!(msdet_core::CoreError::InvalidArgument(format!(
            "no registered check matches {:?}",
            op.unwrap_or_default()
        )));
    }
    let mut failed = 0;
    let mut csv = String::from("name,max_rel_err,tol,checked,passed\n");
    for r in &reports {
        println!("{r}");
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name, r.max_rel_err, r.tol, r.checked, r.passed()
        ));
        if !r.passed() {
            failed += 1;
        }
    }
    if let Some(dir) = out {
        ensure_out(dir)?;
        fs::write(dir.join("gradcheck.csv"), csv)?;
        RunManifest::new("gradcheck")
            .field("checks", reports.len())
            .config(op.unwrap_or("all"))
            .write(dir)?;
    }
    if failed > 0 {
        bail!(msdet_core::CoreError::NonFinite("gradient checks failed"));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    data: &Path,
    val: Option<&Path>,
    config: Option<&Path>,
    profile: &str,
    arch: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    ensure_out(out)?;
    let model_cfg = load_model_config(Some(profile), arch)?;
    let mut train_cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
            TrainConfig::parse(&text, &path.display().to_string())?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }

    let train_set = dio::load_dataset(data)?;
    let val_set = match val {
        Some(path) => dio::load_dataset(path)?,
        None => Vec::new(),
    };
    println!(
        "training {} ({} params model) on {} samples, {} epochs",
        model_cfg.profile,
        model_cfg.widths.iter().sum::<usize>(),
        train_set.len(),
        train_cfg.epochs
    );

    let mut model = MsDetModel::new(model_cfg.clone(), train_cfg.seed)?;
    let outcome = run_train(&mut model, &train_set, &val_set, &train_cfg)?;

    fs::write(out.join("train_log.csv"), log_to_csv(&outcome.log))?;
    checkpoint::save(&out.join("checkpoint.msdt"), &model.state_entries())?;
    fs::write(out.join("model.arch"), model_cfg.serialize())?;
    RunManifest::new("train")
        .field("seed", train_cfg.seed)
        .field("samples", train_set.len())
        .config(&format!("{}{}", model_cfg.serialize(), train_cfg.serialize()))
        .write(out)?;

    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {}: loss_box {:.4} loss_obj {:.4} val mAP@0.5 {:.4}",
            last.epoch, last.loss_box, last.loss_obj, last.map50
        );
    }
    if let Some(reason) = outcome.aborted {
        bail!("training aborted: {reason}");
    }
    println!("checkpoint written to {}", out.join("checkpoint.msdt").display());
    Ok(())
}

fn load_model(profile: &str, arch: Option<&Path>, ckpt: &Path) -> Result<MsDetModel> {
    let cfg = load_model_config(Some(profile), arch)?;
    let mut model = MsDetModel::new(cfg, 0)?;
    let entries = checkpoint::load(ckpt).with_context(|| ckpt.display().to_string())?;
    model.load_state(&entries)?;
    Ok(model)
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    profile: &str,
    arch: Option<&Path>,
    out: &Path,
    threshold: f64,
    iou_nms: f64,
) -> Result<()> {
    ensure_out(out)?;
    let model = load_model(profile, arch, ckpt)?;
    let dataset = dio::load_dataset(data)?;
    // mAP@0.5 plus the 0.5:0.05:0.95 ladder
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let metrics = evaluate_model(&model, &dataset, &thresholds, threshold, iou_nms, 300)?;
    print!("{}", metrics.to_table());
    println!(
        "map50 {:.4}  map50:95 {:.4}",
        metrics.ap_at(0.5).unwrap_or(0.0),
        metrics.map
    );
    fs::write(out.join("metrics.csv"), metrics.to_csv())?;
    fs::write(out.join("metrics.txt"), metrics.to_table())?;
    RunManifest::new("eval")
        .field("threshold", threshold)
        .field("iou_nms", iou_nms)
        .field("samples", dataset.len())
        .config(&format!("threshold {threshold}\niou_nms {iou_nms}\n"))
        .write(out)?;
    Ok(())
}

pub fn infer(
    ckpt: &Path,
    image: &Path,
    profile: &str,
    arch: Option<&Path>,
    out: &Path,
    threshold: f64,
    iou_nms: f64,
) -> Result<()> {
    ensure_out(out)?;
    let model = load_model(profile, arch, ckpt)?;
    let plane = dio::read_pgm(image)?;
    let input = image_to_tensor(&plane, model.config.in_channels);
    let preds = model.predict(&input)?;
    let dets = nms(&decode(&preds, threshold)?, iou_nms);
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut text = String::new();
    for d in &dets {
        text.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.class, d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
        ));
    }
    let det_path = out.join(format!("{stem}.det.txt"));
    fs::write(&det_path, text)?;
    RunManifest::new("infer")
        .field("threshold", threshold)
        .field("iou_nms", iou_nms)
        .config(&format!("threshold {threshold}\niou_nms {iou_nms}\n"))
        .write(out)?;
    println!("{} detection(s) -> {}", dets.len(), det_path.display());
    Ok(())
}
