//! Batch front-end binding the pipeline: convert corpora to images, train,
//! evaluate, and emit drift/AUT reports.
//!
//! Artifact conventions: the manifest is a CSV with a header row, the run
//! config a single JSON document; both carry a `format_version` field. Class
//! ids are assigned by sorting the distinct manifest labels, so train and
//! eval runs over the same manifest always agree ("benign" sorts before
//! "malware", giving the conventional benign=0 / malware=1).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt;
use crate::evalkit::{
    self, BinaryLabel, ConfusionMatrix, DriftReport, EvalError, FamilyPrf, MetricsReport,
};
use crate::imager::{self, ConvertConfig, Grid, ImageMeta, ImagerError, MalImage};
use crate::promptmodule::{self, ModelConfig, PromptSamModel, TrainConfig, TrainError};
use crate::promptvit::image_to_tensor;
use crate::tensorcore::{load_weights, save_weights, ParamRegistry, Real, TensorData, TensorError};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png decode: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Imager(#[from] ImagerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no usable images: {0}")]
    MissingImages(String),
    #[error("all {0} conversions failed")]
    AllConversionsFailed(usize),
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub format_version: u32,
    /// SHA-256 of the source binary, hex.
    pub digest: String,
    /// Path of the converted PNG.
    pub path: String,
    pub label: String,
    pub family: Option<String>,
    pub year: Option<i32>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows: Vec<ManifestRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let manifest = Self { rows };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for row in &self.rows {
            if row.format_version != MANIFEST_FORMAT_VERSION {
                return Err(CliError::BadManifest(format!(
                    "unsupported format_version {}",
                    row.format_version
                )));
            }
            if !seen.insert(&row.digest) {
                return Err(CliError::BadManifest(format!(
                    "duplicate digest {}",
                    row.digest
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    /// Distinct labels, sorted; the class-id assignment for the whole run.
    pub fn classes(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.rows.iter().map(|r| r.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Family,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub format_version: u32,
    pub task: Task,
    pub convert: ConvertConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Run train/eval/drift numerics in 64-bit floats (weights container
    /// included) instead of the default 32-bit.
    pub use_f64: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            task: Task::Detect,
            convert: ConvertConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            use_f64: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::BadManifest(format!(
                "unsupported config format_version {}",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }
}

/// Cap the rayon pool from `PSAM_THREADS`; a no-op once the pool exists.
pub fn init_thread_cap() {
    if let Some(n) = std::env::var("PSAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

#[derive(Debug, Default)]
pub struct ConvertSummary {
    pub converted: usize,
    pub failed: Vec<(PathBuf, String)>,
    pub manifest_path: PathBuf,
}

/// Convert every file under `input` (one optional level of label
/// subdirectories) to PNG + JSON sidecar under `out`, and write a manifest.
/// Per-file failures are recorded in `errors.csv` and the run continues; the
/// call fails only if no file converts.
pub fn cmd_convert(input: &Path, out: &Path, config: &ConvertConfig) -> Result<ConvertSummary> {
    init_thread_cap();
    fs::create_dir_all(out)?;
    let files = collect_inputs(input)?;
    if files.is_empty() {
        return Err(CliError::MissingImages(format!(
            "no input files under {}",
            input.display()
        )));
    }

    let results: Vec<(PathBuf, String, std::result::Result<MalImage, String>)> = files
        .par_iter()
        .map(|(path, label)| {
            let converted = fs::read(path)
                .map_err(|e| e.to_string())
                .and_then(|bytes| convert_file(&bytes, path, config).map_err(|e| e.to_string()));
            (path.clone(), label.clone(), converted)
        })
        .collect();

    let mut summary = ConvertSummary {
        manifest_path: out.join("manifest.csv"),
        ..Default::default()
    };
    let mut manifest = Manifest::default();
    for (path, label, converted) in results {
        match converted {
            Ok(img) => {
                let stem = flat_stem(input, &path);
                let png = out.join(format!("{stem}.png"));
                imager::write_png(&img, &png)?;
                imager::write_sidecar(&img, &out.join(format!("{stem}.json")))?;
                manifest.rows.push(ManifestRow {
                    format_version: MANIFEST_FORMAT_VERSION,
                    digest: img.meta.source_digest.clone(),
                    path: png.to_string_lossy().into_owned(),
                    family: (label != "unlabeled").then(|| label.clone()),
                    label,
                    year: None,
                    split: Split::Train,
                });
                summary.converted += 1;
            }
            Err(message) => summary.failed.push((path, message)),
        }
    }
    if summary.converted == 0 {
        return Err(CliError::AllConversionsFailed(summary.failed.len()));
    }
    if !summary.failed.is_empty() {
        let mut writer = csv::Writer::from_path(out.join("errors.csv"))?;
        writer.write_record(["path", "error"])?;
        for (path, message) in &summary.failed {
            writer.write_record([path.to_string_lossy().as_ref(), message])?;
            eprintln!("convert failed: {}: {message}", path.display());
        }
        writer.flush()?;
    }
    // Identical corpora must yield byte-identical manifests.
    manifest.rows.sort_by(|a, b| a.path.cmp(&b.path));
    manifest.save(&summary.manifest_path)?;
    Ok(summary)
}

fn convert_file(bytes: &[u8], path: &Path, config: &ConvertConfig) -> imager::Result<MalImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("apk") => imager::convert_apk(bytes, config),
        Some("dex") => {
            let model = binfmt::parse_dex(bytes)?;
            let stream = imager::merge_dex(std::slice::from_ref(&model))?;
            let grid = if config.colorize {
                imager::colorize_sections(&stream, config.width)
            } else {
                imager::bytes_to_grid(&stream.bytes, config.width)
            };
            let resized = imager::resize_lanczos(&grid, config.width, config.width)?;
            Ok(MalImage {
                width: resized.width,
                height: resized.height,
                channels: resized.channels,
                pixels: resized.data,
                meta: ImageMeta {
                    source_digest: imager::sha256_hex(bytes),
                    config: *config,
                    section_pixel_bounds: Default::default(),
                },
            })
        }
        _ => imager::convert_pe(bytes, config),
    }
}

/// Files directly under `input` plus files one level down; subdirectory
/// names become labels. Sorted for determinism.
fn collect_inputs(input: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(input)? {
        let path = entry?.path();
        if path.is_file() {
            files.push((path, "unlabeled".to_owned()));
        } else if path.is_dir() {
            let label = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "unlabeled".to_owned());
            for sub in fs::read_dir(&path)? {
                let sub = sub?.path();
                if sub.is_file() {
                    files.push((sub, label.clone()));
                }
            }
        }
    }
    files.sort();
    Ok(files)
}

fn flat_stem(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    let mut stem = rel
        .with_extension("")
        .to_string_lossy()
        .replace(std::path::MAIN_SEPARATOR, "_");
    if stem.is_empty() {
        stem = "input".to_owned();
    }
    stem
}

/// Train on the manifest's train split, writing a weights container and a
/// per-epoch CSV log. Deterministic given the config seed.
pub fn cmd_train(
    manifest_path: &Path,
    config: &RunConfig,
    weights_out: &Path,
    log_out: &Path,
) -> Result<promptmodule::FitReport> {
    if config.use_f64 {
        train_impl::<f64>(manifest_path, config, weights_out, log_out)
    } else {
        train_impl::<f32>(manifest_path, config, weights_out, log_out)
    }
}

fn train_impl<T: Real>(
    manifest_path: &Path,
    config: &RunConfig,
    weights_out: &Path,
    log_out: &Path,
) -> Result<promptmodule::FitReport> {
    let manifest = Manifest::load(manifest_path)?;
    let rows = manifest.split(Split::Train);
    if rows.is_empty() {
        return Err(CliError::MissingImages("empty train split".into()));
    }
    let classes = manifest.classes();
    let model = build_model(config, &classes)?;
    let dataset = load_dataset(&rows, &classes, config.model.encoder.img_size)?;

    let mut registry = ParamRegistry::<T>::new();
    model.init(&mut registry, config.train.seed)?;
    let report = promptmodule::fit(&model, &dataset, &config.train, &mut registry)?;
    save_weights(&registry, weights_out)?;

    let mut writer = csv::Writer::from_path(log_out)?;
    writer.write_record(["epoch", "loss", "accuracy"])?;
    for (epoch, (loss, acc)) in report
        .epoch_loss
        .iter()
        .zip(&report.epoch_acc)
        .enumerate()
    {
        writer.write_record([epoch.to_string(), loss.to_string(), acc.to_string()])?;
    }
    writer.flush()?;
    Ok(report)
}

#[derive(Debug)]
pub enum EvalOutput {
    Detect(MetricsReport),
    Family {
        matrix: ConfusionMatrix,
        prf: Vec<FamilyPrf>,
        global_accuracy: f64,
    },
}

/// Score the manifest's test split. Detect task: binary metrics JSON.
/// Family task: confusion CSV, per-family PRF CSV, and a summary JSON with
/// global accuracy.
pub fn cmd_eval(
    manifest_path: &Path,
    config: &RunConfig,
    weights_path: &Path,
    out: &Path,
) -> Result<EvalOutput> {
    if config.use_f64 {
        eval_impl::<f64>(manifest_path, config, weights_path, out)
    } else {
        eval_impl::<f32>(manifest_path, config, weights_path, out)
    }
}

fn eval_impl<T: Real>(
    manifest_path: &Path,
    config: &RunConfig,
    weights_path: &Path,
    out: &Path,
) -> Result<EvalOutput> {
    init_thread_cap();
    fs::create_dir_all(out)?;
    let manifest = Manifest::load(manifest_path)?;
    let rows = manifest.split(Split::Test);
    if rows.is_empty() {
        return Err(CliError::MissingImages("empty test split".into()));
    }
    let classes = manifest.classes();
    let model = build_model(config, &classes)?;
    let registry = load_checked_weights::<T>(&model, weights_path)?;
    let (predictions, labels) = predict_rows(&model, &registry, &rows, &classes, config)?;

    match config.task {
        Task::Family => {
            // evalkit family ids are 1-based.
            let pred1: Vec<usize> = predictions.iter().map(|&p| p + 1).collect();
            let true1: Vec<usize> = labels.iter().map(|&l| l + 1).collect();
            let matrix = evalkit::confusion(&pred1, &true1, classes.len())?;
            let prf = evalkit::per_family_prf(&matrix);
            let global = evalkit::global_accuracy(&matrix)?;
            write_confusion_csv(&matrix, &classes, &out.join("confusion.csv"))?;
            write_prf_csv(&prf, &classes, &out.join("family_prf.csv"))?;
            fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "global_accuracy": global,
                    "classes": classes,
                }))?,
            )?;
            Ok(EvalOutput::Family {
                matrix,
                prf,
                global_accuracy: global,
            })
        }
        Task::Detect | Task::Drift => {
            let counts = binary_counts_from_ids(&predictions, &labels, &classes)?;
            let metrics = evalkit::binary_metrics(&counts);
            fs::write(
                out.join("metrics.json"),
                serde_json::to_string_pretty(&metrics)?,
            )?;
            Ok(EvalOutput::Detect(metrics))
        }
    }
}

/// Score the test split year by year (chronologically, regardless of manifest
/// order) and report AUT per metric.
pub fn cmd_drift(
    manifest_path: &Path,
    config: &RunConfig,
    weights_path: &Path,
    out: &Path,
) -> Result<DriftReport> {
    if config.use_f64 {
        drift_impl::<f64>(manifest_path, config, weights_path, out)
    } else {
        drift_impl::<f32>(manifest_path, config, weights_path, out)
    }
}

fn drift_impl<T: Real>(
    manifest_path: &Path,
    config: &RunConfig,
    weights_path: &Path,
    out: &Path,
) -> Result<DriftReport> {
    init_thread_cap();
    fs::create_dir_all(out)?;
    let manifest = Manifest::load(manifest_path)?;
    let classes = manifest.classes();
    let model = build_model(config, &classes)?;
    let registry = load_checked_weights::<T>(&model, weights_path)?;

    let mut by_year: BTreeMap<i32, Vec<&ManifestRow>> = BTreeMap::new();
    for row in manifest.split(Split::Test) {
        let year = row.year.ok_or_else(|| {
            CliError::BadManifest(format!("row {} has no year; drift needs one", row.digest))
        })?;
        by_year.entry(year).or_default().push(row);
    }
    if by_year.len() < 2 {
        return Err(EvalError::TooFewSlices(by_year.len()).into());
    }

    let mut slices = Vec::new();
    for (year, rows) in &by_year {
        let (predictions, labels) = predict_rows(&model, &registry, rows, &classes, config)?;
        let counts = binary_counts_from_ids(&predictions, &labels, &classes)?;
        slices.push((year.to_string(), counts));
    }
    let report = evalkit::drift_protocol(evalkit::binary_metrics, &slices)?;

    let mut writer = csv::Writer::from_path(out.join("drift_slices.csv"))?;
    writer.write_record(["year", "acc", "pre", "rec", "f1", "fpr", "fnr"])?;
    for (year, metrics) in &report.slices {
        let mut record = vec![year.clone()];
        for metric in evalkit::DRIFT_METRICS {
            record.push(
                metrics
                    .get(metric)
                    .map_or_else(|| "undefined".to_owned(), |v| v.to_string()),
            );
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;

    let mut writer = csv::Writer::from_path(out.join("drift_aut.csv"))?;
    writer.write_record(["metric", "aut"])?;
    for (metric, value) in &report.aut {
        writer.write_record([metric.as_str(), &value.to_string()])?;
    }
    writer.flush()?;
    fs::write(
        out.join("drift.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// AUT per row of a headerless CSV: first column the series name, remaining
/// columns the chronological metric values.
pub fn cmd_aut(input: &Path, out: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(input)?;
    let mut results = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut fields = record.iter();
        let name = fields.next().unwrap_or("").to_owned();
        let series: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::BadManifest(format!("row {name}: {e}")))
            })
            .collect::<Result<_>>()?;
        results.push((name, evalkit::compute_aut(&series)?));
    }
    if results.is_empty() {
        return Err(CliError::BadManifest("empty AUT input".into()));
    }
    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record(["series", "aut"])?;
    for (name, value) in &results {
        writer.write_record([name.as_str(), &value.to_string()])?;
    }
    writer.flush()?;
    Ok(results)
}

fn build_model(config: &RunConfig, classes: &[String]) -> Result<PromptSamModel> {
    let mut model_cfg = config.model;
    if config.task == Task::Family {
        model_cfg.n_classes = classes.len().max(2);
    }
    Ok(PromptSamModel::new(model_cfg)?)
}

/// Load a weights container and verify every expected tensor exists with the
/// expected shape; anything else is a shape mismatch, not a silent retrain.
fn load_checked_weights<T: Real>(model: &PromptSamModel, path: &Path) -> Result<ParamRegistry<T>> {
    let loaded = load_weights::<T>(path)?;
    let mut expected = ParamRegistry::<T>::new();
    model.init(&mut expected, 0)?;
    for (name, tensor) in expected.iter() {
        let got = loaded.get(name)?;
        if got.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "load_weights",
                lhs: got.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(loaded)
}

fn class_id(classes: &[String], label: &str) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| CliError::BadManifest(format!("label {label} not in class set")))
}

fn load_dataset<T: Real>(
    rows: &[&ManifestRow],
    classes: &[String],
    img_size: usize,
) -> Result<Vec<(TensorData<T>, usize)>> {
    rows.iter()
        .map(|row| {
            let tensor = load_png_tensor(Path::new(&row.path), img_size)?;
            Ok((tensor, class_id(classes, &row.label)?))
        })
        .collect()
}

/// Decode a PNG and Lanczos-resize it to the encoder's input size.
fn load_png_tensor<T: Real>(path: &Path, img_size: usize) -> Result<TensorData<T>> {
    let decoded = image::open(path)
        .map_err(|e| CliError::MissingImages(format!("{}: {e}", path.display())))?;
    let grid = match decoded {
        image::DynamicImage::ImageLuma8(img) => Grid {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 1,
            data: img.into_raw(),
        },
        other => {
            let img = other.to_rgb8();
            Grid {
                width: img.width() as usize,
                height: img.height() as usize,
                channels: 3,
                data: img.into_raw(),
            }
        }
    };
    let resized = imager::resize_lanczos(&grid, img_size, img_size)?;
    Ok(image_to_tensor(
        &resized.data,
        resized.width,
        resized.height,
        resized.channels,
    ))
}

fn predict_rows<T: Real>(
    model: &PromptSamModel,
    registry: &ParamRegistry<T>,
    rows: &[&ManifestRow],
    classes: &[String],
    config: &RunConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let img_size = config.model.encoder.img_size;
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| class_id(classes, &r.label))
        .collect::<Result<_>>()?;
    let predictions: Vec<usize> = rows
        .par_iter()
        .map(|row| {
            let tensor = load_png_tensor(Path::new(&row.path), img_size)?;
            Ok(model.predict(registry, &tensor)?)
        })
        .collect::<Result<_>>()?;
    Ok((predictions, labels))
}

fn binary_counts_from_ids(
    predictions: &[usize],
    labels: &[usize],
    classes: &[String],
) -> Result<evalkit::BinaryCounts> {
    let to_binary = |id: usize| -> Result<BinaryLabel> {
        match classes.get(id).map(String::as_str) {
            Some("malware") => Ok(BinaryLabel::Malware),
            Some("benign") => Ok(BinaryLabel::Benign),
            other => Err(CliError::BadManifest(format!(
                "detect task needs labels in {{malware, benign}}, got {other:?}"
            ))),
        }
    };
    let preds: Vec<BinaryLabel> = predictions
        .iter()
        .map(|&p| to_binary(p))
        .collect::<Result<_>>()?;
    let truth: Vec<BinaryLabel> = labels.iter().map(|&l| to_binary(l)).collect::<Result<_>>()?;
    Ok(evalkit::binary_counts(&preds, &truth)?)
}

fn write_confusion_csv(
    matrix: &ConfusionMatrix,
    classes: &[String],
    path: &Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\pred".to_owned()];
    header.extend(classes.iter().cloned());
    writer.write_record(&header)?;
    for (i, class) in classes.iter().enumerate() {
        let mut record = vec![class.clone()];
        for j in 1..=classes.len() {
            record.push(matrix.get(i + 1, j).to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_prf_csv(prf: &[FamilyPrf], classes: &[String], path: &Path) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_owned(), |x| x.to_string());
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["family", "precision", "recall", "f1"])?;
    for (class, row) in classes.iter().zip(prf) {
        writer.write_record([class.as_str(), &fmt(row.pre), &fmt(row.rec), &fmt(row.f1)])?;
    }
    writer.flush()?;
    Ok(())
}
