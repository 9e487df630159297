//! Command-line driver: per-stage subcommands and the full `run` pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::cnn::{read_model, write_model, CnnModel, TrainConfig};
use crate::dicom::{load_patient, Label};
use crate::evaluate::{
    evaluate_patients, run_experiment, stratified_split, ExperimentSpec, MetricsReport,
    PatientSlices, RunMetrics, Split, SplitAssignment, SplitData, VoteConfig, DEFAULT_RATIOS,
    MODEL_NAME,
};
use crate::gradcam::{gradcam_slice, overlay, Heatmap, TargetClass};
use crate::grid::{Image, UnitVolume};
use crate::hu::{read_unit_volume, write_unit_volume};
use crate::phantom::{write_phantom_dataset, PhantomConfig};
use crate::preprocess::{apply_variant, VariantId};
use crate::volume_prep::{prepare_volume, resize_bilinear, ResizeConfig, SliceSelectConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Prepare,
    Preprocess,
    Split,
    Train,
    Eval,
    Gradcam,
    Report,
    Phantom,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Prepare => "prepare",
            Stage::Preprocess => "preprocess",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Gradcam => "gradcam",
            Stage::Report => "report",
            Stage::Phantom => "phantom-gen",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
}

#[derive(Debug, Error)]
#[error("{stage} stage{}: {message}", patient.as_ref().map(|p| format!(" (patient {p})")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub patient: Option<String>,
    pub message: String,
}

impl PipelineError {
    pub fn config(message: impl fmt::Display) -> Self {
        Self {
            stage: Stage::Config,
            kind: ErrorKind::Config,
            patient: None,
            message: message.to_string(),
        }
    }

    pub fn data(stage: Stage, patient: Option<&str>, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind: ErrorKind::Data,
            patient: patient.map(str::to_string),
            message: message.to_string(),
        }
    }

    pub fn training(message: impl fmt::Display) -> Self {
        Self {
            stage: Stage::Train,
            kind: ErrorKind::Training,
            patient: None,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Training => 4,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn out_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::data(Stage::Output, None, format!("{}: {e}", path.display()))
}

/// Everything a full pipeline run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub variant: VariantId,
    pub select: SliceSelectConfig,
    pub resize: ResizeConfig,
    /// `null` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub train: TrainConfig,
    pub vote: Option<VoteConfig>,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    pub split_ratios: (f64, f64, f64),
    /// Number of positive test patients to render Grad-CAM heatmaps for.
    pub heatmaps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            variant: VariantId::A,
            select: SliceSelectConfig::default(),
            resize: ResizeConfig::default(),
            augment: Some(AugmentConfig::default()),
            train: TrainConfig::default(),
            vote: None,
            seeds: vec![0],
            split_seed: 0,
            split_ratios: DEFAULT_RATIOS,
            heatmaps: 4,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))
    }

    /// Checks every embedded config and that the data directory exists.
    pub fn validate(&self) -> Result<()> {
        if !self.data_dir.is_dir() {
            return Err(PipelineError::config(format!(
                "data_dir {} is not a directory",
                self.data_dir.display()
            )));
        }
        if self.output_dir.exists() && !self.output_dir.is_dir() {
            return Err(PipelineError::config(format!(
                "output_dir {} exists and is not a directory",
                self.output_dir.display()
            )));
        }
        self.select.validate().map_err(PipelineError::config)?;
        self.resize.validate().map_err(PipelineError::config)?;
        self.train.validate().map_err(PipelineError::config)?;
        if let Some(a) = &self.augment {
            a.validate().map_err(PipelineError::config)?;
        }
        if let Some(v) = &self.vote {
            v.validate().map_err(PipelineError::config)?;
            if v.k != self.select.depth {
                return Err(PipelineError::config(format!(
                    "vote.k = {} must equal the selected depth {}",
                    v.k, self.select.depth
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(PipelineError::config("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(PipelineError::config("seeds must be distinct"));
        }
        let (a, b, c) = self.split_ratios;
        if !(a > 0.0 && b > 0.0 && c > 0.0 && ((a + b + c) - 1.0).abs() < 1e-9) {
            return Err(PipelineError::config(format!(
                "split_ratios {:?} must be positive and sum to 1",
                self.split_ratios
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// What a run records about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    /// Output-relative path → SHA-256 of the file.
    pub artifacts: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.csv";
pub const PATIENT_REPORT_FILE: &str = "report_patient.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const LABELS_FILE: &str = "labels.json";
const VOLUME_EXT: &str = "uvol";

/// Patient directories directly under `dir`, sorted by name.
fn patient_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| PipelineError::data(Stage::Ingest, None, format!("{}: {e}", dir.display())))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| PipelineError::data(Stage::Ingest, None, e))?
            .path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(PipelineError::data(
            Stage::Ingest,
            None,
            format!("no patient directories in {}", dir.display()),
        ));
    }
    Ok(dirs)
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads one patient directory and returns its prepared (windowed, selected,
/// resized) volume and label.
pub fn ingest_patient(
    dir: &Path,
    select: &SliceSelectConfig,
    resize: &ResizeConfig,
) -> Result<(UnitVolume, Label)> {
    let name = dir_name(dir);
    let record = load_patient(dir).map_err(|e| PipelineError::data(Stage::Ingest, Some(&name), e))?;
    let volume = prepare_volume(&record, select, resize)
        .map_err(|e| PipelineError::data(Stage::Prepare, Some(&record.patient_id), e))?;
    Ok((volume, record.label))
}

/// Applies a preprocessing variant to every slice.
pub fn preprocess_volume(volume: &UnitVolume, variant: VariantId) -> Result<UnitVolume> {
    let slices = volume
        .slices()
        .iter()
        .map(|s| apply_variant(s, variant))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::data(Stage::Preprocess, Some(&volume.patient_id), e))?;
    Ok(UnitVolume::new(volume.patient_id.clone(), slices))
}

/// Resamples every slice to the network's input size.
pub fn to_network_input(volume: &UnitVolume, size: usize) -> Result<UnitVolume> {
    let slices = volume
        .slices()
        .iter()
        .map(|s| resize_bilinear(s, size, size).map(|r| r.map(|v| v.clamp(0.0, 1.0))))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::data(Stage::Prepare, Some(&volume.patient_id), e))?;
    Ok(UnitVolume::new(volume.patient_id.clone(), slices))
}

fn write_volume(path: &Path, volume: &UnitVolume) -> Result<()> {
    let f = File::create(path).map_err(out_err(path))?;
    let mut w = BufWriter::new(f);
    write_unit_volume(&mut w, volume)
        .map_err(|e| PipelineError::data(Stage::Output, Some(&volume.patient_id), e))?;
    w.flush().map_err(out_err(path))
}

pub fn read_volume(path: &Path) -> Result<UnitVolume> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let f = File::open(path)
        .map_err(|e| PipelineError::data(Stage::Ingest, Some(&id), format!("{}: {e}", path.display())))?;
    read_unit_volume(BufReader::new(f), &id).map_err(|e| PipelineError::data(Stage::Ingest, Some(&id), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(out_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::data(stage, None, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::data(stage, None, format!("{}: {e}", path.display())))
}

/// Volumes (`<id>.uvol`) and labels (`labels.json`) of a volume directory.
pub fn read_volume_dir(dir: &Path) -> Result<(Vec<UnitVolume>, BTreeMap<String, Label>)> {
    let labels: BTreeMap<String, Label> = read_json(&dir.join(LABELS_FILE), Stage::Ingest)?;
    let mut volumes = Vec::with_capacity(labels.len());
    for id in labels.keys() {
        volumes.push(read_volume(&dir.join(format!("{id}.{VOLUME_EXT}")))?);
    }
    Ok((volumes, labels))
}

/// Groups network-resolution volumes by split.
fn split_data(
    volumes: Vec<UnitVolume>,
    labels: &BTreeMap<String, Label>,
    split: &SplitAssignment,
) -> Result<SplitData> {
    let mut data = SplitData::default();
    for v in volumes {
        let Some(which) = split.split_of(&v.patient_id) else {
            return Err(PipelineError::data(
                Stage::Split,
                Some(&v.patient_id),
                "patient missing from split assignment",
            ));
        };
        let p = PatientSlices {
            label: labels[&v.patient_id],
            patient_id: v.patient_id.clone(),
            slices: v.into_slices(),
        };
        match which {
            Split::Train => data.train.push(p),
            Split::Val => data.val.push(p),
            Split::Test => data.test.push(p),
        }
    }
    Ok(data)
}

fn artifact_stem(variant: VariantId, seed: u64) -> String {
    format!("{variant}_seed{seed}")
}

fn write_heatmap_files(dir: &Path, stem: &str, slice: &Image, heatmap: &Heatmap) -> Result<()> {
    let pgm = dir.join(format!("{stem}.pgm"));
    heatmap
        .write_pgm(BufWriter::new(File::create(&pgm).map_err(out_err(&pgm))?))
        .map_err(out_err(&pgm))?;
    let csv = dir.join(format!("{stem}.csv"));
    heatmap
        .write_csv(BufWriter::new(File::create(&csv).map_err(out_err(&csv))?))
        .map_err(out_err(&csv))?;
    let png = dir.join(format!("{stem}_overlay.png"));
    let rgb = overlay(slice, heatmap, 0.5).map_err(|e| PipelineError::data(Stage::Gradcam, None, e))?;
    rgb.write_png(BufWriter::new(File::create(&png).map_err(out_err(&png))?))
        .map_err(|e| PipelineError::data(Stage::Gradcam, None, e))
}

/// Output-relative path → SHA-256 for every file under `root` except the
/// manifest itself.
fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(out_err(dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(out_err(dir))?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                let rel = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                if rel == MANIFEST_FILE {
                    continue;
                }
                let bytes = fs::read(&path).map_err(out_err(&path))?;
                out.insert(rel, hex::encode(Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Outcome of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: MetricsReport,
    pub manifest: Manifest,
}

/// ingest → prepare → variant → split → train (one model per seed) → eval →
/// report, writing every artifact under `cfg.output_dir`.
///
/// All inputs are loaded and validated before the output directory is
/// touched, so configuration and data errors leave no partial artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let input_size = cfg.train.input_size;

    let mut volumes = Vec::new();
    let mut labels = BTreeMap::new();
    for dir in patient_dirs(&cfg.data_dir)? {
        let (prepared, label) = ingest_patient(&dir, &cfg.select, &cfg.resize)?;
        let id = prepared.patient_id.clone();
        if labels.insert(id.clone(), label).is_some() {
            return Err(PipelineError::data(Stage::Ingest, Some(&id), "duplicate patient id"));
        }
        let processed = preprocess_volume(&prepared, cfg.variant)?;
        volumes.push(to_network_input(&processed, input_size)?);
    }
    let roster: Vec<(String, Label)> = labels.iter().map(|(id, &l)| (id.clone(), l)).collect();
    let split = stratified_split(&roster, cfg.split_ratios, cfg.split_seed)
        .map_err(|e| PipelineError::data(Stage::Split, None, e))?;
    for s in [Split::Train, Split::Val, Split::Test] {
        if split.ids(s).is_empty() {
            return Err(PipelineError::data(
                Stage::Split,
                None,
                format!("{s} split is empty; need more patients"),
            ));
        }
    }

    let out = &cfg.output_dir;
    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(out_err(&vol_dir))?;
    for v in &volumes {
        write_volume(&vol_dir.join(format!("{}.{VOLUME_EXT}", v.patient_id)), v)?;
    }
    write_json(&vol_dir.join(LABELS_FILE), &labels)?;
    write_json(&out.join(SPLIT_FILE), &split)?;

    let data = split_data(volumes, &labels, &split)?;
    let spec = ExperimentSpec {
        variant: cfg.variant,
        model_name: MODEL_NAME.to_string(),
        seeds: cfg.seeds.clone(),
        train: cfg.train,
        augment: cfg.augment,
        vote: cfg.vote,
    };
    let (report, runs) = run_experiment(&data, &spec).map_err(PipelineError::training)?;

    for sub in ["models", "history", "runs"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(out_err(&d))?;
    }
    for run in &runs {
        let stem = artifact_stem(cfg.variant, run.seed);
        let path = out.join("models").join(format!("{stem}.tcnn"));
        let f = File::create(&path).map_err(out_err(&path))?;
        let mut w = BufWriter::new(f);
        write_model(&mut w, &run.model).map_err(|e| PipelineError::data(Stage::Output, None, e))?;
        w.flush().map_err(out_err(&path))?;
        let path = out.join("history").join(format!("{stem}.csv"));
        fs::write(&path, run.history.to_csv()).map_err(out_err(&path))?;
        write_json(&out.join("runs").join(format!("{stem}.json")), &run.metrics)?;
    }
    let path = out.join(REPORT_FILE);
    fs::write(&path, report.to_csv()).map_err(out_err(&path))?;
    if let Some(csv) = report.patient_csv() {
        let path = out.join(PATIENT_REPORT_FILE);
        fs::write(&path, csv).map_err(out_err(&path))?;
    }

    if cfg.heatmaps > 0 {
        let best_seed = report
            .best_for(cfg.variant, Split::Val)
            .expect("at least one run")
            .seed;
        let model = &runs.iter().find(|r| r.seed == best_seed).expect("best run").model;
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir).map_err(out_err(&dir))?;
        for p in data
            .test
            .iter()
            .filter(|p| p.label.is_positive())
            .take(cfg.heatmaps)
        {
            let z = p.slices.len() / 2;
            let heatmap = gradcam_slice(model, &p.slices[z], TargetClass::Positive)
                .map_err(|e| PipelineError::data(Stage::Gradcam, Some(&p.patient_id), e))?;
            let stem = format!("{}_{}_slice{z:02}", artifact_stem(cfg.variant, best_seed), p.patient_id);
            write_heatmap_files(&dir, &stem, &p.slices[z], &heatmap)?;
        }
    }

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_sha256: cfg.hash(),
        seeds: cfg.seeds.clone(),
        split_seed: cfg.split_seed,
        artifacts: hash_tree(out)?,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(RunSummary { report, manifest })
}

#[derive(Debug, Parser)]
#[command(name = "leukoct", version, about = "CT leukoencephalopathy classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load DICOM patients and write windowed, depth-selected, resized volumes.
    Ingest(IngestArgs),
    /// Apply a preprocessing variant to a volume directory.
    Preprocess(PreprocessArgs),
    /// Stratified patient-level train/val/test split.
    Split(SplitArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a model on the validation and test splits.
    Eval(EvalArgs),
    /// Grad-CAM heatmap for one slice of a volume.
    Gradcam(GradcamArgs),
    /// Aggregate per-run metrics into the report CSV.
    Report(ReportArgs),
    /// Generate a synthetic phantom dataset.
    PhantomGen(PhantomArgs),
    /// Run the whole pipeline from a config or manifest.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Pipeline config JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::from_json_file(p),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory with one sub-directory per patient.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Volume directory written by `ingest`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub variant: VariantId,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// `labels.json` of a volume directory.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub volumes: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub volumes: PathBuf,
    #[arg(long, default_value = "A")]
    pub variant: VariantId,
    /// Seed recorded in the run metrics.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patient-level voting threshold; k is the slice count per patient.
    #[arg(long)]
    pub vote_t: Option<usize>,
    /// Run-metrics JSON to write (for `report`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A `.uvol` volume.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub slice: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub negative: bool,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of run-metrics JSON files.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub patients: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 90)]
    pub slices: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Re-run the configuration recorded in a manifest.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<VariantId>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

fn ingest_cmd(args: &IngestArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(d) = &args.data_dir {
        cfg.data_dir = d.clone();
    }
    if !cfg.data_dir.is_dir() {
        return Err(PipelineError::config(format!(
            "data_dir {} is not a directory",
            cfg.data_dir.display()
        )));
    }
    cfg.select.validate().map_err(PipelineError::config)?;
    cfg.resize.validate().map_err(PipelineError::config)?;
    let mut volumes = Vec::new();
    let mut labels = BTreeMap::new();
    for dir in patient_dirs(&cfg.data_dir)? {
        let (v, label) = ingest_patient(&dir, &cfg.select, &cfg.resize)?;
        labels.insert(v.patient_id.clone(), label);
        volumes.push(v);
    }
    fs::create_dir_all(&args.out).map_err(out_err(&args.out))?;
    for v in &volumes {
        write_volume(&args.out.join(format!("{}.{VOLUME_EXT}", v.patient_id)), v)?;
    }
    write_json(&args.out.join(LABELS_FILE), &labels)?;
    println!("ingested {} patients into {}", volumes.len(), args.out.display());
    Ok(())
}

fn preprocess_cmd(args: &PreprocessArgs) -> Result<()> {
    let (volumes, labels) = read_volume_dir(&args.input)?;
    let processed = volumes
        .iter()
        .map(|v| preprocess_volume(v, args.variant))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out).map_err(out_err(&args.out))?;
    for v in &processed {
        write_volume(&args.out.join(format!("{}.{VOLUME_EXT}", v.patient_id)), v)?;
    }
    write_json(&args.out.join(LABELS_FILE), &labels)?;
    println!("variant {} applied to {} volumes", args.variant, processed.len());
    Ok(())
}

fn split_cmd(args: &SplitArgs) -> Result<()> {
    let labels: BTreeMap<String, Label> = read_json(&args.labels, Stage::Split)?;
    let roster: Vec<(String, Label)> = labels.into_iter().collect();
    let split = stratified_split(&roster, DEFAULT_RATIOS, args.seed)
        .map_err(|e| PipelineError::data(Stage::Split, None, e))?;
    write_json(&args.out, &split)?;
    for s in Split::ALL {
        println!("{s}: {}", split.ids(s).len());
    }
    Ok(())
}

fn load_split_data(volumes: &Path, split: &Path, input_size: usize) -> Result<SplitData> {
    let split: SplitAssignment = read_json(split, Stage::Split)?;
    let (vols, labels) = read_volume_dir(volumes)?;
    let vols = vols
        .iter()
        .map(|v| to_network_input(v, input_size))
        .collect::<Result<Vec<_>>>()?;
    split_data(vols, &labels, &split)
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let mut train_cfg = cfg.train;
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    if let Some(e) = args.max_epochs {
        train_cfg.max_epochs = e;
    }
    train_cfg.validate().map_err(PipelineError::config)?;
    let augment = if args.no_augment { None } else { cfg.augment };
    let data = load_split_data(&args.volumes, &args.split, train_cfg.input_size)?;
    let (model, history) = crate::cnn::train(
        &data.samples(Split::Train),
        &data.samples(Split::Val),
        &train_cfg,
        augment.as_ref(),
    )
    .map_err(PipelineError::training)?;
    let f = File::create(&args.out).map_err(out_err(&args.out))?;
    let mut w = BufWriter::new(f);
    write_model(&mut w, &model).map_err(|e| PipelineError::data(Stage::Output, None, e))?;
    w.flush().map_err(out_err(&args.out))?;
    if let Some(h) = &args.history {
        fs::write(h, history.to_csv()).map_err(out_err(h))?;
    }
    println!(
        "stopped after epoch {} (best epoch {})",
        history.stopped_epoch, history.best_epoch
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<CnnModel> {
    let f = File::open(path).map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
    read_model(BufReader::new(f)).map_err(|e| PipelineError::data(Stage::Eval, None, e))
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = load_split_data(&args.volumes, &args.split, model.input_size())?;
    let mut metrics = Vec::new();
    for split in [Split::Val, Split::Test] {
        let patients = data.get(split);
        let vote = match args.vote_t {
            Some(t) => {
                let k = patients.first().map(|p| p.slices.len()).unwrap_or(0);
                Some(VoteConfig { k, t })
            }
            None => None,
        };
        let (slice, patient) = evaluate_patients(&model, patients, vote.as_ref())
            .map_err(|e| PipelineError::data(Stage::Eval, None, format!("{split} split: {e}")))?;
        metrics.push(RunMetrics {
            variant: args.variant,
            model: MODEL_NAME.to_string(),
            seed: args.seed,
            split,
            slice,
            patient,
        });
    }
    print!("{}", MetricsReport::new(metrics.clone()).to_csv());
    if let Some(out) = &args.out {
        write_json(out, &metrics)?;
    }
    Ok(())
}

fn gradcam_cmd(args: &GradcamArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let volume = read_volume(&args.input)?;
    let Some(slice) = volume.slices().get(args.slice) else {
        return Err(PipelineError::config(format!(
            "slice {} out of range for a volume of depth {}",
            args.slice,
            volume.depth()
        )));
    };
    let slice = resize_bilinear(slice, model.input_size(), model.input_size())
        .map_err(|e| PipelineError::data(Stage::Gradcam, Some(&volume.patient_id), e))?
        .map(|v| v.clamp(0.0, 1.0));
    let target = if args.negative {
        TargetClass::Negative
    } else {
        TargetClass::Positive
    };
    let heatmap = gradcam_slice(&model, &slice, target)
        .map_err(|e| PipelineError::data(Stage::Gradcam, Some(&volume.patient_id), e))?;
    fs::create_dir_all(&args.out).map_err(out_err(&args.out))?;
    let stem = format!("{}_slice{:02}", volume.patient_id, args.slice);
    write_heatmap_files(&args.out, &stem, &slice, &heatmap)?;
    let (r, c) = heatmap.argmax();
    println!("heatmap peak at row {r}, col {c}");
    Ok(())
}

/// Reads every `*.json` run-metrics file in `dir`, in file-name order.
pub fn collect_runs(dir: &Path) -> Result<MetricsReport> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut runs = Vec::new();
    for f in files {
        let metrics: Vec<RunMetrics> = read_json(&f, Stage::Report)?;
        runs.extend(metrics);
    }
    if runs.is_empty() {
        return Err(PipelineError::data(
            Stage::Report,
            None,
            format!("no run metrics in {}", dir.display()),
        ));
    }
    Ok(MetricsReport::new(runs))
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let csv = collect_runs(&args.runs)?.to_csv();
    match &args.out {
        Some(p) => fs::write(p, csv).map_err(out_err(p)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn phantom_cmd(args: &PhantomArgs) -> Result<()> {
    let base = PhantomConfig::default();
    // lesion radii are tuned for 256 px; keep them proportional
    let scale = args.size as f64 / base.image_size as f64;
    let cfg = PhantomConfig {
        lesion_radius: (base.lesion_radius.0 * scale, base.lesion_radius.1 * scale),
        n_patients: args.patients,
        positive_fraction: args.positive_fraction,
        slices_per_patient: args.slices,
        image_size: args.size,
        seed: args.seed,
        ..base
    };
    cfg.validate().map_err(PipelineError::config)?;
    write_phantom_dataset(&cfg, &args.out).map_err(|e| PipelineError::data(Stage::Phantom, None, e))?;
    println!("wrote {} phantom patients to {}", args.patients, args.out.display());
    Ok(())
}

/// Resolves the effective config of a `run` invocation.
pub fn resolve_run_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.manifest {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| PipelineError::config(format!("{}: {e}", p.display())))?;
            let m: Manifest = serde_json::from_str(&text)
                .map_err(|e| PipelineError::config(format!("{}: {e}", p.display())))?;
            m.config
        }
        None => args.config.load()?,
    };
    if let Some(d) = &args.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = args.max_epochs {
        cfg.train.max_epochs = e;
    }
    Ok(cfg)
}

fn run_cmd(args: &RunArgs) -> Result<()> {
    let cfg = resolve_run_config(args)?;
    let summary = run_pipeline(&cfg)?;
    print!("{}", summary.report.to_csv());
    println!("manifest: {}", cfg.output_dir.join(MANIFEST_FILE).display());
    Ok(())
}

/// Dispatches a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest_cmd(a),
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcam(a) => gradcam_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::PhantomGen(a) => phantom_cmd(a),
        Command::Run(a) => run_cmd(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig {
            vote: Some(VoteConfig { k: 30, t: 10 }),
            seeds: vec![3, 4],
            ..PipelineConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"variant": "B", "seeds": [1]}"#).unwrap();
        assert_eq!(cfg.variant, VariantId::B);
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn missing_data_dir_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            data_dir: tmp.path().join("nope"),
            output_dir: tmp.path().join("out"),
            ..PipelineConfig::default()
        };
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!cfg.output_dir.exists());
    }

    #[test]
    fn bad_vote_depth_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            data_dir: tmp.path().to_path_buf(),
            vote: Some(VoteConfig { k: 5, t: 2 }),
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().kind, ErrorKind::Config);
    }

    #[test]
    fn error_messages_carry_context() {
        let e = PipelineError::data(Stage::Ingest, Some("P7"), "missing tag");
        assert_eq!(e.to_string(), "ingest stage (patient P7): missing tag");
        assert_eq!(e.exit_code(), 3);
        assert_eq!(PipelineError::training("nan").exit_code(), 4);
    }
}
