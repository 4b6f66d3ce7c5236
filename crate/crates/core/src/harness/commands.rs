use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{check_activation_trend, evaluate};
use super::manifest::Manifest;
use super::plot::render_svg;
use super::records::{read_records, render_report, write_records, AccuracyRecord, Mode};
use super::HarnessError;
use crate::cnn::{train, CnnModel, TrainParams};
use crate::dataset::{
    gen_deficient_suite, read_deficient_set, read_idx_files, write_deficient_set, DeficientSet, GrayImage,
};
use crate::intuition::IntuitionLayer;
use crate::memory::{build_memory_bank, load_memory, save_memory, select_stock, MemoryLayer};
use crate::seeding::substream;

/// Artifact locations inside the work directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self::new(&cfg.paths.work_dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.icnn")
    }

    /// Human-readable training record next to the checkpoint.
    pub fn model_sidecar(&self) -> PathBuf {
        self.root.join("model.icnn.toml")
    }

    pub fn memory(&self) -> PathBuf {
        self.root.join("memory.imem")
    }

    pub fn deficient_dir(&self) -> PathBuf {
        self.root.join("deficient")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn plot(&self) -> PathBuf {
        self.root.join("results.svg")
    }

    pub fn eval_csv(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("eval-{}.csv", mode_tag(mode)))
    }

    pub fn predictions_csv(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("predictions-{}.csv", mode_tag(mode)))
    }
}

fn mode_tag(mode: Mode) -> String {
    match mode {
        Mode::NoIntuition => "none".into(),
        Mode::Threshold(t) => format!("T{t}"),
    }
}

fn missing(what: &str, path: &Path, command: &str) -> HarnessError {
    HarnessError::Data(format!(
        "{what} {} not found; run `{command}` first",
        path.display()
    ))
}

fn read_train(cfg: &ExperimentConfig) -> Result<Vec<GrayImage>, HarnessError> {
    Ok(read_idx_files(&cfg.paths.train_images, &cfg.paths.train_labels)?)
}

fn read_test(cfg: &ExperimentConfig) -> Result<Vec<GrayImage>, HarnessError> {
    Ok(read_idx_files(&cfg.paths.test_images, &cfg.paths.test_labels)?)
}

fn record_outputs(ws: &Workspace, files: &[PathBuf]) -> Result<(), HarnessError> {
    let mut m = Manifest::open(ws.root())?;
    for f in files {
        m.record(f)?;
    }
    m.save()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    content_hash: String,
    seed: u64,
    train_images: PathBuf,
    training: TrainParams,
}

/// Trains the network and writes the checkpoint plus its sidecar.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let ws = Workspace::of(cfg);
    fs::create_dir_all(ws.root())?;
    let train_set = read_train(cfg)?;
    log::info!("training on {} images", train_set.len());
    let model = train(&train_set, &cfg.training, cfg.seed)?;
    let path = ws.model();
    model.write_to(BufWriter::new(File::create(&path)?))?;
    let sidecar = ModelSidecar {
        content_hash: model.content_hash(),
        seed: cfg.seed,
        train_images: cfg.paths.train_images.clone(),
        training: cfg.training,
    };
    let text = toml::to_string(&sidecar).expect("sidecar serializes");
    fs::write(ws.model_sidecar(), text)?;
    record_outputs(&ws, &[path.clone(), ws.model_sidecar()])?;
    Ok(path)
}

pub fn load_model(ws: &Workspace) -> Result<CnnModel, HarnessError> {
    let path = ws.model();
    if !path.exists() {
        return Err(missing("checkpoint", &path, "train"));
    }
    Ok(CnnModel::read_from(BufReader::new(File::open(&path)?))?)
}

/// Builds the eigen bank and stock set from the trained checkpoint.
pub fn cmd_build_memory(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let ws = Workspace::of(cfg);
    let model = load_model(&ws)?;
    let train_set = read_train(cfg)?;
    let bank = build_memory_bank(&train_set, &model, cfg.experiment.delta)?;
    let stock = select_stock(&train_set, &model, &mut substream(cfg.seed, "stock", &[]))?;
    let memory = MemoryLayer {
        bank,
        stock,
        model_hash: model.content_hash(),
    };
    let path = ws.memory();
    save_memory(&path, &memory)?;
    record_outputs(&ws, std::slice::from_ref(&path))?;
    Ok(path)
}

/// Loads the memory layer and checks it belongs to `model`.
pub fn load_memory_checked(ws: &Workspace, model: &CnnModel) -> Result<MemoryLayer, HarnessError> {
    let path = ws.memory();
    if !path.exists() {
        return Err(missing("memory layer", &path, "build-memory"));
    }
    let memory = load_memory(&path)?;
    if memory.model_hash != model.content_hash() {
        return Err(HarnessError::Stale(format!(
            "stale memory layer: {} was built from another checkpoint; rerun `build-memory`",
            path.display()
        )));
    }
    Ok(memory)
}

/// Writes the deficient test sets `s = 0..=s_max`.
pub fn cmd_gen_deficient(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let ws = Workspace::of(cfg);
    let test = read_test(cfg)?;
    let suite = gen_deficient_suite(&test, cfg.experiment.s_max, cfg.segmentation, cfg.seed);
    let mut files = Vec::new();
    for set in &suite {
        files.extend(write_deficient_set(&ws.deficient_dir(), set)?);
    }
    record_outputs(&ws, &files)?;
    Ok(files)
}

pub fn load_deficient_suite(cfg: &ExperimentConfig) -> Result<Vec<DeficientSet>, HarnessError> {
    let dir = Workspace::of(cfg).deficient_dir();
    (0..=cfg.experiment.s_max)
        .map(|s| {
            let stem = crate::dataset::deficient_file_stem(s, cfg.seed);
            let images = dir.join(format!("{stem}-images.idx"));
            if !images.exists() {
                return Err(missing("deficient set", &images, "gen-deficient"));
            }
            Ok(read_deficient_set(&dir, s, cfg.seed, cfg.segmentation)?)
        })
        .collect()
}

/// Evaluates one mode over every deficient set.
pub fn cmd_eval(cfg: &ExperimentConfig, mode: Mode) -> Result<Vec<AccuracyRecord>, HarnessError> {
    let ws = Workspace::of(cfg);
    let model = load_model(&ws)?;
    let sets = load_deficient_suite(cfg)?;
    let evaluation = match mode {
        Mode::NoIntuition => evaluate(&sets, &model, None, &[])?,
        Mode::Threshold(t) => {
            let memory = load_memory_checked(&ws, &model)?;
            let layer = IntuitionLayer::new(&model, &memory, cfg.intuition)?;
            evaluate(&sets, &model, Some(&layer), &[t])?
        }
    };
    let records = evaluation.records_for(&[mode]);
    let csv_path = ws.eval_csv(mode);
    write_records(BufWriter::new(File::create(&csv_path)?), &records)?;
    let pred_path = ws.predictions_csv(mode);
    evaluation.write_predictions(&[mode], BufWriter::new(File::create(&pred_path)?))?;
    record_outputs(&ws, &[csv_path, pred_path])?;
    Ok(records)
}

/// Evaluates no-intuition and every configured threshold; writes the
/// consolidated CSV and the plot.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<AccuracyRecord>, HarnessError> {
    let ws = Workspace::of(cfg);
    let model = load_model(&ws)?;
    let memory = load_memory_checked(&ws, &model)?;
    let layer = IntuitionLayer::new(&model, &memory, cfg.intuition)?;
    let sets = load_deficient_suite(cfg)?;
    let evaluation = evaluate(&sets, &model, Some(&layer), &cfg.experiment.thresholds)?;
    for w in check_activation_trend(&evaluation.records) {
        log::warn!("{w}");
    }
    let csv_path = ws.results_csv();
    write_records(BufWriter::new(File::create(&csv_path)?), &evaluation.records)?;
    let plot_path = ws.plot();
    fs::write(&plot_path, render_svg(&evaluation.records))?;
    record_outputs(&ws, &[csv_path, plot_path])?;
    Ok(evaluation.records)
}

/// Renders the two-column comparison table from a results CSV.
pub fn cmd_report(csv_path: &Path, t: f64) -> Result<String, HarnessError> {
    if !csv_path.exists() {
        return Err(missing("results", csv_path, "sweep"));
    }
    let records = read_records(BufReader::new(File::open(csv_path)?))?;
    render_report(&records, t)
}
