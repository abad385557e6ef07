//! The five pipeline stages.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use petseg_core::case::{list_cases, load_case, load_images, load_label, save_case};
use petseg_core::fsutil::write_atomic;
use petseg_core::metrics::{evaluate_case, summarize, to_csv, to_json_lines};
use petseg_core::nifti::{read_volume, write_volume};
use petseg_core::synth::{case_id, synth_case};
use petseg_core::trainer::{train_ensemble, EpochRecord};
use petseg_core::{predict_case, MetricsReport, MetricsSummary, ModelCheckpoint, Network};
use petseg_core::{Case, Preprocessing};

use crate::config::RunConfig;

pub const PREDICTION_SUFFIX: &str = "_pred.nii.gz";
pub const HISTORY_FILE: &str = "history.jsonl";

pub fn checkpoint_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold}.ckpt"))
}

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{PREDICTION_SUFFIX}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn case_ids(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let ids = match &cfg.cases {
        Some(ids) => ids.clone(),
        None => list_cases(dir)?,
    };
    if ids.is_empty() {
        bail!("no cases found in {}", dir.display());
    }
    Ok(ids)
}

fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if !dir.is_dir() {
        bail!("{what} directory {} does not exist", dir.display());
    }
    Ok(())
}

/// Writes `synth_cases` synthetic studies to `data_dir`.
pub fn synth(cfg: &RunConfig) -> Result<Vec<String>> {
    create_dir(&cfg.data_dir)?;
    let mut ids = Vec::with_capacity(cfg.synth_cases);
    for i in 0..cfg.synth_cases {
        let case = synth_case(i, cfg.seed);
        save_case(&cfg.data_dir, &case)?;
        eprintln!("synth {} dims {:?}", case.id, case.suv.dims());
        ids.push(case_id(i));
    }
    Ok(ids)
}

/// Resamples and windows every case into `<output>/preprocessed`.
pub fn preprocess(cfg: &RunConfig) -> Result<Vec<String>> {
    require_dir(&cfg.data_dir, "data")?;
    let ids = case_ids(cfg, &cfg.data_dir)?;
    let out = cfg.preprocessed_dir();
    create_dir(&out)?;
    let prep = Preprocessing::default();
    for id in &ids {
        let case = load_case(&cfg.data_dir, id)?;
        let pre = petseg_core::case::preprocess_case(&case, &prep)?;
        save_case(&out, &pre)?;
        eprintln!("preprocess {id} -> {:?}", pre.suv.dims());
    }
    Ok(ids)
}

/// Trains one model per fold on the preprocessed cases and writes
/// `fold_<k>.ckpt` plus the epoch history. Checkpoints of folds beyond the
/// configured count are removed.
pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let src = cfg.preprocessed_dir();
    require_dir(&src, "preprocessed")?;
    let ids = case_ids(cfg, &src)?;
    let cases = ids
        .iter()
        .map(|id| load_case(&src, id))
        .collect::<Result<Vec<Case>, _>>()?;
    let mut history = String::new();
    let results = train_ensemble(
        &cases,
        &cfg.network,
        &cfg.train,
        &cfg.patch,
        &mut |r: &EpochRecord| {
            eprintln!(
                "fold {} epoch {} lr {:.6} train {:.4} val {:.4}",
                r.fold, r.epoch, r.lr, r.train_loss, r.val_loss
            );
            history.push_str(&serde_json::to_string(r).expect("serializable record"));
            history.push('\n');
        },
    )?;

    let dir = cfg.checkpoint_dir();
    create_dir(&dir)?;
    let mut paths = Vec::with_capacity(results.len());
    for (k, r) in results.iter().enumerate() {
        let path = checkpoint_path(&dir, k);
        r.checkpoint.save(&path)?;
        paths.push(path);
    }
    let mut k = results.len();
    while checkpoint_path(&dir, k).exists() {
        std::fs::remove_file(checkpoint_path(&dir, k))?;
        k += 1;
    }
    let history_path = dir.join(HISTORY_FILE);
    write_atomic(&history_path, history.as_bytes())
        .with_context(|| format!("writing {}", history_path.display()))?;
    Ok(paths)
}

fn load_models(dir: &Path) -> Result<Vec<Network<f32>>> {
    require_dir(dir, "checkpoint")?;
    let mut models = Vec::new();
    while checkpoint_path(dir, models.len()).exists() {
        let path = checkpoint_path(dir, models.len());
        let ckpt =
            ModelCheckpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        models.push(ckpt.network);
    }
    if models.is_empty() {
        bail!("no fold_<k>.ckpt files in {}", dir.display());
    }
    Ok(models)
}

/// Ensemble prediction for every case; masks land on each case's SUV grid.
pub fn predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    require_dir(&cfg.data_dir, "data")?;
    let models = load_models(&cfg.checkpoint_dir())?;
    let ids = case_ids(cfg, &cfg.data_dir)?;
    let out = cfg.prediction_dir();
    create_dir(&out)?;
    let prep = Preprocessing::default();
    let mut paths = Vec::with_capacity(ids.len());
    for id in &ids {
        let (ct, suv) = load_images(&cfg.data_dir, id)?;
        let pred = predict_case(id, &models, &ct, &suv, &prep, &cfg.window, cfg.threshold)?;
        let path = prediction_path(&out, id);
        write_volume(&pred.mask, &path)?;
        eprintln!(
            "predict {id}: {} foreground voxels from {} models",
            pred.mask.count_foreground(),
            models.len()
        );
        paths.push(path);
    }
    Ok(paths)
}

/// Scores every prediction against its ground truth and writes
/// `metrics.csv` and `metrics.jsonl`.
pub fn evaluate(cfg: &RunConfig) -> Result<(Vec<MetricsReport>, MetricsSummary)> {
    require_dir(&cfg.data_dir, "data")?;
    let pred_dir = cfg.prediction_dir();
    require_dir(&pred_dir, "prediction")?;
    let ids = case_ids(cfg, &cfg.data_dir)?;
    let mut reports = Vec::with_capacity(ids.len());
    for id in &ids {
        let gt = load_label(&cfg.data_dir, id)?;
        let path = prediction_path(&pred_dir, id);
        let pred = read_volume(&path).with_context(|| format!("case {id}"))?;
        let report =
            evaluate_case(id, &pred, &gt, cfg.connectivity).with_context(|| format!("case {id}"))?;
        reports.push(report);
    }
    create_dir(&cfg.output_dir)?;
    for (path, text) in [
        (cfg.metrics_csv(), to_csv(&reports)),
        (cfg.metrics_jsonl(), to_json_lines(&reports)),
    ] {
        write_atomic(&path, text.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let summary = summarize(&reports);
    Ok((reports, summary))
}
