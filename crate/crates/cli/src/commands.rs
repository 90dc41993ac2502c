//! Stage commands. Stages exchange data only through files in the output
//! directory:
//!
//! | file                 | written by  |
//! |----------------------|-------------|
//! | `config.toml`        | every stage |
//! | `cohort/*.tsv`       | synth       |
//! | `processed/*.tsv`, `audit.tsv` | preprocess |
//! | `model.json`, `prepared.json`, `loss.tsv` | pretrain |
//! | `classifiers.json`   | classify    |
//! | `metrics.tsv`, `embeddings.tsv` | evaluate |
//! | `gradcheck.tsv`      | gradcheck   |
//! | `sweep_lambda.tsv`, `sweep_period.tsv` | sweep |
//!
//! Tables start with a `# config_hash <hex>` line; JSON artifacts carry a
//! `config_hash` field.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use pod_core::classify::Split;
use pod_core::datamodel::{read_cohort, synth_generate, write_cohort, MultiModalRecord, PodLabels, Window};
use pod_core::eval::{export_embeddings, MetricReport};
use pod_core::model::{Checkpoint, FusionPathformer};
use pod_core::pipeline::{
    evaluate, fit_classifiers, prepare, pretrain, restore, sweep_lambda, sweep_period, Prepared, TrainedClassifier,
};
use pod_core::preprocessing::{preprocess_cohort, AuditEntry, Standardizer};
use pod_core::training::{grad_check, render_loss_log, GradCheckOptions, GradCheckReport};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Files written by a command plus a one-line summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

impl Outcome {
    fn merge(mut self, other: Outcome) -> Self {
        self.files.extend(other.files);
        self.summary = other.summary;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Lambda,
    Period,
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_hash: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct PreparedArtifact {
    split: Split,
    standardizer: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct ClassifierArtifact {
    classifiers: Vec<TrainedClassifier>,
}

fn write_text(path: &Path, text: &str) -> CliResult<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn stamped_table(cfg: &ExperimentConfig, table: &str) -> String {
    format!("# config_hash {}\n{table}", cfg.hash())
}

fn write_json<T: Serialize>(cfg: &ExperimentConfig, path: &Path, body: T) -> CliResult<PathBuf> {
    let stamped = Stamped {
        config_hash: cfg.hash(),
        body,
    };
    let text = serde_json::to_string(&stamped).map_err(pod_core::Error::from)?;
    write_text(path, &text)
}

fn require(path: &Path, artifact: &'static str, stage: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            artifact,
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn read_json<T: DeserializeOwned>(
    cfg: &ExperimentConfig,
    path: &Path,
    artifact: &'static str,
    stage: &'static str,
) -> CliResult<T> {
    require(path, artifact, stage)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let stamped: Stamped<T> = serde_json::from_str(&text).map_err(|e| CliError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    warn_if_stale(cfg, path, &stamped.config_hash);
    Ok(stamped.body)
}

fn warn_if_stale(cfg: &ExperimentConfig, path: &Path, hash: &str) {
    if hash != cfg.hash() {
        log::warn!(
            "{} was written under config {hash}, current config is {}",
            path.display(),
            cfg.hash()
        );
    }
}

/// Removes `*.tsv` files so a rewritten cohort holds no leftovers.
fn clear_tsv(dir: &Path) -> CliResult<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "tsv") {
            fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
        }
    }
    Ok(())
}

fn read_records(dir: &Path, artifact: &'static str, stage: &'static str) -> CliResult<Vec<MultiModalRecord>> {
    require(dir, artifact, stage)?;
    let records = read_cohort(dir)?;
    if records.is_empty() {
        return Err(CliError::MissingArtifact {
            artifact,
            path: dir.to_path_buf(),
            stage,
        });
    }
    Ok(records)
}

fn processed_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("processed")
}

fn load_processed(cfg: &ExperimentConfig) -> CliResult<Vec<MultiModalRecord>> {
    read_records(&processed_dir(cfg), "processed cohort", "preprocess")
}

fn load_raw(cfg: &ExperimentConfig) -> CliResult<Vec<MultiModalRecord>> {
    read_records(&cfg.cohort_dir(), "raw cohort", "synth")
}

fn load_prepared(cfg: &ExperimentConfig, processed: &[MultiModalRecord]) -> CliResult<Prepared> {
    let p: PreparedArtifact = read_json(
        cfg,
        &cfg.out().join("prepared.json"),
        "split and standardizer",
        "pretrain",
    )?;
    Ok(restore(processed, &cfg.settings(), p.split, p.standardizer)?)
}

fn load_model(cfg: &ExperimentConfig) -> CliResult<FusionPathformer> {
    let ckpt: Checkpoint = read_json(cfg, &cfg.checkpoint_path(), "model checkpoint", "pretrain")?;
    Ok(FusionPathformer::from_checkpoint(ckpt, Some(&cfg.model))?)
}

fn load_classifiers(cfg: &ExperimentConfig) -> CliResult<Vec<TrainedClassifier>> {
    let c: ClassifierArtifact = read_json(cfg, &cfg.out().join("classifiers.json"), "classifiers", "classify")?;
    Ok(c.classifiers)
}

/// Writes the resolved configuration, headed by its hash.
pub fn echo_config(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    write_text(
        &cfg.out().join("config.toml"),
        &stamped_table(cfg, &cfg.to_toml_string()),
    )
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let records = synth_generate(&cfg.synth)?;
    let dir = cfg.cohort_dir();
    clear_tsv(&dir)?;
    let hash = cfg.hash();
    write_cohort(&dir, &records, &[("config_hash", &hash)])?;
    let positives = records.iter().filter(|r| r.labels.get(1)).count();
    Ok(Outcome {
        files: vec![echo_config(cfg)?, dir],
        summary: format!("synthesized {} patients ({positives} POD1 positive)", records.len()),
    })
}

pub fn render_audit(audit: &[AuditEntry]) -> String {
    let mut out = String::from("patient_id\tanomaly_fraction\tpatient_type\trepaired\tunrepairable\tinterpolated\taligned_len\tfinal_len\texcluded\n");
    for a in audit {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            a.patient_id,
            a.anomaly_fraction,
            a.patient_type.as_str(),
            a.repaired,
            a.unrepairable,
            a.interpolated,
            a.aligned_len,
            a.final_len,
            a.excluded
        );
    }
    out
}

pub fn cmd_preprocess(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let raw = load_raw(cfg)?;
    let (kept, audit) = preprocess_cohort(&raw, &cfg.ranges()?, &cfg.preprocess)?;
    let dir = processed_dir(cfg);
    clear_tsv(&dir)?;
    let hash = cfg.hash();
    write_cohort(&dir, &kept, &[("config_hash", &hash)])?;
    let audit_path = write_text(&cfg.out().join("audit.tsv"), &stamped_table(cfg, &render_audit(&audit)))?;
    Ok(Outcome {
        files: vec![echo_config(cfg)?, dir, audit_path],
        summary: format!("kept {} of {} patients", kept.len(), raw.len()),
    })
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let processed = load_processed(cfg)?;
    let s = cfg.settings();
    let prep = prepare(&processed, &s)?;
    let (model, history) = pretrain(&prep, &s)?;
    let files = vec![
        echo_config(cfg)?,
        write_json(cfg, &cfg.checkpoint_path(), model.to_checkpoint())?,
        write_json(
            cfg,
            &cfg.out().join("prepared.json"),
            PreparedArtifact {
                split: prep.split.clone(),
                standardizer: prep.standardizer.clone(),
            },
        )?,
        write_text(
            &cfg.out().join("loss.tsv"),
            &stamped_table(cfg, &render_loss_log(&history)),
        )?,
    ];
    let (first, last) = (history[0].loss.total, history[history.len() - 1].loss.total);
    Ok(Outcome {
        files,
        summary: format!(
            "pretrained on {} windows; loss {first:.4} -> {last:.4}",
            prep.split.train.len()
        ),
    })
}

pub fn cmd_classify(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let processed = load_processed(cfg)?;
    let prep = load_prepared(cfg, &processed)?;
    let model = load_model(cfg)?;
    let classifiers = fit_classifiers(&prep, &model, &cfg.settings())?;
    let n = classifiers.len();
    let path = write_json(
        cfg,
        &cfg.out().join("classifiers.json"),
        ClassifierArtifact { classifiers },
    )?;
    Ok(Outcome {
        files: vec![echo_config(cfg)?, path],
        summary: format!("fitted {n} classifiers"),
    })
}

fn embedding_table(cfg: &ExperimentConfig, prep: &Prepared, model: &FusionPathformer) -> CliResult<String> {
    let windows: &[Window] = &prep.windows;
    let ids: Vec<String> = windows
        .iter()
        .map(|w| format!("{}@{}", w.patient_id, w.start_index))
        .collect();
    let labels: Vec<[bool; 3]> = windows.iter().map(|w| w.labels.0).collect();
    let d = cfg.model.d_e;
    let mut h = Array2::zeros((windows.len(), d));
    for (i, w) in windows.iter().enumerate() {
        h.row_mut(i).assign(&model.represent(&w.input)?.h);
    }
    Ok(export_embeddings(&ids, &labels, &h, cfg.eval.projection)?)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let processed = load_processed(cfg)?;
    let prep = load_prepared(cfg, &processed)?;
    let model = load_model(cfg)?;
    let classifiers = load_classifiers(cfg)?;
    let report = evaluate(&prep, &model, &classifiers)?;
    let files = vec![
        echo_config(cfg)?,
        write_text(&cfg.out().join("metrics.tsv"), &stamped_table(cfg, &report.render()))?,
        write_text(
            &cfg.out().join("embeddings.tsv"),
            &stamped_table(cfg, &embedding_table(cfg, &prep, &model)?),
        )?,
    ];
    Ok(Outcome {
        files,
        summary: summarize(&report),
    })
}

fn summarize(report: &MetricReport) -> String {
    let parts: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.pod_index == 1)
        .map(|r| format!("{}/{} auroc {:.3}", r.kind.as_str(), r.featurization.as_str(), r.auroc))
        .collect();
    format!("POD1: {}", parts.join(", "))
}

/// Runs every stage in order; synthesis is skipped when `paths.cohort`
/// points at an external cohort.
pub fn cmd_pipeline(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let mut out = Outcome::default();
    if cfg.paths.cohort.is_none() {
        out = out.merge(cmd_synth(cfg)?);
    }
    for stage in [cmd_preprocess, cmd_pretrain, cmd_classify, cmd_evaluate] {
        out = out.merge(stage(cfg)?);
    }
    out.files.sort();
    out.files.dedup();
    Ok(out)
}

/// A random window shaped for the gradient-check model.
fn gradcheck_window(cfg: &ExperimentConfig) -> Window {
    let m = cfg.gradcheck_model();
    let (t, d) = (m.window_len, m.input_dims());
    let mut rng = pod_core::seed::stream(cfg.seed, "gradcheck");
    let mut draw = || Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
    let input = draw();
    let target = draw();
    Window {
        input,
        target,
        labels: PodLabels([false; 3]),
        patient_id: "gradcheck".into(),
        start_index: 0,
    }
}

/// Gradient check of a freshly initialised tiny model on a random window.
pub fn gradcheck_report(cfg: &ExperimentConfig) -> CliResult<GradCheckReport> {
    let model = FusionPathformer::new(cfg.gradcheck_model())?;
    let opts = GradCheckOptions {
        lambda: cfg.train.lambda,
        eps: cfg.gradcheck.eps,
        groups: None,
    };
    Ok(grad_check(&model, &gradcheck_window(cfg), &opts)?)
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let report = gradcheck_report(cfg)?;
    let files = vec![
        echo_config(cfg)?,
        write_text(&cfg.out().join("gradcheck.tsv"), &stamped_table(cfg, &report.render()))?,
    ];
    Ok(Outcome {
        files,
        summary: format!("max relative error {:.3e}", report.max_rel_error()),
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig, which: SweepKind) -> CliResult<Outcome> {
    let s = cfg.settings();
    let (table, name) = match which {
        SweepKind::Lambda => (
            sweep_lambda(&load_processed(cfg)?, &s, &cfg.eval.lambda_grid)?,
            "sweep_lambda.tsv",
        ),
        SweepKind::Period => (
            sweep_period(&load_raw(cfg)?, &cfg.ranges()?, &s, &cfg.eval.period_grid)?,
            "sweep_period.tsv",
        ),
    };
    let files = vec![
        echo_config(cfg)?,
        write_text(&cfg.out().join(name), &stamped_table(cfg, &table.render()))?,
    ];
    Ok(Outcome {
        files,
        summary: format!("{} grid points", table.points.len()),
    })
}
