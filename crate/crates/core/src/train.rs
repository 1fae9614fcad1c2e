//! Training loop, grouped evaluation, and the four-variant ablation
//! runner. Everything is deterministic under a fixed seed: data order is
//! derived from (seed, epoch) streams, so a checkpoint's cursor is all
//! the state a resume needs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ckpt::{save_checkpoint, Checkpoint, TrainState};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{angular_error_between_angles, GazeAngles};
use crate::losses::LossReport;
use crate::model::GazeModel;
use crate::nn::{AdamW, Params};
use crate::sdm::{build_anchor_set, default_prompt_pool, load_anchors_for, AnchorSet};
use crate::synth::{read_dataset, render_dataset, split_by_subject, GazeSample};

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub ckpt_path: PathBuf,
    pub metrics_path: PathBuf,
    pub reports: Vec<LossReport>,
    pub steps: u64,
    /// Fraction of steps where the spectral blend weight received a
    /// nonzero gradient; None when spectral injection is ablated.
    pub alpha_grad_live_frac: Option<f64>,
}

/// Deterministic epoch order: a fresh stream keyed by (seed, epoch).
pub fn shuffle_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16] = 0xD5;
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn batch_of(samples: &[GazeSample], idxs: &[usize]) -> Result<(Array4<f64>, Vec<GazeAngles>)> {
    let (c, h, w) = {
        let s = samples[idxs[0]].image.shape();
        (s[0], s[1], s[2])
    };
    let mut images = Array4::zeros((idxs.len(), c, h, w));
    let mut labels = Vec::with_capacity(idxs.len());
    for (bi, &si) in idxs.iter().enumerate() {
        let img = &samples[si].image;
        if img.shape() != [c, h, w] {
            return Err(Error::shape(format!(
                "sample {si} is {:?}, batch expects [{c}, {h}, {w}]",
                img.shape()
            )));
        }
        images.index_axis_mut(ndarray::Axis(0), bi).assign(img);
        labels.push(samples[si].gaze);
    }
    Ok((images, labels))
}

/// Build or load the anchor set when the separation loss is active.
pub fn resolve_anchors(cfg: &TrainConfig) -> Result<Option<AnchorSet>> {
    if !cfg.model.use_sdm || cfg.loss.lambda_sep == 0.0 {
        return Ok(None);
    }
    let anchors = match (&cfg.anchors.path, &cfg.anchors.prompts) {
        (Some(path), _) => load_anchors_for(path, cfg.model.embed_dim)?,
        (None, Some(prompts)) => build_anchor_set(prompts, cfg.model.embed_dim)?,
        (None, None) => build_anchor_set(&default_prompt_pool(), cfg.model.embed_dim)?,
    };
    Ok(Some(anchors))
}

/// Load the training split described by the config.
pub fn load_train_data(cfg: &TrainConfig) -> Result<Vec<GazeSample>> {
    Ok(load_splits(cfg)?.0)
}

/// Load (train split, eval split). The eval split comes from the
/// dedicated eval source when configured, otherwise from the subject
/// holdout, otherwise it is empty.
pub fn load_splits(cfg: &TrainConfig) -> Result<(Vec<GazeSample>, Vec<GazeSample>)> {
    let primary = match (&cfg.data.path, &cfg.data.scene) {
        (Some(path), _) => read_dataset(path)?,
        (None, Some(scene)) => render_dataset(scene)?,
        (None, None) => return Err(Error::config("no data source configured")),
    };
    let (train, holdout) = match cfg.data.train_subject_max {
        Some(max_id) => split_by_subject(primary, max_id),
        None => (primary, Vec::new()),
    };
    let eval = match (&cfg.data.eval_path, &cfg.data.eval_scene) {
        (Some(path), _) => read_dataset(path)?,
        (None, Some(scene)) => render_dataset(scene)?,
        (None, None) => holdout,
    };
    Ok((train, eval))
}

pub fn train(cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutput> {
    train_with_start(cfg, out_dir, None)
}

/// Train, optionally resuming from a checkpoint (whose cursor picks the
/// batch schedule back up exactly where it stopped).
pub fn train_with_start(
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    start: Option<Checkpoint>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let samples = load_train_data(cfg)?;
    if samples.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    // Inputs are checked once here; any non-finite value surfacing inside
    // a later step can then only come from the model itself.
    for (i, s) in samples.iter().enumerate() {
        if !s.gaze.yaw.is_finite() || !s.gaze.pitch.is_finite() {
            return Err(Error::invalid(format!(
                "sample {i} has a non-finite gaze label"
            )));
        }
        if s.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("sample {i} has non-finite pixels")));
        }
    }
    let anchors = resolve_anchors(cfg)?;

    let (mut model, mut opt, mut state) = match start {
        Some(ckpt) => {
            let (m, o) = ckpt.rebuild()?;
            (m, o, ckpt.state)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = GazeModel::new(&cfg.model, &mut rng)?;
            let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
            (model, opt, TrainState::default())
        }
    };

    let n = samples.len();
    let mut reports = Vec::new();
    let mut csv = String::from(LossReport::CSV_HEADER);
    csv.push('\n');
    let mut live_steps = 0u64;
    let mut counted_steps = 0u64;
    let done = |step: u64| cfg.max_steps.map(|m| step >= m).unwrap_or(false);

    'epochs: while state.epoch < cfg.epochs as u64 {
        let order = shuffle_order(cfg.seed, state.epoch, n);
        while (state.pos as usize) < n {
            if done(state.step) {
                break 'epochs;
            }
            let lo = state.pos as usize;
            let hi = (lo + cfg.batch_size).min(n);
            let (images, labels) = batch_of(&samples, &order[lo..hi])?;
            model.zero_grad();
            let report = match model.train_step(&images, &labels, anchors.as_ref(), &cfg.loss) {
                Ok(r) if r.is_finite() => r,
                Ok(r) => {
                    return Err(Error::Diverged {
                        step: state.step,
                        detail: format!(
                            "non-finite loss: total {} (l1 {}, ang {}, sep {})",
                            r.total, r.l1, r.ang, r.sep
                        ),
                    })
                }
                // Dataset finiteness was verified up front, so a numeric
                // rejection here means the model state blew up.
                Err(Error::InvalidArgument(msg)) => {
                    return Err(Error::Diverged {
                        step: state.step,
                        detail: msg,
                    })
                }
                Err(e) => return Err(e),
            };
            if cfg.model.use_spectral_injection {
                counted_steps += 1;
                if model.fusion.grad_alpha_logit() != 0.0 {
                    live_steps += 1;
                }
            }
            opt.step(&mut model);
            csv.push_str(&report.csv_row(state.step));
            csv.push('\n');
            reports.push(report);
            state.pos = hi as u64;
            state.step += 1;
        }
        state.pos = 0;
        state.epoch += 1;
    }

    let metrics_path = out_dir.join(format!("{}_metrics.csv", cfg.run_id));
    fs::write(&metrics_path, &csv).map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let checkpoint = Checkpoint::capture(cfg, state, &mut model, &opt);
    let ckpt_path = out_dir.join(format!("{}.ckpt", cfg.run_id));
    save_checkpoint(&ckpt_path, &checkpoint)?;

    Ok(TrainOutput {
        checkpoint,
        ckpt_path,
        metrics_path,
        steps: state.step,
        alpha_grad_live_frac: if cfg.model.use_spectral_injection && counted_steps > 0 {
            Some(live_steps as f64 / counted_steps as f64)
        } else {
            None
        },
        reports,
    })
}

/// One evaluated sample: ground truth, prediction, and angular error.
#[derive(Debug, Clone, Copy)]
pub struct PredRecord {
    pub label: GazeAngles,
    pub pred: GazeAngles,
    pub err_deg: f64,
}

pub const PRED_CSV_HEADER: &str = "yaw,pitch,err_deg";

pub fn predictions_csv(preds: &[PredRecord]) -> String {
    let mut out = String::from(PRED_CSV_HEADER);
    out.push('\n');
    for p in preds {
        out.push_str(&format!(
            "{:.12e},{:.12e},{:.12e}\n",
            p.label.yaw, p.label.pitch, p.err_deg
        ));
    }
    out
}

/// Run the model over a dataset in eval mode.
pub fn predict_dataset(
    model: &GazeModel,
    samples: &[GazeSample],
    batch_size: usize,
) -> Result<Vec<PredRecord>> {
    let mut preds = Vec::with_capacity(samples.len());
    let idxs: Vec<usize> = (0..samples.len()).collect();
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (images, labels) = batch_of(samples, chunk)?;
        let out = model.forward_eval(&images)?;
        for (i, pred) in out.predictions().into_iter().enumerate() {
            let err_deg = angular_error_between_angles(labels[i], pred)?;
            preds.push(PredRecord {
                label: labels[i],
                pred,
                err_deg,
            });
        }
    }
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub group: String,
    pub count: usize,
    pub mean_deg: Option<f64>,
    pub std_deg: Option<f64>,
    pub acc_lt_8deg: Option<f64>,
}

fn metrics_over(group: &str, errs: &[f64]) -> GroupMetrics {
    if errs.is_empty() {
        return GroupMetrics {
            group: group.to_string(),
            count: 0,
            mean_deg: None,
            std_deg: None,
            acc_lt_8deg: None,
        };
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let acc = errs.iter().filter(|e| **e < 8.0).count() as f64 / n;
    GroupMetrics {
        group: group.to_string(),
        count: errs.len(),
        mean_deg: Some(mean),
        std_deg: Some(var.sqrt()),
        acc_lt_8deg: Some(acc),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<GroupMetrics>,
}

pub const EVAL_CSV_HEADER: &str = "group,count,mean_deg,std_deg,acc_lt_8deg";

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(EVAL_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.group,
                r.count,
                fmt(r.mean_deg),
                fmt(r.std_deg),
                fmt(r.acc_lt_8deg)
            ));
        }
        out
    }

    pub fn overall(&self) -> Option<&GroupMetrics> {
        self.rows.iter().find(|r| r.group == "overall")
    }
}

/// Per-tag metrics over samples carrying each tag, plus an overall row.
pub fn group_metrics(
    samples: &[GazeSample],
    preds: &[PredRecord],
    tags: &[String],
) -> Result<EvalTable> {
    if samples.len() != preds.len() {
        return Err(Error::shape(format!(
            "{} samples vs {} predictions",
            samples.len(),
            preds.len()
        )));
    }
    let mut rows = Vec::new();
    for tag in tags {
        let errs: Vec<f64> = samples
            .iter()
            .zip(preds)
            .filter(|(s, _)| s.attrs.iter().any(|a| a == tag))
            .map(|(_, p)| p.err_deg)
            .collect();
        rows.push(metrics_over(tag, &errs));
    }
    let all: Vec<f64> = preds.iter().map(|p| p.err_deg).collect();
    rows.push(metrics_over("overall", &all));
    Ok(EvalTable { rows })
}

/// Sorted unique attribute tags present in a dataset.
pub fn dataset_tags(samples: &[GazeSample]) -> Vec<String> {
    let mut tags: Vec<String> = samples.iter().flat_map(|s| s.attrs.clone()).collect();
    tags.sort();
    tags.dedup();
    tags
}

/// Rebuild the checkpointed model and evaluate it, grouped by tags.
pub fn evaluate(
    ckpt: &Checkpoint,
    samples: &[GazeSample],
    tags: &[String],
) -> Result<(EvalTable, Vec<PredRecord>)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let (model, _) = ckpt.rebuild()?;
    let preds = predict_dataset(&model, samples, ckpt.config.batch_size)?;
    let table = group_metrics(samples, &preds, tags)?;
    Ok((table, preds))
}

/// Mean angular error of the model over a dataset (eval mode).
pub fn mean_angular_error(
    model: &GazeModel,
    samples: &[GazeSample],
    batch_size: usize,
) -> Result<f64> {
    let preds = predict_dataset(model, samples, batch_size)?;
    Ok(preds.iter().map(|p| p.err_deg).sum::<f64>() / preds.len() as f64)
}

/// k-fold split over subject ids: subjects with `id % k == fold` are the
/// held-out test fold.
pub fn split_kfold(
    samples: Vec<GazeSample>,
    k: usize,
    fold: usize,
) -> Result<(Vec<GazeSample>, Vec<GazeSample>)> {
    if k < 2 {
        return Err(Error::invalid("k-fold split needs k >= 2"));
    }
    if fold >= k {
        return Err(Error::invalid(format!(
            "fold {fold} out of range for k={k}"
        )));
    }
    let (test, train) = samples.into_iter().partition(|s| s.subject_id % k == fold);
    Ok((train, test))
}

pub const ABLATION_LABELS: [&str; 4] = [
    "Ours",
    "w/o Spectral Injection Block",
    "w/o Spatial Saliency Gating",
    "w/o SDM",
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub mean_deg: f64,
    pub acc_lt_8deg: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,mean_deg,acc_lt_8deg";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                r.label, r.mean_deg, r.acc_lt_8deg
            ));
        }
        out
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

/// Apply one ablation label to a config.
pub fn ablation_variant(base: &TrainConfig, label: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.run_id = format!("{}-{}", base.run_id, slug(label));
    match label {
        "Ours" => {}
        "w/o Spectral Injection Block" => cfg.model.use_spectral_injection = false,
        "w/o Spatial Saliency Gating" => cfg.model.use_saliency_gating = false,
        "w/o SDM" => {
            cfg.model.use_sdm = false;
            cfg.loss.lambda_sep = 0.0;
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown ablation variant {other:?}"
            )))
        }
    }
    Ok(cfg)
}

/// Train and evaluate the four ablation variants with a shared seed and
/// shared data, returning one table.
pub fn ablate(base: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<AblationTable> {
    let out_dir = out_dir.as_ref();
    let (_, eval) = load_splits(base)?;
    if eval.is_empty() {
        return Err(Error::config(
            "ablation needs an eval dataset (eval_scene, eval_path, or subject split)",
        ));
    }
    let mut rows = Vec::new();
    for label in ABLATION_LABELS {
        let cfg = ablation_variant(base, label)?;
        let out = train(&cfg, out_dir)?;
        let (model, _) = out.checkpoint.rebuild()?;
        let preds = predict_dataset(&model, &eval, cfg.batch_size)?;
        let table = group_metrics(&eval, &preds, &[])?;
        let overall = table.overall().expect("overall row always present");
        rows.push(AblationRow {
            label: label.to_string(),
            mean_deg: overall.mean_deg.expect("non-empty eval set"),
            acc_lt_8deg: overall.acc_lt_8deg.expect("non-empty eval set"),
        });
    }
    let table = AblationTable { rows };
    let path = out_dir.join(format!("{}_ablation.csv", base.run_id));
    fs::write(&path, table.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(table)
}
