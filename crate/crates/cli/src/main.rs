//! `lisa`: train, evaluate, ablate, plot, generate data, build anchor
//! files, and run spectrum diagnostics from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lisa_core::ckpt::load_checkpoint;
use lisa_core::config::{load_scene_spec, load_train_config};
use lisa_core::fam::spectrum_stability;
use lisa_core::geometry::GazeAngles;
use lisa_core::plot::plot_csv;
use lisa_core::sdm::{build_anchor_set, save_anchors, AnchorSet};
use lisa_core::synth::{
    corrupt, read_dataset, render_dataset, render_face, write_dataset, CorruptTag, GazeSample,
    SceneSpec,
};
use lisa_core::train::{ablate, dataset_tags, evaluate, predictions_csv, train};

#[derive(Parser)]
#[command(name = "lisa", version, about = "driver gaze estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML config; writes metrics CSV + checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory, grouped by attrs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Grouping key; only "attrs" is supported.
        #[arg(long, default_value = "attrs")]
        group_by: String,
        /// Output directory for the eval and prediction CSVs
        /// (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the four component-removal variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Render a metrics, eval, or prediction CSV to a PNG chart.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCmd),
    /// Anchor file utilities.
    #[command(subcommand)]
    Anchors(AnchorCmd),
    /// Diagnostics.
    #[command(subcommand)]
    Diag(DiagCmd),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Render a synthetic dataset from a scene spec TOML into a directory.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AnchorCmd {
    /// Build a binary anchor file from a prompt list (one per line).
    Build {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encode prompts with the built-in deterministic pseudo-encoder.
        #[arg(long, conflicts_with = "encoder_dump")]
        pseudo: bool,
        /// Ingest embeddings from a JSON dump:
        /// [{"prompt": "...", "embedding": [..]}, ...].
        #[arg(long)]
        encoder_dump: Option<PathBuf>,
        /// Embedding dimension for the pseudo-encoder.
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
}

#[derive(Subcommand)]
enum DiagCmd {
    /// Spectrum stability of each corruption at several severities, as
    /// CSV (corruption,severity,stability) on stdout.
    Spectrum {
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0])]
        severity: Vec<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, out } => cmd_train(&config, &out),
        Cmd::Eval {
            ckpt,
            data,
            group_by,
            out,
        } => cmd_eval(&ckpt, &data, &group_by, out.as_deref()),
        Cmd::Ablate { config, out } => cmd_ablate(&config, &out),
        Cmd::Plot { input, out } => {
            let written = plot_csv(&input, out.as_deref())?;
            println!("wrote {}", written.display());
            Ok(())
        }
        Cmd::Data(DataCmd::Gen { spec, out }) => cmd_data_gen(&spec, &out),
        Cmd::Anchors(AnchorCmd::Build {
            prompts,
            out,
            pseudo,
            encoder_dump,
            dim,
        }) => cmd_anchors_build(&prompts, &out, pseudo, encoder_dump.as_deref(), dim),
        Cmd::Diag(DiagCmd::Spectrum { severity, seed }) => cmd_diag_spectrum(&severity, seed),
    }
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let mut cfg =
        load_train_config(config).with_context(|| format!("loading {}", config.display()))?;
    cfg.apply_env_seed()?;
    let result = train(&cfg, out)?;
    let report = result
        .reports
        .last()
        .context("training ran zero steps; nothing to report")?;
    println!(
        "trained {} steps; final loss {:.6} (l1 {:.6}, ang {:.6}, sep {:.6})",
        result.steps, report.total, report.l1, report.ang, report.sep
    );
    if let Some(frac) = result.alpha_grad_live_frac {
        println!(
            "spectral blend gradient live on {:.1}% of steps",
            frac * 100.0
        );
    }
    println!("metrics: {}", result.metrics_path.display());
    println!("checkpoint: {}", result.ckpt_path.display());
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, data: &Path, group_by: &str, out: Option<&Path>) -> Result<()> {
    if group_by != "attrs" {
        bail!("unsupported --group-by {group_by:?}; only \"attrs\" is available");
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let samples = read_dataset(data)?;
    let tags = dataset_tags(&samples);
    let (table, preds) = evaluate(&ckpt, &samples, &tags)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir)?;
    let stem = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".to_string());
    let eval_path = dir.join(format!("{stem}_eval.csv"));
    fs::write(&eval_path, table.to_csv())?;
    let preds_path = dir.join(format!("{stem}_preds.csv"));
    fs::write(&preds_path, predictions_csv(&preds))?;
    print!("{}", table.to_csv());
    println!("eval table: {}", eval_path.display());
    println!("predictions: {}", preds_path.display());
    Ok(())
}

fn cmd_ablate(config: &Path, out: &Path) -> Result<()> {
    let mut cfg =
        load_train_config(config).with_context(|| format!("loading {}", config.display()))?;
    cfg.apply_env_seed()?;
    let table = ablate(&cfg, out)?;
    print!("{}", table.to_csv());
    println!("variant outputs under {}", out.display());
    Ok(())
}

fn cmd_data_gen(spec: &Path, out: &Path) -> Result<()> {
    let scene = load_scene_spec(spec).with_context(|| format!("loading {}", spec.display()))?;
    let samples = render_dataset(&scene)?;
    write_dataset(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_anchors_build(
    prompts_path: &Path,
    out: &Path,
    pseudo: bool,
    encoder_dump: Option<&Path>,
    dim: usize,
) -> Result<()> {
    let text = fs::read_to_string(prompts_path)
        .with_context(|| format!("reading {}", prompts_path.display()))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if prompts.is_empty() {
        bail!("{} contains no prompts", prompts_path.display());
    }
    let anchors = match encoder_dump {
        Some(dump) => anchors_from_dump(dump, &prompts)?,
        None => {
            // Pseudo is the default encoder; the flag makes it explicit.
            let _ = pseudo;
            build_anchor_set(&prompts, dim)?
        }
    };
    save_anchors(out, &anchors)?;
    println!(
        "wrote {} anchors of dim {} to {}",
        anchors.len(),
        anchors.dim(),
        out.display()
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct DumpEntry {
    prompt: String,
    embedding: Vec<f64>,
}

/// Match a JSON embedding dump against the prompt list by prompt text.
fn anchors_from_dump(dump: &Path, prompts: &[String]) -> Result<AnchorSet> {
    let text = fs::read_to_string(dump).with_context(|| format!("reading {}", dump.display()))?;
    let entries: Vec<DumpEntry> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", dump.display()))?;
    let mut rows = Vec::with_capacity(prompts.len());
    for p in prompts {
        let e = entries
            .iter()
            .find(|e| &e.prompt == p)
            .with_context(|| format!("dump has no embedding for prompt {p:?}"))?;
        rows.push(e.embedding.clone());
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        bail!("dump embeddings have mixed dimensions");
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let emb = ndarray::Array2::from_shape_vec((prompts.len(), d), flat)
        .expect("row-major embedding matrix");
    Ok(AnchorSet::new(emb, prompts.to_vec())?)
}

fn cmd_diag_spectrum(severities: &[f64], seed: u64) -> Result<()> {
    use rand::SeedableRng;
    let spec = SceneSpec::default();
    let clean = GazeSample {
        image: render_face(
            &spec,
            1,
            GazeAngles {
                yaw: 0.2,
                pitch: -0.1,
            },
        ),
        gaze: GazeAngles {
            yaw: 0.2,
            pitch: -0.1,
        },
        attrs: vec!["clean".to_string()],
        subject_id: 1,
    };
    println!("corruption,severity,stability");
    for tag in CorruptTag::ALL {
        for &sev in severities {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let corrupted = corrupt(&clean, tag, sev, &mut rng)?;
            let s = spectrum_stability(&clean.image, &corrupted.image)?;
            println!("{tag},{sev},{s:.6}");
        }
    }
    Ok(())
}
