//! Implementations behind the `saig` subcommands: enhance, train, inspect
//! and gradcheck. Every command is deterministic given its seed; exit codes
//! are 0 on success, 1 for user errors, 2 for internal invariant breaches.

use crate::checkpoint::{self, CheckpointError};
use crate::gradcheck;
use crate::imageio::{self, ImageIoError};
use crate::network::{forward, ModelConfig, ModelWeights, Precision};
use crate::sai2e;
use crate::tensor::Elem;
use crate::train::{self, DataSource, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn user<E: std::fmt::Display>(e: E) -> CliError {
    CliError::User(e.to_string())
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Tensor(t) => CliError::Internal(t.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } | TrainError::Tensor(_) | TrainError::StateMismatch(_) => {
                CliError::Internal(e.to_string())
            }
            other => CliError::User(other.to_string()),
        }
    }
}

// ---- config file ----

fn config_version_default() -> u32 {
    1
}

/// The JSON config document: model and train sections with explicit
/// defaults; unknown keys are rejected (all of them, listed).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    #[serde(default = "config_version_default")]
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

const TOP_KEYS: &[&str] = &["version", "model", "train"];
const MODEL_KEYS: &[&str] = &[
    "base_channels",
    "block_counts",
    "heads",
    "ffn_expansion",
    "head_illum_mode",
    "estimator",
    "use_modulation",
    "sai2e_hidden",
    "precision",
    "seed",
];
const TRAIN_KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "crop_size",
    "lr_start",
    "lr_end",
    "beta1",
    "beta2",
    "lambda_l1",
    "lambda_ssim",
    "seed",
    "snapshot_interval",
    "clip_grad_norm",
];

fn unknown_keys(value: &Value) -> Vec<String> {
    let mut bad = Vec::new();
    let Some(top) = value.as_object() else {
        return vec!["<document is not a JSON object>".into()];
    };
    for key in top.keys() {
        if !TOP_KEYS.contains(&key.as_str()) {
            bad.push(key.clone());
        }
    }
    for (section, keys) in [("model", MODEL_KEYS), ("train", TRAIN_KEYS)] {
        if let Some(Value::Object(map)) = top.get(section) {
            for key in map.keys() {
                if !keys.contains(&key.as_str()) {
                    bad.push(format!("{section}.{key}"));
                }
            }
        }
    }
    bad
}

/// Parse and validate a config file; every unknown key is listed.
pub fn load_config(path: &Path) -> Result<CliConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read config '{}': {e}", path.display())))?;
    parse_config(&text).map_err(|e| CliError::User(format!("config '{}': {e}", path.display())))
}

pub fn parse_config(text: &str) -> std::result::Result<CliConfigFile, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let bad = unknown_keys(&value);
    if !bad.is_empty() {
        return Err(format!("unknown config keys: {}", bad.join(", ")));
    }
    let cfg: CliConfigFile = serde_json::from_value(value).map_err(|e| e.to_string())?;
    if cfg.version != 1 {
        return Err(format!("unsupported config version {}", cfg.version));
    }
    Ok(cfg)
}

// ---- enhance ----

pub fn cmd_enhance(input: &Path, checkpoint_path: &Path, output: &Path) -> Result<()> {
    let cfg = checkpoint::peek_config(checkpoint_path)?;
    match cfg.precision {
        Precision::F32 => run_enhance::<f32>(input, checkpoint_path, output),
        Precision::F64 => run_enhance::<f64>(input, checkpoint_path, output),
    }
}

fn run_enhance<E: Elem>(input: &Path, checkpoint_path: &Path, output: &Path) -> Result<()> {
    let model: ModelWeights<E> = checkpoint::load_model(checkpoint_path, None)?;
    let img = imageio::load_png(input)?;
    let t0 = Instant::now();
    let tensor = imageio::to_tensor::<E>(&img);
    let (padded, original) = imageio::pad_reflect(&tensor, 8);
    let out = forward(&model, &padded).map_err(|e| CliError::Internal(e.to_string()))?;
    let cropped = imageio::crop_back(&out, original);
    let result = imageio::from_tensor(&cropped)?;
    imageio::save_png(&result, output)?;
    println!(
        "enhanced {} -> {} ({}x{}) in {:.3}s",
        input.display(),
        output.display(),
        img.width,
        img.height,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---- train ----

pub enum DataArg {
    Synthetic,
    Dir(PathBuf),
}

impl DataArg {
    pub fn parse(s: &str) -> Self {
        if s == "synthetic" {
            DataArg::Synthetic
        } else {
            DataArg::Dir(PathBuf::from(s))
        }
    }
}

/// Size of the synthetic desk corpus.
pub const SYNTH_COUNT: usize = 8;

pub fn cmd_train(
    config: Option<&Path>,
    data: &DataArg,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => CliConfigFile::default(),
    };
    match cfg.model.precision {
        Precision::F32 => run_train::<f32>(&cfg, data, out_dir, resume),
        Precision::F64 => run_train::<f64>(&cfg, data, out_dir, resume),
    }
}

fn run_train<E: Elem>(
    cfg: &CliConfigFile,
    data: &DataArg,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let source = match data {
        DataArg::Synthetic => DataSource::Synthetic {
            count: SYNTH_COUNT,
            size: cfg.train.crop_size,
            seed: cfg.train.seed,
        },
        DataArg::Dir(d) => DataSource::Dir(d.clone()),
    };
    let dataset = train::load_dataset::<E>(&source)?;

    let (mut model, resume_state) = match resume {
        Some(snap) => {
            let (model, m, v, state) = checkpoint::load_snapshot::<E>(snap)?;
            let diffs = cfg.model.diff(&model.config);
            if !diffs.is_empty() {
                return Err(CliError::User(format!(
                    "snapshot config differs from --config in fields: {}",
                    diffs.join(", ")
                )));
            }
            if state.train_config != cfg.train {
                return Err(CliError::User(
                    "snapshot train config differs from --config".into(),
                ));
            }
            println!("resuming from iteration {}", state.iteration);
            (model, Some((m, v, state.adam_step, state.iteration)))
        }
        None => {
            let model =
                crate::network::init_model::<E>(&cfg.model).map_err(user)?;
            (model, None)
        }
    };

    let t0 = Instant::now();
    let report = train::fit(&mut model, &dataset, &cfg.train, Some(out_dir), resume_state)?;
    println!(
        "trained {} iterations in {:.1}s; final train PSNR {:.2} dB; outputs in {}",
        cfg.train.iterations,
        t0.elapsed().as_secs_f64(),
        report.final_psnr,
        out_dir.display()
    );
    Ok(())
}

// ---- inspect ----

pub fn cmd_inspect(input: &Path, checkpoint_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = checkpoint::peek_config(checkpoint_path)?;
    match cfg.precision {
        Precision::F32 => run_inspect::<f32>(input, checkpoint_path, out_dir),
        Precision::F64 => run_inspect::<f64>(input, checkpoint_path, out_dir),
    }
}

fn run_inspect<E: Elem>(input: &Path, checkpoint_path: &Path, out_dir: &Path) -> Result<()> {
    let model: ModelWeights<E> = checkpoint::load_model(checkpoint_path, None)?;
    let img = imageio::load_png(input)?;
    let tensor = imageio::to_tensor::<E>(&img);
    let (padded, original) = imageio::pad_reflect(&tensor, 8);
    let ps = padded.shape();
    let (h, w) = (ps.h(), ps.w());
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::User(format!("cannot create {}: {e}", out_dir.display())))?;

    // (a) illumination prior: channel mean of the input
    let prior: Vec<f64> = (0..h * w)
        .map(|p| {
            (0..3)
                .map(|c| padded.data()[c * h * w + p].to_f64())
                .sum::<f64>()
                / 3.0
        })
        .collect();
    imageio::save_heatmap_png(&prior, w, h, &out_dir.join("illumination_prior.png"))?;

    // (b) integration-area heatmap from the offset net (flat for the
    // fixed-window estimator, which renders mid-gray)
    let area = match &model.sai2e {
        Some(sw) => {
            let offsets = sai2e::predict_offsets(&padded, &sw.offset_net)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            sai2e::integration_area_map(&offsets, (h, w))
        }
        None => vec![4.0; h * w],
    };
    imageio::save_heatmap_png(&area, w, h, &out_dir.join("integration_area.png"))?;

    // (c) estimated illumination, one heatmap per channel
    let il0 = match &model.sai2e {
        Some(sw) => sai2e::estimate_illumination(&padded, sw),
        None => sai2e::avgpool2x2_illumination(&padded),
    }
    .map_err(|e| CliError::Internal(e.to_string()))?;
    for (c, name) in ["il0_r.png", "il0_g.png", "il0_b.png"].iter().enumerate() {
        let map: Vec<f64> = il0.data()[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        imageio::save_heatmap_png(&map, w, h, &out_dir.join(name))?;
    }

    // (d) residual map (channel mean of output - input)
    let out = forward(&model, &padded).map_err(|e| CliError::Internal(e.to_string()))?;
    let residual: Vec<f64> = (0..h * w)
        .map(|p| {
            (0..3)
                .map(|c| out.data()[c * h * w + p].to_f64() - padded.data()[c * h * w + p].to_f64())
                .sum::<f64>()
                / 3.0
        })
        .collect();
    imageio::save_heatmap_png(&residual, w, h, &out_dir.join("residual.png"))?;

    // (e) Y-channel statistics of input and output
    let out_img = imageio::from_tensor(&imageio::crop_back(&out, original))?;
    let y_in = imageio::luminance_y(&img);
    let y_out = imageio::luminance_y(&out_img);
    let stat = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (mi, si) = stat(&y_in);
    let (mo, so) = stat(&y_out);
    std::fs::write(
        out_dir.join("y_stats.csv"),
        format!("image,y_mean,y_std\ninput,{mi},{si}\noutput,{mo},{so}\n"),
    )
    .map_err(|e| CliError::User(format!("cannot write y_stats.csv: {e}")))?;

    println!("inspection artifacts written to {}", out_dir.display());
    Ok(())
}

// ---- gradcheck ----

pub fn cmd_gradcheck(module: &str, seed: u64) -> Result<()> {
    let reports = if module == "all" {
        gradcheck::suite_all(seed)
    } else {
        let r = gradcheck::suite(module, seed);
        if r.is_empty() {
            return Err(CliError::User(format!(
                "unknown module '{module}'; expected one of {} or 'all'",
                gradcheck::ALL_MODULES.join(", ")
            )));
        }
        r
    };
    let mut failures = 0;
    for r in &reports {
        println!("{} {:.3e}", r.name, r.max_rel_err);
        if !r.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        let failed: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect();
        return Err(CliError::Internal(format!(
            "{failures} gradient check(s) above tolerance {}: {}",
            gradcheck::TOLERANCE,
            failed.join(", ")
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}
