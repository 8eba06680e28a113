//! Run settings: defaults < config file < command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use gega::corpus::SynthSpec;
use gega::encoder::EncoderConfig;
use gega::gega::{GegaConfig, ModelConfig};
use gega::pipeline::{TrainConfig, TrainPhase};

use crate::{CliError, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Single,
    Fusion,
}

/// Every setting of a run. In a config file or on the command line all of
/// them are optional; after resolution the ones a command needs are set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Training corpus (DocRED JSON).
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    /// Development corpus, evaluated after training.
    #[arg(long)]
    pub dev_file: Option<PathBuf>,
    /// Corpus to annotate or predict on.
    #[arg(long)]
    pub test_file: Option<PathBuf>,
    /// Model checkpoint file, or a run directory containing `model.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Teacher annotations for student training.
    #[arg(long)]
    pub silver_file: Option<PathBuf>,
    /// Result file to score (`eval`).
    #[arg(long = "pred")]
    #[serde(rename = "pred")]
    pub pred_file: Option<PathBuf>,
    /// Gold corpus to score against (`eval`).
    #[arg(long = "gold")]
    #[serde(rename = "gold")]
    pub gold_file: Option<PathBuf>,
    /// Directory receiving every output of the run.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub eval_mode: Option<EvalMode>,

    /// Shuffling seed for training, corpus seed for `synth`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter initialization seed (defaults to `seed`).
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    pub workers: Option<usize>,

    #[arg(long)]
    pub num_class: Option<usize>,
    /// Maximum relations predicted per entity pair.
    #[arg(long)]
    pub num_labels: Option<usize>,
    #[arg(long)]
    pub evi_thresh: Option<f64>,
    #[arg(long)]
    pub evi_lambda: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub num_train_epochs: Option<f64>,
    #[arg(long)]
    pub gradient_accumulation_steps: Option<usize>,
    #[arg(long)]
    pub train_batch_size: Option<usize>,
    /// Accepted for compatibility; inference is per document.
    #[arg(long)]
    pub test_batch_size: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Learning rate of the context encoder.
    #[arg(long)]
    pub lr_transformer: Option<f64>,
    /// Learning rate of the layers on top of the encoder.
    #[arg(long)]
    pub lr_added: Option<f64>,

    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_window: Option<usize>,
    #[arg(long)]
    pub gnn_layers: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub bilinear_groups: Option<usize>,

    /// Number of documents (`synth`).
    #[arg(long)]
    pub docs: Option<usize>,
    /// Remaining generator parameters (`synth`, config file only).
    #[arg(skip)]
    pub synth: Option<SynthSpec>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),* $(,)?) => {
        Settings { $($f: $top.$f.or($base.$f)),* }
    };
}

impl Settings {
    /// Fields set in `top` win over fields of `self`.
    pub fn overlay(self, top: Settings) -> Settings {
        overlay!(
            self, top, train_file, dev_file, test_file, checkpoint, silver_file, pred_file, gold_file, output_dir,
            eval_mode, seed, init_seed, workers, num_class, num_labels, evi_thresh, evi_lambda, warmup_ratio,
            num_train_epochs, gradient_accumulation_steps, train_batch_size, test_batch_size, max_grad_norm,
            lr_transformer, lr_added, d_model, num_heads, num_layers, ffn_dim, max_window, gnn_layers, enc_layers,
            bilinear_groups, docs, synth,
        )
    }

    /// Defaults of a command.
    pub fn defaults(command: Command) -> Settings {
        let mut s = Settings {
            output_dir: Some(PathBuf::from("output")),
            workers: Some(0),
            test_batch_size: Some(8),
            ..Settings::default()
        };
        if let Some(phase) = command.phase() {
            let t = TrainConfig::for_phase(phase);
            let e = EncoderConfig::default();
            let g = GegaConfig::default();
            s = Settings {
                seed: Some(t.seed),
                evi_lambda: Some(t.lambda),
                warmup_ratio: Some(t.warmup_ratio),
                num_train_epochs: Some(t.epochs as f64),
                gradient_accumulation_steps: Some(t.grad_accum),
                train_batch_size: Some(t.batch_size),
                max_grad_norm: Some(t.max_grad_norm),
                lr_transformer: Some(t.lr_encoder),
                lr_added: Some(t.lr_added),
                ..s
            };
            if command != Command::Finetune {
                s = Settings {
                    d_model: Some(e.d_model),
                    num_heads: Some(e.num_heads),
                    num_layers: Some(e.num_layers),
                    ffn_dim: Some(e.ffn_dim),
                    max_window: Some(e.max_window),
                    gnn_layers: Some(g.gnn_layers),
                    enc_layers: Some(g.enc_layers),
                    num_class: Some(g.num_class),
                    num_labels: Some(g.num_labels_cap),
                    evi_thresh: Some(g.evi_thresh),
                    ..s
                };
            }
        }
        if command == Command::Synth {
            let spec = SynthSpec::default();
            s.seed = Some(spec.seed);
            s.docs = Some(spec.num_docs);
            s.num_class = Some(spec.num_class);
        }
        s
    }

    /// Reads a TOML or JSON config file. A run manifest is accepted as well
    /// and contributes its resolved settings.
    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config: cannot read {}: {e}", path.display())))?;
        let bad = |e: String| CliError::Config(format!("config {}: {e}", path.display()));
        if path.extension().is_some_and(|e| e == "toml") {
            return toml::from_str(&text).map_err(|e| bad(e.message().to_string()));
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let value = match value.get("format").and_then(|f| f.as_str()) {
            Some(crate::manifest::MANIFEST_FORMAT) => value.get("settings").cloned().unwrap_or_default(),
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| bad(e.to_string()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("output"))
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(0)
    }

    /// An existing input path, or a config error naming the setting.
    pub fn input(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = value
            .clone()
            .ok_or_else(|| CliError::Config(format!("{field}: required for this command")))?;
        if !p.exists() {
            return Err(CliError::Config(format!("{field}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn train_config(&self, phase: TrainPhase) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::for_phase(phase);
        let epochs = self.num_train_epochs.unwrap_or(d.epochs as f64);
        if !(epochs >= 0.0 && epochs.fract() == 0.0) {
            return Err(CliError::Config(format!("num-train-epochs: {epochs} is not a whole number")));
        }
        let cfg = TrainConfig {
            phase,
            epochs: epochs as usize,
            batch_size: self.train_batch_size.unwrap_or(d.batch_size),
            grad_accum: self.gradient_accumulation_steps.unwrap_or(d.grad_accum),
            lr_encoder: self.lr_transformer.unwrap_or(d.lr_encoder),
            lr_added: self.lr_added.unwrap_or(d.lr_added),
            warmup_ratio: self.warmup_ratio.unwrap_or(d.warmup_ratio),
            max_grad_norm: self.max_grad_norm.unwrap_or(d.max_grad_norm),
            lambda: self.evi_lambda.unwrap_or(d.lambda),
            seed: self.seed.unwrap_or(d.seed),
            workers: self.workers(),
        };
        cfg.validate().map_err(|e| CliError::Config(kebab(&e.to_string())))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let (e, g) = (EncoderConfig::default(), GegaConfig::default());
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                d_model: self.d_model.unwrap_or(e.d_model),
                num_heads: self.num_heads.unwrap_or(e.num_heads),
                num_layers: self.num_layers.unwrap_or(e.num_layers),
                // Set from the token vocabulary when the model is built.
                vocab_size: 1,
                max_window: self.max_window.unwrap_or(e.max_window),
                ffn_dim: self.ffn_dim.unwrap_or(e.ffn_dim),
            },
            gega: GegaConfig {
                num_heads: self.num_heads.unwrap_or(g.num_heads),
                gnn_layers: self.gnn_layers.unwrap_or(g.gnn_layers),
                enc_layers: self.enc_layers.unwrap_or(g.enc_layers),
                num_class: self.num_class.unwrap_or(g.num_class),
                num_labels_cap: self.num_labels.unwrap_or(g.num_labels_cap),
                evi_thresh: self.evi_thresh.unwrap_or(g.evi_thresh),
                bilinear_groups: self.bilinear_groups,
                ffn_dim: self.ffn_dim.unwrap_or(g.ffn_dim),
            },
            init_seed: self.init_seed.or(self.seed).unwrap_or(0),
        };
        cfg.validate().map_err(|e| CliError::Config(kebab(&e.to_string())))?;
        Ok(cfg)
    }

    /// Applies the inference-time settings to a loaded model's config.
    pub fn inference_overrides(&self, config: &mut ModelConfig) -> Result<(), CliError> {
        if let Some(n) = self.num_labels {
            config.gega.num_labels_cap = n;
        }
        if let Some(t) = self.evi_thresh {
            config.gega.evi_thresh = t;
        }
        if let Some(n) = self.num_class {
            if n != config.gega.num_class {
                return Err(CliError::Config(format!(
                    "num-class: {n} differs from the checkpoint's {}",
                    config.gega.num_class
                )));
            }
        }
        config.validate().map_err(|e| CliError::Config(kebab(&e.to_string())))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let base = self.synth.clone().unwrap_or_default();
        SynthSpec {
            seed: self.seed.unwrap_or(base.seed),
            num_docs: self.docs.unwrap_or(base.num_docs),
            num_class: self.num_class.unwrap_or(base.num_class),
            ..base
        }
    }
}

/// Library messages name fields in snake case; flags use kebab case.
fn kebab(message: &str) -> String {
    let msg = message.strip_prefix("configuration: ").unwrap_or(message);
    msg.split(' ')
        .map(|word| {
            let field = word.trim_end_matches([':', ',']);
            if field.contains('_') && field.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                format!("{}{}", cli_name(field), &word[field.len()..])
            } else {
                word.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn cli_name(field: &str) -> String {
    match field {
        "epochs" => "num-train-epochs".into(),
        "batch_size" => "train-batch-size".into(),
        "grad_accum" => "gradient-accumulation-steps".into(),
        "lr_encoder" => "lr-transformer".into(),
        "lambda" => "evi-lambda".into(),
        "num_labels_cap" => "num-labels".into(),
        other => other.replace('_', "-"),
    }
}
