use std::path::{Path, PathBuf};

use gega::corpus::{generate_synthetic, load_docred, synthetic_relations, write_docred, Dataset, RelationVocab, Vocabulary};
use gega::metrics::{evaluate, load_official, write_official, Report};
use gega::pipeline::{
    finetune_student, infer_fusion, infer_silver, infer_single, train_student, train_teacher, write_log, Checkpoint,
    LogRecord, SilverAnnotation, TrainPhase,
};
use gega::Model;

use crate::config::{EvalMode, Settings};
use crate::manifest::{digests, Manifest, MANIFEST_FORMAT};
use crate::{CliError, Command};

const MODEL_FILE: &str = "model.json";
const LOG_FILE: &str = "train_log.jsonl";
const SILVER_FILE: &str = "silver.json";
const RESULT_FILE: &str = "result.json";
const DEV_METRICS_FILE: &str = "dev_metrics.json";
const METRICS_FILE: &str = "metrics.json";
const SYNTH_FILE: &str = "synth.json";

/// Checks everything a command needs before any work starts.
pub fn validate(command: Command, s: &Settings) -> Result<(), CliError> {
    match command {
        Command::TrainTeacher | Command::TrainStudent | Command::Finetune => {
            s.input("train-file", &s.train_file)?;
            if s.dev_file.is_some() {
                s.input("dev-file", &s.dev_file)?;
            }
            s.train_config(command.phase().expect("training command"))?;
            match command {
                Command::TrainStudent => {
                    s.input("silver-file", &s.silver_file)?;
                    if s.checkpoint.is_some() {
                        checkpoint_path(s)?;
                    }
                    s.model_config()?;
                }
                Command::Finetune => {
                    checkpoint_path(s)?;
                }
                _ => {
                    s.model_config()?;
                }
            }
        }
        Command::InferSilver => {
            checkpoint_path(s)?;
            s.input("train-file", &s.train_file)?;
        }
        Command::Infer => {
            checkpoint_path(s)?;
            s.input("test-file", &s.test_file)?;
            if s.eval_mode.is_none() {
                return Err(CliError::Config("eval-mode: required for infer (single or fusion)".into()));
            }
        }
        Command::Eval => {
            s.input("pred", &s.pred_file)?;
            s.input("gold", &s.gold_file)?;
            if s.train_file.is_some() {
                s.input("train-file", &s.train_file)?;
            }
        }
        Command::Synth => {
            let spec = s.synth_spec();
            if spec.num_docs == 0 {
                return Err(CliError::Config("docs: must be positive".into()));
            }
        }
    }
    Ok(())
}

/// Parses every input a command would read, without training or writing.
pub fn check_inputs(command: Command, s: &Settings) -> Result<(), CliError> {
    let mut relations = RelationVocab::default();
    for path in [&s.train_file, &s.dev_file, &s.test_file, &s.gold_file].into_iter().flatten() {
        load(path, &mut relations)?;
    }
    if command == Command::TrainStudent {
        if let Some(path) = &s.silver_file {
            SilverAnnotation::load(path)?;
        }
    }
    if s.checkpoint.is_some() {
        let model: Model = Checkpoint::load(checkpoint_path(s)?)?.to_model()?;
        log::info!("checkpoint: {} parameters", model.params.numel());
    }
    if let Some(path) = &s.pred_file {
        result_relations(path, &mut relations)?;
        load_official(path, &relations)?;
    }
    Ok(())
}

/// File or run directory holding `model.json`.
fn checkpoint_path(s: &Settings) -> Result<PathBuf, CliError> {
    let p = s.input("checkpoint", &s.checkpoint)?;
    if p.is_dir() {
        let file = p.join(MODEL_FILE);
        if !file.is_file() {
            return Err(CliError::Config(format!("checkpoint: {} does not exist", file.display())));
        }
        return Ok(file);
    }
    Ok(p)
}

/// Input and output files recorded in the manifest.
#[derive(Default)]
struct Files {
    inputs: Vec<(&'static str, PathBuf)>,
    outputs: Vec<(&'static str, PathBuf)>,
}

pub fn execute(command: Command, s: &Settings) -> Result<(), CliError> {
    let out = s.output_dir();
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Config(format!("output-dir: cannot create {}: {e}", out.display())))?;
    let mut files = Files::default();
    match command {
        Command::TrainTeacher => train_new(s, &out, TrainPhase::Teacher, &mut files)?,
        Command::TrainStudent => train_new(s, &out, TrainPhase::StudentDistill, &mut files)?,
        Command::Finetune => finetune(s, &out, &mut files)?,
        Command::InferSilver => silver(s, &out, &mut files)?,
        Command::Infer => infer(s, &out, &mut files)?,
        Command::Eval => eval(s, &out, &mut files)?,
        Command::Synth => synth(s, &out, &mut files)?,
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        settings: s.clone(),
        inputs: digests(&files.inputs)?,
        outputs: digests(&files.outputs)?,
    };
    let path = manifest.write(&out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load(path: &Path, relations: &mut RelationVocab) -> Result<Dataset, CliError> {
    let data = load_docred(path, relations)?;
    log::info!("{}: {} documents, {} facts", path.display(), data.len(), data.num_facts());
    Ok(data)
}

fn load_model(s: &Settings, files: &mut Files) -> Result<Model, CliError> {
    let path = checkpoint_path(s)?;
    let model: Model = Checkpoint::load(&path)?.to_model()?;
    files.inputs.push(("checkpoint", path));
    Ok(model)
}

fn save_model(model: &Model, out: &Path, files: &mut Files) -> Result<(), CliError> {
    let path = out.join(MODEL_FILE);
    Checkpoint::from_model(model).save(&path)?;
    files.outputs.push(("model", path));
    Ok(())
}

fn log_step(r: &LogRecord) {
    log::debug!(
        "step {} epoch {} l_re {:.6} l_er {:.6} total {:.6} grad_norm {:.4}",
        r.step, r.epoch, r.l_re, r.l_er, r.total, r.grad_norm
    );
}

fn save_log(log: &[LogRecord], out: &Path, files: &mut Files) -> Result<(), CliError> {
    if let Some(last) = log.last() {
        log::info!("{} steps, final loss {:.6}", log.len(), last.total);
    }
    let path = out.join(LOG_FILE);
    write_log(&path, log)?;
    files.outputs.push(("train-log", path));
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Single-pass dev scores, with Ign-F1 relative to `train`.
fn dev_report(model: &Model, dev: &Dataset, train: &Dataset, workers: usize) -> Result<Report, CliError> {
    Ok(evaluate(&infer_single(model, dev, workers)?, dev, Some(train)))
}

/// Loads the dev corpus, if any, against the model's relation map.
fn load_dev(s: &Settings, model: &mut Model, files: &mut Files) -> Result<Option<Dataset>, CliError> {
    let Some(path) = &s.dev_file else {
        return Ok(None);
    };
    let dev = load(path, &mut model.relations)?;
    files.inputs.push(("dev", path.clone()));
    Ok(Some(dev))
}

/// Trains a freshly initialized teacher or student.
fn train_new(s: &Settings, out: &Path, phase: TrainPhase, files: &mut Files) -> Result<(), CliError> {
    let mut relations = RelationVocab::default();
    let mut tokens = Vec::new();
    if phase == TrainPhase::StudentDistill && s.checkpoint.is_some() {
        // Keep the teacher's token and relation maps so the student can be
        // fine-tuned on the teacher's annotated corpus without unknown words.
        let teacher = load_model(s, files)?;
        relations = teacher.relations;
        tokens = teacher.vocab.tokens().to_vec();
    }
    let train_path = s.train_file.clone().expect("validated");
    let train = load(&train_path, &mut relations)?;
    files.inputs.push(("train", train_path));
    let dev = match &s.dev_file {
        Some(p) => {
            files.inputs.push(("dev", p.clone()));
            Some(load(p, &mut relations)?)
        }
        None => None,
    };
    let mut vocab = Vocabulary::from_datasets(&[&train]);
    if !tokens.is_empty() {
        let known: std::collections::HashSet<&String> = tokens.iter().collect();
        let extra: Vec<String> = vocab.tokens().iter().filter(|t| !known.contains(t)).cloned().collect();
        tokens.extend(extra);
        vocab = Vocabulary::from_tokens(tokens);
    }
    let mut model = Model::new(s.model_config()?, vocab, relations)?;
    log::info!("model: {} parameters, {} relations", model.params.numel(), model.relations.len());

    let cfg = s.train_config(phase)?;
    let log = if phase == TrainPhase::Teacher {
        train_teacher(&mut model, &train, &cfg, log_step)?
    } else {
        let path = s.silver_file.clone().expect("validated");
        let silver = SilverAnnotation::load(&path)?;
        files.inputs.push(("silver", path));
        train_student(&mut model, &train, &silver, &cfg, log_step)?
    };
    save_model(&model, out, files)?;
    save_log(&log, out, files)?;
    if let Some(dev) = dev {
        let report = dev_report(&model, &dev, &train, s.workers())?;
        print!("dev\n{report}");
        let path = out.join(DEV_METRICS_FILE);
        write_json(&path, &report)?;
        files.outputs.push(("dev-metrics", path));
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct BeforeAfter {
    before: Report,
    after: Report,
}

fn finetune(s: &Settings, out: &Path, files: &mut Files) -> Result<(), CliError> {
    let mut model = load_model(s, files)?;
    s.inference_overrides(&mut model.config)?;
    let train_path = s.train_file.clone().expect("validated");
    let train = load(&train_path, &mut model.relations)?;
    files.inputs.push(("train", train_path));
    let dev = load_dev(s, &mut model, files)?;
    if model.relations.len() > model.num_class() {
        return Err(CliError::Config(format!(
            "num-class: the checkpoint has {} classes but the data uses {} relations",
            model.num_class(),
            model.relations.len()
        )));
    }
    let before = match &dev {
        Some(d) => Some(dev_report(&model, d, &train, s.workers())?),
        None => None,
    };
    let log = finetune_student(&mut model, &train, &s.train_config(TrainPhase::StudentFinetune)?, log_step)?;
    save_model(&model, out, files)?;
    save_log(&log, out, files)?;
    if let (Some(dev), Some(before)) = (dev, before) {
        let after = dev_report(&model, &dev, &train, s.workers())?;
        println!("dev F1 before {:.4} after {:.4}", before.re.f1, after.re.f1);
        print!("dev after\n{after}");
        let path = out.join(DEV_METRICS_FILE);
        write_json(&path, &BeforeAfter { before, after })?;
        files.outputs.push(("dev-metrics", path));
    }
    Ok(())
}

fn silver(s: &Settings, out: &Path, files: &mut Files) -> Result<(), CliError> {
    let mut model = load_model(s, files)?;
    s.inference_overrides(&mut model.config)?;
    let path = s.train_file.clone().expect("validated");
    let distant = load(&path, &mut model.relations)?;
    files.inputs.push(("train", path));
    let silver = infer_silver(&model, &distant, s.workers())?;
    let pairs: usize = silver.documents.iter().map(|d| d.pairs.len()).sum();
    log::info!("silver annotations for {pairs} pairs");
    let path = out.join(SILVER_FILE);
    silver.save(&path)?;
    files.outputs.push(("silver", path));
    Ok(())
}

fn infer(s: &Settings, out: &Path, files: &mut Files) -> Result<(), CliError> {
    let mut model = load_model(s, files)?;
    s.inference_overrides(&mut model.config)?;
    let path = s.test_file.clone().expect("validated");
    let mut relations = model.relations.clone();
    let test = load(&path, &mut relations)?;
    files.inputs.push(("test", path));
    let predictions = match s.eval_mode.expect("validated") {
        EvalMode::Single => infer_single(&model, &test, s.workers())?,
        EvalMode::Fusion => infer_fusion(&model, &test, s.workers())?,
    };
    log::info!("{} predictions", predictions.len());
    let path = out.join(RESULT_FILE);
    write_official(&path, &predictions, &model.relations)?;
    files.outputs.push(("result", path));
    if test.num_facts() > 0 {
        let report = evaluate(&predictions, &test, None);
        print!("{report}");
        let path = out.join(METRICS_FILE);
        write_json(&path, &report)?;
        files.outputs.push(("metrics", path));
    }
    Ok(())
}

/// Relation names used by a result file, so unknown names can be scored
/// as wrong instead of rejected.
fn result_relations(path: &Path, relations: &mut RelationVocab) -> Result<(), CliError> {
    let bad = |e: String| CliError::Config(format!("pred: {}: {e}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let records: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    for r in &records {
        if let Some(name) = r.get("r").and_then(|v| v.as_str()) {
            relations.intern(name);
        }
    }
    Ok(())
}

fn eval(s: &Settings, out: &Path, files: &mut Files) -> Result<(), CliError> {
    let mut relations = RelationVocab::default();
    let gold_path = s.gold_file.clone().expect("validated");
    let gold = load(&gold_path, &mut relations)?;
    files.inputs.push(("gold", gold_path));
    let train = match &s.train_file {
        Some(p) => {
            files.inputs.push(("train", p.clone()));
            Some(load(p, &mut relations)?)
        }
        None => None,
    };
    let pred_path = s.pred_file.clone().expect("validated");
    result_relations(&pred_path, &mut relations)?;
    let predictions = load_official(&pred_path, &relations)?;
    files.inputs.push(("pred", pred_path));
    let report = evaluate(&predictions, &gold, train.as_ref());
    print!("{report}");
    let path = out.join(METRICS_FILE);
    write_json(&path, &report)?;
    files.outputs.push(("metrics", path));
    Ok(())
}

fn synth(s: &Settings, out: &Path, files: &mut Files) -> Result<(), CliError> {
    let spec = s.synth_spec();
    let data = generate_synthetic(&spec).map_err(gega::Error::from)?;
    let path = out.join(SYNTH_FILE);
    write_docred(&path, &data, &synthetic_relations(spec.num_relation_types))?;
    log::info!("{} documents, {} facts", data.len(), data.num_facts());
    files.outputs.push(("synth", path));
    Ok(())
}
