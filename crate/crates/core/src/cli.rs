//! Command-line front end.
//!
//! Every command prints one JSON line on success. Failures print one JSON
//! error record (`{"error": kind, "message": ...}`) to stderr and exit non-zero.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conversation::Conversation;
use crate::diagru::DecayConfig;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io::{self, Checkpoint, Dataset};
use crate::metrics::{self, confusion, f1_scores, ConfusionMatrix, F1Variant, Metric};
use crate::model::{predict, HeadKind, ModelConfig};
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{train_loop, Precision, Profile, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "emotionic", version, about = "Emotion labelling of conversations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.json and history.jsonl into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on labelled data; writes a line-delimited report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Decode label sequences.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the model gradient on a fixed tiny problem.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "skip-crf")]
        head: HeadArg,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum HeadArg {
    SkipCrf,
    LinearChain,
    Softmax,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::SkipCrf => HeadKind::SkipCrf,
            HeadArg::LinearChain => HeadKind::LinearChain,
            HeadArg::Softmax => HeadKind::Softmax,
        }
    }
}

/// Optional replacements for profile defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr_ext: Option<f64>,
    pub lr_cls: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub head: Option<HeadKind>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub immha_depth: Option<usize>,
    pub d_h: Option<usize>,
    pub diagru_depth: Option<usize>,
    pub max_len: Option<usize>,
    pub decay: Option<DecayConfig>,
}

/// Contents of the `--config` TOML file of `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub profile: Profile,
    /// `weighted-F1`, `macro-F1`, `accuracy` or `micro-F1-excluding:<label>`.
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub model: ModelOverrides,
}

fn default_metric() -> String {
    "weighted-F1".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::default(),
            metric: default_metric(),
            train: TrainOverrides::default(),
            model: ModelOverrides::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_owned()))
    }

    pub fn resolve(&self) -> (ModelConfig, TrainConfig) {
        let mut t = self.profile.train_config(0);
        let o = &self.train;
        t.lr_ext = o.lr_ext.unwrap_or(t.lr_ext);
        t.lr_cls = o.lr_cls.unwrap_or(t.lr_cls);
        t.weight_decay = o.weight_decay.unwrap_or(t.weight_decay);
        t.batch_size = o.batch_size.unwrap_or(t.batch_size);
        t.dropout_rate = o.dropout_rate.unwrap_or(t.dropout_rate);
        t.max_epochs = o.max_epochs.unwrap_or(t.max_epochs);
        t.seed = o.seed.unwrap_or(t.seed);
        t.precision = o.precision.unwrap_or(t.precision);

        let mut m = self.profile.model_config();
        let o = &self.model;
        m.head = o.head.unwrap_or(m.head);
        m.d_model = o.d_model.unwrap_or(m.d_model);
        m.heads = o.heads.unwrap_or(m.heads);
        m.d_ff = o.d_ff.unwrap_or(m.d_ff);
        m.immha_depth = o.immha_depth.unwrap_or(m.immha_depth);
        m.d_h = o.d_h.unwrap_or(m.d_h);
        m.diagru_depth = o.diagru_depth.unwrap_or(m.diagru_depth);
        m.max_len = o.max_len.unwrap_or(m.max_len);
        m.decay = o.decay.unwrap_or(m.decay);
        (m, t)
    }
}

/// Resolves a metric name against the label space.
pub fn parse_metric(name: &str, labels: &[String]) -> Result<Metric> {
    match name {
        "weighted-F1" => Ok(Metric::WeightedF1),
        "macro-F1" => Ok(Metric::MacroF1),
        "accuracy" => Ok(Metric::Accuracy),
        other => match other.strip_prefix("micro-F1-excluding:") {
            Some(label) => labels
                .iter()
                .position(|l| l == label)
                .map(Metric::MicroF1Excluding)
                .ok_or_else(|| Error::UnknownLabel(label.to_owned())),
            None => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        },
    }
}

/// `synth --config` file: the conversation count and a `[generator]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    #[serde(default = "default_count")]
    pub conversations: usize,
    #[serde(default)]
    pub generator: SynthConfig,
}

fn default_count() -> usize {
    1000
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<(Checkpoint, crate::model::ModelParams<crate::numerics::Matrix>)> {
    let ckpt = io::load_checkpoint(path)?;
    let params = ckpt.params()?;
    Ok((ckpt, params))
}

fn check_compatible(ds: &Dataset, ckpt: &Checkpoint) -> Result<()> {
    if !ds.conversations.is_empty() && ds.labels != ckpt.labels_space {
        return Err(Error::InvalidConfig("dataset label space differs from the checkpoint's".into()));
    }
    match ds.conversations.first() {
        Some(c) if c.feature_dim() != ckpt.d_in => Err(Error::ShapeMismatch(format!(
            "dataset features have {} dims, checkpoint expects {}",
            c.feature_dim(),
            ckpt.d_in
        ))),
        _ => Ok(()),
    }
}

fn cmd_train(data: &Path, val: &Path, config: Option<&Path>, out: &Path) -> Result<Value> {
    let run = match config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    let (model_cfg, train_cfg) = run.resolve();
    let train = io::ingest(data)?;
    let valid = io::ingest(val)?;
    if !valid.conversations.is_empty() && valid.labels != train.labels {
        return Err(Error::InvalidConfig("validation label space differs from training".into()));
    }
    let metric = parse_metric(&run.metric, &train.labels)?;
    let outcome = train_loop(&train.conversations, &valid.conversations, &model_cfg, &train_cfg, metric)?;
    fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.json");
    let hist_path = out.join("history.jsonl");
    io::save_checkpoint(&ckpt_path, &Checkpoint::new(&model_cfg, Some(&train_cfg), &train.labels, &outcome.params))?;
    io::write_history(&hist_path, &outcome.history)?;
    Ok(json!({
        "command": "train",
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "checkpoint": ckpt_path,
        "history": hist_path,
    }))
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ExcludedOnlyData) => Ok(None),
        Err(e) => Err(e),
    }
}

fn subset_record(name: &str, pairs: &[(usize, usize)], k: usize) -> Result<Value> {
    let (g, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let cm = confusion(&g, &p, k)?;
    Ok(json!({
        "record": "subset",
        "name": name,
        "utterances": pairs.len(),
        "accuracy": if pairs.is_empty() { None } else { Some(metrics::accuracy(&cm)) },
        "weighted_f1": optional(f1_scores(&cm, F1Variant::Weighted, None))?,
    }))
}

/// Report records for `preds` against the gold labels of `convs`.
pub fn report_records(convs: &[Conversation], preds: &[Vec<usize>], labels: &[String]) -> Result<Vec<Value>> {
    let k = labels.len();
    let mut cm = ConfusionMatrix::new(k);
    let mut inertia = Vec::new();
    let mut contagion = Vec::new();
    for (conv, pred) in convs.iter().zip(preds) {
        cm.merge(&confusion(&conv.gold_labels()?, pred, k)?);
        let (i, c) = metrics::subset_pairs(conv, pred)?;
        inertia.extend(i);
        contagion.extend(c);
    }
    let majority = (0..k).max_by_key(|&c| (cm.support(c), std::cmp::Reverse(c))).unwrap_or(0);
    let mut records = vec![json!({
        "record": "summary",
        "conversations": convs.len(),
        "utterances": cm.total(),
        "accuracy": metrics::accuracy(&cm),
        "weighted_f1": optional(f1_scores(&cm, F1Variant::Weighted, None))?,
        "macro_f1": optional(f1_scores(&cm, F1Variant::Macro, None))?,
        "micro_f1": optional(f1_scores(&cm, F1Variant::Micro, None))?,
        "micro_f1_excluding_majority": optional(f1_scores(&cm, F1Variant::Micro, Some(majority)))?,
        "macro_f1_excluding_majority": optional(f1_scores(&cm, F1Variant::Macro, Some(majority)))?,
        "majority_label": labels.get(majority),
    })];
    records.push(json!({
        "record": "confusion",
        "orientation": "rows are gold labels, columns are predicted labels",
        "labels": labels,
        "counts": cm.counts,
    }));
    for (c, s) in metrics::class_scores(&cm).iter().enumerate() {
        records.push(json!({
            "record": "class",
            "label": labels[c],
            "precision": s.precision,
            "recall": s.recall,
            "f1": s.f1,
            "support": s.support,
        }));
    }
    records.push(subset_record("inertia", &inertia, k)?);
    records.push(subset_record("contagion", &contagion, k)?);
    Ok(records)
}

fn cmd_eval(data: &Path, checkpoint: &Path, report: &Path) -> Result<Value> {
    let (ckpt, params) = load_model(checkpoint)?;
    let ds = io::ingest(data)?;
    check_compatible(&ds, &ckpt)?;
    let preds = ds
        .conversations
        .iter()
        .map(|c| predict(c, &params, &ckpt.model))
        .collect::<Result<Vec<_>>>()?;
    let records = report_records(&ds.conversations, &preds, &ckpt.labels_space)?;
    io::write_records(report, &records)?;
    Ok(json!({ "command": "eval", "report": report, "summary": records[0] }))
}

fn cmd_predict(data: &Path, checkpoint: &Path, out: &Path) -> Result<Value> {
    let (ckpt, params) = load_model(checkpoint)?;
    let ds = io::ingest(data)?;
    check_compatible(&ds, &ckpt)?;
    let mut records = Vec::with_capacity(ds.conversations.len());
    for conv in &ds.conversations {
        let labels: Vec<&str> = predict(conv, &params, &ckpt.model)?
            .into_iter()
            .map(|y| ckpt.labels_space[y].as_str())
            .collect();
        records.push(json!({ "id": conv.id, "labels": labels }));
    }
    io::write_records(out, &records)?;
    Ok(json!({ "command": "predict", "conversations": records.len(), "out": out }))
}

fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<Value> {
    let file: SynthFile = match config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::InvalidConfig(e.message().to_owned()))?,
        None => SynthFile {
            conversations: default_count(),
            generator: SynthConfig::default(),
        },
    };
    let ds = Dataset {
        labels: file.generator.label_names(),
        conversations: generate_dataset(&file.generator, file.conversations)?,
    };
    io::emit_dataset(out, &ds)?;
    Ok(json!({ "command": "synth", "conversations": ds.conversations.len(), "out": out }))
}

fn cmd_gradcheck(seed: u64, head: HeadKind) -> Result<Value> {
    let r = gradcheck::run(seed, head)?;
    Ok(json!({
        "command": "gradcheck",
        "status": if r.pass { "PASS" } else { "FAIL" },
        "max_rel_err": r.max_rel_err,
        "tolerance": gradcheck::TOLERANCE,
        "coordinates": r.coordinates,
        "worst": r.worst,
    }))
}

pub fn execute(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Train { data, val, config, out } => cmd_train(data, val, config.as_deref(), out),
        Command::Eval { data, checkpoint, report } => cmd_eval(data, checkpoint, report),
        Command::Predict { data, checkpoint, out } => cmd_predict(data, checkpoint, out),
        Command::Synth { config, out } => cmd_synth(config.as_deref(), out),
        Command::Gradcheck { seed, head } => cmd_gradcheck(*seed, (*head).into()),
    }
}

pub fn error_record(kind: &str, message: &str) -> Value {
    json!({ "error": kind, "message": message })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let _ = writeln!(stderr, "{}", error_record("UsageError", msg.trim()));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(v) => {
            let _ = writeln!(stdout, "{v}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_record(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_on_top_of_the_profile() {
        let run = RunConfig::parse("profile = \"meld\"\n[train]\nseed = 9\n[model]\nd_h = 5\n").unwrap();
        let (m, t) = run.resolve();
        assert_eq!((t.lr_ext, t.lr_cls, t.batch_size, t.seed), (5e-5, 9e-3, 128, 9));
        assert_eq!((m.immha_depth, m.diagru_depth, m.d_h), (3, 3, 5));
    }

    #[test]
    fn unknown_keys_and_types_are_rejected() {
        assert!(RunConfig::parse("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::parse("[train]\nbatch_size = \"big\"\n").is_err());
        assert!(RunConfig::parse("profile = \"imdb\"\n").is_err());
    }

    #[test]
    fn metric_names() {
        let labels = vec!["neutral".to_string(), "joy".to_string()];
        assert_eq!(parse_metric("micro-F1-excluding:neutral", &labels), Ok(Metric::MicroF1Excluding(0)));
        assert_eq!(parse_metric("accuracy", &labels), Ok(Metric::Accuracy));
        assert_eq!(
            parse_metric("micro-F1-excluding:anger", &labels),
            Err(Error::UnknownLabel("anger".into()))
        );
    }
}
