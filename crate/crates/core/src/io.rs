//! Line-delimited dataset, prediction, history and report files, and
//! checkpoints. Every file is written to a temporary sibling and renamed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conversation::{Conversation, Utterance};
use crate::error::{Error, Result};
use crate::model::{param_group, ModelConfig, ModelParams, ParamGroup};
use crate::numerics::Matrix;
use crate::train::{EpochRecord, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "emotionic-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Conversations sharing one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub conversations: Vec<Conversation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    speaker: String,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationRecord {
    id: String,
    labels_space: Vec<String>,
    utterances: Vec<UtteranceRecord>,
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn json_lines<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).map_err(|e| Error::Io(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses dataset text; `line` numbers in errors are 1-based.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut labels: Option<Vec<String>> = None;
    let mut dim: Option<usize> = None;
    let mut conversations = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord = serde_json::from_str(raw).map_err(|e| Error::ParseError {
            line,
            message: e.to_string(),
        })?;
        let invalid = |cause: Error| Error::ValidationError {
            id: rec.id.clone(),
            cause: Box::new(cause),
        };
        match &labels {
            None => labels = Some(rec.labels_space.clone()),
            Some(l) if *l != rec.labels_space => {
                return Err(invalid(Error::InvalidConfig("labels_space differs from earlier lines".into())));
            }
            Some(_) => {}
        }
        let space = labels.as_ref().expect("set above");
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        for (t, u) in rec.utterances.iter().enumerate() {
            let label = match &u.label {
                None => None,
                Some(name) => Some(
                    space
                        .iter()
                        .position(|l| l == name)
                        .ok_or_else(|| Error::UnknownLabel(name.clone()))?,
                ),
            };
            match dim {
                None => dim = Some(u.features.len()),
                Some(d) if d != u.features.len() => return Err(invalid(Error::FeatureDimMismatch(t))),
                Some(_) => {}
            }
            utterances.push(Utterance::new(u.speaker.clone(), u.features.clone(), label));
        }
        let conv = Conversation::new(rec.id.clone(), utterances, space.len());
        conv.validate().map_err(invalid)?;
        conversations.push(conv);
    }
    Ok(Dataset {
        labels: labels.unwrap_or_default(),
        conversations,
    })
}

pub fn ingest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&text)
}

pub fn format_dataset(ds: &Dataset) -> Result<String> {
    json_lines(ds.conversations.iter().map(|c| ConversationRecord {
        id: c.id.clone(),
        labels_space: ds.labels.clone(),
        utterances: c
            .utterances
            .iter()
            .map(|u| UtteranceRecord {
                speaker: u.speaker.clone(),
                features: u.features.clone(),
                label: u.label.map(|l| ds.labels[l].clone()),
            })
            .collect(),
    }))
}

pub fn emit_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, format_dataset(ds)?.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub d_in: usize,
    pub labels_space: Vec<String>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, train: Option<&TrainConfig>, labels: &[String], params: &ModelParams<Matrix>) -> Self {
        let mut tensors = Vec::new();
        params.visit(&mut |name, m| {
            tensors.push(TensorRecord {
                name: name.to_owned(),
                group: param_group(name),
                rows: m.rows(),
                cols: m.cols(),
                data: m.data().to_vec(),
            })
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.clone(),
            train: train.cloned(),
            d_in: params.d_in(),
            labels_space: labels.to_vec(),
            tensors,
        }
    }

    /// Rebuilds the parameter tree, checking names and shapes.
    pub fn params(&self) -> Result<ModelParams<Matrix>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {:?} version {}",
                self.format, self.version
            )));
        }
        let k = self.labels_space.len();
        self.model
            .validate(self.d_in, k)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = skeleton(&self.model, self.d_in, k);
        let names = params.names();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for ((slot, name), rec) in params.leaves_mut().into_iter().zip(&names).zip(&self.tensors) {
            if rec.name != *name || (rec.rows, rec.cols) != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {}x{} does not match {name} {:?}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    slot.shape()
                )));
            }
            *slot = Matrix::from_vec(rec.rows, rec.cols, rec.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(params)
    }
}

/// Zero-valued parameters with the right shapes.
fn skeleton(cfg: &ModelConfig, d_in: usize, k: usize) -> ModelParams<Matrix> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let p = ModelParams::init(cfg, d_in, k, &mut rng).expect("validated config");
    p.zeros_like()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingCheckpoint),
        Err(e) => return Err(e.into()),
    };
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn format_history(history: &[EpochRecord]) -> Result<String> {
    json_lines(history)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_atomic(path, format_history(history)?.as_bytes())
}

pub fn write_records(path: &Path, records: &[Value]) -> Result<()> {
    write_atomic(path, json_lines(records)?.as_bytes())
}

/// Parses every non-empty line of a line-delimited JSON file.
pub fn read_records(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ParseError {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"c1","labels_space":["neu","joy"],"utterances":[{"speaker":"A","features":[0.5,1.0],"label":"joy"},{"speaker":"B","features":[0.1,-2.0]}]}"#;

    #[test]
    fn parses_one_line() {
        let ds = parse_dataset(LINE).unwrap();
        assert_eq!(ds.labels, vec!["neu", "joy"]);
        assert_eq!(ds.conversations.len(), 1);
        let c = &ds.conversations[0];
        assert_eq!(c.len(), 2);
        assert_eq!(c.utterances[0].label, Some(1));
        assert_eq!(c.utterances[1].label, None);
        assert_eq!(parse_dataset(&format_dataset(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn parse_errors() {
        let bad = LINE.replace("\"joy\"}", "\"sad\"}");
        assert_eq!(parse_dataset(&bad), Err(Error::UnknownLabel("sad".into())));
        let err = parse_dataset(&format!("{LINE}\n{{oops")).unwrap_err();
        assert!(matches!(err, Error::ParseError { line: 2, .. }));
        let ragged = LINE.replace("[0.1,-2.0]", "[0.1]");
        assert!(matches!(
            parse_dataset(&ragged),
            Err(Error::ValidationError { ref id, ref cause }) if id == "c1" && **cause == Error::FeatureDimMismatch(1)
        ));
        let empty = r#"{"id":"e","labels_space":["a"],"utterances":[]}"#;
        assert!(matches!(parse_dataset(empty), Err(Error::ValidationError { .. })));
    }

    #[test]
    fn missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_checkpoint(&dir.path().join("none.json")), Err(Error::MissingCheckpoint));
    }
}
