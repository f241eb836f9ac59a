use std::fs;
use std::path::Path;

use super::corpus::{load_dialogue_jsonl, load_eval_jsonl, load_inference_jsonl, write_jsonl, LineError};
use super::synth::SynthCorpus;
use crate::error::{Error, Result};

pub const DIALOGUE_FILE: &str = "dialogues.jsonl";
pub const INFERENCE_FILE: &str = "inference.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

/// Write the three corpus files into `dir`, creating it if needed.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &SynthCorpus) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(dir.join(DIALOGUE_FILE), &corpus.dialogues)?;
    write_jsonl(dir.join(INFERENCE_FILE), &corpus.inference)?;
    write_jsonl(dir.join(EVAL_FILE), &corpus.eval)
}

/// Corpus read from a directory with the malformed lines of each file.
#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub corpus: SynthCorpus,
    pub errors: Vec<(String, LineError)>,
}

/// Read whichever of the three corpus files exist in `dir`. A missing
/// directory is an error; a missing file loads as empty.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Data {
            record: dir.display().to_string(),
            message: "data directory not found".into(),
        });
    }
    let mut out = LoadedCorpus::default();
    let mut note = |file: &str, errors: Vec<LineError>| {
        out.errors.extend(errors.into_iter().map(|e| (file.to_string(), e)));
    };
    if dir.join(DIALOGUE_FILE).exists() {
        let l = load_dialogue_jsonl(dir.join(DIALOGUE_FILE))?;
        note(DIALOGUE_FILE, l.errors);
        out.corpus.dialogues = l.items;
    }
    if dir.join(INFERENCE_FILE).exists() {
        let l = load_inference_jsonl(dir.join(INFERENCE_FILE))?;
        note(INFERENCE_FILE, l.errors);
        out.corpus.inference = l.items;
    }
    if dir.join(EVAL_FILE).exists() {
        let l = load_eval_jsonl(dir.join(EVAL_FILE))?;
        note(EVAL_FILE, l.errors);
        out.corpus.eval = l.items;
    }
    Ok(out)
}
