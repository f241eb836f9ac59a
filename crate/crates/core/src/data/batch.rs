//! Padded batch layouts consumed by the model.

use crate::data::{BOS, EOS, PAD};
use crate::error::Result;
use crate::model::ModelInput;
use crate::tensor::Mask;

/// Encoder inputs padded on the right to the longest sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub len: usize,
    /// Persona tokens per row, excluding the separator.
    pub persona_lens: Vec<usize>,
}

impl SourceBatch {
    pub fn collate(inputs: &[&ModelInput]) -> Self {
        let batch = inputs.len();
        let len = inputs.iter().map(|x| x.len()).max().unwrap_or(0);
        let mut out = SourceBatch {
            ids: vec![PAD; batch * len],
            type_ids: vec![0; batch * len],
            position_ids: vec![0; batch * len],
            pad: vec![true; batch * len],
            batch,
            len,
            persona_lens: inputs.iter().map(|x| x.persona_len).collect(),
        };
        for (b, x) in inputs.iter().enumerate() {
            let row = b * len;
            out.ids[row..row + x.len()].copy_from_slice(&x.ids);
            out.type_ids[row..row + x.len()].copy_from_slice(&x.type_ids);
            out.position_ids[row..row + x.len()].copy_from_slice(&x.position_ids);
            for (i, &p) in x.padding_mask.iter().enumerate() {
                out.pad[row + i] = p;
            }
        }
        out
    }

    /// `[batch, 1, 1, len]` key-padding mask.
    pub fn key_mask(&self) -> Mask {
        Mask::key_padding(&self.pad, self.batch, self.len).expect("pad length")
    }

    /// Persona tokens plus separator of every row.
    pub fn persona(&self) -> PersonaBatch {
        let rows: Vec<&[usize]> = (0..self.batch)
            .map(|b| &self.ids[b * self.len..b * self.len + self.persona_lens[b] + 1])
            .collect();
        PersonaBatch::collate(&rows)
    }
}

/// Persona-side token sequences (each ends with the separator), typed 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersonaBatch {
    pub ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PersonaBatch {
    pub fn collate(rows: &[&[usize]]) -> Self {
        let batch = rows.len();
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut out = PersonaBatch {
            ids: vec![PAD; batch * len],
            position_ids: vec![0; batch * len],
            pad: vec![true; batch * len],
            batch,
            len,
        };
        for (b, r) in rows.iter().enumerate() {
            for (i, &t) in r.iter().enumerate() {
                out.ids[b * len + i] = t;
                out.position_ids[b * len + i] = i;
                out.pad[b * len + i] = false;
            }
        }
        out
    }

    pub fn type_ids(&self) -> Vec<usize> {
        vec![0; self.ids.len()]
    }

    pub fn key_mask(&self) -> Mask {
        Mask::key_padding(&self.pad, self.batch, self.len).expect("pad length")
    }
}

/// Teacher-forced decoder inputs `[bos] ++ r` and targets `r ++ [eos]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TargetBatch {
    pub fn collate(responses: &[&[usize]]) -> Self {
        let batch = responses.len();
        let len = responses.iter().map(|r| r.len() + 1).max().unwrap_or(0);
        let mut out = TargetBatch {
            inputs: vec![PAD; batch * len],
            targets: vec![None; batch * len],
            pad: vec![true; batch * len],
            batch,
            len,
        };
        for (b, r) in responses.iter().enumerate() {
            let row = b * len;
            out.inputs[row] = BOS;
            out.inputs[row + 1..row + 1 + r.len()].copy_from_slice(r);
            for (i, &t) in r.iter().chain(&[EOS]).enumerate() {
                out.targets[row + i] = Some(t);
                out.pad[row + i] = false;
            }
        }
        out
    }

    /// Drop the end-of-sequence targets, keeping the positions.
    pub fn without_eos_targets(mut self) -> Self {
        for t in &mut self.targets {
            if *t == Some(EOS) {
                *t = None;
            }
        }
        self
    }

    /// Target tokens laid out position by position (`r ++ [eos]`), with
    /// padding where there is no target.
    pub fn target_ids(&self) -> Vec<usize> {
        self.pad
            .iter()
            .zip(&self.inputs)
            .enumerate()
            .map(|(i, (&p, _))| {
                if p {
                    PAD
                } else if i + 1 < self.inputs.len() && (i + 1) % self.len != 0 && !self.pad[i + 1] {
                    self.inputs[i + 1]
                } else {
                    EOS
                }
            })
            .collect()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.len).collect()
    }

    pub fn key_mask(&self) -> Mask {
        Mask::key_padding(&self.pad, self.batch, self.len).expect("pad length")
    }

    /// Self-attention mask for the left-to-right decoder.
    pub fn causal_mask(&self) -> Result<Mask> {
        Mask::causal(self.len).or(&self.key_mask())
    }

    pub fn token_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueBatch {
    pub source: SourceBatch,
    pub persona: PersonaBatch,
    pub target: TargetBatch,
}

impl DialogueBatch {
    pub fn new(source: SourceBatch, target: TargetBatch) -> Self {
        let persona = source.persona();
        Self {
            source,
            persona,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.source.batch
    }

    pub fn is_empty(&self) -> bool {
        self.source.batch == 0
    }
}

/// Premise/hypothesis batch for the unlikelihood path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceBatch {
    pub premise: PersonaBatch,
    pub hypothesis: TargetBatch,
}
