//! Vocabulary, corpora, batching and the synthetic closed-world generator.

mod batch;
mod corpus;
mod files;
pub mod synth;
mod vocab;

pub use batch::{DialogueBatch, InferenceBatch, PersonaBatch, SourceBatch, TargetBatch};
pub use corpus::{
    load_dialogue_jsonl, load_eval_jsonl, load_inference_jsonl, parse_label, split_inference, to_jsonl,
    write_jsonl, DialogueExample, EvalTuple, InferencePair, Label, LineError, Loaded,
};
pub use files::{load_corpus, write_corpus, LoadedCorpus, DIALOGUE_FILE, EVAL_FILE, INFERENCE_FILE};
pub use synth::{rule_label, synth_generate, synth_generate_with, SynthConfig, SynthCorpus};
pub use vocab::{split_words, Vocab, BOS, EOS, MASK, PAD, SEP, UNK};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{build_input, ModelConfig, ModelInput};

/// A dialogue example after tokenization and input assembly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDialogue {
    pub input: ModelInput,
    pub response: Vec<usize>,
}

/// A premise/hypothesis pair after tokenization. The premise ends with `[s]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
}

/// Examples that survived encoding, plus how many were dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded<T> {
    pub items: Vec<T>,
    pub skipped: usize,
}

impl<T> Default for Encoded<T> {
    fn default() -> Self {
        Self {
            items: Vec::new(),
            skipped: 0,
        }
    }
}

/// Tokenize and lay out dialogues. Examples with an empty response, or whose
/// query or response cannot fit `max_len`, are skipped and counted.
pub fn encode_dialogues(examples: &[DialogueExample], vocab: &Vocab, config: &ModelConfig) -> Encoded<EncodedDialogue> {
    let mut out = Encoded::default();
    for ex in examples {
        match encode_dialogue(ex, vocab, config) {
            Some(e) => out.items.push(e),
            None => out.skipped += 1,
        }
    }
    out
}

pub fn encode_dialogue(ex: &DialogueExample, vocab: &Vocab, config: &ModelConfig) -> Option<EncodedDialogue> {
    let response = vocab.tokenize(&ex.response);
    if response.is_empty() || response.len() + 1 > config.max_len {
        return None;
    }
    let personas: Vec<Vec<usize>> = ex.personas.iter().map(|p| vocab.tokenize(p)).collect();
    let input = build_input(&personas, &vocab.tokenize(&ex.query), config).ok()?;
    Some(EncodedDialogue { input, response })
}

/// Tokenize inference pairs. Premises are left-truncated to `max_len`
/// including the separator; empty or overlong hypotheses are skipped.
pub fn encode_pairs(pairs: &[InferencePair], vocab: &Vocab, config: &ModelConfig) -> Encoded<EncodedPair> {
    let mut out = Encoded::default();
    for p in pairs {
        let hypothesis = vocab.tokenize(&p.hypothesis);
        if hypothesis.is_empty() || hypothesis.len() + 1 > config.max_len {
            out.skipped += 1;
            continue;
        }
        let mut premise = vocab.tokenize(&p.premise);
        let keep = config.max_len - 1;
        if premise.len() > keep {
            premise.drain(..premise.len() - keep);
        }
        premise.push(SEP);
        out.items.push(EncodedPair { premise, hypothesis });
    }
    out
}

pub fn collate_dialogues(items: &[&EncodedDialogue]) -> DialogueBatch {
    let inputs: Vec<&ModelInput> = items.iter().map(|e| &e.input).collect();
    let responses: Vec<&[usize]> = items.iter().map(|e| e.response.as_slice()).collect();
    DialogueBatch::new(SourceBatch::collate(&inputs), TargetBatch::collate(&responses))
}

pub fn collate_pairs(items: &[&EncodedPair]) -> InferenceBatch {
    let premises: Vec<&[usize]> = items.iter().map(|e| e.premise.as_slice()).collect();
    let hyps: Vec<&[usize]> = items.iter().map(|e| e.hypothesis.as_slice()).collect();
    InferenceBatch {
        premise: PersonaBatch::collate(&premises),
        hypothesis: TargetBatch::collate(&hyps),
    }
}

/// One shuffled epoch of padded batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchStream {
    pub batches: Vec<DialogueBatch>,
    pub skipped: usize,
}

/// Encode, shuffle by `seed`, and cut into batches of `batch_size`, each
/// padded to its own longest sequence.
pub fn make_batches(
    examples: &[DialogueExample],
    vocab: &Vocab,
    config: &ModelConfig,
    batch_size: usize,
    seed: u64,
) -> BatchStream {
    let encoded = encode_dialogues(examples, vocab, config);
    let mut order: Vec<usize> = (0..encoded.items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let items: Vec<&EncodedDialogue> = chunk.iter().map(|&i| &encoded.items[i]).collect();
            collate_dialogues(&items)
        })
        .collect();
    BatchStream {
        batches,
        skipped: encoded.skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(personas: &[&str], query: &str, response: &str) -> DialogueExample {
        DialogueExample {
            personas: personas.iter().map(|s| s.to_string()).collect(),
            query: query.into(),
            response: response.into(),
        }
    }

    fn setup() -> (Vec<DialogueExample>, Vocab, ModelConfig) {
        let corpus = synth_generate(4, 9).unwrap();
        let vocab = Vocab::build(corpus.dialogues.iter().flat_map(|d| d.texts()));
        let config = ModelConfig::desk(vocab.len());
        (corpus.dialogues, vocab, config)
    }

    #[test]
    fn identical_examples_need_no_padding() {
        let (_, vocab, config) = setup();
        let e = ex(&["i have a dog"], "do you have a pet ?", "yes i have a dog");
        let stream = make_batches(&vec![e; 4], &vocab, &config, 4, 0);
        let b = &stream.batches[0];
        assert!(b.source.pad.iter().all(|p| !p));
        assert!(b.target.pad.iter().all(|p| !p));
        assert!(b.persona.pad.iter().all(|p| !p));
    }

    #[test]
    fn equal_seeds_equal_order() {
        let (d, vocab, config) = setup();
        let a = make_batches(&d, &vocab, &config, 5, 3);
        let b = make_batches(&d, &vocab, &config, 5, 3);
        let c = make_batches(&d, &vocab, &config, 5, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batch_rows_reconstruct_examples() {
        let (d, vocab, config) = setup();
        let stream = make_batches(&d, &vocab, &config, 7, 1);
        let mut seen = 0;
        for b in &stream.batches {
            for row in 0..b.len() {
                let s = &b.source;
                let ids: Vec<usize> = (0..s.len)
                    .filter(|&i| !s.pad[row * s.len + i])
                    .map(|i| s.ids[row * s.len + i])
                    .collect();
                let t = &b.target;
                let resp: Vec<usize> = (1..t.len)
                    .filter(|&i| !t.pad[row * t.len + i])
                    .map(|i| t.inputs[row * t.len + i])
                    .collect();
                let hit = d.iter().any(|e| {
                    let enc = encode_dialogue(e, &vocab, &config).unwrap();
                    enc.input.ids == ids && enc.response == resp
                });
                assert!(hit, "row {row} does not match any example");
                seen += 1;
            }
        }
        assert_eq!(seen, d.len());
        assert_eq!(stream.skipped, 0);
    }

    #[test]
    fn overlong_and_empty_examples_are_counted() {
        let (_, vocab, mut config) = setup();
        config.max_len = 6;
        let long = ex(&[], "do you have a pet ?", "yes");
        let ok = ex(&["i have a dog"], "a pet ?", "yes i have a dog");
        let empty = ex(&[], "a pet ?", "  ");
        let stream = make_batches(&[long, ok, empty], &vocab, &config, 8, 0);
        assert_eq!(stream.skipped, 2);
        assert_eq!(stream.batches[0].len(), 1);
    }

    #[test]
    fn unlikelihood_premises_end_with_separator() {
        let (_, vocab, config) = setup();
        let pairs = vec![InferencePair {
            premise: "i have a dog".into(),
            hypothesis: "i have a cat".into(),
            label: Label::Contradict,
        }];
        let enc = encode_pairs(&pairs, &vocab, &config);
        assert_eq!(*enc.items[0].premise.last().unwrap(), SEP);
        let b = collate_pairs(&enc.items.iter().collect::<Vec<_>>());
        assert_eq!(b.hypothesis.inputs[0], BOS);
        assert_eq!(b.hypothesis.targets.last().unwrap(), &Some(EOS));
    }
}
