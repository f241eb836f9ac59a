//! Two-stage decoding and teacher-forced scoring.
//!
//! D1 decodes a draft token by token; its hidden states over the draft form
//! R1. D2 then reads the persona states and R1 and emits the final tokens by
//! per-position argmax, so the final response has the draft's length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_dialogue, DialogueBatch, DialogueExample, PersonaBatch, SourceBatch, TargetBatch, Vocab, BOS, EOS, MASK,
    PAD, SEP, UNK,
};
use crate::error::{Error, Result};
use crate::model::{build_input, build_masked_input, Ablation, BobModel, ModelInput};
use crate::objectives::MaskedBatch;
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Candidates kept under [`Strategy::TopK`].
    pub k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            k: 5,
            max_new_tokens: 16,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.strategy == Strategy::TopK && self.k == 0 {
            return Err(Error::Config("top-k decoding needs k >= 1".into()));
        }
        Ok(())
    }
}

/// Draft from D1 and final response from D2, as ids and text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub draft_ids: Vec<usize>,
    pub final_ids: Vec<usize>,
    pub draft: String,
    #[serde(rename = "final")]
    pub response: String,
}

/// Ids never emitted as response words.
fn is_reserved(id: usize) -> bool {
    matches!(id, PAD | UNK | SEP | BOS | MASK | EOS)
}

fn argmax_allowed(row: &[f64], allow: impl Fn(usize) -> bool) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if allow(i) && v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn pick(row: &[f64], allow: impl Fn(usize) -> bool, config: &DecodeConfig, rng: &mut ChaCha8Rng) -> usize {
    match config.strategy {
        Strategy::Greedy => argmax_allowed(row, allow),
        Strategy::TopK => {
            let mut cand: Vec<(usize, f64)> = row.iter().copied().enumerate().filter(|(i, _)| allow(*i)).collect();
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cand.truncate(config.k);
            let max = cand[0].1;
            let weights: Vec<f64> = cand.iter().map(|(_, v)| (v - max).exp()).collect();
            let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
            for ((id, _), w) in cand.iter().zip(&weights) {
                if u < *w {
                    return *id;
                }
                u -= w;
            }
            cand.last().unwrap().0
        }
    }
}

/// Generate a response for raw text inputs.
pub fn generate(
    model: &BobModel,
    vocab: &Vocab,
    personas: &[String],
    query: &str,
    config: &DecodeConfig,
) -> Result<Generation> {
    let personas: Vec<Vec<usize>> = personas.iter().map(|p| vocab.tokenize(p)).collect();
    let input = build_input(&personas, &vocab.tokenize(query), model.config())?;
    let (draft_ids, final_ids) = generate_ids(model, &input, config)?;
    Ok(Generation {
        draft: vocab.detokenize(&draft_ids),
        response: vocab.detokenize(&final_ids),
        draft_ids,
        final_ids,
    })
}

/// Two-stage decoding over an assembled input. Returns `(draft, final)`
/// ids. Ablations without a trained D2 return the draft as final.
pub fn generate_ids(model: &BobModel, input: &ModelInput, config: &DecodeConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    config.validate()?;
    model.check_finite()?;
    let cfg = model.config();
    // positions available to the decoder: bos plus emitted tokens
    let budget = config.max_new_tokens.min(cfg.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    if cfg.ablation == Ablation::EOnly {
        let draft = masked_decode(model, input, budget, config, &mut rng)?;
        return Ok((draft.clone(), draft));
    }

    let source = SourceBatch::collate(&[input]);
    let (h, p) = {
        let mut s = model.eval_session();
        let enc = model.encode(&mut s, &source)?;
        (s.graph.value(enc.h).clone(), s.graph.value(enc.p).clone())
    };
    let h_mask = source.key_mask();
    let mut draft: Vec<usize> = Vec::new();
    while draft.len() < budget {
        let target = TargetBatch::collate(&[&draft]);
        let mut s = model.eval_session();
        let hv = s.graph.constant(h.clone());
        let r = model.embed_target(&mut s, &target)?;
        let (_, logits) = model.decode_d1_from(&mut s, r, &target.causal_mask()?, hv, &h_mask)?;
        let v = cfg.vocab_size;
        let row = &s.graph.value(logits).data()[draft.len() * v..(draft.len() + 1) * v];
        let first = draft.is_empty();
        let next = pick(row, |i| !is_reserved(i) || (i == EOS && !first), config, &mut rng);
        if next == EOS {
            break;
        }
        draft.push(next);
    }
    if !cfg.ablation.uses_d2() {
        return Ok((draft.clone(), draft));
    }

    // R1: D1 states at the positions that emitted each draft token.
    let r1 = {
        let inputs = &draft[..draft.len() - 1];
        let target = TargetBatch::collate(&[inputs]);
        let mut s = model.eval_session();
        let hv = s.graph.constant(h);
        let r = model.embed_target(&mut s, &target)?;
        let (r1, _) = model.decode_d1_from(&mut s, r, &target.causal_mask()?, hv, &h_mask)?;
        s.graph.value(r1).clone()
    };
    let persona = source.persona();
    let final_ids = refine_states(model, &p, &persona, &r1)?;
    Ok((draft, final_ids))
}

/// Stage two alone: D2 over persona states and a fixed R1
/// (`[1, len, hidden]`), returning the per-position argmax.
pub fn refine(model: &BobModel, persona: &PersonaBatch, r1: &Tensor) -> Result<Vec<usize>> {
    let p = {
        let mut s = model.eval_session();
        let p = model.persona_states(&mut s, persona)?;
        s.graph.value(p).clone()
    };
    refine_states(model, &p, persona, r1)
}

fn refine_states(model: &BobModel, p: &Tensor, persona: &PersonaBatch, r1: &Tensor) -> Result<Vec<usize>> {
    let len = r1.shape()[1];
    let mut s = model.eval_session();
    let (pv, rv) = (s.graph.constant(p.clone()), s.graph.constant(r1.clone()));
    let (_, logits) = model.decode_d2(&mut s, pv, &persona.key_mask(), rv, &Mask::filled(&[1, 1, 1, len], false))?;
    let v = model.config().vocab_size;
    Ok(s.graph
        .value(logits)
        .data()
        .chunks(v)
        .map(|row| argmax_allowed(row, |i| !is_reserved(i)))
        .collect())
}

fn masked_decode(
    model: &BobModel,
    input: &ModelInput,
    budget: usize,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    while out.len() < budget {
        let Ok(x) = build_masked_input(input, &out, model.config()) else { break };
        let batch = MaskedBatch::collate(&[&x], &[EOS]);
        let mut s = model.eval_session();
        let logits = model.masked_lm_logits(&mut s, &batch.source)?;
        let v = model.config().vocab_size;
        let row = &s.graph.value(logits).data()[(x.len() - 1) * v..x.len() * v];
        let first = out.is_empty();
        let next = pick(row, |i| !is_reserved(i) || (i == EOS && !first), config, rng);
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Per-token log-probabilities of one response (its tokens then the end
/// token) under both views. `d1` is the generation view: D1 normally, the
/// masked-token encoder for [`Ablation::EOnly`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

/// Which log-probability stream a metric reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    D1,
    #[default]
    D2,
}

impl View {
    /// D2 where the ablation trains it, D1 otherwise.
    pub fn default_for(ablation: Ablation) -> Self {
        if ablation.uses_d2() {
            View::D2
        } else {
            View::D1
        }
    }
}

impl TokenScores {
    pub fn view(&self, view: View) -> &[f64] {
        match view {
            View::D1 => &self.d1,
            View::D2 => &self.d2,
        }
    }
}

/// Teacher-forced scores for one example given as text.
pub fn score_response(
    model: &BobModel,
    vocab: &Vocab,
    personas: &[String],
    query: &str,
    response: &str,
) -> Result<TokenScores> {
    let ex = DialogueExample {
        personas: personas.to_vec(),
        query: query.into(),
        response: response.into(),
    };
    if vocab.tokenize(response).is_empty() {
        return Err(Error::Empty("response"));
    }
    let mut out = score_examples(model, vocab, &[ex])?;
    out.pop().ok_or(Error::Empty("response"))
}

/// Scores for many examples, in order, evaluated in batches. Examples that
/// cannot be encoded are an error naming their index.
pub fn score_examples(model: &BobModel, vocab: &Vocab, examples: &[DialogueExample]) -> Result<Vec<TokenScores>> {
    const CHUNK: usize = 16;
    let mut encoded = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        encoded.push(encode_dialogue(ex, vocab, model.config()).ok_or_else(|| Error::Data {
            record: format!("example {i}"),
            message: "empty response or longer than max_len".into(),
        })?);
    }
    let mut out = Vec::with_capacity(examples.len());
    for chunk in encoded.chunks(CHUNK) {
        let batch = crate::data::collate_dialogues(&chunk.iter().collect::<Vec<_>>());
        let mut scores = score_batch(model, &batch)?;
        if model.config().ablation == Ablation::EOnly {
            for (sc, e) in scores.iter_mut().zip(chunk) {
                sc.d1 = masked_scores(model, &e.input, &e.response)?;
            }
        }
        out.extend(scores);
    }
    Ok(out)
}

/// D1 and D2 log-probabilities of every target in a dialogue batch.
pub fn score_batch(model: &BobModel, batch: &DialogueBatch) -> Result<Vec<TokenScores>> {
    let mut s = model.eval_session();
    let enc = model.encode(&mut s, &batch.source)?;
    let target = &batch.target;
    let (r1, l1) = model.decode_d1(&mut s, target, &enc)?;
    let (_, l2) = model.decode_d2(&mut s, enc.p, &enc.persona_mask, r1, &target.key_mask())?;
    let n1 = s.graph.cross_entropy(l1, &target.targets)?;
    let n2 = s.graph.cross_entropy(l2, &target.targets)?;
    let (n1, n2) = (s.graph.value(n1).data(), s.graph.value(n2).data());
    Ok((0..target.batch)
        .map(|b| {
            let rows = (b * target.len..(b + 1) * target.len).filter(|&i| target.targets[i].is_some());
            let (d1, d2) = rows.map(|i| (-n1[i], -n2[i])).unzip();
            TokenScores { d1, d2 }
        })
        .collect())
}

/// Masked-token log-probabilities of `r ++ [eos]`, one encoder pass per
/// position.
fn masked_scores(model: &BobModel, input: &ModelInput, response: &[usize]) -> Result<Vec<f64>> {
    let mut inputs = Vec::with_capacity(response.len() + 1);
    for k in 0..=response.len() {
        inputs.push(build_masked_input(input, &response[..k], model.config())?);
    }
    let targets: Vec<usize> = response.iter().copied().chain([EOS]).collect();
    let batch = MaskedBatch::collate(&inputs.iter().collect::<Vec<_>>(), &targets);
    let mut s = model.eval_session();
    let logits = model.masked_lm_logits(&mut s, &batch.source)?;
    let nll = s.graph.cross_entropy(logits, &batch.targets)?;
    let nll = s.graph.value(nll).data();
    Ok(batch
        .targets
        .iter()
        .zip(nll)
        .filter(|(t, _)| t.is_some())
        .map(|(_, v)| -v)
        .collect())
}
