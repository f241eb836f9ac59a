use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{
    dialogue_forward, masked_lm_term, ul_negative_term, ul_positive_term, LossBreakdown, MaskedBatch,
};
use crate::data::{
    collate_dialogues, collate_pairs, encode_dialogues, encode_pairs, split_inference, DialogueBatch,
    DialogueExample, EncodedDialogue, EncodedPair, InferenceBatch, InferencePair, Vocab, EOS,
};
use crate::error::{Error, Result};
use crate::model::{build_masked_input, Ablation, BobModel, ModelConfig, ModelInput};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the D2 likelihood inside L1.
    pub alpha: f64,
    /// Weight of the entailed-hypothesis likelihood inside L2.
    pub beta: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults for a randomly initialised model.
    fn default() -> Self {
        Self {
            alpha: 5e-3,
            beta: 0.1,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_steps: 2000,
            seed: 17,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning rate used with the BERT-base sized preset.
    pub fn paper() -> Self {
        Self {
            lr: 2e-5,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be finite and non-negative", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one optimisation step may consume. Parts an ablation does not
/// use are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepBatch {
    pub dialogue: Option<DialogueBatch>,
    pub masked: Option<MaskedBatch>,
    pub positive: Option<InferenceBatch>,
    pub negative: Option<InferenceBatch>,
}

/// Forward and backward pass for one step without updating anything.
/// Returns the loss breakdown and one gradient slot per parameter (`None`
/// for parameters the step never touched). `rng` drives dropout and is
/// advanced.
pub fn loss_gradients(
    model: &BobModel,
    batch: &StepBatch,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let ablation = model.config().ablation;
    let mut sess = model.train_session(rng.clone());
    // (term, weight) per loss slot: nll_d1, nll_d2, ul_pos, ul_neg
    let mut terms: [Option<Var>; 4] = [None; 4];
    if ablation == Ablation::EOnly {
        if let Some(m) = &batch.masked {
            terms[0] = Some(masked_lm_term(model, &mut sess, m)?);
        }
    } else {
        if let Some(d) = &batch.dialogue {
            let t = dialogue_forward(model, &mut sess, d, ablation.uses_d2())?;
            terms[0] = Some(t.nll_d1);
            terms[1] = t.nll_d2;
        }
        if ablation.uses_unlikelihood() {
            if let Some(p) = &batch.positive {
                terms[2] = Some(ul_positive_term(model, &mut sess, p)?);
            }
            if let Some(n) = &batch.negative {
                terms[3] = Some(ul_negative_term(model, &mut sess, n)?);
            }
        }
    }
    const NAMES: [&str; 4] = ["nll_d1", "nll_d2", "ul_pos", "ul_neg"];
    let mut values = [0.0; 4];
    for (i, t) in terms.iter().enumerate() {
        if let Some(v) = t {
            values[i] = sess.graph.value(*v).item();
            if !values[i].is_finite() {
                return Err(Error::NonFinite { term: NAMES[i] });
            }
        }
    }
    let weights = [1.0, config.alpha, config.beta, 1.0 - config.beta];
    let mut total: Option<Var> = None;
    for (t, w) in terms.iter().zip(weights) {
        if let Some(v) = *t {
            let scaled = sess.graph.scale(v, w);
            total = Some(match total {
                Some(acc) => sess.graph.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    let total = total.ok_or(Error::Empty("training step batch"))?;
    sess.graph.backward(total)?;
    let grads = sess.param_grads();
    *rng = sess.take_rng().expect("training session owns an rng");
    let breakdown = LossBreakdown::compose(values[0], values[1], values[2], values[3], config.alpha, config.beta);
    Ok((breakdown, grads))
}

/// One optimisation step: losses, backward, non-finite abort, Adam update.
/// Parameters are untouched when the step aborts.
pub fn training_step(
    model: &mut BobModel,
    optimizer: &mut Adam,
    batch: &StepBatch,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = loss_gradients(model, batch, config, rng)?;
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { term: "gradient" });
    }
    optimizer.step(model.params_mut(), &grads)?;
    Ok(breakdown)
}

/// Tokenized training corpora.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainData {
    pub dialogues: Vec<EncodedDialogue>,
    pub positives: Vec<EncodedPair>,
    pub negatives: Vec<EncodedPair>,
    pub skipped: usize,
}

impl TrainData {
    pub fn new(dialogues: &[DialogueExample], inference: &[InferencePair], vocab: &Vocab, config: &ModelConfig) -> Self {
        let d = encode_dialogues(dialogues, vocab, config);
        let (pos, neg) = split_inference(inference);
        let p = encode_pairs(&pos, vocab, config);
        let n = encode_pairs(&neg, vocab, config);
        Self {
            dialogues: d.items,
            positives: p.items,
            negatives: n.items,
            skipped: d.skipped + p.skipped + n.skipped,
        }
    }
}

const DIALOGUE_STREAM: u64 = 1;
const POSITIVE_STREAM: u64 = 2;
const NEGATIVE_STREAM: u64 = 3;
const MASK_STREAM: u64 = 4;
const DROPOUT_STREAM: u64 = 5;

/// Indices of the batch at `step` when drawing `size` items per step from
/// `n` items in seeded per-epoch shuffles. A pure function of its inputs, so
/// a resumed run draws exactly what an uninterrupted one would.
pub fn batch_indices(n: usize, size: usize, seed: u64, stream: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let start = step as u128 * size as u128;
    let mut out = Vec::with_capacity(size);
    let mut cached: Option<(u128, Vec<usize>)> = None;
    for i in start..start + size as u128 {
        let epoch = i / n as u128;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream << 48 ^ epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            cached = Some((epoch, order));
        }
        out.push(cached.as_ref().unwrap().1[(i % n as u128) as usize]);
    }
    out
}

fn step_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// The batch drawn at `step`.
pub fn step_batch(data: &TrainData, model_config: &ModelConfig, config: &TrainConfig, step: u64) -> StepBatch {
    let bs = config.batch_size;
    let seed = config.seed;
    let ablation = model_config.ablation;
    let mut batch = StepBatch::default();
    let picks = batch_indices(data.dialogues.len(), bs, seed, DIALOGUE_STREAM, step);
    if ablation == Ablation::EOnly {
        let mut rng = step_rng(seed, MASK_STREAM, step);
        let mut inputs: Vec<ModelInput> = Vec::new();
        let mut targets = Vec::new();
        for &i in &picks {
            let d = &data.dialogues[i];
            let k = rng.gen_range(0..=d.response.len());
            if let Ok(x) = build_masked_input(&d.input, &d.response[..k], model_config) {
                inputs.push(x);
                targets.push(d.response.get(k).copied().unwrap_or(EOS));
            }
        }
        if !inputs.is_empty() {
            let refs: Vec<&ModelInput> = inputs.iter().collect();
            batch.masked = Some(MaskedBatch::collate(&refs, &targets));
        }
        return batch;
    }
    if !picks.is_empty() {
        let items: Vec<&EncodedDialogue> = picks.iter().map(|&i| &data.dialogues[i]).collect();
        batch.dialogue = Some(collate_dialogues(&items));
    }
    if ablation.uses_unlikelihood() {
        let pairs = |set: &[EncodedPair], stream| {
            let idx = batch_indices(set.len(), bs, seed, stream, step);
            (!idx.is_empty()).then(|| collate_pairs(&idx.iter().map(|&i| &set[i]).collect::<Vec<_>>()))
        };
        batch.positive = pairs(&data.positives, POSITIVE_STREAM);
        batch.negative = pairs(&data.negatives, NEGATIVE_STREAM);
    }
    batch
}

/// Serializable position of the dropout generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model, optimizer and sampler position: everything a run needs to
/// continue bit-identically.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: BobModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Steps completed.
    pub step: u64,
    pub dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: BobModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params(), config.adam());
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
            dropout_rng,
        })
    }

    /// Run the next step on `data`.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LossBreakdown> {
        let batch = step_batch(data, self.model.config(), &self.config, self.step);
        let out = training_step(
            &mut self.model,
            &mut self.optimizer,
            &batch,
            &self.config,
            &mut self.dropout_rng,
        )?;
        self.step += 1;
        Ok(out)
    }

    /// Train until `config.max_steps`, calling `log` after every step.
    pub fn run(&mut self, data: &TrainData, mut log: impl FnMut(u64, &LossBreakdown)) -> Result<()> {
        while self.step < self.config.max_steps {
            let b = self.train_step(data)?;
            log(self.step, &b);
        }
        Ok(())
    }
}
