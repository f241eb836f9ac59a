use serde::{Deserialize, Serialize};

use crate::data::{DialogueBatch, InferenceBatch, SourceBatch};
use crate::error::Result;
use crate::model::{BobModel, ModelInput, Session};
use crate::tensor::{Graph, Var};

/// Probability ceiling applied before `ln(1 - p)` in the unlikelihood term.
pub const UL_CEILING: f64 = 1.0 - 1e-7;

/// Per-token averaged loss terms of one step. Terms an ablation leaves out
/// are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_d1: f64,
    pub nll_d2: f64,
    pub ul_pos: f64,
    pub ul_neg: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l1 = nll_d1 + α·nll_d2`, `l2 = β·ul_pos + (1−β)·ul_neg`,
    /// `total = l1 + l2`.
    pub fn compose(nll_d1: f64, nll_d2: f64, ul_pos: f64, ul_neg: f64, alpha: f64, beta: f64) -> Self {
        let l1 = nll_d1 + alpha * nll_d2;
        let l2 = beta * ul_pos + (1.0 - beta) * ul_neg;
        Self {
            nll_d1,
            nll_d2,
            ul_pos,
            ul_neg,
            l1,
            l2,
            total: l1 + l2,
        }
    }

    /// The four raw terms with their names.
    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [
            ("nll_d1", self.nll_d1),
            ("nll_d2", self.nll_d2),
            ("ul_pos", self.ul_pos),
            ("ul_neg", self.ul_neg),
        ]
    }
}

/// Encoder-only batch: each row ends in `[mask]` and carries one target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub source: SourceBatch,
    /// One entry per source position; `Some` only at the mask slot.
    pub targets: Vec<Option<usize>>,
}

impl MaskedBatch {
    pub fn collate(inputs: &[&ModelInput], targets: &[usize]) -> Self {
        let source = SourceBatch::collate(inputs);
        let mut t = vec![None; source.batch * source.len];
        for (b, (x, &y)) in inputs.iter().zip(targets).enumerate() {
            t[b * source.len + x.len() - 1] = Some(y);
        }
        Self { source, targets: t }
    }
}

/// Sum of per-row losses divided by the number of scored tokens.
pub fn token_mean(g: &mut Graph, rows: Var, count: usize) -> Var {
    let s = g.sum(rows);
    g.scale(s, 1.0 / count.max(1) as f64)
}

/// Graph nodes of one teacher-forced dialogue pass.
#[derive(Clone, Copy, Debug)]
pub struct DialogueTerms {
    pub nll_d1: Var,
    pub nll_d2: Option<Var>,
    pub r1: Var,
    pub d1_logits: Var,
    pub d2_logits: Option<Var>,
}

/// Encoder, D1 and (when `with_d2`) D2 over a dialogue batch, with the two
/// likelihood terms. D2 consumes the live R1, so its loss reaches θ through
/// R1 only.
pub fn dialogue_forward(model: &BobModel, sess: &mut Session, batch: &DialogueBatch, with_d2: bool) -> Result<DialogueTerms> {
    let target = &batch.target;
    let count = target.token_count();
    let enc = model.encode(sess, &batch.source)?;
    let (r1, d1_logits) = model.decode_d1(sess, target, &enc)?;
    let rows = sess.graph.cross_entropy(d1_logits, &target.targets)?;
    let nll_d1 = token_mean(&mut sess.graph, rows, count);
    let (nll_d2, d2_logits) = if with_d2 {
        let (_, logits) = model.decode_d2(sess, enc.p, &enc.persona_mask, r1, &target.key_mask())?;
        let rows = sess.graph.cross_entropy(logits, &target.targets)?;
        (Some(token_mean(&mut sess.graph, rows, count)), Some(logits))
    } else {
        (None, None)
    };
    Ok(DialogueTerms {
        nll_d1,
        nll_d2,
        r1,
        d1_logits,
        d2_logits,
    })
}

/// D2 logits on the unlikelihood path: the premise stands in for P and the
/// embedded hypothesis for R1, position-aligned with the tokens scored. The encoder and D1 are bypassed, and θ is
/// read only through constant copies.
pub fn unlikelihood_logits(model: &BobModel, sess: &mut Session, batch: &InferenceBatch) -> Result<Var> {
    let p = model.persona_states(sess, &batch.premise)?;
    let prev = sess.freeze_theta(true);
    let r = model.embed_hypothesis(sess, &batch.hypothesis);
    sess.freeze_theta(prev);
    let (_, logits) = model.decode_d2(sess, p, &batch.premise.key_mask(), r?, &batch.hypothesis.key_mask())?;
    Ok(logits)
}

/// Likelihood of entailed hypotheses under D2, end token included.
pub fn ul_positive_term(model: &BobModel, sess: &mut Session, batch: &InferenceBatch) -> Result<Var> {
    let logits = unlikelihood_logits(model, sess, batch)?;
    let t = &batch.hypothesis;
    let rows = sess.graph.cross_entropy(logits, &t.targets)?;
    Ok(token_mean(&mut sess.graph, rows, t.token_count()))
}

/// `−ln(1 − p)` over every contradicted hypothesis token; the end token is
/// not penalised.
pub fn ul_negative_term(model: &BobModel, sess: &mut Session, batch: &InferenceBatch) -> Result<Var> {
    let logits = unlikelihood_logits(model, sess, batch)?;
    let t = batch.hypothesis.clone().without_eos_targets();
    let rows = sess.graph.unlikelihood(logits, &t.targets, UL_CEILING)?;
    Ok(token_mean(&mut sess.graph, rows, t.token_count()))
}

/// Masked-token likelihood for the encoder-only ablation.
pub fn masked_lm_term(model: &BobModel, sess: &mut Session, batch: &MaskedBatch) -> Result<Var> {
    let logits = model.masked_lm_logits(sess, &batch.source)?;
    let rows = sess.graph.cross_entropy(logits, &batch.targets)?;
    let count = batch.targets.iter().flatten().count();
    Ok(token_mean(&mut sess.graph, rows, count))
}

fn eval_scalar(model: &BobModel, f: impl FnOnce(&mut Session) -> Result<Var>) -> Result<f64> {
    let mut sess = model.eval_session();
    let v = f(&mut sess)?;
    Ok(sess.graph.value(v).item())
}

/// Per-token D1 negative log-likelihood, dropout off.
pub fn nll_d1(model: &BobModel, batch: &DialogueBatch) -> Result<f64> {
    eval_scalar(model, |s| Ok(dialogue_forward(model, s, batch, false)?.nll_d1))
}

/// Per-token D2 negative log-likelihood, dropout off.
pub fn nll_d2(model: &BobModel, batch: &DialogueBatch) -> Result<f64> {
    eval_scalar(model, |s| Ok(dialogue_forward(model, s, batch, true)?.nll_d2.expect("d2 requested")))
}

pub fn ul_positive(model: &BobModel, batch: &InferenceBatch) -> Result<f64> {
    eval_scalar(model, |s| ul_positive_term(model, s, batch))
}

pub fn ul_negative(model: &BobModel, batch: &InferenceBatch) -> Result<f64> {
    eval_scalar(model, |s| ul_negative_term(model, s, batch))
}
