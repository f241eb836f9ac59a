//! Evaluation: perplexity, Distinct-n, the perplexity gap between
//! contradicted and entailed responses, and the consistency score.

use std::collections::HashSet;
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::data::{rule_label, DialogueExample, EvalTuple, Label, Vocab};
use crate::error::{Error, Result};
use crate::inference::{generate, score_examples, DecodeConfig, TokenScores, View};
use crate::model::BobModel;

/// `exp` of the mean negative log-probability over every scored token.
pub fn perplexity_from_scores(scores: &[TokenScores], view: View) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for s in scores {
        let lp = s.view(view);
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    if count == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok((total / count as f64).exp())
}

/// Teacher-forced perplexity of the responses in `examples`.
pub fn perplexity(model: &BobModel, vocab: &Vocab, examples: &[DialogueExample], view: View) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    perplexity_from_scores(&score_examples(model, vocab, examples)?, view)
}

fn ngrams<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    tokens.windows(n.max(1)).filter(move |_| n > 0)
}

/// Corpus-level Distinct-n: unique n-grams over all n-gram occurrences.
pub fn distinct_n<T: Hash + Eq + Clone>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("n-grams"));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Distinct-n averaged per response, over responses with at least one
/// n-gram.
pub fn distinct_n_micro<T: Hash + Eq + Clone>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    let ratios: Vec<f64> = responses
        .iter()
        .filter_map(|r| distinct_n(std::slice::from_ref(r), n).ok())
        .collect();
    if ratios.is_empty() {
        return Err(Error::Empty("n-grams"));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaP {
    pub p_ent: f64,
    pub p_ctd: f64,
    pub delta: f64,
}

impl DeltaP {
    pub fn from_perplexities(p_ent: f64, p_ctd: f64) -> Self {
        Self {
            p_ent,
            p_ctd,
            delta: p_ctd - p_ent,
        }
    }
}

/// Perplexity of each bucket and their difference, contradicted minus
/// entailed.
pub fn delta_p(
    model: &BobModel,
    vocab: &Vocab,
    entailed: &[DialogueExample],
    contradicted: &[DialogueExample],
    view: View,
) -> Result<DeltaP> {
    if entailed.is_empty() {
        return Err(Error::Empty("entailed bucket"));
    }
    if contradicted.is_empty() {
        return Err(Error::Empty("contradicted bucket"));
    }
    Ok(DeltaP::from_perplexities(
        perplexity(model, vocab, entailed, view)?,
        perplexity(model, vocab, contradicted, view)?,
    ))
}

/// Referee judging a response against one persona sentence:
/// 1 entails, 0 neutral, -1 contradicts.
pub trait NliOracle {
    fn verdict(&mut self, response: &str, persona: &str) -> Result<i8>;
}

fn label_verdict(label: Label) -> i8 {
    match label {
        Label::Entail => 1,
        Label::Neutral => 0,
        Label::Contradict => -1,
    }
}

/// Closed-world referee for the synthetic corpus.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleOracle;

impl NliOracle for RuleOracle {
    fn verdict(&mut self, response: &str, persona: &str) -> Result<i8> {
        Ok(label_verdict(rule_label(persona, response)))
    }
}

/// Referee running as a child process. Each query is written as one line
/// `persona<TAB>hypothesis`; the reply is one line holding `-1`, `0` or `1`.
pub struct ExternalOracle {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalOracle {
    /// Spawn `program` with `args`.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Oracle(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }

    /// Spawn from a whitespace-separated command line.
    pub fn from_command(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(String::from);
        let program = parts.next().ok_or_else(|| Error::Oracle("empty oracle command".into()))?;
        Self::spawn(&program, &parts.collect::<Vec<_>>())
    }
}

fn one_line(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

impl NliOracle for ExternalOracle {
    fn verdict(&mut self, response: &str, persona: &str) -> Result<i8> {
        let io = |e: std::io::Error| Error::Oracle(format!("oracle pipe: {e}"));
        writeln!(self.stdin, "{}\t{}", one_line(persona), one_line(response)).map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::Oracle("oracle closed its output".into()));
        }
        match line.trim() {
            "1" => Ok(1),
            "0" => Ok(0),
            "-1" => Ok(-1),
            other => Err(Error::Oracle(format!("bad verdict `{other}`"))),
        }
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Sum of verdicts of one response against each persona sentence.
pub fn c_score_one(response: &str, personas: &[String], oracle: &mut dyn NliOracle) -> Result<f64> {
    let mut sum = 0i64;
    for p in personas {
        sum += i64::from(oracle.verdict(response, p)?);
    }
    Ok(sum as f64)
}

/// Mean per-response consistency score; 0 for an empty corpus.
pub fn c_score(responses: &[(String, Vec<String>)], oracle: &mut dyn NliOracle) -> Result<f64> {
    if responses.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, personas) in responses {
        total += c_score_one(r, personas, oracle)?;
    }
    Ok(total / responses.len() as f64)
}

/// Flat evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub view: View,
    /// Perplexity of entailed responses under `view`.
    pub ppl: f64,
    pub ppl_d1: f64,
    pub ppl_d2: f64,
    pub dist1: f64,
    /// Absent when no response has two tokens.
    pub dist2: Option<f64>,
    pub p_ent: f64,
    pub p_ctd: f64,
    pub delta_p: f64,
    pub c_score: f64,
    pub n_entailed: usize,
    pub n_contradicted: usize,
    pub n_generated: usize,
}

impl EvalReport {
    /// `delta_p == p_ctd - p_ent` and Distinct values lie in `[0, 1]`.
    pub fn is_consistent(&self) -> bool {
        (self.delta_p - (self.p_ctd - self.p_ent)).abs() <= 1e-9
            && (0.0..=1.0).contains(&self.dist1)
            && self.dist2.map_or(true, |d| (0.0..=1.0).contains(&d))
    }
}

/// Score both buckets of `tuples`, generate a response for each and judge
/// it against its persona.
pub fn evaluate(
    model: &BobModel,
    vocab: &Vocab,
    tuples: &[EvalTuple],
    view: View,
    decode: &DecodeConfig,
    oracle: &mut dyn NliOracle,
) -> Result<EvalReport> {
    if tuples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let ent: Vec<DialogueExample> = tuples.iter().map(EvalTuple::entailed_example).collect();
    let ctd: Vec<DialogueExample> = tuples.iter().map(EvalTuple::contradicted_example).collect();
    let ent_scores = score_examples(model, vocab, &ent)?;
    let ctd_scores = score_examples(model, vocab, &ctd)?;
    let dp = DeltaP::from_perplexities(
        perplexity_from_scores(&ent_scores, view)?,
        perplexity_from_scores(&ctd_scores, view)?,
    );

    let mut generated = Vec::with_capacity(tuples.len());
    let mut judged = Vec::with_capacity(tuples.len());
    for t in tuples {
        let g = generate(model, vocab, &t.personas, &t.query, decode)?;
        generated.push(g.final_ids);
        judged.push((g.response, t.personas.clone()));
    }
    Ok(EvalReport {
        view,
        ppl: dp.p_ent,
        ppl_d1: perplexity_from_scores(&ent_scores, View::D1)?,
        ppl_d2: perplexity_from_scores(&ent_scores, View::D2)?,
        dist1: distinct_n(&generated, 1)?,
        dist2: distinct_n(&generated, 2).ok(),
        p_ent: dp.p_ent,
        p_ctd: dp.p_ctd,
        delta_p: dp.delta,
        c_score: c_score(&judged, oracle)?,
        n_entailed: ent.len(),
        n_contradicted: ctd.len(),
        n_generated: generated.len(),
    })
}
