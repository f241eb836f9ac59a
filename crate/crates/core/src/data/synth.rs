//! Closed-world persona corpus generator.
//!
//! A profile assigns one value to each [`Slot`] of [`WORLD`]. Persona facts,
//! queries, responses and inference hypotheses are all rendered from
//! per-slot templates, so the consistency label of any (persona, sentence)
//! pair can be recovered by looking up which slot values the sentence names.
//!
//! Dialogues come in two kinds. A dense dialogue asks about a slot its
//! persona states and answers with that value. A sparse dialogue asks about
//! a slot the persona is silent on (the fact is withheld) and answers with
//! an arbitrary value, so it neither reveals nor contradicts the persona.
//! [`SynthConfig::dense_fraction`] sets the mix.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{DialogueExample, EvalTuple, InferencePair, Label};
use crate::error::{Error, Result};

pub struct Slot {
    pub key: &'static str,
    pub values: &'static [&'static str],
    /// Declarative templates used for persona facts and hypotheses.
    pub statements: &'static [&'static str],
    pub queries: &'static [&'static str],
    pub responses: &'static [&'static str],
}

pub const WORLD: &[Slot] = &[
    Slot {
        key: "pet",
        values: &["dog", "cat", "bird", "fish", "horse"],
        statements: &["i have a {}", "i own a {}", "my pet is a {}"],
        queries: &["do you have a pet ?", "what pet do you have ?"],
        responses: &["yes i have a {}", "i own a {}", "my pet is a {}"],
    },
    Slot {
        key: "city",
        values: &["paris", "rome", "oslo", "lima", "cairo"],
        statements: &["i live in {}", "my home is in {}", "i reside in {}"],
        queries: &["where do you live ?", "which city is your home ?"],
        responses: &["i live in {}", "my home is in {}", "i am from {}"],
    },
    Slot {
        key: "job",
        values: &["chef", "pilot", "nurse", "baker", "farmer"],
        statements: &["i work as a {}", "i am a {}", "my job is {}"],
        queries: &["what do you do for work ?", "what is your job ?"],
        responses: &["i am a {}", "i work as a {}", "my job is {}"],
    },
];

/// Inference pairs generated per persona fact and per label.
const PAIRS_PER_FACT: usize = 2;

pub type Profile = Vec<usize>;

#[derive(Clone, Debug, Default)]
pub struct SynthCorpus {
    pub dialogues: Vec<DialogueExample>,
    pub inference: Vec<InferencePair>,
    pub eval: Vec<EvalTuple>,
}

fn render(template: &str, value: &str) -> String {
    template.replace("{}", value)
}

/// Every `(slot, value)` the sentence mentions, in slot order.
pub fn mentioned_values(text: &str) -> Vec<(usize, usize)> {
    let words: HashSet<String> = super::vocab::split_words(text).into_iter().collect();
    let mut found = Vec::new();
    for (s, slot) in WORLD.iter().enumerate() {
        for (v, value) in slot.values.iter().enumerate() {
            if words.contains(*value) {
                found.push((s, v));
            }
        }
    }
    found
}

/// Label of `hypothesis` against `premise` under the closed-world rule:
/// same slot and value entails, same slot with a different value
/// contradicts, anything else is neutral.
pub fn rule_label(premise: &str, hypothesis: &str) -> Label {
    let prem = mentioned_values(premise);
    let hyp = mentioned_values(hypothesis);
    let mut label = Label::Neutral;
    for &(ps, pv) in &prem {
        for &(hs, hv) in &hyp {
            if ps == hs {
                if pv == hv {
                    label = Label::Entail;
                } else {
                    return Label::Contradict;
                }
            }
        }
    }
    label
}

fn other_value(rng: &mut ChaCha8Rng, slot: &Slot, value: usize) -> usize {
    let v = rng.gen_range(0..slot.values.len() - 1);
    if v >= value {
        v + 1
    } else {
        v
    }
}

fn random_profile(rng: &mut ChaCha8Rng) -> Profile {
    WORLD.iter().map(|s| rng.gen_range(0..s.values.len())).collect()
}

fn hypothesis_templates(slot: &Slot) -> Vec<&'static str> {
    slot.statements
        .iter()
        .chain(slot.responses)
        .copied()
        .collect()
}

/// Persona facts for a profile, one per slot, shuffled.
fn persona_facts(rng: &mut ChaCha8Rng, profile: &Profile) -> Vec<(usize, String)> {
    let mut facts: Vec<(usize, String)> = WORLD
        .iter()
        .zip(profile)
        .enumerate()
        .map(|(s, (slot, &v))| {
            let t = slot.statements.choose(rng).unwrap();
            (s, render(t, slot.values[v]))
        })
        .collect();
    facts.shuffle(rng);
    facts
}

/// Share of dialogues that reveal the persona under [`synth_generate`].
pub const DEFAULT_DENSE_FRACTION: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_profiles: usize,
    pub seed: u64,
    /// Probability that a dialogue answers from a persona fact it states.
    pub dense_fraction: f64,
}

impl SynthConfig {
    pub fn new(num_profiles: usize, seed: u64) -> Self {
        Self {
            num_profiles,
            seed,
            dense_fraction: DEFAULT_DENSE_FRACTION,
        }
    }
}

/// [`synth_generate_with`] at the default persona density.
pub fn synth_generate(num_profiles: usize, seed: u64) -> Result<SynthCorpus> {
    synth_generate_with(&SynthConfig::new(num_profiles, seed))
}

/// Generate `num_profiles` training profiles and `max(2, num_profiles / 3)`
/// held-out profiles. Training profiles yield the dialogue and inference
/// corpora; held-out profiles yield the evaluation tuples, whose personas
/// always state the queried slot.
pub fn synth_generate_with(config: &SynthConfig) -> Result<SynthCorpus> {
    let SynthConfig {
        num_profiles,
        seed,
        dense_fraction,
    } = *config;
    if !(0.0..=1.0).contains(&dense_fraction) {
        return Err(Error::Config(format!("dense_fraction {dense_fraction} outside [0, 1]")));
    }
    if num_profiles < 2 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 2 profiles, got {num_profiles}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<Profile> = (0..num_profiles).map(|_| random_profile(&mut rng)).collect();

    let combos: usize = WORLD.iter().map(|s| s.values.len()).product();
    let seen: HashSet<&Profile> = train.iter().collect();
    let num_eval = (num_profiles / 3).max(2);
    let mut held_out = Vec::with_capacity(num_eval);
    while held_out.len() < num_eval {
        let p = random_profile(&mut rng);
        // Only insist on unseen combinations while unseen ones remain.
        if seen.len() + held_out.len() < combos && (seen.contains(&p) || held_out.contains(&p)) {
            continue;
        }
        held_out.push(p);
    }

    let mut corpus = SynthCorpus::default();
    for profile in &train {
        let facts = persona_facts(&mut rng, profile);
        let personas: Vec<String> = facts.iter().map(|(_, f)| f.clone()).collect();
        for (s, slot) in WORLD.iter().enumerate() {
            for query in slot.queries {
                for response in slot.responses {
                    let (personas, value) = if rng.gen_bool(dense_fraction) {
                        (personas.clone(), profile[s])
                    } else {
                        let silent = facts.iter().filter(|(fs, _)| *fs != s).map(|(_, f)| f.clone()).collect();
                        (silent, rng.gen_range(0..slot.values.len()))
                    };
                    corpus.dialogues.push(DialogueExample {
                        personas,
                        query: query.to_string(),
                        response: render(response, slot.values[value]),
                    });
                }
            }
        }
        for (s, fact) in &facts {
            let slot = &WORLD[*s];
            let templates = hypothesis_templates(slot);
            let value = profile[*s];
            for _ in 0..PAIRS_PER_FACT {
                let t = templates.choose(&mut rng).unwrap();
                corpus.inference.push(InferencePair {
                    premise: fact.clone(),
                    hypothesis: render(t, slot.values[value]),
                    label: Label::Entail,
                });
                let t = templates.choose(&mut rng).unwrap();
                let swapped = other_value(&mut rng, slot, value);
                corpus.inference.push(InferencePair {
                    premise: fact.clone(),
                    hypothesis: render(t, slot.values[swapped]),
                    label: Label::Contradict,
                });
                let os = (s + rng.gen_range(1..WORLD.len())) % WORLD.len();
                let other = &WORLD[os];
                let t = hypothesis_templates(other).choose(&mut rng).copied().unwrap();
                let v = rng.gen_range(0..other.values.len());
                corpus.inference.push(InferencePair {
                    premise: fact.clone(),
                    hypothesis: render(t, other.values[v]),
                    label: Label::Neutral,
                });
            }
        }
    }

    for profile in &held_out {
        let facts = persona_facts(&mut rng, profile);
        let personas: Vec<String> = facts.into_iter().map(|(_, f)| f).collect();
        for (s, slot) in WORLD.iter().enumerate() {
            for query in slot.queries {
                let t = slot.responses.choose(&mut rng).unwrap();
                let swapped = other_value(&mut rng, slot, profile[s]);
                corpus.eval.push(EvalTuple {
                    personas: personas.clone(),
                    query: query.to_string(),
                    entailed: render(t, slot.values[profile[s]]),
                    contradicted: render(t, slot.values[swapped]),
                });
            }
        }
    }
    Ok(corpus)
}
