//! Randomised metamorphic checks of decoder information flow.

use bob_core::data::{SourceBatch, TargetBatch};
use bob_core::model::{build_input, BobModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 20;

fn model(seed: u64) -> BobModel {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        ffn_size: 9,
        max_len: 16,
        dropout: 0.0,
        ..ModelConfig::desk(VOCAB)
    };
    BobModel::new(cfg, seed).unwrap()
}

fn ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(6..VOCAB)).collect()
}

fn source(model: &BobModel, persona: &[usize], query: &[usize]) -> SourceBatch {
    let x = build_input(&[persona.to_vec()], query, model.config()).unwrap();
    SourceBatch::collate(&[&x])
}

/// Perturb a later response token and require every earlier D1 logit to be
/// unchanged while some later one moves. Returns the number of cases run.
pub fn d1_causality(cases: usize) -> Result<usize, String> {
    let model = model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for case in 0..cases {
        let src = source(&model, &ids(&mut rng, 3), &ids(&mut rng, 2));
        let len = rng.gen_range(2..7);
        let resp = ids(&mut rng, len);
        let t = rng.gen_range(0..len);
        let j = rng.gen_range(t + 1..=len);
        // decoder input position j holds response token j - 1
        let mut changed = resp.clone();
        changed[j - 1] = 6 + (changed[j - 1] - 6 + 1 + rng.gen_range(0..13)) % 14;
        let logits = |r: &[usize]| {
            let mut s = model.eval_session();
            let enc = model.encode(&mut s, &src).unwrap();
            let (_, l) = model.decode_d1(&mut s, &TargetBatch::collate(&[r]), &enc).unwrap();
            s.graph.value(l).data().to_vec()
        };
        let (a, b) = (logits(&resp), logits(&changed));
        let end = (t + 1) * VOCAB;
        if a[..end] != b[..end] {
            return Err(format!("case {case}: position {t} moved when token {j} changed"));
        }
        if a == b {
            return Err(format!("case {case}: perturbation had no effect"));
        }
    }
    Ok(cases)
}

/// Hand D2 the same persona states and R1 under two different queries and
/// require bit-identical R2 and logits. Returns the number of cases run.
pub fn d2_query_independence(cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    for case in 0..cases {
        let model = model(case as u64);
        let persona = ids(&mut rng, 3);
        let (n1, n2) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let q1 = ids(&mut rng, n1);
        let mut q2 = ids(&mut rng, n2);
        if q2 == q1 {
            q2.push(7);
        }
        let target = TargetBatch::collate(&[&ids(&mut rng, 3)]);
        let r1_mask = target.key_mask();

        let mut s1 = model.eval_session();
        let enc1 = model.encode(&mut s1, &source(&model, &persona, &q1)).unwrap();
        let (r1, _) = model.decode_d1(&mut s1, &target, &enc1).unwrap();
        let r1_value = s1.graph.value(r1).clone();
        let (r2a, la) = model.decode_d2(&mut s1, enc1.p, &enc1.persona_mask, r1, &r1_mask).unwrap();

        // the second query gets its own encoding; only R1 is shared
        let mut s2 = model.eval_session();
        let enc2 = model.encode(&mut s2, &source(&model, &persona, &q2)).unwrap();
        if s1.graph.value(enc1.h).data() == s2.graph.value(enc2.h).data() {
            return Err(format!("case {case}: queries gave identical encodings"));
        }
        let injected = s2.graph.constant(r1_value);
        let (r2b, lb) = model.decode_d2(&mut s2, enc2.p, &enc2.persona_mask, injected, &r1_mask).unwrap();
        if s1.graph.value(r2a) != s2.graph.value(r2b) || s1.graph.value(la) != s2.graph.value(lb) {
            return Err(format!("case {case}: D2 output depends on the query"));
        }
    }
    Ok(cases)
}
