//! Finite-difference gradient cases shared by the op tests and the
//! acceptance run.

use bob_core::data::{PersonaBatch, SourceBatch, TargetBatch};
use bob_core::model::{build_input, BobModel, ModelConfig, Session};
use bob_core::tensor::{Mask, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Case = fn(&mut ChaCha8Rng, u64) -> f64;

/// Worst relative error of `case` over `trials` seeded draws.
pub fn worst_over(name: &str, case: Case, trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        worst = worst.max(case(&mut rng, trial));
    }
    worst
}

pub const OPS: &[(&str, Case)] = &[
    ("add", add),
    ("mul", mul),
    ("scale", scale),
    ("matmul", matmul),
    ("bmm", bmm),
    ("transpose", transpose),
    ("relu", relu),
    ("gelu", gelu),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("layer_norm", layer_norm),
    ("masked_fill", masked_fill),
    ("embedding", embedding),
    ("cross_entropy", cross_entropy),
    ("unlikelihood", unlikelihood),
    ("attention", attention),
];

pub fn add(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let shape = random_shape(rng, 3);
    let bias_shape = vec![shape[2]];
    let (a, b) = (random_tensor(rng, &shape), random_tensor(rng, &bias_shape));
    grad_check(&[a, b], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn mul(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let shape = random_shape(rng, 3);
    let mid = vec![shape[0], 1, shape[2]];
    let (a, b) = (random_tensor(rng, &shape), random_tensor(rng, &mid));
    grad_check(&[a, b], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn scale(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let shape = random_shape(rng, 2);
    let a = random_tensor(rng, &shape);
    let c = rng.gen_range(-3.0..3.0);
    grad_check(&[a], |g, v| {
        let y = g.scale(v[0], c);
        let y2 = g.mul(y, y).unwrap();
        let s = g.mean(y2);
        let w = weighted_sum(g, y, seed);
        g.add(s, w).unwrap()
    })
}

pub fn matmul(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = random_shape(rng, 3);
    let a = random_tensor(rng, &[s[0], s[1]]);
    let b = random_tensor(rng, &[s[1], s[2]]);
    grad_check(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn bmm(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = random_shape(rng, 4);
    let a = random_tensor(rng, &[s[0], s[1], s[2]]);
    let b = random_tensor(rng, &[s[0], s[3], s[2]]);
    grad_check(&[a, b], |g, v| {
        let bt = g.transpose(v[1], 1, 2).unwrap();
        let y = g.bmm(v[0], bt).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn transpose(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = random_shape(rng, 4);
    let a = random_tensor(rng, &s);
    grad_check(&[a], |g, v| {
        let t = g.transpose(v[0], 1, 2).unwrap();
        let shape = g.shape(t).to_vec();
        let r = g.reshape(t, &[shape[0] * shape[1], shape[2] * shape[3]]).unwrap();
        weighted_sum(g, r, seed)
    })
}

pub fn relu(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let shape = random_shape(rng, 2);
    let a = random_tensor_off_zero(rng, &shape);
    grad_check(&[a], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, seed)
    })
}

pub fn gelu(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let shape = random_shape(rng, 2);
    let a = random_tensor(rng, &shape);
    grad_check(&[a], |g, v| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y, seed)
    })
}

pub fn softmax(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = random_shape(rng, 3);
    let axis = rng.gen_range(0..3);
    let a = random_tensor(rng, &s);
    grad_check(&[a], |g, v| {
        let y = g.softmax(v[0], axis).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn log_softmax(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = random_shape(rng, 3);
    let axis = rng.gen_range(0..3);
    let a = random_tensor(rng, &s);
    grad_check(&[a], |g, v| {
        let y = g.log_softmax(v[0], axis).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn layer_norm(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = random_shape(rng, 2);
    let d = s[1].max(2);
    let x = random_tensor(rng, &[s[0], d]);
    let gain = random_tensor(rng, &[d]);
    let bias = random_tensor(rng, &[d]);
    grad_check(&[x, gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn masked_fill(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let s = random_shape(rng, 2);
    let a = random_tensor(rng, &s);
    let mask_data: Vec<bool> = (0..s[1]).map(|_| rng.gen_bool(0.4)).collect();
    let mask = Mask::new(vec![s[1]], mask_data).unwrap();
    grad_check(&[a], move |g, v| {
        let m = g.masked_fill(v[0], &mask, -1e9).unwrap();
        let y = g.softmax(m, 1).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn embedding(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let rows = rng.gen_range(2..=5);
    let d = rng.gen_range(1..=5);
    let table = random_tensor(rng, &[rows, d]);
    let n = rng.gen_range(1..=5);
    // repeated ids exercise accumulation
    let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..rows)).collect();
    grad_check(&[table], move |g, v| {
        let y = g.embedding(v[0], &ids, &[n]).unwrap();
        weighted_sum(g, y, seed)
    })
}

pub fn cross_entropy(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let rows = rng.gen_range(1..=5);
    let vocab = rng.gen_range(2..=5);
    let logits = random_tensor(rng, &[rows, vocab]);
    let targets: Vec<Option<usize>> = (0..rows)
        .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..vocab)))
        .collect();
    grad_check(&[logits], move |g, v| {
        let l = g.cross_entropy(v[0], &targets).unwrap();
        weighted_sum(g, l, seed)
    })
}

pub fn unlikelihood(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let rows = rng.gen_range(1..=5);
    let vocab = rng.gen_range(2..=5);
    let logits = random_tensor(rng, &[rows, vocab]);
    let targets: Vec<Option<usize>> = (0..rows)
        .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..vocab)))
        .collect();
    grad_check(&[logits], move |g, v| {
        let l = g.unlikelihood(v[0], &targets, 1.0 - 1e-7).unwrap();
        weighted_sum(g, l, seed)
    })
}

pub fn attention(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (b, l, d) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(2..=4));
    let x = random_tensor(rng, &[b, l, d]);
    let wq = random_tensor(rng, &[d, d]);
    let wk = random_tensor(rng, &[d, d]);
    let gain = random_tensor(rng, &[d]);
    let bias = random_tensor(rng, &[d]);
    let causal = Mask::causal(l);
    grad_check(&[x, wq, wk, gain, bias], move |g, v| {
        let flat = g.reshape(v[0], &[b * l, d]).unwrap();
        let q = g.matmul(flat, v[1]).unwrap();
        let k = g.matmul(flat, v[2]).unwrap();
        let q = g.reshape(q, &[b, 1, l, d]).unwrap();
        let k = g.reshape(k, &[b, 1, l, d]).unwrap();
        let kt = g.transpose(k, 2, 3).unwrap();
        let s = g.bmm(q, kt).unwrap();
        let s = g.scale(s, 0.5);
        let s = g.masked_fill(s, &causal, -1e9).unwrap();
        let w = g.softmax(s, 3).unwrap();
        let vv = g.reshape(flat, &[b, 1, l, d]).unwrap();
        let o = g.bmm(w, vv).unwrap();
        let o = g.reshape(o, &[b * l, d]).unwrap();
        let r = g.add(o, flat).unwrap();
        let y = g.layer_norm(r, v[3], v[4]).unwrap();
        weighted_sum(g, y, seed)
    })
}

/// Scalar probe touching every stack: D1 likelihood, D2 likelihood and a
/// D2 unlikelihood term.
pub fn probe_loss(model: &BobModel, s: &mut Session) -> Var {
    let cfg = model.config();
    let a = build_input(&[vec![5, 6]], &[3, 4], cfg).unwrap();
    let b = build_input(&[], &[6], cfg).unwrap();
    let src = SourceBatch::collate(&[&a, &b]);
    let tgt = TargetBatch::collate(&[&[5, 6], &[4]]);
    let enc = model.encode(s, &src).unwrap();
    let (r1, l1) = model.decode_d1(s, &tgt, &enc).unwrap();
    let (_, l2) = model.decode_d2(s, enc.p, &enc.persona_mask, r1, &tgt.key_mask()).unwrap();
    let n1 = s.graph.cross_entropy(l1, &tgt.targets).unwrap();
    let n2 = s.graph.cross_entropy(l2, &tgt.targets).unwrap();
    let premise = PersonaBatch::collate(&[&[6, 2]]);
    let hyp = TargetBatch::collate(&[&[5]]);
    let p = model.persona_states(s, &premise).unwrap();
    let rbar = {
        let prev = s.freeze_theta(true);
        let r = model.embed_hypothesis(s, &hyp).unwrap();
        s.freeze_theta(prev);
        r
    };
    let (_, l3) = model.decode_d2(s, p, &premise.key_mask(), rbar, &hyp.key_mask()).unwrap();
    let u = s.graph.unlikelihood(l3, &hyp.targets, 1.0 - 1e-7).unwrap();
    let parts = [n1, n2, u].map(|v| s.graph.mean(v));
    let t = s.graph.add(parts[0], parts[1]).unwrap();
    s.graph.add(t, parts[2]).unwrap()
}

/// Worst relative error between backward() and central differences over
/// every parameter of a tiny model.
pub fn end_to_end() -> f64 {
    let cfg = ModelConfig {
        num_layers: 1,
        hidden_size: 4,
        num_heads: 2,
        ffn_size: 6,
        max_len: 8,
        dropout: 0.0,
        ..ModelConfig::desk(7)
    };
    let model = BobModel::new(cfg, 11).unwrap();
    let mut s = model.eval_session();
    let loss = probe_loss(&model, &mut s);
    s.graph.backward(loss).unwrap();
    let grads = s.param_grads();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut work = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let Some(g) = &grads[id.index()] else {
            panic!("parameter {} never bound", model.params().name(id));
        };
        for j in 0..g.numel() {
            let orig = model.params().get(id).data()[j];
            let mut eval = |v: f64| {
                work.params_mut().get_mut(id).data_mut()[j] = v;
                let mut s = Session::eval_with_snapshot(work.params(), model.params());
                let l = probe_loss(&work, &mut s);
                s.graph.value(l).item()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            eval(orig);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    worst
}
