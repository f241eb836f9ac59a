//! Hand-rolled loop implementation of the three stacks for one unpadded
//! sequence. Reads parameter values by name and nothing else.

use bob_core::model::BobModel;
use bob_core::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub struct Oracle<'a> {
    pub model: &'a BobModel,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a BobModel) -> Self {
        Self { model }
    }

    fn p(&self, name: &str) -> &Tensor {
        let s = self.model.params();
        s.get(s.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    fn row(&self, name: &str, i: usize) -> Vec<f64> {
        let t = self.p(name);
        let d = t.shape()[1];
        t.data()[i * d..(i + 1) * d].to_vec()
    }

    pub fn linear(&self, x: &Rows, prefix: &str) -> Rows {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|r| {
                (0..dout)
                    .map(|j| b.data()[j] + (0..din).map(|k| r[k] * w.data()[k * dout + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn layer_norm(&self, x: &Rows, prefix: &str) -> Rows {
        let g = self.p(&format!("{prefix}.gain")).data();
        let b = self.p(&format!("{prefix}.bias")).data();
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let sd = (var + 1e-5).sqrt();
                r.iter().enumerate().map(|(i, v)| g[i] * (v - mean) / sd + b[i]).collect()
            })
            .collect()
    }

    pub fn add_norm(&self, x: &Rows, y: &Rows, prefix: &str) -> Rows {
        let s: Rows = x
            .iter()
            .zip(y)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        self.layer_norm(&s, prefix)
    }

    pub fn ffn(&self, x: &Rows, prefix: &str) -> Rows {
        let h = self.linear(x, &format!("{prefix}.up"));
        let h: Rows = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        self.linear(&h, &format!("{prefix}.down"))
    }

    /// Attention with `blocked(i, j)` true where query i may not see key j.
    pub fn attention(&self, q_in: &Rows, kv_in: &Rows, prefix: &str, blocked: impl Fn(usize, usize) -> bool) -> Rows {
        let heads = self.model.config().num_heads;
        let q = self.linear(q_in, &format!("{prefix}.query"));
        let k = self.linear(kv_in, &format!("{prefix}.key"));
        let v = self.linear(kv_in, &format!("{prefix}.value"));
        let d = q[0].len();
        let dh = d / heads;
        let mut ctx = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..q.len() {
                let scores: Vec<f64> = (0..k.len())
                    .map(|j| {
                        if blocked(i, j) {
                            -1e9
                        } else {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    ctx[i][c] = (0..k.len()).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        self.linear(&ctx, &format!("{prefix}.out"))
    }

    pub fn embed(&self, ids: &[usize], types: &[usize]) -> Rows {
        let x: Rows = ids
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let a = self.row("theta.embeddings.token", t);
                let b = self.row("theta.embeddings.position", i);
                let c = self.row("theta.embeddings.segment", types[i]);
                (0..a.len()).map(|j| a[j] + b[j] + c[j]).collect()
            })
            .collect();
        self.layer_norm(&x, "theta.embeddings.norm")
    }

    pub fn encoder_layers(&self, mut x: Rows) -> Rows {
        for l in 0..self.model.config().num_layers {
            let p = format!("theta.encoder.{l}");
            let a = self.attention(&x, &x, &format!("{p}.self_attn"), |_, _| false);
            x = self.add_norm(&x, &a, &format!("{p}.norm1"));
            let f = self.ffn(&x, &format!("{p}.ffn"));
            x = self.add_norm(&x, &f, &format!("{p}.norm2"));
        }
        x
    }

    pub fn encode(&self, ids: &[usize], types: &[usize]) -> Rows {
        self.encoder_layers(self.embed(ids, types))
    }

    fn project(&self, x: &Rows, stack: &str) -> Rows {
        let v = self.model.config().vocab_size;
        let bias = self.p(&format!("{stack}.out.bias")).data().to_vec();
        let untied = self.model.params().find(&format!("{stack}.out.weight")).is_some();
        x.iter()
            .map(|r| {
                (0..v)
                    .map(|t| {
                        let w: Vec<f64> = if untied {
                            let w = self.p(&format!("{stack}.out.weight"));
                            (0..r.len()).map(|k| w.data()[k * v + t]).collect()
                        } else {
                            self.row("theta.embeddings.token", t)
                        };
                        bias[t] + r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    /// `(R1, logits)` for decoder inputs `inputs` over encoder states `h`.
    pub fn decode_d1(&self, inputs: &[usize], h: &Rows) -> (Rows, Rows) {
        let mut r = self.embed(inputs, &vec![0; inputs.len()]);
        for l in 0..self.model.config().num_layers {
            let p = format!("theta.d1.{l}");
            let a = self.attention(&r, &r, &format!("{p}.self_attn"), |i, j| j > i);
            r = self.add_norm(&r, &a, &format!("{p}.norm1"));
            let c = self.attention(&r, h, &format!("{p}.cross_attn"), |_, _| false);
            r = self.add_norm(&r, &c, &format!("{p}.norm2"));
            let f = self.ffn(&r, &format!("{p}.ffn"));
            r = self.add_norm(&r, &f, &format!("{p}.norm3"));
        }
        let logits = self.project(&r, "theta.d1");
        (r, logits)
    }

    /// `(R2, logits)` for persona states `p` and response states `r1`.
    pub fn decode_d2(&self, p: &Rows, r1: &Rows) -> (Rows, Rows) {
        let mut r2 = r1.clone();
        for l in 0..self.model.config().num_layers {
            let n = format!("gamma.d2.{l}");
            let a = self.attention(&r2, p, &format!("{n}.persona_attn"), |_, _| false);
            let a = self.add_norm(&r2, &a, &format!("{n}.norm1"));
            let f = self.ffn(&a, &format!("{n}.persona_ffn"));
            let pn = self.add_norm(&a, &f, &format!("{n}.norm2"));
            let b = self.attention(&pn, r1, &format!("{n}.response_attn"), |_, _| false);
            let b = self.add_norm(&pn, &b, &format!("{n}.norm3"));
            let f = self.ffn(&b, &format!("{n}.response_ffn"));
            r2 = self.add_norm(&b, &f, &format!("{n}.norm4"));
        }
        let logits = self.project(&r2, "gamma.d2");
        (r2, logits)
    }
}

/// Row view of a `[1, len, d]` or `[len, d]` tensor.
pub fn rows_of(t: &Tensor) -> Rows {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
