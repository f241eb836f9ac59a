//! The encoder, the left-to-right generation decoder (D1) and the
//! bidirectional consistency decoder (D2).
//!
//! Every sublayer is post-norm: `LayerNorm(x + Sublayer(x))`. Parameters
//! are split into two groups by name: `theta.*` holds the shared
//! embeddings, the encoder and D1; `gamma.*` holds D2 and its projection.
//! D2 only ever reads constant copies of θ, so its losses move θ solely
//! through the R1 states it consumes.

mod config;
mod input;
mod layers;
mod params;
mod session;

pub use config::{Ablation, Activation, ModelConfig, PersonaSource};
pub use input::{build_input, build_masked_input, ModelInput};
pub use layers::{multi_head_attention, Attention, FeedForward, LayerNorm, Linear};
pub use params::{Group, ParamId, ParamStore};
pub use session::Session;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{PersonaBatch, SourceBatch, TargetBatch};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor, Var};

/// Number of segment types: persona side and query side.
pub const NUM_TYPES: usize = 2;

/// Output of [`BobModel::encode`].
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `[batch, len, hidden]` encoder states.
    pub h: Var,
    /// `[batch, persona_len, hidden]` persona representations for D2.
    pub p: Var,
    /// Key-padding mask over `h`.
    pub source_mask: Mask,
    /// Key-padding mask over `p`.
    pub persona_mask: Mask,
}

#[derive(Clone, Debug)]
pub struct Embeddings {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct D1Layer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct D2Layer {
    pub persona_attn: Attention,
    pub norm1: LayerNorm,
    pub persona_ffn: FeedForward,
    pub norm2: LayerNorm,
    pub response_attn: Attention,
    pub norm3: LayerNorm,
    pub response_ffn: FeedForward,
    pub norm4: LayerNorm,
}

/// Output projection to the vocabulary. `weight` is `None` when tied to the
/// token embedding table.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: Option<ParamId>,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct BobModel {
    config: ModelConfig,
    params: ParamStore,
    pub embeddings: Embeddings,
    pub encoder: Vec<EncoderLayer>,
    pub d1: Vec<D1Layer>,
    pub d1_out: Projection,
    pub d2: Vec<D2Layer>,
    pub d2_out: Projection,
}

/// Standard deviation of the embedding tables at initialisation.
const EMBEDDING_STD: f64 = 0.1;

impl BobModel {
    /// Randomly initialised model. Initialisation is a pure function of
    /// `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let (d, v, ff, h) = (
            config.hidden_size,
            config.vocab_size,
            config.ffn_size,
            config.num_heads,
        );
        let act = config.activation;
        let mut s = ParamStore::default();

        let embeddings = Embeddings {
            token: s.add("theta.embeddings.token", Tensor::randn(&[v, d], EMBEDDING_STD, rng)),
            position: s.add(
                "theta.embeddings.position",
                Tensor::randn(&[config.max_len, d], EMBEDDING_STD, rng),
            ),
            segment: s.add(
                "theta.embeddings.segment",
                Tensor::randn(&[NUM_TYPES, d], EMBEDDING_STD, rng),
            ),
            norm: LayerNorm::new(&mut s, "theta.embeddings.norm", d),
        };
        let encoder = (0..config.num_layers)
            .map(|i| {
                let p = format!("theta.encoder.{i}");
                EncoderLayer {
                    self_attn: Attention::new(&mut s, &format!("{p}.self_attn"), d, h, rng),
                    norm1: LayerNorm::new(&mut s, &format!("{p}.norm1"), d),
                    ffn: FeedForward::new(&mut s, &format!("{p}.ffn"), d, ff, act, rng),
                    norm2: LayerNorm::new(&mut s, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        let d1 = (0..config.num_layers)
            .map(|i| {
                let p = format!("theta.d1.{i}");
                D1Layer {
                    self_attn: Attention::new(&mut s, &format!("{p}.self_attn"), d, h, rng),
                    norm1: LayerNorm::new(&mut s, &format!("{p}.norm1"), d),
                    cross_attn: Attention::new(&mut s, &format!("{p}.cross_attn"), d, h, rng),
                    norm2: LayerNorm::new(&mut s, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(&mut s, &format!("{p}.ffn"), d, ff, act, rng),
                    norm3: LayerNorm::new(&mut s, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        let d1_out = Projection {
            weight: (!config.tie_embeddings)
                .then(|| s.add("theta.d1.out.weight", Tensor::randn(&[d, v], (1.0 / d as f64).sqrt(), rng))),
            bias: s.add("theta.d1.out.bias", Tensor::zeros(&[v])),
        };
        let d2 = (0..config.num_layers)
            .map(|i| {
                let p = format!("gamma.d2.{i}");
                D2Layer {
                    persona_attn: Attention::new(&mut s, &format!("{p}.persona_attn"), d, h, rng),
                    norm1: LayerNorm::new(&mut s, &format!("{p}.norm1"), d),
                    persona_ffn: FeedForward::new(&mut s, &format!("{p}.persona_ffn"), d, ff, act, rng),
                    norm2: LayerNorm::new(&mut s, &format!("{p}.norm2"), d),
                    response_attn: Attention::new(&mut s, &format!("{p}.response_attn"), d, h, rng),
                    norm3: LayerNorm::new(&mut s, &format!("{p}.norm3"), d),
                    response_ffn: FeedForward::new(&mut s, &format!("{p}.response_ffn"), d, ff, act, rng),
                    norm4: LayerNorm::new(&mut s, &format!("{p}.norm4"), d),
                }
            })
            .collect();
        let d2_out = Projection {
            weight: (!config.tie_embeddings)
                .then(|| s.add("gamma.d2.out.weight", Tensor::randn(&[d, v], (1.0 / d as f64).sqrt(), rng))),
            bias: s.add("gamma.d2.out.bias", Tensor::zeros(&[v])),
        };
        Ok(Self {
            config,
            params: s,
            embeddings,
            encoder,
            d1,
            d1_out,
            d2,
            d2_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Error naming the first non-finite parameter, if any.
    pub fn check_finite(&self) -> Result<()> {
        self.params
            .all_finite()
            .map_err(|name| Error::NonFiniteParameter(name.to_string()))
    }

    pub fn eval_session(&self) -> Session<'_> {
        Session::eval(&self.params)
    }

    pub fn train_session(&self, rng: ChaCha8Rng) -> Session<'_> {
        Session::train(&self.params, self.config.dropout, rng)
    }

    /// Token + segment + position embeddings, summed and normalised.
    pub fn embed(
        &self,
        sess: &mut Session,
        ids: &[usize],
        type_ids: &[usize],
        position_ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let e = &self.embeddings;
        let (tok, pos, seg) = (sess.param(e.token), sess.param(e.position), sess.param(e.segment));
        let shape = [batch, len];
        let x = sess.graph.embedding(tok, ids, &shape)?;
        let p = sess.graph.embedding(pos, position_ids, &shape)?;
        let t = sess.graph.embedding(seg, type_ids, &shape)?;
        let x = sess.graph.add(x, p)?;
        let x = sess.graph.add(x, t)?;
        let x = e.norm.forward(sess, x)?;
        sess.dropout(x)
    }

    fn run_encoder(&self, sess: &mut Session, mut x: Var, mask: &Mask) -> Result<Var> {
        for layer in &self.encoder {
            let a = layer.self_attn.forward(sess, x, x, x, Some(mask))?;
            x = layer.norm1.residual(sess, x, a)?;
            let f = layer.ffn.forward(sess, x)?;
            x = layer.norm2.residual(sess, x, f)?;
        }
        Ok(x)
    }

    /// Full self-attention encoder over `persona ++ [s] ++ query`, plus the
    /// persona representations D2 reads.
    pub fn encode(&self, sess: &mut Session, src: &SourceBatch) -> Result<EncodedBatch> {
        let emb = self.embed(sess, &src.ids, &src.type_ids, &src.position_ids, src.batch, src.len)?;
        let source_mask = src.key_mask();
        let h = self.run_encoder(sess, emb, &source_mask)?;
        let persona = src.persona();
        let p = self.persona_states(sess, &persona)?;
        Ok(EncodedBatch {
            h,
            p,
            source_mask,
            persona_mask: persona.key_mask(),
        })
    }

    /// Persona representations P, computed from constant copies of θ:
    /// raw embeddings by default, or encoder states over the persona segment
    /// alone when [`PersonaSource::EncoderOutput`] is configured.
    pub fn persona_states(&self, sess: &mut Session, persona: &PersonaBatch) -> Result<Var> {
        let prev = sess.freeze_theta(true);
        let out = (|| {
            let types = persona.type_ids();
            let emb = self.embed(sess, &persona.ids, &types, &persona.position_ids, persona.batch, persona.len)?;
            match self.config.persona_source {
                PersonaSource::Embeddings => Ok(emb),
                PersonaSource::EncoderOutput => self.run_encoder(sess, emb, &persona.key_mask()),
            }
        })();
        sess.freeze_theta(prev);
        out
    }

    /// Embedded decoder inputs `[bos] ++ r`.
    pub fn embed_target(&self, sess: &mut Session, target: &TargetBatch) -> Result<Var> {
        let types = vec![0; target.inputs.len()];
        self.embed(sess, &target.inputs, &types, &target.position_ids(), target.batch, target.len)
    }

    /// Embedded hypothesis for the unlikelihood path, aligned with R1:
    /// position `i` holds the token D1 would predict there (`r ++ [eos]`).
    pub fn embed_hypothesis(&self, sess: &mut Session, target: &TargetBatch) -> Result<Var> {
        let types = vec![0; target.inputs.len()];
        self.embed(sess, &target.target_ids(), &types, &target.position_ids(), target.batch, target.len)
    }

    fn project(&self, sess: &mut Session, x: Var, out: &Projection, frozen_tie: bool) -> Result<Var> {
        let shape = sess.graph.shape(x).to_vec();
        let d = self.config.hidden_size;
        let rows = shape.iter().product::<usize>() / d;
        let w = match out.weight {
            Some(w) => sess.param(w),
            None => {
                let e = if frozen_tie {
                    sess.frozen(self.embeddings.token)
                } else {
                    sess.param(self.embeddings.token)
                };
                sess.graph.transpose(e, 0, 1)?
            }
        };
        let b = sess.param(out.bias);
        let flat = sess.graph.reshape(x, &[rows, d])?;
        let y = sess.graph.matmul(flat, w)?;
        let y = sess.graph.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.config.vocab_size;
        sess.graph.reshape(y, &out_shape)
    }

    /// Teacher-forced D1 over `target`, returning `(R1, logits)`.
    pub fn decode_d1(&self, sess: &mut Session, target: &TargetBatch, enc: &EncodedBatch) -> Result<(Var, Var)> {
        let r = self.embed_target(sess, target)?;
        self.decode_d1_from(sess, r, &target.causal_mask()?, enc.h, &enc.source_mask)
    }

    /// D1 from already embedded inputs `r` and encoder states `h`.
    pub fn decode_d1_from(
        &self,
        sess: &mut Session,
        mut r: Var,
        self_mask: &Mask,
        h: Var,
        h_mask: &Mask,
    ) -> Result<(Var, Var)> {
        for layer in &self.d1 {
            let a = layer.self_attn.forward(sess, r, r, r, Some(self_mask))?;
            r = layer.norm1.residual(sess, r, a)?;
            let c = layer.cross_attn.forward(sess, r, h, h, Some(h_mask))?;
            r = layer.norm2.residual(sess, r, c)?;
            let f = layer.ffn.forward(sess, r)?;
            r = layer.norm3.residual(sess, r, f)?;
        }
        let logits = self.project(sess, r, &self.d1_out, false)?;
        Ok((r, logits))
    }

    /// D2 over persona states `p` and response states `r1`, returning
    /// `(R2, logits)`. Attention over `r1` is bidirectional unless the
    /// config asks for a causal D2. Nothing but `p` and `r1` enters.
    pub fn decode_d2(
        &self,
        sess: &mut Session,
        p: Var,
        p_mask: &Mask,
        r1: Var,
        r1_mask: &Mask,
    ) -> Result<(Var, Var)> {
        let causal;
        let r1_mask = if self.config.d2_causal {
            let len = sess.graph.shape(r1)[1];
            causal = Mask::causal(len).or(r1_mask)?;
            &causal
        } else {
            r1_mask
        };
        let mut r2 = r1;
        for layer in &self.d2 {
            let a = layer.persona_attn.forward(sess, r2, p, p, Some(p_mask))?;
            let a = layer.norm1.residual(sess, r2, a)?;
            let f = layer.persona_ffn.forward(sess, a)?;
            let pn = layer.norm2.residual(sess, a, f)?;
            let b = layer.response_attn.forward(sess, pn, r1, r1, Some(r1_mask))?;
            let b = layer.norm3.residual(sess, pn, b)?;
            let f = layer.response_ffn.forward(sess, b)?;
            r2 = layer.norm4.residual(sess, b, f)?;
        }
        let logits = self.project(sess, r2, &self.d2_out, true)?;
        Ok((r2, logits))
    }

    /// Encoder-only masked-token logits `[batch, len, vocab]` through the
    /// D1 projection head.
    pub fn masked_lm_logits(&self, sess: &mut Session, src: &SourceBatch) -> Result<Var> {
        let emb = self.embed(sess, &src.ids, &src.type_ids, &src.position_ids, src.batch, src.len)?;
        let h = self.run_encoder(sess, emb, &src.key_mask())?;
        self.project(sess, h, &self.d1_out, false)
    }
}
