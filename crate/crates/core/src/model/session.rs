use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

use super::params::{Group, ParamId, ParamStore};

/// One forward pass: a fresh [`Graph`] plus the bindings of stored
/// parameters onto it.
///
/// Each parameter can be bound twice: as a trainable leaf and as a constant
/// copy. While [`Session::freeze_theta`] is set, every θ lookup resolves to
/// the constant copy, so paths built in that mode never send gradient into
/// the generation stack.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    snapshot: &'a ParamStore,
    live: Vec<Option<Var>>,
    frozen: Vec<Option<Var>>,
    freeze_theta: bool,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    /// Deterministic session with dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            snapshot: store,
            live: vec![None; store.len()],
            frozen: vec![None; store.len()],
            freeze_theta: false,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training session drawing dropout masks from `rng`.
    pub fn train(store: &'a ParamStore, dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
            ..Self::eval(store)
        }
    }

    /// Eval session whose constant copies come from `snapshot` instead of
    /// `store`. Lets finite differences perturb the trainable bindings while
    /// holding the frozen ones fixed.
    pub fn eval_with_snapshot(store: &'a ParamStore, snapshot: &'a ParamStore) -> Self {
        assert_eq!(store.len(), snapshot.len(), "snapshot layout differs");
        Self {
            snapshot,
            ..Self::eval(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Hand back the dropout RNG, advanced past every draw of this pass.
    pub fn take_rng(&mut self) -> Option<ChaCha8Rng> {
        self.rng.take()
    }

    /// Set the θ-freezing mode, returning the previous one.
    pub fn freeze_theta(&mut self, on: bool) -> bool {
        std::mem::replace(&mut self.freeze_theta, on)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if self.freeze_theta && self.store.group(id) == Group::Theta {
            return self.frozen(id);
        }
        match self.live[id.0] {
            Some(v) => v,
            None => {
                let v = self.graph.param(self.store.get(id).clone());
                self.live[id.0] = Some(v);
                v
            }
        }
    }

    /// Constant copy of a parameter.
    pub fn frozen(&mut self, id: ParamId) -> Var {
        match self.frozen[id.0] {
            Some(v) => v,
            None => {
                let v = self.graph.constant(self.snapshot.get(id).clone());
                self.frozen[id.0] = Some(v);
                v
            }
        }
    }

    /// Inverted dropout; identity in eval sessions.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let shape = self.graph.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let data = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.graph.constant(Tensor::new(shape, data)?);
        self.graph.mul(x, m)
    }

    /// Gradient of every parameter bound as a trainable leaf, indexed by
    /// [`ParamId`]. Unbound parameters get `None`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.live
            .iter()
            .map(|v| v.and_then(|v| self.graph.grad(v)))
            .collect()
    }
}
