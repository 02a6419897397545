use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::Tensor;
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Train or inference mode. Dropout is active only in [`Mode::Train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One forward pass of a model: a fresh tape plus lazily bound parameters.
///
/// Trainable parameters become differentiable leaves the first time they are
/// used; frozen ones are bound as constants.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            self.tape.variable(p.tensor.clone())?
        } else {
            self.tape.constant(p.tensor.clone())?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, v: Var, rate: f64) -> Result<Var> {
        let train = self.mode == Mode::Train;
        self.tape.dropout(v, rate, train, &mut self.rng)
    }

    /// Gradients of every bound trainable parameter after
    /// [`Tape::backward`]. Parameters the pass never touched are absent.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad(v).ok().flatten()?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }

    /// Gradient laid out like [`ParamStore::flatten_trainable`], zero for
    /// parameters the pass did not reach.
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut per_param: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        for (id, g) in self.param_grads() {
            per_param[id.0] = Some(g);
        }
        let mut out = Vec::with_capacity(self.store.trainable_scalars());
        for (id, p) in self.store.iter().filter(|(_, p)| p.trainable) {
            match &per_param[id.0] {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.tensor.len())),
            }
        }
        out
    }
}
