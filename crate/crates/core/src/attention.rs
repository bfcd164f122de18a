//! Soft attention over sliding `n x n` patches of the search feature map,
//! producing the controller input.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

pub const PREFIX: &str = "attn/";

/// `L` patch vectors (rows of an `L x C` matrix) with their grid geometry.
#[derive(Debug, Clone, Copy)]
pub struct PatchBank {
    pub vectors: Var,
    pub count: usize,
    pub grid: (usize, usize),
    pub window: usize,
    pub stride: usize,
}

pub(crate) fn add_params<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let (a, h, c) = (cfg.attention_size, cfg.hidden_size, cfg.channels());
    store.insert(format!("{PREFIX}wa"), glorot(rng, &[a, 1], a, 1));
    store.insert(format!("{PREFIX}wh"), glorot(rng, &[a, h], h, a));
    store.insert(format!("{PREFIX}wf"), glorot(rng, &[c, a], c, a));
    store.insert(format!("{PREFIX}b"), Tensor::zeros(&[a]));
}

/// Average-pools every `n x n` window of the map (row-major order).
pub fn pool_patches<T: Scalar>(tape: &mut Tape<T>, features: Var, n: usize, stride: usize) -> Result<PatchBank> {
    let pooled = tape.avg_pool(features, n, stride)?;
    let (gh, gw, c) = match *tape.shape(pooled) {
        [a, b, c] => (a, b, c),
        _ => return invalid("pool_patches: unexpected pooled shape"),
    };
    let vectors = tape.reshape(pooled, &[gh * gw, c])?;
    Ok(PatchBank { vectors, count: gh * gw, grid: (gh, gw), window: n, stride })
}

/// `r_i = W^a . tanh(W^h h + W^f f_i + b)` for every patch.
pub fn attention_scores<T: Scalar>(tape: &mut Tape<T>, params: &Bound, h_prev: Var, bank: &PatchBank) -> Result<Var> {
    let projected = tape.matmul(bank.vectors, params.get(&format!("{PREFIX}wf"))?)?;
    let wh = tape.matvec(params.get(&format!("{PREFIX}wh"))?, h_prev)?;
    let shift = tape.add(wh, params.get(&format!("{PREFIX}b"))?)?;
    let pre = tape.add_row_bias(projected, shift)?;
    let act = tape.tanh(pre);
    let scores = tape.matmul(act, params.get(&format!("{PREFIX}wa"))?)?;
    tape.reshape(scores, &[bank.count])
}

/// Softmax-weighted sum of the patch vectors. Returns `(a_t, alpha)`.
pub fn attended_vector<T: Scalar>(tape: &mut Tape<T>, scores: Var, bank: &PatchBank) -> Result<(Var, Var)> {
    if tape.shape(scores) != [bank.count] {
        return invalid(format!("{:?} scores for {} patches", tape.shape(scores), bank.count));
    }
    let alpha = tape.softmax(scores)?;
    let row = tape.reshape(alpha, &[1, bank.count])?;
    let mixed = tape.matmul(row, bank.vectors)?;
    let c = tape.shape(bank.vectors)[1];
    Ok((tape.reshape(mixed, &[c])?, alpha))
}

/// Uniform mean of all patch vectors (the no-attention variant).
pub fn mean_vector<T: Scalar>(tape: &mut Tape<T>, bank: &PatchBank) -> Result<Var> {
    tape.mean_rows(bank.vectors)
}
