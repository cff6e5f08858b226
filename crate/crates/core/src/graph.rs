//! Relational reasoning over part nodes: a learned affinity graph, row
//! softmax normalization, graph convolutions and per-node differences.

use rand::Rng;

use crate::encoder::scaled_init;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GraphParams {
    pub w_i: ParamId,
    pub w_j: ParamId,
    pub layers: Vec<ParamId>,
}

impl GraphParams {
    /// Affinity projections start small so the initial softmax is not saturated.
    pub fn register(store: &mut ParamStore, d: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if layers < 1 {
            return Err(Error::Config("graph needs at least one GCN layer".into()));
        }
        let proj_std = 0.1 / (d as f64).sqrt();
        let layer_std = (1.0 / d as f64).sqrt();
        Ok(GraphParams {
            w_i: store.add("graph.w_i", scaled_init(&[d, d], proj_std, rng)),
            w_j: store.add("graph.w_j", scaled_init(&[d, d], proj_std, rng)),
            layers: (0..layers)
                .map(|l| store.add(&format!("graph.gcn{l}.weight"), scaled_init(&[d, d], layer_std, rng)))
                .collect(),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_i, self.w_j];
        ids.extend(&self.layers);
        ids
    }
}

fn nodes_shape(tape: &Tape, v: Var, op: &'static str) -> Result<[usize; 3]> {
    match *tape.shape(v) {
        [n, k, d] => Ok([n, k, d]),
        ref s => Err(Error::shape(op, format!("expected nodes [N, K, D], got {s:?}"))),
    }
}

/// `X W^T` applied to every node of `v[N, K, D]`.
fn project(tape: &mut Tape, v: Var, w: Var) -> Result<Var> {
    let [n, k, d] = nodes_shape(tape, v, "project")?;
    let flat = tape.reshape(v, &[n * k, d])?;
    let wt = tape.transpose(w)?;
    let out = tape.matmul(flat, wt)?;
    let e = tape.shape(out)[1];
    tape.reshape(out, &[n, k, e])
}

/// `A[n, i, j] = (W_i v_i) . (W_j v_j)` for `v[N, K, D]`, giving `[N, K, K]`.
pub fn affinity(tape: &mut Tape, store: &ParamStore, p: &GraphParams, v: Var) -> Result<Var> {
    nodes_shape(tape, v, "affinity")?;
    let wi = tape.param(store, p.w_i)?;
    let wj = tape.param(store, p.w_j)?;
    let left = project(tape, v, wi)?;
    let right = project(tape, v, wj)?;
    let right_t = tape.transpose(right)?;
    tape.bmm(left, right_t)
}

/// Row softmax of `A[N, K, K]`.
pub fn normalize_adjacency(tape: &mut Tape, a: Var) -> Result<Var> {
    tape.softmax(a, 2)
}

/// `V_{l+1} = relu(A_hat V_l W_l)` for every layer.
pub fn gcn_forward(tape: &mut Tape, store: &ParamStore, p: &GraphParams, v: Var, a_hat: Var) -> Result<Var> {
    let [n, k, d] = nodes_shape(tape, v, "gcn_forward")?;
    if tape.shape(a_hat) != [n, k, k] {
        return Err(Error::shape(
            "gcn_forward",
            format!("adjacency {:?} for nodes {:?}", tape.shape(a_hat), [n, k, d]),
        ));
    }
    let mut x = v;
    for &id in &p.layers {
        let w = tape.param(store, id)?;
        let mixed = tape.bmm(a_hat, x)?;
        let flat = tape.reshape(mixed, &[n * k, d])?;
        let out = tape.matmul(flat, w)?;
        let out = tape.relu(out)?;
        x = tape.reshape(out, &[n, k, d])?;
    }
    Ok(x)
}

/// Affinity, normalization and GCN in one call.
pub fn relate(tape: &mut Tape, store: &ParamStore, p: &GraphParams, v: Var) -> Result<Var> {
    let a = affinity(tape, store, p, v)?;
    let a_hat = normalize_adjacency(tape, a)?;
    gcn_forward(tape, store, p, v, a_hat)
}

/// `v1 - v2` node by node.
pub fn node_difference(tape: &mut Tape, v1: Var, v2: Var) -> Result<Var> {
    let (s1, s2) = (
        nodes_shape(tape, v1, "node_difference")?,
        nodes_shape(tape, v2, "node_difference")?,
    );
    if s1 != s2 {
        return Err(Error::shape("node_difference", format!("{s1:?} vs {s2:?}")));
    }
    tape.sub(v1, v2)
}
