//! Mixture-of-encoder adapter: cosine router with learnable temperature, a
//! heterogeneous expert bank (one full-rank matrix plus progressively
//! lower-rank factor pairs), the re-parameterized adapter forward pass, and
//! the two auxiliary routing losses.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};

pub const MIN_TAU: f32 = 1e-3;
pub const DEFAULT_TAU: f32 = 0.07;
pub const ENTROPY_EPS: f64 = 1e-12;

/// Router parameters: token down-projection `w1` (d×d_e), expert embeddings
/// `w_e` (d_e×N, one column per expert), learnable temperature `tau`.
#[derive(Clone, Debug)]
pub struct RouterParams {
    pub w1: Mat<f32>,
    pub w_e: Mat<f32>,
    pub tau: f32,
}

impl RouterParams {
    pub fn token_dim(&self) -> usize {
        self.w1.rows()
    }
    pub fn proj_dim(&self) -> usize {
        self.w1.cols()
    }
    pub fn n_experts(&self) -> usize {
        self.w_e.cols()
    }
}

/// Expert 0 is a full d×c matrix; expert `i ≥ 1` is a rank-limited pair
/// `(down: d×⌊c/i⌋, up: ⌊c/i⌋×c)`.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub full_expert: Mat<f32>,
    pub lowrank_experts: Vec<(Mat<f32>, Mat<f32>)>,
}

impl ExpertBank {
    pub fn n_experts(&self) -> usize {
        1 + self.lowrank_experts.len()
    }
    pub fn in_dim(&self) -> usize {
        self.full_expert.rows()
    }
    pub fn out_dim(&self) -> usize {
        self.full_expert.cols()
    }

    /// Rank bound ⌊c/i⌋ for expert `i ≥ 1`.
    pub fn rank_bound(c: usize, i: usize) -> usize {
        assert!(i >= 1);
        c / i
    }
}

/// One adapter: pre-projection `w_u` (d×d), router, and an expert bank with
/// `c = d` so the residual addition is well-typed.
#[derive(Clone, Debug)]
pub struct MoeaLayer {
    pub w_u: Mat<f32>,
    pub router: RouterParams,
    pub bank: ExpertBank,
}

/// Routing result for a single token.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateRecord {
    pub gates: Vec<f32>,
    pub token_index: usize,
    pub layer_index: usize,
}

impl GateRecord {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &g) in self.gates.iter().enumerate() {
            if g > self.gates[best] {
                best = i;
            }
        }
        best
    }
}

fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| x * x).sum::<f32>().sqrt()
}

/// Cosine-similarity gates: softmax over experts of
/// `cos(w1ᵀ·token, w_e[:,i]) / tau`. A zero-norm projected token (or a
/// zero expert embedding column) contributes a zero similarity, which for
/// an all-zero projection yields uniform gates.
pub fn route(router: &RouterParams, token: &[f32]) -> GateRecord {
    assert_eq!(token.len(), router.token_dim(), "token dimension mismatch");
    let d_e = router.proj_dim();
    let n = router.n_experts();
    // proj = token ⋅ w1 (row-vector convention)
    let mut proj = vec![0.0f32; d_e];
    for (i, &tv) in token.iter().enumerate() {
        if tv == 0.0 {
            continue;
        }
        let wrow = router.w1.row(i);
        for (p, &wv) in proj.iter_mut().zip(wrow) {
            *p += tv * wv;
        }
    }
    let pnorm = l2_norm(&proj);
    let mut logits = vec![0.0f32; n];
    if pnorm > 0.0 {
        for (j, logit) in logits.iter_mut().enumerate() {
            let mut dot = 0.0f32;
            let mut e_sq = 0.0f32;
            for (i, &pv) in proj.iter().enumerate() {
                let ev = router.w_e.get(i, j);
                dot += pv * ev;
                e_sq += ev * ev;
            }
            let enorm = e_sq.sqrt();
            if enorm > 0.0 {
                *logit = dot / (pnorm * enorm) / router.tau;
            }
        }
    }
    crate::tape::softmax_row_inplace(&mut logits);
    GateRecord {
        gates: logits,
        token_index: 0,
        layer_index: 0,
    }
}

/// Expert 0 directly; expert `i ≥ 1` as the `down·up` product.
pub fn materialize_expert(bank: &ExpertBank, i: usize) -> Result<Mat<f32>> {
    if i >= bank.n_experts() {
        return Err(Error::InvalidArgument(format!(
            "expert index {i} out of range (N = {})",
            bank.n_experts()
        )));
    }
    if i == 0 {
        Ok(bank.full_expert.clone())
    } else {
        let (down, up) = &bank.lowrank_experts[i - 1];
        Ok(down.matmul(up))
    }
}

/// Gate-weighted sum of materialized experts.
pub fn mix_experts(bank: &ExpertBank, gates: &[f32]) -> Result<Mat<f32>> {
    if gates.len() != bank.n_experts() {
        return Err(Error::InvalidArgument(format!(
            "gate length {} != N = {}",
            gates.len(),
            bank.n_experts()
        )));
    }
    let mut mixed = Mat::zeros(bank.in_dim(), bank.out_dim());
    for (i, &g) in gates.iter().enumerate() {
        let expert = materialize_expert(bank, i)?;
        for (m, &e) in mixed.data_mut().iter_mut().zip(expert.data()) {
            *m += g * e;
        }
    }
    Ok(mixed)
}

/// `token · w_u · mix_experts(bank, route(token)) + token` — the literal
/// mix-then-apply form. The training graph uses the equivalent
/// apply-then-mix route; the two are tied together by tests.
pub fn moea_forward(layer: &MoeaLayer, token: &[f32]) -> Result<Vec<f32>> {
    let d = layer.w_u.rows();
    if token.len() != d || layer.bank.out_dim() != d {
        return Err(Error::InvalidArgument(
            "moea_forward requires token dim == w_u dim == expert output dim".into(),
        ));
    }
    let gates = route(&layer.router, token);
    let mixed = mix_experts(&layer.bank, &gates.gates)?;
    // h = token ⋅ w_u
    let mut h = vec![0.0f32; layer.w_u.cols()];
    for (i, &tv) in token.iter().enumerate() {
        for (o, &wv) in h.iter_mut().zip(layer.w_u.row(i)) {
            *o += tv * wv;
        }
    }
    // out = h ⋅ mixed + token
    let mut out = token.to_vec();
    for (i, &hv) in h.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        for (o, &mv) in out.iter_mut().zip(mixed.row(i)) {
            *o += hv * mv;
        }
    }
    Ok(out)
}

/// Balance penalty: with `importance_i = Σ_tokens gates_i`, the squared
/// coefficient of variation `(std/mean)²` using the population std.
pub fn importance_loss(records: &[GateRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "importance_loss needs a non-empty batch".into(),
        ));
    }
    let n = records[0].gates.len();
    let mut importance = vec![0.0f64; n];
    for r in records {
        assert_eq!(r.gates.len(), n, "inconsistent expert count in records");
        for (acc, &g) in importance.iter_mut().zip(&r.gates) {
            *acc += g as f64;
        }
    }
    Ok(cv_squared(&importance))
}

pub(crate) fn cv_squared(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

/// Mean per-token Shannon entropy `−Σ g·ln(g + 1e-12)`; in `[0, ln N]`.
/// Minimizing it pushes each token toward one expert.
pub fn entropy_loss(records: &[GateRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "entropy_loss needs a non-empty batch".into(),
        ));
    }
    let mut total = 0.0f64;
    for r in records {
        let mut h = 0.0f64;
        for &g in &r.gates {
            let g = g as f64;
            h -= g * (g + ENTROPY_EPS).ln();
        }
        total += h;
    }
    Ok((total / records.len() as f64).max(0.0))
}

/// Graph nodes for one adapter's parameters on a tape.
pub struct MoeaNodes {
    pub w_u: NodeId,
    pub router_w1: NodeId,
    /// expert embeddings stored row-per-expert: (N, d_e)
    pub router_we_rows: NodeId,
    pub tau: NodeId,
    pub full_expert: NodeId,
    pub lowrank: Vec<(NodeId, NodeId)>,
}

/// Build the adapter forward pass on the tape for a whole token matrix
/// (S×d). Returns `(output tokens, gates node (S×N))`.
///
/// Uses the apply-then-mix form `Σ_i g_i · (x·w_u·W_i) + x`, which is
/// algebraically identical to mixing the expert matrices first but avoids
/// materializing a per-token mixed matrix.
pub fn build_moea_forward<T: crate::mat::Real>(
    tape: &mut Tape<T>,
    nodes: &MoeaNodes,
    x: NodeId,
) -> (NodeId, NodeId) {
    let n_experts = 1 + nodes.lowrank.len();
    // gates
    let proj = tape.matmul(x, nodes.router_w1);
    let proj_n = tape.l2_normalize_rows(proj);
    let we_n = tape.l2_normalize_rows(nodes.router_we_rows);
    let sims = tape.matmul_nt(proj_n, we_n);
    let logits = tape.div_by_scalar_node(sims, nodes.tau);
    let gates = tape.softmax_rows(logits);
    // adapter path
    let h = tape.matmul(x, nodes.w_u);
    let mut acc: Option<NodeId> = None;
    for i in 0..n_experts {
        let y = if i == 0 {
            tape.matmul(h, nodes.full_expert)
        } else {
            let (down, up) = nodes.lowrank[i - 1];
            let hd = tape.matmul(h, down);
            tape.matmul(hd, up)
        };
        let g_col = tape.column(gates, i);
        let weighted = tape.row_scale(y, g_col);
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(a, weighted),
        });
    }
    let out = tape.add(acc.expect("n_experts >= 1"), x);
    (out, gates)
}
