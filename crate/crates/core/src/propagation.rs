//! Cascade and parallel graph streams with knowledge fusion.
//!
//! For each behavior `k` in cascade order, both streams run light-weight
//! graph convolution over `Â_k`:
//!
//! * parallel: `p^{k,l+1} = Â_k p^{k,l} + p^{k,l}`, restarting from the
//!   initial embeddings for every behavior;
//! * cascade: `z^{k,l+1} = e_cas + z^{k,l} + enhance(e_cas, e_par)` where
//!   `e_cas = Â_k z^{k,l}` and `e_par = Â_k p^{k,l}`. The first layer of
//!   behavior `k+1` is `z^{k,L_k} + z^{k,0}`.
//!
//! Each behavior's output is the sum over its layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormalizedAdjacency;
use crate::error::{PkefError, Result};
use crate::math::dense::dot;
use crate::math::vector::{project, softmax};
use crate::math::{spmm, DenseMatrix, Tape, Var};
use crate::params::{xavier_uniform, Bound, ParamStore};

pub const EMB_USER: &str = "emb.user";
pub const EMB_ITEM: &str = "emb.item";

/// How parallel-stream knowledge enters the cascade update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionScheme {
    Projection,
    Vanilla,
    Summation,
    Linear,
}

impl FusionScheme {
    pub const ALL: [FusionScheme; 4] = [
        FusionScheme::Projection,
        FusionScheme::Vanilla,
        FusionScheme::Summation,
        FusionScheme::Linear,
    ];
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionScheme::Projection => "projection",
            FusionScheme::Vanilla => "vanilla",
            FusionScheme::Summation => "summation",
            FusionScheme::Linear => "linear",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionScheme {
    type Err = PkefError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "projection" => Ok(FusionScheme::Projection),
            "vanilla" => Ok(FusionScheme::Vanilla),
            "summation" => Ok(FusionScheme::Summation),
            "linear" => Ok(FusionScheme::Linear),
            other => Err(PkefError::Config(format!("unknown fusion scheme '{other}'"))),
        }
    }
}

/// Stream layout: layer counts per behavior and the fusion scheme. Without a
/// scheme only the cascade stream runs.
#[derive(Clone, Debug, PartialEq)]
pub struct PkfConfig {
    pub layers: Vec<usize>,
    pub fusion: Option<FusionScheme>,
}

impl PkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(PkefError::Config("at least one behavior is required".into()));
        }
        if let Some(k) = self.layers.iter().position(|&l| l < 1) {
            return Err(PkefError::Config(format!("behavior {k} has zero layers")));
        }
        Ok(())
    }
}

pub fn vanilla_w(k: usize, l: usize) -> String {
    format!("fusion.vanilla.w.{k}.{l}")
}

pub fn vanilla_b(k: usize, l: usize) -> String {
    format!("fusion.vanilla.b.{k}.{l}")
}

pub fn linear_t(k: usize, l: usize) -> String {
    format!("fusion.linear.t.{k}.{l}")
}

/// User and item embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub users: DenseMatrix,
    pub items: DenseMatrix,
}

impl EmbeddingTable {
    pub fn xavier(user_count: usize, item_count: usize, dim: usize, rng: &mut impl Rng) -> Self {
        EmbeddingTable {
            users: xavier_uniform(user_count, dim, rng),
            items: xavier_uniform(item_count, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    /// Users stacked over items.
    pub fn stacked(&self) -> DenseMatrix {
        DenseMatrix::vstack(&self.users, &self.items).expect("tables share the embedding size")
    }

    pub fn insert_into(self, store: &mut ParamStore) {
        store.insert(EMB_USER, self.users);
        store.insert(EMB_ITEM, self.items);
    }
}

/// Adds the parameters of `scheme` for every (behavior, layer) pair.
pub fn init_fusion_params(store: &mut ParamStore, scheme: FusionScheme, layers: &[usize], dim: usize, rng: &mut impl Rng) {
    for (k, &lk) in layers.iter().enumerate() {
        for l in 0..lk {
            match scheme {
                FusionScheme::Vanilla => {
                    store.insert(vanilla_w(k, l), xavier_uniform(4, dim, rng));
                    store.insert(vanilla_b(k, l), DenseMatrix::zeros(1, 4));
                }
                FusionScheme::Linear => store.insert(linear_t(k, l), xavier_uniform(dim, dim, rng)),
                FusionScheme::Projection | FusionScheme::Summation => {}
            }
        }
    }
}

/// One graph convolution step: `(Â x, Â x + x)`.
pub fn propagate_layer(adj: &NormalizedAdjacency, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let message = spmm(&adj.matrix, x)?;
    let next = message.add(x);
    Ok((message, next))
}

/// Seed for the next behavior's cascade: last layer plus first layer.
pub fn cascade_handoff(last: &DenseMatrix, first: &DenseMatrix) -> DenseMatrix {
    last.add(first)
}

/// Projection-enhanced update of one node.
pub fn fuse_projection(e_cas: &[f64], e_par: &[f64], z_prev: &[f64]) -> Vec<f64> {
    let col = project(e_par, e_cas);
    (0..e_cas.len()).map(|i| e_cas[i] + z_prev[i] + col[i]).collect()
}

/// Attention-weighted update of one node. `w` is `4×d`, `b` has 4 entries.
pub fn fuse_vanilla(e_cas: &[f64], e_par: &[f64], z_prev: &[f64], w: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..4).map(|j| dot(w.row(j), e_cas) + b[j]).collect();
    let wt = softmax(&logits);
    (0..e_cas.len())
        .map(|i| {
            let chunks = [e_cas[i], e_par[i], e_cas[i] - e_par[i], e_cas[i] * e_par[i]];
            let mixed: f64 = chunks.iter().zip(&wt).map(|(c, w)| c * w).sum();
            e_cas[i] + z_prev[i] + mixed
        })
        .collect()
}

pub fn fuse_summation(e_cas: &[f64], e_par: &[f64], z_prev: &[f64]) -> Vec<f64> {
    (0..e_cas.len()).map(|i| e_cas[i] + z_prev[i] + e_par[i]).collect()
}

/// Linear-transfer update of one node. `t` is `d×d`.
pub fn fuse_linear(e_cas: &[f64], e_par: &[f64], z_prev: &[f64], t: &DenseMatrix) -> Vec<f64> {
    (0..e_cas.len())
        .map(|i| e_cas[i] + z_prev[i] + dot(t.row(i), e_par))
        .collect()
}

/// Tape handles for the per-behavior layer sums.
#[derive(Clone, Debug)]
pub struct StreamGraph {
    pub cascade: Vec<Var>,
    pub parallel: Vec<Option<Var>>,
}

/// Values of the per-behavior layer sums.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorOutputs {
    pub cascade: Vec<DenseMatrix>,
    pub parallel: Vec<Option<DenseMatrix>>,
}

impl BehaviorOutputs {
    pub fn from_graph(tape: &Tape, graph: &StreamGraph) -> Self {
        BehaviorOutputs {
            cascade: graph.cascade.iter().map(|&v| tape.value(v).clone()).collect(),
            parallel: graph
                .parallel
                .iter()
                .map(|p| p.map(|v| tape.value(v).clone()))
                .collect(),
        }
    }
}

fn fuse_on_tape(
    tape: &mut Tape,
    scheme: FusionScheme,
    params: &Bound<'_>,
    k: usize,
    l: usize,
    e_cas: Var,
    e_par: Var,
) -> Result<Var> {
    match scheme {
        FusionScheme::Projection => tape.project_rows(e_par, e_cas, false),
        FusionScheme::Summation => Ok(e_par),
        FusionScheme::Linear => {
            let t = params.var(&linear_t(k, l))?;
            tape.matmul_t(e_par, t)
        }
        FusionScheme::Vanilla => {
            let w = params.var(&vanilla_w(k, l))?;
            let b = params.var(&vanilla_b(k, l))?;
            let logits = tape.matmul_t(e_cas, w)?;
            let logits = tape.add_row(logits, b)?;
            let weights = tape.softmax_rows(logits);
            let diff = tape.sub(e_cas, e_par)?;
            let prod = tape.mul(e_cas, e_par)?;
            let mut terms = Vec::with_capacity(4);
            for (j, chunk) in [e_cas, e_par, diff, prod].into_iter().enumerate() {
                let wj = tape.col(weights, j)?;
                terms.push(tape.mul_col(chunk, wj)?);
            }
            tape.add_all(&terms)
        }
    }
}

/// Builds both streams on `tape` from the bound embeddings (and fusion
/// parameters, when the scheme has any).
pub fn forward_pkf(tape: &mut Tape, params: &Bound<'_>, adjs: &[NormalizedAdjacency], cfg: &PkfConfig) -> Result<StreamGraph> {
    cfg.validate()?;
    if adjs.len() != cfg.layers.len() {
        return Err(PkefError::Config(format!(
            "{} adjacencies for {} behaviors",
            adjs.len(),
            cfg.layers.len()
        )));
    }
    let users = params.var(EMB_USER)?;
    let items = params.var(EMB_ITEM)?;
    let initial = tape.vstack(users, items)?;

    let mut cascade = Vec::with_capacity(adjs.len());
    let mut parallel = Vec::with_capacity(adjs.len());
    let mut seed = initial;
    for (k, (adj, &lk)) in adjs.iter().zip(&cfg.layers).enumerate() {
        let mut z_layers = vec![seed];
        let mut p_layers = vec![initial];
        for l in 0..lk {
            let z = z_layers[l];
            let e_cas = tape.spmm(&adj.matrix, z)?;
            let base = tape.add(e_cas, z)?;
            let next = match cfg.fusion {
                Some(scheme) => {
                    let p = p_layers[l];
                    let e_par = tape.spmm(&adj.matrix, p)?;
                    p_layers.push(tape.add(e_par, p)?);
                    let enh = fuse_on_tape(tape, scheme, params, k, l, e_cas, e_par)?;
                    tape.add(base, enh)?
                }
                None => base,
            };
            z_layers.push(next);
        }
        cascade.push(tape.add_all(&z_layers)?);
        parallel.push(match cfg.fusion {
            Some(_) => Some(tape.add_all(&p_layers)?),
            None => None,
        });
        seed = tape.add(z_layers[lk], z_layers[0])?;
    }
    Ok(StreamGraph { cascade, parallel })
}
