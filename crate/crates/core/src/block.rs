//! A single pre-LN decoder block in conventional and fused form, and the
//! operation graph each form induces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::gelu_tanh;
use crate::error::{mismatch, Error, Result};
use crate::fusion::{
    fold_layernorm_linear, fold_rmsnorm_linear, fused_layernorm_matmul, fused_rmsnorm_matmul,
    fused_softmax_matmul, llama_mlp, FoldedLinear, FoldedLlamaMlp, LlamaMlpWeights,
    RmsFoldedLinear,
};
use crate::norms::{layernorm, rmsnorm, softmax_stable, LayerNormParams, RmsNormParams};
use crate::tensor::{Matrix, RowVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Layernorm with a GELU MLP.
    StandardGelu,
    /// RMSNorm with a SwiGLU MLP.
    LlamaSwiglu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub mlp_hidden: usize,
    pub variant: Variant,
    /// Layernorm `ε` for the standard variant, RMSNorm `ε` for the Llama one.
    pub epsilon_ln: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let eps_ok = match self.variant {
            Variant::StandardGelu => self.epsilon_ln > 0.0,
            Variant::LlamaSwiglu => self.epsilon_ln >= 0.0,
        };
        if !eps_ok || !self.epsilon_ln.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon_ln {} is out of range for {:?}",
                self.epsilon_ln, self.variant
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormParams {
    LayerNorm(LayerNormParams),
    RmsNorm(RmsNormParams),
}

impl NormParams {
    fn apply(&self, x: &RowVector) -> Result<RowVector> {
        match self {
            NormParams::LayerNorm(p) => layernorm(x, p),
            NormParams::RmsNorm(p) => rmsnorm(x, p),
        }
    }

    fn dim(&self) -> usize {
        match self {
            NormParams::LayerNorm(p) => p.dim(),
            NormParams::RmsNorm(p) => p.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpWeights {
    /// `gelu(h·fc1)·fc2`.
    Standard {
        fc1: Matrix,
        fc2: Matrix,
    },
    Llama(LlamaMlpWeights),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln1: NormParams,
    pub ln2: NormParams,
    pub mlp: MlpWeights,
}

impl BlockWeights {
    /// Uniform weights scaled by `1/√fan_in`, `γ ∈ [0.5, 1.5)`, `β ∈ [−0.5, 0.5)`.
    pub fn random<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        let mut mat = |r: usize, c: usize| {
            let bound = 1.0 / (r as f64).sqrt();
            Matrix::new(
                r,
                c,
                (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        let w_q = mat(d, d)?;
        let w_k = mat(d, d)?;
        let w_v = mat(d, d)?;
        let w_o = mat(d, d)?;
        let mlp = match cfg.variant {
            Variant::StandardGelu => MlpWeights::Standard {
                fc1: mat(d, h)?,
                fc2: mat(h, d)?,
            },
            Variant::LlamaSwiglu => {
                MlpWeights::Llama(LlamaMlpWeights::new(mat(d, h)?, mat(d, h)?, mat(h, d)?)?)
            }
        };
        let mut norm = || -> Result<NormParams> {
            let gamma = RowVector::new((0..d).map(|_| rng.gen_range(0.5..1.5)).collect())?;
            Ok(match cfg.variant {
                Variant::StandardGelu => {
                    let beta = RowVector::new((0..d).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
                    NormParams::LayerNorm(LayerNormParams::new(gamma, beta, cfg.epsilon_ln)?)
                }
                Variant::LlamaSwiglu => {
                    NormParams::RmsNorm(RmsNormParams::new(gamma, cfg.epsilon_ln)?)
                }
            })
        };
        let ln1 = norm()?;
        let ln2 = norm()?;
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            ln1,
            ln2,
            mlp,
        })
    }

    /// Every matrix, `γ` and `β` set to zero.
    pub fn zeros(cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        let norm = || -> Result<NormParams> {
            Ok(match cfg.variant {
                Variant::StandardGelu => NormParams::LayerNorm(LayerNormParams::new(
                    RowVector::zeros(d),
                    RowVector::zeros(d),
                    cfg.epsilon_ln,
                )?),
                Variant::LlamaSwiglu => {
                    NormParams::RmsNorm(RmsNormParams::new(RowVector::zeros(d), cfg.epsilon_ln)?)
                }
            })
        };
        let mlp = match cfg.variant {
            Variant::StandardGelu => MlpWeights::Standard {
                fc1: Matrix::zeros(d, h),
                fc2: Matrix::zeros(h, d),
            },
            Variant::LlamaSwiglu => MlpWeights::Llama(LlamaMlpWeights::new(
                Matrix::zeros(d, h),
                Matrix::zeros(d, h),
                Matrix::zeros(h, d),
            )?),
        };
        Ok(Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln1: norm()?,
            ln2: norm()?,
            mlp,
        })
    }

    pub fn validate(&self, cfg: &BlockConfig) -> Result<()> {
        cfg.validate()?;
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if m.shape() != (d, d) {
                return Err(shape_err(name, (d, d), m.shape()));
            }
        }
        for norm in [&self.ln1, &self.ln2] {
            let kind_ok = matches!(
                (cfg.variant, norm),
                (Variant::StandardGelu, NormParams::LayerNorm(_))
                    | (Variant::LlamaSwiglu, NormParams::RmsNorm(_))
            );
            if !kind_ok {
                return Err(Error::InvalidConfig(format!(
                    "normalization kind does not match variant {:?}",
                    cfg.variant
                )));
            }
            if norm.dim() != d {
                return Err(mismatch("block norm", d, norm.dim()));
            }
        }
        match (&self.mlp, cfg.variant) {
            (MlpWeights::Standard { fc1, fc2 }, Variant::StandardGelu) => {
                if fc1.shape() != (d, h) {
                    return Err(shape_err("fc1", (d, h), fc1.shape()));
                }
                if fc2.shape() != (h, d) {
                    return Err(shape_err("fc2", (h, d), fc2.shape()));
                }
            }
            (MlpWeights::Llama(w), Variant::LlamaSwiglu) => {
                if w.w_gate().shape() != (d, h) {
                    return Err(shape_err("w_gate", (d, h), w.w_gate().shape()));
                }
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "mlp kind does not match variant {:?}",
                    cfg.variant
                )))
            }
        }
        Ok(())
    }
}

fn shape_err(name: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Error {
    mismatch(name, format!("{expected:?}"), format!("{actual:?}"))
}

fn check_input(cfg: &BlockConfig, x: &Matrix) -> Result<()> {
    if x.shape() != (cfg.seq_len, cfg.d_model) {
        return Err(shape_err(
            "block input",
            (cfg.seq_len, cfg.d_model),
            x.shape(),
        ));
    }
    Ok(())
}

fn map_rows(x: &Matrix, mut f: impl FnMut(&RowVector) -> Result<RowVector>) -> Result<Matrix> {
    let rows = (0..x.rows())
        .map(|r| f(&x.row_vector(r)))
        .collect::<Result<Vec<_>>>()?;
    Matrix::stack(&rows)
}

fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(shape_err("residual", a.shape(), b.shape()));
    }
    Ok(Matrix::from_raw(
        a.rows(),
        a.cols(),
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x + y)
            .collect(),
    ))
}

/// Scaled logits `q·kⱼᵀ/√d_head` of one query row against every key, for one head.
fn head_logits(q: &Matrix, k: &Matrix, row: usize, head: usize, dh: usize) -> RowVector {
    let scale = (dh as f64).sqrt();
    let qh = &q.row(row)[head * dh..(head + 1) * dh];
    RowVector::from_raw(
        (0..k.rows())
            .map(|j| {
                let kh = &k.row(j)[head * dh..(head + 1) * dh];
                qh.iter().zip(kh).fold(0.0, |acc, (a, b)| acc + a * b) / scale
            })
            .collect(),
    )
}

/// Multi-head attention given projected `Q`, `K`, `V`; `attend` maps a
/// row of logits and a head's value block to that head's output row.
fn attention(
    cfg: &BlockConfig,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mut attend: impl FnMut(&RowVector, &Matrix) -> Result<RowVector>,
) -> Result<Matrix> {
    let dh = cfg.head_dim();
    let value_blocks: Vec<Matrix> = (0..cfg.n_heads)
        .map(|h| v.column_block(h * dh, dh))
        .collect();
    let mut rows = Vec::with_capacity(cfg.seq_len);
    for i in 0..cfg.seq_len {
        let mut out = Vec::with_capacity(cfg.d_model);
        for (h, vh) in value_blocks.iter().enumerate() {
            let logits = head_logits(q, k, i, h, dh);
            out.extend_from_slice(attend(&logits, vh)?.as_slice());
        }
        rows.push(RowVector::from_raw(out));
    }
    Matrix::stack(&rows)
}

/// Pre-LN block: `x₁ = x + Attn(LN1(x))`, `out = x₁ + MLP(LN2(x₁))`.
pub fn run_conventional(cfg: &BlockConfig, w: &BlockWeights, x: &Matrix) -> Result<Matrix> {
    w.validate(cfg)?;
    check_input(cfg, x)?;
    let h1 = map_rows(x, |r| w.ln1.apply(r))?;
    let q = map_rows(&h1, |r| r.matmul(&w.w_q))?;
    let k = map_rows(&h1, |r| r.matmul(&w.w_k))?;
    let v = map_rows(&h1, |r| r.matmul(&w.w_v))?;
    let attn = attention(cfg, &q, &k, &v, |logits, vh| {
        softmax_stable(logits).matmul(vh)
    })?;
    let x1 = add(x, &map_rows(&attn, |r| r.matmul(&w.w_o))?)?;
    let h2 = map_rows(&x1, |r| w.ln2.apply(r))?;
    let mlp = match &w.mlp {
        MlpWeights::Standard { fc1, fc2 } => map_rows(&h2, |r| {
            let u = r.matmul(fc1)?;
            RowVector::from_raw(u.iter().map(|&z| gelu_tanh(z)).collect()).matmul(fc2)
        })?,
        MlpWeights::Llama(lw) => map_rows(&h2, |r| llama_mlp(r, lw))?,
    };
    add(&x1, &mlp)
}

/// A normalization folded into one projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldedProjection {
    LayerNorm(FoldedLinear),
    RmsNorm(RmsFoldedLinear),
}

impl FoldedProjection {
    fn fold(norm: &NormParams, f: &Matrix) -> Result<Self> {
        Ok(match norm {
            NormParams::LayerNorm(p) => Self::LayerNorm(fold_layernorm_linear(p, f)?),
            NormParams::RmsNorm(p) => Self::RmsNorm(fold_rmsnorm_linear(p, f)?),
        })
    }

    fn apply(&self, x: &RowVector, epsilon: f64) -> Result<RowVector> {
        match self {
            Self::LayerNorm(fl) => fused_layernorm_matmul(x, fl, epsilon),
            Self::RmsNorm(fl) => fused_rmsnorm_matmul(x, fl, epsilon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldedMlp {
    Standard { fc1: FoldedLinear, fc2: Matrix },
    Llama(FoldedLlamaMlp),
}

/// Every fusion site of a block with its weights folded ahead of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldedBlock {
    pub q: FoldedProjection,
    pub k: FoldedProjection,
    pub v: FoldedProjection,
    pub ln1_epsilon: f64,
    pub w_o: Matrix,
    pub ln2_epsilon: f64,
    pub mlp: FoldedMlp,
}

fn norm_epsilon(norm: &NormParams) -> f64 {
    match norm {
        NormParams::LayerNorm(p) => p.epsilon(),
        NormParams::RmsNorm(p) => p.epsilon(),
    }
}

impl FoldedBlock {
    /// One fold per projection, so Q, K and V each carry their own copy of `Γ`.
    pub fn fold(cfg: &BlockConfig, w: &BlockWeights) -> Result<Self> {
        w.validate(cfg)?;
        let mlp = match (&w.mlp, &w.ln2) {
            (MlpWeights::Standard { fc1, fc2 }, NormParams::LayerNorm(p)) => FoldedMlp::Standard {
                fc1: fold_layernorm_linear(p, fc1)?,
                fc2: fc2.clone(),
            },
            (MlpWeights::Llama(lw), NormParams::RmsNorm(p)) => {
                FoldedMlp::Llama(FoldedLlamaMlp::fold(p, lw)?)
            }
            _ => return Err(Error::InvalidConfig("mlp and ln2 kinds disagree".into())),
        };
        Ok(Self {
            q: FoldedProjection::fold(&w.ln1, &w.w_q)?,
            k: FoldedProjection::fold(&w.ln1, &w.w_k)?,
            v: FoldedProjection::fold(&w.ln1, &w.w_v)?,
            ln1_epsilon: norm_epsilon(&w.ln1),
            w_o: w.w_o.clone(),
            ln2_epsilon: norm_epsilon(&w.ln2),
            mlp,
        })
    }

    pub fn validate(&self, cfg: &BlockConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model;
        for (name, p) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            let (shape, ok) = match (p, cfg.variant) {
                (FoldedProjection::LayerNorm(fl), Variant::StandardGelu) => {
                    (fl.folded_weight.shape(), fl.folded_bias.len() == d)
                }
                (FoldedProjection::RmsNorm(fl), Variant::LlamaSwiglu) => {
                    (fl.folded_weight.shape(), true)
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "folded projection {name} does not match variant"
                    )))
                }
            };
            if shape != (d, d) || !ok {
                return Err(shape_err("folded projection", (d, d), shape));
            }
        }
        if self.w_o.shape() != (d, d) {
            return Err(shape_err("w_o", (d, d), self.w_o.shape()));
        }
        let h = cfg.mlp_hidden;
        let mlp_ok = match (&self.mlp, cfg.variant) {
            (FoldedMlp::Standard { fc1, fc2 }, Variant::StandardGelu) => {
                fc1.folded_weight.shape() == (d, h)
                    && fc1.folded_bias.len() == h
                    && fc2.shape() == (h, d)
            }
            (FoldedMlp::Llama(m), Variant::LlamaSwiglu) => {
                m.gate.folded_weight.shape() == (d, h)
                    && m.up.folded_weight.shape() == (d, h)
                    && m.w_down.shape() == (h, d)
            }
            _ => false,
        };
        if !mlp_ok {
            return Err(Error::InvalidConfig(
                "folded mlp does not match block config".into(),
            ));
        }
        Ok(())
    }
}

/// Fused block evaluated from pre-folded weights.
pub fn run_folded(cfg: &BlockConfig, fb: &FoldedBlock, x: &Matrix) -> Result<Matrix> {
    fb.validate(cfg)?;
    check_input(cfg, x)?;
    let q = map_rows(x, |r| fb.q.apply(r, fb.ln1_epsilon))?;
    let k = map_rows(x, |r| fb.k.apply(r, fb.ln1_epsilon))?;
    let v = map_rows(x, |r| fb.v.apply(r, fb.ln1_epsilon))?;
    let attn = attention(cfg, &q, &k, &v, fused_softmax_matmul)?;
    let x1 = add(x, &map_rows(&attn, |r| r.matmul(&fb.w_o))?)?;
    let mlp = match &fb.mlp {
        FoldedMlp::Standard { fc1, fc2 } => map_rows(&x1, |r| {
            let u = fused_layernorm_matmul(r, fc1, fb.ln2_epsilon)?;
            RowVector::from_raw(u.iter().map(|&z| gelu_tanh(z)).collect()).matmul(fc2)
        })?,
        FoldedMlp::Llama(m) => map_rows(&x1, |r| m.apply(r))?,
    };
    add(&x1, &mlp)
}

/// Fold, then run the fused block.
pub fn run_fused(cfg: &BlockConfig, w: &BlockWeights, x: &Matrix) -> Result<Matrix> {
    run_folded(cfg, &FoldedBlock::fold(cfg, w)?, x)
}

// ---------------------------------------------------------------------------
// Operation graphs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Elementwise,
    Collective,
    Matmul,
    /// Applies a site's normalization scale. Placed before the matmul in the
    /// conventional graph and at the join after it in the fused graph.
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineClass {
    Vector,
    Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Work {
    Elements(u64),
    Macs(u64),
    /// `rows` independent reductions over `len` elements each; rows in
    /// different `groups` (attention heads) reduce in parallel.
    Reduction {
        rows: u64,
        len: u64,
        groups: u64,
    },
}

impl Work {
    pub fn is_positive(&self) -> bool {
        match *self {
            Work::Elements(n) | Work::Macs(n) => n > 0,
            Work::Reduction { rows, len, groups } => rows > 0 && len > 0 && groups > 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSite {
    /// LN1 followed by the Q, K and V projections.
    Ln1Qkv,
    /// Attention softmax followed by the product with `V`.
    SoftmaxValue,
    /// LN2 followed by the MLP up (and gate) projection.
    Ln2Mlp,
}

impl FusionSite {
    pub const ALL: [FusionSite; 3] = [
        FusionSite::Ln1Qkv,
        FusionSite::SoftmaxValue,
        FusionSite::Ln2Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionSite::Ln1Qkv => "ln1_qkv",
            FusionSite::SoftmaxValue => "softmax_value",
            FusionSite::Ln2Mlp => "ln2_mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: usize,
    pub label: String,
    pub kind: NodeKind,
    pub work: Work,
    pub engine: EngineClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site: Option<FusionSite>,
}

/// Node ids of one normalization site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteNodes {
    pub site: FusionSite,
    pub elementwise: usize,
    pub collective: usize,
    pub scale: usize,
    pub matmul: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpGraph {
    pub nodes: Vec<OpNode>,
    /// `(producer, consumer)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub fused: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<BlockConfig>,
}

impl OpGraph {
    /// Builds a graph from nodes whose ids equal their positions.
    pub fn new(nodes: Vec<OpNode>, edges: Vec<(usize, usize)>, fused: bool) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::InvalidInput(format!(
                    "node at position {i} has id {}",
                    n.id
                )));
            }
            if !n.work.is_positive() {
                return Err(Error::InvalidInput(format!("node {i} has zero work")));
            }
        }
        if let Some(&(a, b)) = edges
            .iter()
            .find(|&&(a, b)| a >= nodes.len() || b >= nodes.len())
        {
            return Err(Error::InvalidInput(format!(
                "edge {a}->{b} is out of range"
            )));
        }
        Ok(Self {
            nodes,
            edges,
            fused,
            config: None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn predecessors(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == id).map(|e| e.0)
    }

    pub fn successors(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == id).map(|e| e.1)
    }

    /// Kahn's algorithm, smallest ready id first.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let mut indegree = vec![0usize; self.len()];
        for &(_, b) in &self.edges {
            indegree[b] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..self.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(next) = ready.pop_first() {
            order.push(next);
            for s in self.successors(next).collect::<Vec<_>>() {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() == self.len() {
            Ok(order)
        } else {
            Err(Error::Cycle)
        }
    }

    pub fn is_acyclic(&self) -> bool {
        self.topo_order().is_ok()
    }

    pub fn has_path(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            stack.extend(self.successors(n));
        }
        false
    }

    /// Nodes tagged with `site`, identified by kind.
    pub fn site_nodes(&self, site: FusionSite) -> Option<SiteNodes> {
        let find = |kind: NodeKind| {
            self.nodes
                .iter()
                .find(|n| n.site == Some(site) && n.kind == kind)
                .map(|n| n.id)
        };
        Some(SiteNodes {
            site,
            elementwise: find(NodeKind::Elementwise)?,
            collective: find(NodeKind::Collective)?,
            scale: find(NodeKind::Sync)?,
            matmul: find(NodeKind::Matmul)?,
        })
    }

    pub fn sites(&self) -> Vec<SiteNodes> {
        FusionSite::ALL
            .iter()
            .filter_map(|&s| self.site_nodes(s))
            .collect()
    }

    /// Sites whose collective and matmul are mutually unreachable.
    pub fn overlappable_sites(&self) -> Vec<SiteNodes> {
        self.sites()
            .into_iter()
            .filter(|s| {
                !self.has_path(s.collective, s.matmul) && !self.has_path(s.matmul, s.collective)
            })
            .collect()
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match n.work {
                Work::Macs(m) => m,
                _ => 0,
            })
            .sum()
    }

    /// Induced subgraph on `ids`, renumbered in the given order.
    pub fn subgraph(&self, ids: &[usize]) -> Result<OpGraph> {
        let index = |id: usize| ids.iter().position(|&x| x == id);
        let nodes = ids
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let mut n = self.nodes[old].clone();
                n.id = new;
                n
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|&(a, b)| Some((index(a)?, index(b)?)))
            .collect();
        OpGraph::new(nodes, edges, self.fused)
    }

    /// A site's nodes plus its immediate upstream and downstream neighbours.
    pub fn site_window(&self, site: FusionSite) -> Result<OpGraph> {
        let s = self
            .site_nodes(site)
            .ok_or_else(|| Error::InvalidInput(format!("graph has no site {}", site.name())))?;
        let members = [s.elementwise, s.collective, s.scale, s.matmul];
        let mut ids: Vec<usize> = Vec::new();
        for &m in &members {
            ids.extend(self.predecessors(m).filter(|p| !members.contains(p)));
        }
        ids.extend(members);
        for &m in &members {
            ids.extend(self.successors(m).filter(|p| !members.contains(p)));
        }
        let mut seen = std::collections::HashSet::new();
        ids.retain(|id| seen.insert(*id));
        ids.sort_unstable();
        self.subgraph(&ids)
    }
}

struct GraphBuilder {
    nodes: Vec<OpNode>,
    edges: Vec<(usize, usize)>,
}

impl GraphBuilder {
    fn node(&mut self, label: &str, kind: NodeKind, work: Work, site: Option<FusionSite>) -> usize {
        let engine = match kind {
            NodeKind::Matmul => EngineClass::Matrix,
            _ => EngineClass::Vector,
        };
        let id = self.nodes.len();
        self.nodes.push(OpNode {
            id,
            label: label.to_string(),
            kind,
            work,
            engine,
            site,
        });
        id
    }

    fn edge(&mut self, from: usize, to: usize) {
        self.edges.push((from, to));
    }

    /// Emits one normalization site and returns the node downstream work
    /// should depend on.
    ///
    /// Conventional: `elementwise → collective → scale → matmul`.
    /// Fused: `elementwise → {collective, matmul} → scale`.
    #[allow(clippy::too_many_arguments)]
    fn site(
        &mut self,
        fused: bool,
        upstream: Option<usize>,
        site: FusionSite,
        prefix: &str,
        elementwise: u64,
        reduction: Work,
        macs: u64,
        scaled_elements: u64,
    ) -> usize {
        let e = self.node(
            &format!("{prefix}.elementwise"),
            NodeKind::Elementwise,
            Work::Elements(elementwise),
            Some(site),
        );
        if let Some(u) = upstream {
            self.edge(u, e);
        }
        let c = self.node(
            &format!("{prefix}.collective"),
            NodeKind::Collective,
            reduction,
            Some(site),
        );
        let s = self.node(
            &format!("{prefix}.scale"),
            NodeKind::Sync,
            Work::Elements(scaled_elements),
            Some(site),
        );
        let m = self.node(
            &format!("{prefix}.matmul"),
            NodeKind::Matmul,
            Work::Macs(macs),
            Some(site),
        );
        self.edge(e, c);
        if fused {
            self.edge(e, m);
            self.edge(c, s);
            self.edge(m, s);
            s
        } else {
            self.edge(c, s);
            self.edge(s, m);
            m
        }
    }
}

/// Dependency graph of one block.
///
/// Work is counted over the whole `seq_len` prefill. Softmax reductions carry
/// `groups = n_heads` so each head reduces independently.
pub fn build_graph(cfg: &BlockConfig, fused: bool) -> Result<OpGraph> {
    cfg.validate()?;
    let (s, d, h, heads) = (
        cfg.seq_len as u64,
        cfg.d_model as u64,
        cfg.mlp_hidden as u64,
        cfg.n_heads as u64,
    );
    let up_width = match cfg.variant {
        Variant::StandardGelu => h,
        Variant::LlamaSwiglu => 2 * h,
    };
    let mut g = GraphBuilder {
        nodes: Vec::new(),
        edges: Vec::new(),
    };

    let qkv = g.site(
        fused,
        None,
        FusionSite::Ln1Qkv,
        "ln1_qkv",
        s * d,
        Work::Reduction {
            rows: s,
            len: d,
            groups: 1,
        },
        3 * s * d * d,
        3 * s * d,
    );
    let scores = g.node("attn.scores", NodeKind::Matmul, Work::Macs(s * s * d), None);
    g.edge(qkv, scores);
    let attn_v = g.site(
        fused,
        Some(scores),
        FusionSite::SoftmaxValue,
        "softmax_value",
        heads * s * s,
        Work::Reduction {
            rows: heads * s,
            len: s,
            groups: heads,
        },
        s * s * d,
        s * d,
    );
    let out_proj = g.node(
        "attn.out_proj",
        NodeKind::Matmul,
        Work::Macs(s * d * d),
        None,
    );
    g.edge(attn_v, out_proj);
    let residual1 = g.node(
        "residual1",
        NodeKind::Elementwise,
        Work::Elements(s * d),
        None,
    );
    g.edge(out_proj, residual1);
    let up = g.site(
        fused,
        Some(residual1),
        FusionSite::Ln2Mlp,
        "ln2_mlp",
        s * d,
        Work::Reduction {
            rows: s,
            len: d,
            groups: 1,
        },
        s * d * up_width,
        s * up_width,
    );
    let act = g.node(
        "mlp.activation",
        NodeKind::Elementwise,
        Work::Elements(s * h),
        None,
    );
    g.edge(up, act);
    let down = g.node("mlp.down", NodeKind::Matmul, Work::Macs(s * h * d), None);
    g.edge(act, down);
    let residual2 = g.node(
        "residual2",
        NodeKind::Elementwise,
        Work::Elements(s * d),
        None,
    );
    g.edge(down, residual2);
    g.edge(residual1, residual2);

    let mut graph = OpGraph::new(g.nodes, g.edges, fused)?;
    graph.config = Some(cfg.clone());
    Ok(graph)
}
