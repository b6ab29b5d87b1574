//! Library side of the `normfuse` command: run configuration, reports, and
//! the `verify`, `simulate` and `fold` commands. The binary only parses
//! arguments, prints and maps results to exit codes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{build_graph, BlockConfig, BlockWeights, FoldedBlock, Variant};
use crate::equivalence::{
    block_trial, layernorm_linear_trial, rmsnorm_llama_mlp_trial, softmax_matmul_trial,
};
use crate::error::{Error, Result};
use crate::simulator::{compare, schedule, CostModel, LatencyReport, Timeline};

pub const SCHEMA_VERSION: &str = "1.0";

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status when a numerical or acceptance check fails.
pub const EXIT_NUMERICAL: i32 = 1;
/// Exit status for usage, configuration and input errors.
pub const EXIT_USAGE: i32 = 2;

fn default_tolerance() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub block: BlockConfig,
    pub cost_model: CostModel,
    pub seed: u64,
    pub trials: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.cost_model.validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be non-negative and finite, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Shapes the `verify` command actually evaluates.
///
/// Site checks keep the configured feature width up to a cap; the block check
/// runs a scaled-down block of the same variant. Full-size blocks are only
/// simulated, never evaluated numerically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyShapes {
    pub layernorm_linear: [usize; 2],
    pub softmax_matmul: [usize; 2],
    pub rmsnorm_llama_mlp: [usize; 2],
    pub block: BlockConfig,
}

impl VerifyShapes {
    pub fn for_block(b: &BlockConfig) -> Self {
        let scaled_hidden = |n: usize| {
            ((b.mlp_hidden as f64 * n as f64 / b.d_model as f64).round() as usize).max(1)
        };
        let llama_n = b.d_model.min(512);
        let heads = b.n_heads.min(4);
        let d = (b.d_model.min(128) / heads).max(1) * heads;
        Self {
            layernorm_linear: [b.d_model.min(1024), b.mlp_hidden.min(64)],
            softmax_matmul: [b.seq_len.min(4096), b.head_dim().min(128)],
            rmsnorm_llama_mlp: [llama_n, scaled_hidden(llama_n)],
            block: BlockConfig {
                d_model: d,
                n_heads: heads,
                seq_len: b.seq_len.min(32),
                mlp_hidden: scaled_hidden(d),
                variant: b.variant,
                epsilon_ln: b.epsilon_ln,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteResult {
    pub site: String,
    pub shape: Vec<usize>,
    pub trials: usize,
    /// `null` when a fused result was not finite.
    pub max_rel_err: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    pub pass: bool,
    pub shapes: VerifyShapes,
    pub sites: Vec<SiteResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timelines {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conventional: Option<Timeline>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<Timeline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timelines: Option<Timelines>,
}

impl Report {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            equivalence: None,
            latency: None,
            timelines: None,
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn passed(&self) -> bool {
        self.equivalence.as_ref().is_none_or(|e| e.pass)
    }
}

fn run_site(
    name: &str,
    shape: Vec<usize>,
    trials: usize,
    tolerance: f64,
    stream: u64,
    seed: u64,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<SiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let err = trial(&mut rng)?;
        worst = if err.is_nan() {
            f64::INFINITY
        } else {
            worst.max(err)
        };
    }
    Ok(SiteResult {
        site: name.to_string(),
        shape,
        trials,
        max_rel_err: worst.is_finite().then_some(worst),
        pass: worst <= tolerance,
    })
}

/// `trials` randomized fused-vs-conventional comparisons per fusion site and
/// for a whole block. Each site draws from its own stream of the seed.
pub fn verify(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let shapes = VerifyShapes::for_block(&cfg.block);
    let rms_eps = match cfg.block.variant {
        Variant::LlamaSwiglu => cfg.block.epsilon_ln,
        Variant::StandardGelu => 0.0,
    };
    let (t, tol, seed) = (cfg.trials, cfg.tolerance, cfg.seed);
    let [ln_n, ln_m] = shapes.layernorm_linear;
    let [sm_n, sm_m] = shapes.softmax_matmul;
    let [rms_n, rms_h] = shapes.rmsnorm_llama_mlp;
    let sites = vec![
        run_site(
            "layernorm_linear",
            vec![ln_n, ln_m],
            t,
            tol,
            1,
            seed,
            |rng| layernorm_linear_trial(rng, ln_n, ln_m),
        )?,
        run_site("softmax_matmul", vec![sm_n, sm_m], t, tol, 2, seed, |rng| {
            softmax_matmul_trial(rng, sm_n, sm_m, 1e3)
        })?,
        run_site(
            "rmsnorm_llama_mlp",
            vec![rms_n, rms_h],
            t,
            tol,
            3,
            seed,
            |rng| rmsnorm_llama_mlp_trial(rng, rms_n, rms_h, rms_eps),
        )?,
        run_site(
            "full_block",
            vec![
                shapes.block.seq_len,
                shapes.block.d_model,
                shapes.block.n_heads,
                shapes.block.mlp_hidden,
            ],
            t,
            tol,
            4,
            seed,
            |rng| block_trial(rng, &shapes.block),
        )?,
    ];
    let mut report = Report::new("verify", cfg);
    report.equivalence = Some(EquivalenceReport {
        tolerance: tol,
        pass: sites.iter().all(|s| s.pass),
        shapes,
        sites,
    });
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forms {
    Conventional,
    Fused,
    Both,
}

/// Schedules the configured block. With [`Forms::Both`] the report also
/// carries the latency comparison.
pub fn simulate(cfg: &RunConfig, forms: Forms) -> Result<Report> {
    cfg.validate()?;
    let cm = &cfg.cost_model;
    let conv = build_graph(&cfg.block, false)?;
    let fused = build_graph(&cfg.block, true)?;
    let mut report = Report::new("simulate", cfg);
    let want_conv = forms != Forms::Fused;
    let want_fused = forms != Forms::Conventional;
    report.timelines = Some(Timelines {
        conventional: want_conv.then(|| schedule(&conv, cm)).transpose()?,
        fused: want_fused.then(|| schedule(&fused, cm)).transpose()?,
    });
    if forms == Forms::Both {
        report.latency = Some(compare(&conv, &fused, cm)?);
    }
    Ok(report)
}

/// The on-disk form of a folded block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldedWeightsFile {
    pub schema_version: String,
    pub block: BlockConfig,
    pub folded: FoldedBlock,
}

impl FoldedWeightsFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("folded weights serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        file.folded.validate(&file.block)?;
        Ok(file)
    }
}

pub fn fold(cfg: &RunConfig, weights: &BlockWeights) -> Result<FoldedWeightsFile> {
    cfg.validate()?;
    Ok(FoldedWeightsFile {
        schema_version: SCHEMA_VERSION.to_string(),
        block: cfg.block.clone(),
        folded: FoldedBlock::fold(&cfg.block, weights)?,
    })
}

pub fn load_weights(path: &Path) -> Result<BlockWeights> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Random block weights from the config's seed.
pub fn random_weights(cfg: &RunConfig) -> Result<BlockWeights> {
    cfg.validate()?;
    BlockWeights::random(&cfg.block, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn weights_to_json(w: &BlockWeights) -> String {
    let mut s = serde_json::to_string_pretty(w).expect("weights serialize");
    s.push('\n');
    s
}
