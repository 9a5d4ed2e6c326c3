//! Analytic training cost of a decoder/encoder Transformer stack.
//!
//! Weights per block are `(4 + 2·mlp_ratio)·h²` (Q/K/V/output projections plus
//! the two MLP matrices); the embedding table `V·h` is tied with the output
//! head. FLOPs count 2 per multiply-accumulate and 3× for forward + backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a Transformer model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub name: String,
    pub num_blocks: u64,
    pub hidden_size: u64,
    pub num_heads: u64,
    pub vocab_size: u64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: u64,
}

fn default_mlp_ratio() -> u64 {
    4
}

/// Names of the built-in model presets.
pub const MODEL_PRESETS: [&str; 4] = ["distilbert", "gpt2-s", "opt-350m", "gpt2-l"];

impl TransformerSpec {
    pub fn new(
        name: impl Into<String>,
        num_blocks: u64,
        hidden_size: u64,
        num_heads: u64,
        vocab_size: u64,
    ) -> Self {
        TransformerSpec {
            name: name.into(),
            num_blocks,
            hidden_size,
            num_heads,
            vocab_size,
            mlp_ratio: 4,
        }
    }

    pub fn distilbert() -> Self {
        Self::new("distilbert", 6, 768, 12, 30522)
    }

    pub fn gpt2_small() -> Self {
        Self::new("gpt2-s", 12, 768, 12, 50257)
    }

    pub fn opt_350m() -> Self {
        Self::new("opt-350m", 24, 1024, 16, 50272)
    }

    pub fn gpt2_large() -> Self {
        Self::new("gpt2-l", 36, 1280, 20, 50257)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "distilbert" => Ok(Self::distilbert()),
            "gpt2-s" => Ok(Self::gpt2_small()),
            "opt-350m" | "opt" => Ok(Self::opt_350m()),
            "gpt2-l" => Ok(Self::gpt2_large()),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn presets() -> Vec<Self> {
        MODEL_PRESETS
            .iter()
            .map(|n| Self::preset(n).expect("built-in preset"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_blocks", self.num_blocks),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(
                "num_heads",
                format!(
                    "hidden size {} is not divisible by {} heads",
                    self.hidden_size, self.num_heads
                ),
            ));
        }
        Ok(())
    }

    /// Weights in one Transformer block.
    pub fn block_params(&self) -> u64 {
        (4 + 2 * self.mlp_ratio) * self.hidden_size * self.hidden_size
    }

    /// Weights of the (tied) token embedding / output head.
    pub fn embedding_params(&self) -> u64 {
        self.vocab_size * self.hidden_size
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_size / self.num_heads.max(1)
    }
}

/// Batch geometry and byte constants of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub global_batch: u64,
    pub seq_len: u64,
    pub micro_batch: u64,
    pub dp_sync_period: u64,
    pub param_bytes: f64,
    /// Training state held per parameter, in units of `param_bytes`.
    pub optimizer_state_multiplier: f64,
    /// Scale applied to the fp16-reference activation footprint.
    pub activation_bytes_factor: f64,
}

impl Default for TrainingJob {
    /// fp32 with an Adam-like optimizer: 16 bytes of state per parameter.
    fn default() -> Self {
        TrainingJob {
            global_batch: 128,
            seq_len: 32,
            micro_batch: 128,
            dp_sync_period: 5,
            param_bytes: 4.0,
            optimizer_state_multiplier: 4.0,
            activation_bytes_factor: 2.0,
        }
    }
}

impl TrainingJob {
    /// The job used on the testbed presets: B=128, s=32, m=8, sync every 5
    /// iterations, fp32 weights and gradients without extra optimizer moments.
    pub fn testbed() -> Self {
        TrainingJob {
            micro_batch: 8,
            optimizer_state_multiplier: 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_batch == 0 {
            return Err(Error::invalid("global_batch", "must be positive"));
        }
        if self.seq_len == 0 {
            return Err(Error::invalid("seq_len", "must be positive"));
        }
        if self.micro_batch == 0 || self.micro_batch > self.global_batch {
            return Err(Error::invalid(
                "micro_batch",
                format!("must be in 1..={}", self.global_batch),
            ));
        }
        if !self.global_batch.is_multiple_of(self.micro_batch) {
            return Err(Error::invalid(
                "micro_batch",
                format!(
                    "{} does not divide global batch {}",
                    self.micro_batch, self.global_batch
                ),
            ));
        }
        if self.dp_sync_period == 0 {
            return Err(Error::invalid("dp_sync_period", "must be at least 1"));
        }
        for (field, v) in [
            ("param_bytes", self.param_bytes),
            ("optimizer_state_multiplier", self.optimizer_state_multiplier),
            ("activation_bytes_factor", self.activation_bytes_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, "must be a positive number"));
            }
        }
        Ok(())
    }

    /// Number of micro-batches per iteration.
    pub fn micro_batches(&self) -> u64 {
        self.global_batch / self.micro_batch.max(1)
    }

    pub fn state_bytes_per_param(&self) -> f64 {
        self.param_bytes * self.optimizer_state_multiplier
    }
}

/// Derived costs of one job on one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadCosts {
    pub params: u64,
    pub flops_per_iter: f64,
    pub state_bytes: f64,
    pub activation_bytes_per_block_per_microbatch: f64,
}

impl WorkloadCosts {
    pub fn new(spec: &TransformerSpec, job: &TrainingJob) -> Self {
        let params = param_count(spec);
        WorkloadCosts {
            params,
            flops_per_iter: flops_per_iteration(spec, job),
            state_bytes: state_bytes(params, job),
            activation_bytes_per_block_per_microbatch: activation_bytes_per_block(
                spec,
                job.micro_batch,
                job,
            ),
        }
    }
}

/// `P = 12·L·h² + V·h` at the default MLP ratio.
pub fn param_count(spec: &TransformerSpec) -> u64 {
    spec.num_blocks * spec.block_params() + spec.embedding_params()
}

pub fn state_bytes(params: u64, job: &TrainingJob) -> f64 {
    params as f64 * job.state_bytes_per_param()
}

/// Forward + backward FLOPs of one block for one sample whose `query_len`
/// tokens attend over `key_len` tokens.
pub fn block_flops_per_sample(spec: &TransformerSpec, query_len: u64, key_len: u64) -> f64 {
    let h = spec.hidden_size as f64;
    let q = query_len as f64;
    let k = key_len as f64;
    6.0 * q * spec.block_params() as f64 + 12.0 * q * k * h
}

/// Forward + backward FLOPs of the output head for `tokens` tokens.
pub fn head_flops_per_sample(spec: &TransformerSpec, tokens: u64) -> f64 {
    6.0 * tokens as f64 * spec.hidden_size as f64 * spec.vocab_size as f64
}

/// Training FLOPs of one sample through the whole model.
pub fn flops_per_sample(spec: &TransformerSpec, seq_len: u64) -> f64 {
    spec.num_blocks as f64 * block_flops_per_sample(spec, seq_len, seq_len)
        + head_flops_per_sample(spec, seq_len)
}

/// `F = 6·B·s·12Lh² + 12·L·B·s²·h + 6·B·s·h·V`.
pub fn flops_per_iteration(spec: &TransformerSpec, job: &TrainingJob) -> f64 {
    job.global_batch as f64 * flops_per_sample(spec, job.seq_len)
}

/// Stored activations of one block for `micro_batch` samples:
/// `factor · s·m·h·(34 + 5·a·s/h)`.
pub fn activation_bytes_per_block(spec: &TransformerSpec, micro_batch: u64, job: &TrainingJob) -> f64 {
    local_activation_bytes_per_block(spec, micro_batch, job.seq_len, job.seq_len, job)
}

/// Activations of one block when a device holds `local_tokens` of each
/// sequence attending over `key_len` tokens.
pub fn local_activation_bytes_per_block(
    spec: &TransformerSpec,
    micro_batch: u64,
    local_tokens: u64,
    key_len: u64,
    job: &TrainingJob,
) -> f64 {
    if spec.hidden_size == 0 {
        return 0.0;
    }
    let h = spec.hidden_size as f64;
    let a = spec.num_heads as f64;
    let attn = 5.0 * a * key_len as f64 / h;
    job.activation_bytes_factor * local_tokens as f64 * micro_batch as f64 * h * (34.0 + attn)
}

/// Activations of one block on one of `ways` tensor-parallel shards:
/// `factor · s·m·h·(10 + 24/n + 5·a·s/(h·n))`.
pub fn tensor_parallel_activation_bytes_per_block(
    spec: &TransformerSpec,
    micro_batch: u64,
    ways: u64,
    job: &TrainingJob,
) -> f64 {
    if spec.hidden_size == 0 {
        return 0.0;
    }
    let n = ways.max(1) as f64;
    let h = spec.hidden_size as f64;
    let a = spec.num_heads as f64;
    let s = job.seq_len as f64;
    job.activation_bytes_factor * s * micro_batch as f64 * h * (10.0 + 24.0 / n + 5.0 * a * s / (h * n))
}

/// Memory of a full model replica trained with micro-batches of `job.micro_batch`.
pub fn full_replication_memory(spec: &TransformerSpec, job: &TrainingJob) -> f64 {
    state_bytes(param_count(spec), job)
        + spec.num_blocks as f64 * activation_bytes_per_block(spec, job.micro_batch, job)
}
