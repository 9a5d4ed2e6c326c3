//! Data, sequence, tensor and pipeline parallel plans.
//!
//! A plan binds a partition of the workload to an ordered list of devices.
//! [`iteration_steps`] expands it into the ordered compute/communication
//! program of one iteration; both [`comm_schedule`] and the simulator are
//! driven from that single expansion.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::platform::TrustedDomain;
use crate::workload::{
    activation_bytes_per_block, block_flops_per_sample, flops_per_sample, head_flops_per_sample,
    local_activation_bytes_per_block, param_count, state_bytes,
    tensor_parallel_activation_bytes_per_block, TrainingJob, TransformerSpec,
};

/// Declaration order is the tie-break order used by the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParallelKind {
    DataParallel,
    PipelineParallel,
    TensorParallel,
    SequenceParallel,
    SingleDevice,
}

impl ParallelKind {
    pub const ALL: [ParallelKind; 5] = [
        ParallelKind::SingleDevice,
        ParallelKind::DataParallel,
        ParallelKind::SequenceParallel,
        ParallelKind::TensorParallel,
        ParallelKind::PipelineParallel,
    ];

    /// The four multi-device kinds in tie-break order.
    pub const COLLABORATIVE: [ParallelKind; 4] = [
        ParallelKind::DataParallel,
        ParallelKind::PipelineParallel,
        ParallelKind::TensorParallel,
        ParallelKind::SequenceParallel,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ParallelKind::DataParallel => "dp",
            ParallelKind::PipelineParallel => "pp",
            ParallelKind::TensorParallel => "tp",
            ParallelKind::SequenceParallel => "sp",
            ParallelKind::SingleDevice => "single",
        }
    }

    /// Whether every participant holds the complete model.
    pub fn replicates_model(self) -> bool {
        matches!(
            self,
            ParallelKind::SingleDevice | ParallelKind::DataParallel | ParallelKind::SequenceParallel
        )
    }
}

impl fmt::Display for ParallelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for ParallelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParallelKind::ALL
            .into_iter()
            .find(|k| k.short_name() == s)
            .ok_or_else(|| Error::invalid("kind", format!("unknown parallelism `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataParallelPartition {
    pub shard_sizes: Vec<u64>,
    pub sync_period: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceParallelPartition {
    pub subseq_lengths: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorParallelPartition {
    pub heads_per_device: Vec<u64>,
    pub hidden_slice_per_device: Vec<u64>,
}

/// Blocks `[start, end)` run on `device`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub device: String,
    pub start: u64,
    pub end: u64,
}

impl Stage {
    pub fn blocks(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineParallelPartition {
    pub stages: Vec<Stage>,
    pub micro_batch_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Single,
    Data(DataParallelPartition),
    Sequence(SequenceParallelPartition),
    Tensor(TensorParallelPartition),
    Pipeline(PipelineParallelPartition),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub participants: Vec<String>,
    pub partition: Partition,
    pub spec: TransformerSpec,
    pub job: TrainingJob,
}

impl ParallelPlan {
    pub fn kind(&self) -> ParallelKind {
        match self.partition {
            Partition::Single => ParallelKind::SingleDevice,
            Partition::Data(_) => ParallelKind::DataParallel,
            Partition::Sequence(_) => ParallelKind::SequenceParallel,
            Partition::Tensor(_) => ParallelKind::TensorParallel,
            Partition::Pipeline(_) => ParallelKind::PipelineParallel,
        }
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    /// Structural checks: distinct participants and a conserving partition.
    pub fn validate(&self) -> Result<()> {
        let n = self.participants.len();
        if n == 0 {
            return Err(Error::invalid("participants", "must not be empty"));
        }
        let distinct: HashSet<_> = self.participants.iter().collect();
        if distinct.len() != n {
            return Err(Error::invalid("participants", "must be distinct"));
        }
        let spec = &self.spec;
        let job = &self.job;
        let sized = |field: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::invalid(field, format!("has {len} entries for {n} participants")))
            }
        };
        match &self.partition {
            Partition::Single => {
                if n != 1 {
                    return Err(Error::invalid("participants", "single-device plan needs exactly one"));
                }
            }
            Partition::Data(p) => {
                sized("shard_sizes", p.shard_sizes.len())?;
                if p.shard_sizes.iter().sum::<u64>() != job.global_batch || p.shard_sizes.contains(&0) {
                    return Err(Error::invalid("shard_sizes", "must be positive and sum to the global batch"));
                }
                if p.sync_period != job.dp_sync_period {
                    return Err(Error::invalid("sync_period", "must equal the job's sync period"));
                }
            }
            Partition::Sequence(p) => {
                sized("subseq_lengths", p.subseq_lengths.len())?;
                if p.subseq_lengths.iter().sum::<u64>() != job.seq_len || p.subseq_lengths.contains(&0) {
                    return Err(Error::invalid(
                        "subseq_lengths",
                        "must be positive and sum to the sequence length",
                    ));
                }
            }
            Partition::Tensor(p) => {
                sized("heads_per_device", p.heads_per_device.len())?;
                sized("hidden_slice_per_device", p.hidden_slice_per_device.len())?;
                if p.heads_per_device.iter().sum::<u64>() != spec.num_heads {
                    return Err(Error::invalid("heads_per_device", "must sum to the head count"));
                }
                if p.hidden_slice_per_device.iter().sum::<u64>() != spec.mlp_ratio * spec.hidden_size {
                    return Err(Error::invalid("hidden_slice_per_device", "must sum to the MLP width"));
                }
            }
            Partition::Pipeline(p) => {
                sized("stages", p.stages.len())?;
                let mut next = 0;
                for (stage, id) in p.stages.iter().zip(&self.participants) {
                    if &stage.device != id {
                        return Err(Error::invalid("stages", "must follow participant order"));
                    }
                    if stage.start != next || stage.end <= stage.start {
                        return Err(Error::invalid("stages", "block ranges must tile the model contiguously"));
                    }
                    next = stage.end;
                }
                if next != spec.num_blocks {
                    return Err(Error::invalid("stages", "block ranges must cover every block"));
                }
                if p.micro_batch_count != job.micro_batches() {
                    return Err(Error::invalid("micro_batch_count", "must equal B / m"));
                }
            }
        }
        Ok(())
    }
}

/// Splits `total` proportionally to `weights` (largest remainder, ties to the
/// lower index). Every part is at least 1 when `total >= weights.len()`.
pub fn largest_remainder(weights: &[f64], total: u64) -> Vec<u64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / n as f64; n]
    };
    let mut parts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        parts[i] += 1;
    }
    if total >= n as u64 {
        while let Some(empty) = parts.iter().position(|&p| p == 0) {
            let donor = (0..n)
                .max_by(|&a, &b| parts[a].cmp(&parts[b]).then(b.cmp(&a)))
                .expect("non-empty");
            parts[donor] -= 1;
            parts[empty] += 1;
        }
    }
    parts
}

fn throughputs(domain: &TrustedDomain, participants: &[String]) -> Result<Vec<f64>> {
    participants.iter().map(|id| domain.throughput(id)).collect()
}

fn check_participants(kind: ParallelKind, domain: &TrustedDomain, participants: &[String]) -> Result<()> {
    if participants.is_empty() {
        return Err(Error::TooFew {
            kind,
            what: "participants",
            required: 1,
            available: 0,
        });
    }
    let mut seen = HashSet::new();
    for id in participants {
        domain.index_of(id)?;
        if !seen.insert(id) {
            return Err(Error::invalid("participants", format!("`{id}` listed twice")));
        }
    }
    Ok(())
}

pub fn make_single_plan(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    device: &str,
) -> Result<ParallelPlan> {
    domain.index_of(device)?;
    Ok(ParallelPlan {
        participants: vec![device.to_string()],
        partition: Partition::Single,
        spec: spec.clone(),
        job: job.clone(),
    })
}

/// Samples split proportionally to device throughput.
pub fn make_dp_plan(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    participants: &[String],
) -> Result<ParallelPlan> {
    check_participants(ParallelKind::DataParallel, domain, participants)?;
    if job.global_batch < participants.len() as u64 {
        return Err(Error::TooFew {
            kind: ParallelKind::DataParallel,
            what: "samples per batch",
            required: participants.len(),
            available: job.global_batch as usize,
        });
    }
    let shard_sizes = largest_remainder(&throughputs(domain, participants)?, job.global_batch);
    Ok(ParallelPlan {
        participants: participants.to_vec(),
        partition: Partition::Data(DataParallelPartition {
            shard_sizes,
            sync_period: job.dp_sync_period,
        }),
        spec: spec.clone(),
        job: job.clone(),
    })
}

/// Tokens of every sequence split proportionally to device throughput.
pub fn make_sp_plan(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    participants: &[String],
) -> Result<ParallelPlan> {
    check_participants(ParallelKind::SequenceParallel, domain, participants)?;
    if job.seq_len < participants.len() as u64 {
        return Err(Error::TooFew {
            kind: ParallelKind::SequenceParallel,
            what: "tokens per sequence",
            required: participants.len(),
            available: job.seq_len as usize,
        });
    }
    let subseq_lengths = largest_remainder(&throughputs(domain, participants)?, job.seq_len);
    Ok(ParallelPlan {
        participants: participants.to_vec(),
        partition: Partition::Sequence(SequenceParallelPartition { subseq_lengths }),
        spec: spec.clone(),
        job: job.clone(),
    })
}

/// Heads and MLP columns split evenly.
pub fn make_tp_plan(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    participants: &[String],
) -> Result<ParallelPlan> {
    check_participants(ParallelKind::TensorParallel, domain, participants)?;
    let n = participants.len() as u64;
    if !spec.num_heads.is_multiple_of(n) {
        return Err(Error::Divisibility {
            what: "attention heads",
            value: spec.num_heads,
            count: participants.len(),
        });
    }
    let width = spec.mlp_ratio * spec.hidden_size;
    if !width.is_multiple_of(n) {
        return Err(Error::Divisibility {
            what: "MLP hidden width",
            value: width,
            count: participants.len(),
        });
    }
    Ok(ParallelPlan {
        participants: participants.to_vec(),
        partition: Partition::Tensor(TensorParallelPartition {
            heads_per_device: vec![spec.num_heads / n; n as usize],
            hidden_slice_per_device: vec![width / n; n as usize],
        }),
        spec: spec.clone(),
        job: job.clone(),
    })
}

/// Contiguous block ranges in participant order. `stage_blocks` gives the
/// block count per stage; when absent the bottleneck-optimal partition is used.
pub fn make_pp_plan(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    participants: &[String],
    stage_blocks: Option<&[u64]>,
) -> Result<ParallelPlan> {
    check_participants(ParallelKind::PipelineParallel, domain, participants)?;
    if spec.num_blocks < participants.len() as u64 {
        return Err(Error::TooFew {
            kind: ParallelKind::PipelineParallel,
            what: "Transformer blocks",
            required: participants.len(),
            available: spec.num_blocks as usize,
        });
    }
    let counts = match stage_blocks {
        Some(c) => c.to_vec(),
        None => crate::scheduler::partition_stages(domain, participants, spec, job)?,
    };
    if counts.len() != participants.len()
        || counts.contains(&0)
        || counts.iter().sum::<u64>() != spec.num_blocks
    {
        return Err(Error::invalid(
            "stage_ranges",
            "need one non-empty contiguous range per participant covering all blocks",
        ));
    }
    let mut start = 0;
    let stages = participants
        .iter()
        .zip(&counts)
        .map(|(id, &c)| {
            let stage = Stage {
                device: id.clone(),
                start,
                end: start + c,
            };
            start += c;
            stage
        })
        .collect();
    Ok(ParallelPlan {
        participants: participants.to_vec(),
        partition: Partition::Pipeline(PipelineParallelPartition {
            stages,
            micro_batch_count: job.micro_batches(),
        }),
        spec: spec.clone(),
        job: job.clone(),
    })
}

/// Builds a plan of `kind` with the default partitioning rules.
pub fn make_plan(
    kind: ParallelKind,
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    participants: &[String],
) -> Result<ParallelPlan> {
    match kind {
        ParallelKind::SingleDevice => {
            if participants.len() != 1 {
                return Err(Error::invalid("participants", "single-device plan needs exactly one"));
            }
            make_single_plan(domain, spec, job, &participants[0])
        }
        ParallelKind::DataParallel => make_dp_plan(domain, spec, job, participants),
        ParallelKind::SequenceParallel => make_sp_plan(domain, spec, job, participants),
        ParallelKind::TensorParallel => make_tp_plan(domain, spec, job, participants),
        ParallelKind::PipelineParallel => make_pp_plan(domain, spec, job, participants, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommOp {
    AllReduce,
    AllGather,
    PointToPoint,
}

impl fmt::Display for CommOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommOp::AllReduce => "all-reduce",
            CommOp::AllGather => "all-gather",
            CommOp::PointToPoint => "p2p",
        })
    }
}

/// Where in the iteration a communication happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommPhase {
    BlockForward { micro_batch: u64, block: u64 },
    BlockBackward { micro_batch: u64, block: u64 },
    StageForward { micro_batch: u64, boundary: u64 },
    StageBackward { micro_batch: u64, boundary: u64 },
    GradientSync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommEvent {
    pub op: CommOp,
    pub payload_bytes: f64,
    pub participants: Vec<String>,
    pub iteration: u64,
    pub phase: CommPhase,
}

/// Compute with one FLOP count per participant. Inactive participants do no
/// work, but their FLOPs still set the slot length of a clocked pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeStep {
    pub flops: Vec<f64>,
    pub active: Vec<bool>,
    pub label: &'static str,
}

/// Concurrent point-to-point transfers on dedicated links.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeStep {
    pub transfers: Vec<CommEvent>,
    pub active: Vec<bool>,
}

/// One barrier-synchronised step of an iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Compute(ComputeStep),
    Collective(CommEvent),
    Exchange(ExchangeStep),
}

fn all_active(flops: Vec<f64>, label: &'static str) -> Step {
    let active = vec![true; flops.len()];
    Step::Compute(ComputeStep { flops, active, label })
}

/// The ordered program of iteration `iteration` (0-based).
pub fn iteration_steps(plan: &ParallelPlan, iteration: u64) -> Vec<Step> {
    let spec = &plan.spec;
    let job = &plan.job;
    let n = plan.participants.len();
    let s = job.seq_len;
    let m = job.micro_batch.max(1);
    let micro_batches = job.micro_batches();
    let blocks = spec.num_blocks;
    let activation = 4.0 * (m * s * spec.hidden_size) as f64;
    let collective = |op, payload, phase| {
        Step::Collective(CommEvent {
            op,
            payload_bytes: payload,
            participants: plan.participants.clone(),
            iteration,
            phase,
        })
    };
    let sync_due = (iteration + 1).is_multiple_of(job.dp_sync_period.max(1));
    let gradient_sync = || collective(CommOp::AllReduce, 4.0 * param_count(spec) as f64, CommPhase::GradientSync);

    let mut steps = Vec::new();
    match &plan.partition {
        Partition::Single => {
            steps.push(all_active(
                vec![job.global_batch as f64 * flops_per_sample(spec, s)],
                "train",
            ));
        }
        Partition::Data(p) => {
            let per_sample = flops_per_sample(spec, s);
            steps.push(all_active(
                p.shard_sizes.iter().map(|&b| b as f64 * per_sample).collect(),
                "train",
            ));
            if n > 1 && sync_due {
                steps.push(gradient_sync());
            }
        }
        Partition::Sequence(p) => {
            let block: Vec<f64> = p
                .subseq_lengths
                .iter()
                .map(|&len| m as f64 * block_flops_per_sample(spec, len, s))
                .collect();
            let head: Vec<f64> = p
                .subseq_lengths
                .iter()
                .map(|&len| m as f64 * head_flops_per_sample(spec, len))
                .collect();
            for mb in 0..micro_batches {
                for b in 0..blocks {
                    steps.push(all_active(block.iter().map(|f| f / 3.0).collect(), "block-fwd"));
                    if n > 1 {
                        steps.push(collective(
                            CommOp::AllGather,
                            activation,
                            CommPhase::BlockForward { micro_batch: mb, block: b },
                        ));
                    }
                }
                steps.push(all_active(head.clone(), "head"));
                for b in (0..blocks).rev() {
                    steps.push(all_active(block.iter().map(|f| 2.0 * f / 3.0).collect(), "block-bwd"));
                    if n > 1 {
                        steps.push(collective(
                            CommOp::AllReduce,
                            activation,
                            CommPhase::BlockBackward { micro_batch: mb, block: b },
                        ));
                    }
                }
            }
            if n > 1 && sync_due {
                steps.push(gradient_sync());
            }
        }
        Partition::Tensor(_) => {
            let ways = n as f64;
            let block = m as f64 * block_flops_per_sample(spec, s, s) / ways;
            let head = m as f64 * head_flops_per_sample(spec, s) / ways;
            for mb in 0..micro_batches {
                for b in 0..blocks {
                    steps.push(all_active(vec![block / 3.0; n], "block-fwd"));
                    if n > 1 {
                        for _ in 0..2 {
                            steps.push(collective(
                                CommOp::AllReduce,
                                activation,
                                CommPhase::BlockForward { micro_batch: mb, block: b },
                            ));
                        }
                    }
                }
                steps.push(all_active(vec![head; n], "head"));
                for b in (0..blocks).rev() {
                    steps.push(all_active(vec![2.0 * block / 3.0; n], "block-bwd"));
                    if n > 1 {
                        for _ in 0..2 {
                            steps.push(collective(
                                CommOp::AllReduce,
                                activation,
                                CommPhase::BlockBackward { micro_batch: mb, block: b },
                            ));
                        }
                    }
                }
            }
        }
        Partition::Pipeline(p) => {
            let stages = p.stages.len() as u64;
            let per_mb = pipeline_stage_flops(plan);
            let slots = p.micro_batch_count + stages - 1;
            let transfer = |from: usize, to: usize, mb: u64, phase: CommPhase| CommEvent {
                op: CommOp::PointToPoint,
                payload_bytes: activation,
                participants: vec![plan.participants[from].clone(), plan.participants[to].clone()],
                iteration,
                phase: match phase {
                    CommPhase::StageForward { boundary, .. } => CommPhase::StageForward { micro_batch: mb, boundary },
                    CommPhase::StageBackward { boundary, .. } => CommPhase::StageBackward { micro_batch: mb, boundary },
                    other => other,
                },
            };
            // Forward: stage j works on micro-batch t - j.
            for t in 0..slots {
                let mb_of = |j: u64| t.checked_sub(j).filter(|&mb| mb < p.micro_batch_count);
                steps.push(Step::Compute(ComputeStep {
                    flops: per_mb.iter().map(|f| f / 3.0).collect(),
                    active: (0..stages).map(|j| mb_of(j).is_some()).collect(),
                    label: "stage-fwd",
                }));
                if stages > 1 {
                    let mut transfers = Vec::new();
                    let mut active = Vec::new();
                    for j in 0..stages - 1 {
                        let mb = mb_of(j);
                        active.push(mb.is_some());
                        transfers.push(transfer(
                            j as usize,
                            j as usize + 1,
                            mb.unwrap_or(0),
                            CommPhase::StageForward { micro_batch: 0, boundary: j },
                        ));
                    }
                    steps.push(Step::Exchange(ExchangeStep { transfers, active }));
                }
            }
            // Backward: stage j works on micro-batch t - (S - 1 - j).
            for t in 0..slots {
                let mb_of = |j: u64| t.checked_sub(stages - 1 - j).filter(|&mb| mb < p.micro_batch_count);
                steps.push(Step::Compute(ComputeStep {
                    flops: per_mb.iter().map(|f| 2.0 * f / 3.0).collect(),
                    active: (0..stages).map(|j| mb_of(j).is_some()).collect(),
                    label: "stage-bwd",
                }));
                if stages > 1 {
                    let mut transfers = Vec::new();
                    let mut active = Vec::new();
                    for j in 1..stages {
                        let mb = mb_of(j);
                        active.push(mb.is_some());
                        transfers.push(transfer(
                            j as usize,
                            j as usize - 1,
                            mb.unwrap_or(0),
                            CommPhase::StageBackward { micro_batch: 0, boundary: j - 1 },
                        ));
                    }
                    steps.push(Step::Exchange(ExchangeStep { transfers, active }));
                }
            }
        }
    }
    steps
}

/// Forward + backward FLOPs of each pipeline stage for one micro-batch; the
/// output head runs on the last stage.
pub fn pipeline_stage_flops(plan: &ParallelPlan) -> Vec<f64> {
    let Partition::Pipeline(p) = &plan.partition else {
        return Vec::new();
    };
    let m = plan.job.micro_batch as f64;
    let s = plan.job.seq_len;
    let last = p.stages.len().saturating_sub(1);
    p.stages
        .iter()
        .enumerate()
        .map(|(j, st)| stage_flops_per_microbatch(&plan.spec, m, s, st.blocks(), j == last))
        .collect()
}

pub(crate) fn stage_flops_per_microbatch(
    spec: &TransformerSpec,
    micro_batch: f64,
    seq_len: u64,
    blocks: u64,
    with_head: bool,
) -> f64 {
    let head = if with_head { head_flops_per_sample(spec, seq_len) } else { 0.0 };
    micro_batch * (blocks as f64 * block_flops_per_sample(spec, seq_len, seq_len) + head)
}

/// Communication of one sync period (`dp_sync_period` iterations), in order.
pub fn comm_schedule(plan: &ParallelPlan) -> Vec<CommEvent> {
    (0..plan.job.dp_sync_period.max(1))
        .flat_map(|it| iteration_steps(plan, it))
        .flat_map(|step| match step {
            Step::Compute(_) => Vec::new(),
            Step::Collective(ev) => vec![ev],
            Step::Exchange(ex) => ex
                .transfers
                .into_iter()
                .zip(ex.active)
                .filter_map(|(ev, on)| on.then_some(ev))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMemory {
    pub device: String,
    pub state_bytes: f64,
    pub activation_bytes: f64,
    pub required: f64,
    pub usable: f64,
    pub fits: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub devices: Vec<DeviceMemory>,
}

impl MemoryReport {
    pub fn fits(&self) -> bool {
        self.devices.iter().all(|d| d.fits)
    }

    pub fn offenders(&self) -> Vec<String> {
        self.devices
            .iter()
            .filter(|d| !d.fits)
            .map(|d| d.device.clone())
            .collect()
    }

    pub fn max_state_bytes(&self) -> f64 {
        self.devices.iter().map(|d| d.state_bytes).fold(0.0, f64::max)
    }
}

/// Memory of one pipeline stage holding `blocks` blocks with `in_flight`
/// micro-batches of activations buffered.
pub fn pipeline_stage_memory(
    spec: &TransformerSpec,
    job: &TrainingJob,
    blocks: u64,
    holds_embedding: bool,
    in_flight: u64,
) -> (f64, f64) {
    let mut params = blocks * spec.block_params();
    if holds_embedding {
        params += spec.embedding_params();
    }
    let state = state_bytes(params, job);
    let act = blocks as f64 * activation_bytes_per_block(spec, job.micro_batch, job) * in_flight as f64;
    (state, act)
}

/// Per-device memory requirement against usable memory.
pub fn check_memory(plan: &ParallelPlan, domain: &TrustedDomain) -> Result<MemoryReport> {
    let spec = &plan.spec;
    let job = &plan.job;
    let n = plan.participants.len();
    let blocks = spec.num_blocks as f64;
    let full_state = state_bytes(param_count(spec), job);
    let m = job.micro_batch;
    let parts: Vec<(f64, f64)> = match &plan.partition {
        Partition::Single => vec![(full_state, blocks * activation_bytes_per_block(spec, m, job))],
        Partition::Data(p) => p
            .shard_sizes
            .iter()
            .map(|&b| (full_state, blocks * activation_bytes_per_block(spec, m.min(b), job)))
            .collect(),
        Partition::Sequence(p) => p
            .subseq_lengths
            .iter()
            .map(|&len| {
                (
                    full_state,
                    blocks * local_activation_bytes_per_block(spec, m, len, job.seq_len, job),
                )
            })
            .collect(),
        Partition::Tensor(_) => {
            let act = blocks * tensor_parallel_activation_bytes_per_block(spec, m, n as u64, job);
            vec![(full_state / n as f64, act); n]
        }
        Partition::Pipeline(p) => {
            let stages = p.stages.len();
            let in_flight = p.micro_batch_count.min(stages as u64);
            p.stages
                .iter()
                .enumerate()
                .map(|(j, st)| pipeline_stage_memory(spec, job, st.blocks(), j == 0 || j + 1 == stages, in_flight))
                .collect()
        }
    };
    let devices = plan
        .participants
        .iter()
        .zip(parts)
        .map(|(id, (state, act))| {
            let usable = domain.device(id)?.usable_memory();
            let required = state + act;
            Ok(DeviceMemory {
                device: id.clone(),
                state_bytes: state,
                activation_bytes: act,
                required,
                usable,
                fits: required <= usable,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MemoryReport { devices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{DeviceProfile, ExecMode, NetworkModel};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("nano-{i}")).collect()
    }

    fn scaled_domain(scales: &[f64]) -> TrustedDomain {
        let devices = scales
            .iter()
            .enumerate()
            .map(|(i, s)| DeviceProfile {
                gpu_throughput: 100e9 * s,
                ..DeviceProfile::jetson_nano(format!("nano-{i}"))
            })
            .collect();
        TrustedDomain::new("t", devices, NetworkModel::wireless_1000mbps(), ExecMode::GpuEnabled).unwrap()
    }

    /// Minimises max(shard / throughput) over every integer composition, then
    /// prefers the lexicographically largest vector (remainder to low indices).
    fn brute_force_shards(weights: &[f64], total: u64) -> Vec<u64> {
        let mut best: Option<(f64, Vec<u64>)> = None;
        for a in 1..total {
            for b in 1..total - a {
                let c = total - a - b;
                if c == 0 {
                    continue;
                }
                let v = vec![a, b, c];
                let cost = v
                    .iter()
                    .zip(weights)
                    .map(|(&x, w)| x as f64 / w)
                    .fold(0.0, f64::max);
                let better = match &best {
                    None => true,
                    Some((bc, bv)) => cost < *bc || (cost == *bc && v > *bv),
                };
                if better {
                    best = Some((cost, v));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[1.0; 4], 128), vec![32; 4]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 2.0, 4.0], 128), vec![16, 16, 32, 64]);
        assert_eq!(largest_remainder(&[1.0; 3], 128), vec![43, 43, 42]);
        assert_eq!(brute_force_shards(&[1.0; 3], 128), vec![43, 43, 42]);
        assert_eq!(largest_remainder(&[1.0, 1e-9], 10), vec![9, 1]);
    }

    #[test]
    fn dp_plan_shards() {
        let d = scaled_domain(&[1.0, 1.0, 2.0, 4.0]);
        let plan = make_dp_plan(&d, &TransformerSpec::gpt2_small(), &TrainingJob::testbed(), &ids(4)).unwrap();
        let Partition::Data(p) = &plan.partition else { panic!() };
        assert_eq!(p.shard_sizes, vec![16, 16, 32, 64]);
        assert_eq!(p.sync_period, 5);
        plan.validate().unwrap();

        let tiny = TrainingJob {
            global_batch: 2,
            micro_batch: 1,
            ..TrainingJob::testbed()
        };
        assert!(matches!(
            make_dp_plan(&d, &TransformerSpec::gpt2_small(), &tiny, &ids(4)),
            Err(Error::TooFew { .. })
        ));
        assert!(make_dp_plan(&d, &TransformerSpec::gpt2_small(), &tiny, &[]).is_err());
    }

    #[test]
    fn sp_plan_split_and_payload() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let spec = TransformerSpec::gpt2_small();
        let job = TrainingJob::default();
        let plan = make_sp_plan(&d, &spec, &job, &ids(4)).unwrap();
        let Partition::Sequence(p) = &plan.partition else { panic!() };
        assert_eq!(p.subseq_lengths, vec![8; 4]);
        let sched = comm_schedule(&plan);
        let block = sched.iter().find(|e| e.op == CommOp::AllGather).unwrap();
        assert_eq!(block.payload_bytes, 12_582_912.0);

        let short = TrainingJob {
            seq_len: 3,
            ..job.clone()
        };
        assert!(make_sp_plan(&d, &spec, &short, &ids(4)).is_err());

        let solo = make_sp_plan(&d, &spec, &job, &ids(1)).unwrap();
        assert!(comm_schedule(&solo).is_empty());
    }

    #[test]
    fn tp_plan_heads_and_divisibility() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let plan = make_tp_plan(&d, &TransformerSpec::gpt2_small(), &TrainingJob::testbed(), &ids(4)).unwrap();
        let Partition::Tensor(p) = &plan.partition else { panic!() };
        assert_eq!(p.heads_per_device, vec![3; 4]);
        assert_eq!(p.hidden_slice_per_device, vec![768; 4]);
        let err = make_tp_plan(&d, &TransformerSpec::opt_350m(), &TrainingJob::testbed(), &ids(3)).unwrap_err();
        assert_eq!(
            err,
            Error::Divisibility {
                what: "attention heads",
                value: 16,
                count: 3
            }
        );
        assert!(err.to_string().contains("16"));
    }

    #[test]
    fn pp_plan_ranges_and_payload() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let spec = TransformerSpec::new("blocks-only", 12, 768, 12, 1);
        let job = TrainingJob::testbed();
        let plan = make_pp_plan(&d, &spec, &job, &ids(4), None).unwrap();
        let Partition::Pipeline(p) = &plan.partition else { panic!() };
        let ranges: Vec<_> = p.stages.iter().map(|s| (s.start, s.end - 1)).collect();
        assert_eq!(ranges, vec![(0, 2), (3, 5), (6, 8), (9, 11)]);
        let sched = comm_schedule(&plan);
        assert_eq!(sched[0].payload_bytes, 786_432.0);
        assert_eq!(sched.len() as u64, 5 * 2 * 16 * 3);

        let solo = make_pp_plan(&d, &spec, &job, &ids(1), None).unwrap();
        assert!(comm_schedule(&solo).is_empty());

        let short = TransformerSpec::new("x", 3, 768, 12, 1);
        assert!(make_pp_plan(&d, &short, &job, &ids(4), None).is_err());
        assert!(make_pp_plan(&d, &spec, &job, &ids(4), Some(&[3, 3, 3, 2])).is_err());
    }

    #[test]
    fn dp_schedule_syncs_once_per_period() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let spec = TransformerSpec::gpt2_small();
        let plan = make_dp_plan(&d, &spec, &TrainingJob::testbed(), &ids(4)).unwrap();
        let sched = comm_schedule(&plan);
        assert_eq!(sched.len(), 1);
        assert_eq!(sched[0].op, CommOp::AllReduce);
        assert_eq!(sched[0].payload_bytes, 494_128_128.0);
        assert_eq!(sched[0].iteration, 4);
        let single = make_single_plan(&d, &spec, &TrainingJob::testbed(), "nano-0").unwrap();
        assert!(comm_schedule(&single).is_empty());
    }

    #[test]
    fn memory_checks() {
        let homo = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let het = TrustedDomain::heterogeneous_mix4(ExecMode::GpuEnabled);
        let job = TrainingJob::testbed();
        let large = TransformerSpec::gpt2_large();
        let dp = make_dp_plan(&homo, &large, &job, &ids(4)).unwrap();
        assert!(!check_memory(&dp, &homo).unwrap().fits());
        let tp = make_tp_plan(&het, &large, &job, &het.ids()).unwrap();
        let report = check_memory(&tp, &het).unwrap();
        assert!(report.fits(), "{report:?}");

        let empty = TransformerSpec::new("empty", 0, 0, 1, 0);
        let single = make_single_plan(&homo, &empty, &job, "nano-0").unwrap();
        assert!(check_memory(&single, &homo).unwrap().fits());
    }

    #[test]
    fn usable_fraction_is_the_choke_point() {
        let job = TrainingJob::testbed();
        let spec = TransformerSpec::gpt2_small();
        let mut d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let plan = make_dp_plan(&d, &spec, &job, &ids(4)).unwrap();
        let mut fraction = 0.9;
        assert!(check_memory(&plan, &d).unwrap().fits());
        while check_memory(&plan, &d).unwrap().fits() {
            fraction -= 0.01;
            for dev in &mut d.devices {
                dev.usable_mem_fraction = fraction;
            }
        }
        let req = check_memory(&plan, &d).unwrap().devices[0].required;
        assert!(req > d.devices[0].mem_capacity * fraction);
        assert!(req <= d.devices[0].mem_capacity * (fraction + 0.01));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ParallelKind::ALL {
            assert_eq!(k.short_name().parse::<ParallelKind>().unwrap(), k);
        }
        let mut order = ParallelKind::COLLABORATIVE.to_vec();
        order.sort();
        assert_eq!(order, ParallelKind::COLLABORATIVE.to_vec());
    }
}
