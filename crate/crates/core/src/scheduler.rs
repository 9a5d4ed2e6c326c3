//! Orchestration: which devices participate, which parallelism they run,
//! in what order pipeline stages are chained, and how often to checkpoint.
//!
//! Small pools are searched exhaustively (subsets up to 12 devices, stage
//! orders up to 8); larger ones fall back to throughput-sorted greedy orders.
//! Every search breaks ties deterministically, so results are reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Infeasibility, Result};
use crate::parallelism::{
    check_memory, make_plan, make_pp_plan, make_single_plan, pipeline_stage_memory,
    stage_flops_per_microbatch, ParallelKind, ParallelPlan,
};
use crate::platform::{FaultModel, TrustedDomain};
use crate::sim::{pipeline_iteration_time, simulate, SimConfig, SimulationResult};
use crate::workload::{TrainingJob, TransformerSpec};

pub const MAX_EXHAUSTIVE_SUBSET: usize = 12;
pub const MAX_EXHAUSTIVE_ORDER: usize = 8;
/// Checkpoint intervals longer than this are reported as disabled.
pub const MAX_CHECKPOINT_INTERVAL: f64 = 30.0 * 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveTarget {
    #[default]
    EnergyPerSample,
    LatencyPerSample,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub target: ObjectiveTarget,
    pub weight_energy: f64,
    pub weight_latency: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self::energy()
    }
}

impl Objective {
    pub fn energy() -> Self {
        Objective {
            target: ObjectiveTarget::EnergyPerSample,
            weight_energy: 1.0,
            weight_latency: 0.0,
        }
    }

    pub fn latency() -> Self {
        Objective {
            target: ObjectiveTarget::LatencyPerSample,
            weight_energy: 0.0,
            weight_latency: 1.0,
        }
    }

    /// `weight_energy · J/sample + weight_latency · s/sample`.
    pub fn weighted(weight_energy: f64, weight_latency: f64) -> Result<Self> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(weight_energy) || !ok(weight_latency) || weight_energy + weight_latency == 0.0 {
            return Err(Error::invalid("objective weights", "must be non-negative and not both zero"));
        }
        Ok(Objective {
            target: ObjectiveTarget::Weighted,
            weight_energy,
            weight_latency,
        })
    }

    /// Objective value of a run; `None` when the run is infeasible.
    pub fn value(&self, result: &SimulationResult) -> Option<f64> {
        let e = result.energy_per_sample?;
        let l = result.latency_per_sample?;
        Some(match self.target {
            ObjectiveTarget::EnergyPerSample => e,
            ObjectiveTarget::LatencyPerSample => l,
            ObjectiveTarget::Weighted => self.weight_energy * e + self.weight_latency * l,
        })
    }
}

/// A feasible, simulated plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub plan: ParallelPlan,
    pub result: SimulationResult,
    pub objective: f64,
}

/// Builds and simulates one kind on `participants`.
pub fn evaluate_kind(
    kind: ParallelKind,
    domain: &TrustedDomain,
    participants: &[String],
    spec: &TransformerSpec,
    job: &TrainingJob,
    objective: &Objective,
    config: &SimConfig,
) -> std::result::Result<Candidate, String> {
    let plan = if kind == ParallelKind::PipelineParallel {
        let order = arrange_topology(domain, participants, spec, job, kind).map_err(|e| e.to_string())?;
        make_pp_plan(domain, spec, job, &order, None)
    } else {
        make_plan(kind, domain, spec, job, participants)
    }
    .map_err(|e| e.to_string())?;
    let result = simulate(&plan, domain, config).map_err(|e| e.to_string())?;
    if result.oom {
        return Err(format!("out of memory on {}", result.oom_devices.join(", ")));
    }
    let objective = objective.value(&result).ok_or("no measured samples")?;
    Ok(Candidate {
        plan,
        result,
        objective,
    })
}

/// Simulates every applicable kind on `participants` and returns the best.
/// One participant runs single-device; otherwise DP, PP, TP and SP compete
/// with ties going to that order.
pub fn choose_parallelism(
    domain: &TrustedDomain,
    participants: &[String],
    spec: &TransformerSpec,
    job: &TrainingJob,
    objective: &Objective,
    config: &SimConfig,
) -> Result<Candidate> {
    if participants.is_empty() {
        return Err(Error::invalid("participants", "must not be empty"));
    }
    let kinds: &[ParallelKind] = if participants.len() == 1 {
        &[ParallelKind::SingleDevice]
    } else {
        &ParallelKind::COLLABORATIVE
    };
    let outcomes: Vec<_> = kinds
        .par_iter()
        .map(|&k| (k, evaluate_kind(k, domain, participants, spec, job, objective, config)))
        .collect();
    let mut best: Option<Candidate> = None;
    let mut causes = Vec::new();
    for (kind, outcome) in outcomes {
        match outcome {
            Ok(c) => {
                if best.as_ref().is_none_or(|b| c.objective < b.objective) {
                    best = Some(c);
                }
            }
            Err(cause) => causes.push((kind, cause)),
        }
    }
    best.ok_or(Error::Infeasible(Infeasibility { causes }))
}

/// The chosen plan of one device subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetChoice {
    pub devices: Vec<String>,
    pub candidate: Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: SubsetChoice,
    /// Best subset of each size `1..=n`, if any is feasible.
    pub per_size: Vec<Option<SubsetChoice>>,
}

fn subsets(domain: &TrustedDomain) -> Vec<Vec<usize>> {
    let n = domain.devices.len();
    if n <= MAX_EXHAUSTIVE_SUBSET {
        let mut all: Vec<Vec<usize>> = (1u32..(1 << n))
            .map(|mask| (0..n).filter(|&i| mask & (1 << i) != 0).collect())
            .collect();
        all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        all
    } else {
        let order = throughput_order(domain, &(0..n).collect::<Vec<_>>());
        (1..=n)
            .map(|k| {
                let mut s = order[..k].to_vec();
                s.sort_unstable();
                s
            })
            .collect()
    }
}

fn throughput_order(domain: &TrustedDomain, idx: &[usize]) -> Vec<usize> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| {
        let ta = domain.devices[a].effective_throughput(domain.mode);
        let tb = domain.devices[b].effective_throughput(domain.mode);
        tb.total_cmp(&ta).then(a.cmp(&b))
    });
    order
}

/// Picks the objective-optimal participant subset. Ties prefer fewer devices,
/// then the lexicographically smallest index set.
pub fn select_devices(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    objective: &Objective,
    config: &SimConfig,
) -> Result<Selection> {
    if domain.devices.is_empty() {
        return Err(Error::invalid("devices", "pool is empty"));
    }
    let candidates = subsets(domain);
    let evaluated: Vec<(Vec<usize>, Result<Candidate>)> = candidates
        .into_par_iter()
        .map(|idx| {
            let ids: Vec<String> = idx.iter().map(|&i| domain.devices[i].id.clone()).collect();
            let c = choose_parallelism(domain, &ids, spec, job, objective, config);
            (idx, c)
        })
        .collect();

    let n = domain.devices.len();
    let mut per_size: Vec<Option<SubsetChoice>> = vec![None; n];
    let mut best: Option<SubsetChoice> = None;
    let mut largest_failure = None;
    for (idx, outcome) in evaluated {
        let devices: Vec<String> = idx.iter().map(|&i| domain.devices[i].id.clone()).collect();
        match outcome {
            Ok(candidate) => {
                let choice = SubsetChoice { devices, candidate };
                let slot = &mut per_size[idx.len() - 1];
                if slot.as_ref().is_none_or(|s| choice.candidate.objective < s.candidate.objective) {
                    *slot = Some(choice.clone());
                }
                if best.as_ref().is_none_or(|b| choice.candidate.objective < b.candidate.objective) {
                    best = Some(choice);
                }
            }
            Err(e) => largest_failure = Some(e),
        }
    }
    match best {
        Some(best) => Ok(Selection { best, per_size }),
        None => Err(largest_failure.unwrap_or(Error::Infeasible(Infeasibility::default()))),
    }
}

/// Block counts per stage minimising the slowest stage's time per
/// micro-batch. The last stage also runs the output head. Stages whose
/// parameters, embedding copy and in-flight activations exceed usable memory
/// are excluded. Among optimal partitions the lexicographically smallest
/// block-count vector is returned.
pub fn partition_stages(
    domain: &TrustedDomain,
    ordered: &[String],
    spec: &TransformerSpec,
    job: &TrainingJob,
) -> Result<Vec<u64>> {
    let stages = ordered.len();
    let blocks = spec.num_blocks as usize;
    if stages == 0 {
        return Err(Error::invalid("participants", "must not be empty"));
    }
    if blocks < stages {
        return Err(Error::TooFew {
            kind: ParallelKind::PipelineParallel,
            what: "Transformer blocks",
            required: stages,
            available: blocks,
        });
    }
    let in_flight = job.micro_batches().min(stages as u64);
    let m = job.micro_batch as f64;
    let mut time = Vec::with_capacity(stages);
    for (j, id) in ordered.iter().enumerate() {
        let device = domain.device(id)?;
        let throughput = device.effective_throughput(domain.mode);
        let last = j + 1 == stages;
        let holds_embedding = j == 0 || last;
        // time[j][b]: stage j with b blocks, infinite when it does not fit.
        let row: Vec<f64> = (0..=blocks)
            .map(|b| {
                let (state, act) = pipeline_stage_memory(spec, job, b as u64, holds_embedding, in_flight);
                if b == 0 || state + act > device.usable_memory() || throughput <= 0.0 {
                    f64::INFINITY
                } else {
                    stage_flops_per_microbatch(spec, m, job.seq_len, b as u64, last) / throughput
                }
            })
            .collect();
        time.push(row);
    }
    // best[j][r]: minimal bottleneck of stages j.. covering r blocks.
    let mut best = vec![vec![f64::INFINITY; blocks + 1]; stages + 1];
    best[stages][0] = 0.0;
    for j in (0..stages).rev() {
        let later = stages - j - 1;
        for r in (later + 1)..=blocks {
            best[j][r] = (1..=r - later)
                .map(|b| time[j][b].max(best[j + 1][r - b]))
                .fold(f64::INFINITY, f64::min);
        }
    }
    let target = best[0][blocks];
    if !target.is_finite() {
        return Err(Error::NoFeasiblePartition);
    }
    let mut counts = Vec::with_capacity(stages);
    let mut remaining = blocks;
    for j in 0..stages {
        let later = stages - j - 1;
        let b = (1..=remaining - later)
            .find(|&b| time[j][b].max(best[j + 1][remaining - b]) <= target)
            .expect("optimal choice exists");
        counts.push(b as u64);
        remaining -= b;
    }
    Ok(counts)
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let Some(i) = (0..v.len() - 1).rev().find(|&i| v[i] < v[i + 1]) else {
        return false;
    };
    let j = (i + 1..v.len()).rev().find(|&j| v[j] > v[i]).expect("pivot exists");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

/// Device order for `kind`. Pipelines try every order (up to
/// [`MAX_EXHAUSTIVE_ORDER`] devices) and keep the fastest iteration, earliest
/// order in lexicographic position on ties; collectives are order-insensitive
/// and keep the input order.
pub fn arrange_topology(
    domain: &TrustedDomain,
    participants: &[String],
    spec: &TransformerSpec,
    job: &TrainingJob,
    kind: ParallelKind,
) -> Result<Vec<String>> {
    if kind != ParallelKind::PipelineParallel || participants.len() <= 1 {
        return Ok(participants.to_vec());
    }
    let n = participants.len();
    if n > MAX_EXHAUSTIVE_ORDER {
        let idx: Vec<usize> = participants
            .iter()
            .map(|id| domain.index_of(id))
            .collect::<Result<_>>()?;
        let order = throughput_order(domain, &idx);
        return Ok(order.into_iter().map(|i| domain.devices[i].id.clone()).collect());
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Vec<String>)> = None;
    loop {
        let ordered: Vec<String> = perm.iter().map(|&i| participants[i].clone()).collect();
        if let Ok(counts) = partition_stages(domain, &ordered, spec, job) {
            let plan = make_pp_plan(domain, spec, job, &ordered, Some(&counts))?;
            let t = pipeline_iteration_time(&plan, domain)?;
            if best.as_ref().is_none_or(|(bt, _)| t < *bt) {
                best = Some((t, ordered));
            }
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.map(|(_, o)| o).ok_or(Error::NoFeasiblePartition)
}

/// Young's first-order optimum `sqrt(2·C·MTBF)`.
pub fn young_interval(write_time: f64, system_mtbf: f64) -> f64 {
    (2.0 * write_time * system_mtbf).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    /// Seconds between checkpoints; `None` when checkpointing is not worth it.
    pub interval: Option<f64>,
    pub write_time: f64,
    pub system_mtbf: f64,
}

/// Checkpoint interval for `plan`: the write time of the largest per-device
/// state against the system MTBF (independent exponential failures, so the
/// per-device MTBF divided by the participant count). Never shorter than one
/// iteration.
pub fn plan_checkpointing(
    plan: &ParallelPlan,
    domain: &TrustedDomain,
    fault_model: &FaultModel,
    iteration_time: f64,
) -> Result<CheckpointPlan> {
    fault_model.validate()?;
    let state = check_memory(plan, domain)?.max_state_bytes();
    let write_time = state / fault_model.checkpoint_write_bandwidth;
    let system_mtbf = fault_model.mtbf_per_device / plan.participants.len() as f64;
    let tau = young_interval(write_time, system_mtbf).max(iteration_time);
    let interval = (tau.is_finite() && tau <= MAX_CHECKPOINT_INTERVAL && tau > 0.0).then_some(tau);
    Ok(CheckpointPlan {
        interval,
        write_time,
        system_mtbf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrationStrategy {
    pub selected_devices: Vec<String>,
    pub plan: ParallelPlan,
    pub objective: Objective,
    /// Seconds between checkpoints; absent when disabled.
    pub checkpoint_interval: Option<f64>,
    pub predicted: SimulationResult,
}

/// Full orchestration. With `select` the participant subset is searched;
/// otherwise every device in the domain participates.
pub fn orchestrate(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    objective: &Objective,
    fault_model: &FaultModel,
    config: &SimConfig,
    select: bool,
) -> Result<OrchestrationStrategy> {
    spec.validate()?;
    job.validate()?;
    domain.validate()?;
    let (devices, candidate) = if select {
        let s = select_devices(domain, spec, job, objective, config)?;
        (s.best.devices, s.best.candidate)
    } else {
        let ids = domain.ids();
        let c = choose_parallelism(domain, &ids, spec, job, objective, config)?;
        (ids, c)
    };
    let iteration_time = candidate.result.iteration_time().unwrap_or(0.0);
    let ckpt = plan_checkpointing(&candidate.plan, domain, fault_model, iteration_time)?;
    Ok(OrchestrationStrategy {
        selected_devices: devices,
        plan: candidate.plan,
        objective: *objective,
        checkpoint_interval: ckpt.interval,
        predicted: candidate.result,
    })
}

/// Single-device baseline on `device`, feasible or not.
pub fn single_device_baseline(
    domain: &TrustedDomain,
    device: &str,
    spec: &TransformerSpec,
    job: &TrainingJob,
    config: &SimConfig,
) -> Result<SimulationResult> {
    let plan = make_single_plan(domain, spec, job, device)?;
    simulate(&plan, domain, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{DeviceProfile, ExecMode, NetworkModel};

    fn domain_with(throughputs: &[f64]) -> TrustedDomain {
        let devices = throughputs
            .iter()
            .enumerate()
            .map(|(i, t)| DeviceProfile {
                gpu_throughput: *t,
                ..DeviceProfile::jetson_nano(format!("d{i}"))
            })
            .collect();
        TrustedDomain::new("t", devices, NetworkModel::wireless_1000mbps(), ExecMode::GpuEnabled).unwrap()
    }

    fn headless(blocks: u64) -> TransformerSpec {
        TransformerSpec::new("headless", blocks, 768, 12, 1)
    }

    #[test]
    fn uniform_partition() {
        let d = domain_with(&[1e11; 4]);
        let counts = partition_stages(&d, &d.ids(), &headless(12), &TrainingJob::testbed()).unwrap();
        assert_eq!(counts, vec![3, 3, 3, 3]);
        let counts = partition_stages(&d, &d.ids(), &headless(4), &TrainingJob::testbed()).unwrap();
        assert_eq!(counts, vec![1, 1, 1, 1]);
    }

    #[test]
    fn partition_respects_memory() {
        let mut d = domain_with(&[1e11, 1e11]);
        let job = TrainingJob::testbed();
        let spec = headless(12);
        let (state, act) = pipeline_stage_memory(&spec, &job, 1, true, 2);
        d.devices[0].mem_capacity = (state + act) * 2.5 / 0.9;
        let counts = partition_stages(&d, &d.ids(), &spec, &job).unwrap();
        assert_eq!(counts, vec![2, 10]);
        d.devices[1].mem_capacity = d.devices[0].mem_capacity;
        assert_eq!(partition_stages(&d, &d.ids(), &spec, &job), Err(Error::NoFeasiblePartition));
    }

    #[test]
    fn young_interval_example() {
        assert!((young_interval(10.0, 2000.0) - 200.0).abs() < 1e-12);
        assert_eq!(young_interval(10.0, f64::INFINITY), f64::INFINITY);
    }

    #[test]
    fn checkpoint_floor_and_cap() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let job = TrainingJob::testbed();
        let spec = TransformerSpec::distilbert();
        let plan = make_plan(ParallelKind::DataParallel, &d, &spec, &job, &d.ids()).unwrap();
        let fm = FaultModel {
            mtbf_per_device: f64::INFINITY,
            ..FaultModel::default()
        };
        assert_eq!(plan_checkpointing(&plan, &d, &fm, 1.0).unwrap().interval, None);
        let fm = FaultModel {
            mtbf_per_device: 1e-9,
            ..FaultModel::default()
        };
        assert_eq!(plan_checkpointing(&plan, &d, &fm, 3.5).unwrap().interval, Some(3.5));
        let fm = FaultModel::default();
        let ck = plan_checkpointing(&plan, &d, &fm, 1.0).unwrap();
        assert_eq!(ck.system_mtbf, 86_400.0 / 4.0);
        let expect = young_interval(ck.write_time, ck.system_mtbf);
        assert_eq!(ck.interval, Some(expect));
    }

    #[test]
    fn weighted_objective_validation() {
        assert!(Objective::weighted(0.0, 0.0).is_err());
        assert!(Objective::weighted(-1.0, 1.0).is_err());
        assert!(Objective::weighted(1.0, 0.5).is_ok());
    }

    #[test]
    fn single_participant_runs_single_device() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let c = choose_parallelism(
            &d,
            &["nano-2".to_string()],
            &TransformerSpec::distilbert(),
            &TrainingJob::testbed(),
            &Objective::energy(),
            &SimConfig::measured(5),
        )
        .unwrap();
        assert_eq!(c.plan.kind(), ParallelKind::SingleDevice);
    }

    #[test]
    fn feasibility_filter_picks_the_device_that_fits() {
        let mut small = DeviceProfile::jetson_nano("small");
        small.mem_capacity = 1e8;
        small.gpu_throughput = 1e13;
        let big = DeviceProfile::jetson_nano("big");
        let d = TrustedDomain::new("t", vec![small, big], NetworkModel::wireless_1000mbps(), ExecMode::GpuEnabled)
            .unwrap();
        let s = select_devices(
            &d,
            &TransformerSpec::distilbert(),
            &TrainingJob::testbed(),
            &Objective::energy(),
            &SimConfig::measured(5),
        )
        .unwrap();
        assert_eq!(s.best.devices, vec!["big".to_string()]);
    }

    #[test]
    fn infeasible_pool_lists_causes() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let err = choose_parallelism(
            &d,
            &["nano-0".to_string()],
            &TransformerSpec::gpt2_large(),
            &TrainingJob::testbed(),
            &Objective::energy(),
            &SimConfig::measured(1),
        )
        .unwrap_err();
        let Error::Infeasible(inf) = err else { panic!() };
        assert_eq!(inf.causes.len(), 1);
        assert!(inf.causes[0].1.contains("out of memory"));
    }

    #[test]
    fn permutations_are_lexicographic() {
        let mut v = vec![0, 1, 2];
        let mut seen = vec![v.clone()];
        while next_permutation(&mut v) {
            seen.push(v.clone());
        }
        assert_eq!(seen.len(), 6);
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
    }
}
