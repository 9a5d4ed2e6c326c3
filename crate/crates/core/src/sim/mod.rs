//! Deterministic simulation of training runs.
//!
//! Every iteration of a plan is expanded into barrier-synchronised steps
//! (see [`crate::parallelism::iteration_steps`]) and executed by the event
//! engine. Compute does not overlap communication inside a step; pipeline
//! stages overlap across micro-batches through the clocked fill-drain slots.
//!
//! Power is three-state: idle, busy computing, and idle plus the network
//! adder while sending or receiving.

mod collective;
pub mod engine;
mod faults;
mod trace;

use serde::{Deserialize, Serialize};

pub use collective::{collective_time, wire_bytes_per_device};
pub use faults::{inject_faults, replay_failures, FailureStream, FaultReport};
pub use trace::{EventTrace, TraceRecord};

use crate::error::{Error, Result};
use crate::parallelism::{check_memory, iteration_steps, pipeline_stage_flops, CommOp, ParallelKind, ParallelPlan, Partition, Step};
use crate::platform::TrustedDomain;
use engine::{Activity, ActivityKind, Engine, Group};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Iterations run before measurement starts.
    pub warmup_iterations: u64,
    /// Measured iterations.
    pub iterations: u64,
    /// Bill idle power of domain devices that are not participants.
    pub meter_all_devices: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            warmup_iterations: 2,
            iterations: 20,
            meter_all_devices: false,
        }
    }
}

impl SimConfig {
    pub fn measured(iterations: u64) -> Self {
        SimConfig {
            warmup_iterations: 0,
            iterations,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub device: String,
    pub peak_mem: f64,
    pub compute_time: f64,
    pub comm_time: f64,
    pub idle_time: f64,
    pub energy: f64,
    pub bytes_sent: f64,
}

/// Payload bytes by collective type over the measured window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommBytes {
    pub all_reduce: f64,
    pub all_gather: f64,
    pub point_to_point: f64,
}

impl CommBytes {
    pub fn total(&self) -> f64 {
        self.all_reduce + self.all_gather + self.point_to_point
    }

    fn add(&mut self, op: CommOp, bytes: f64) {
        match op {
            CommOp::AllReduce => self.all_reduce += bytes,
            CommOp::AllGather => self.all_gather += bytes,
            CommOp::PointToPoint => self.point_to_point += bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub kind: ParallelKind,
    pub participants: Vec<String>,
    /// Seconds per sample; absent when out of memory.
    pub latency_per_sample: Option<f64>,
    /// Joules per sample; absent when out of memory.
    pub energy_per_sample: Option<f64>,
    /// Length of the measured window.
    pub makespan: f64,
    pub samples: u64,
    pub iterations_simulated: u64,
    pub oom: bool,
    pub oom_devices: Vec<String>,
    pub devices: Vec<DeviceStats>,
    pub comm_bytes: CommBytes,
    /// Energy of metered non-participants.
    pub idle_bystander_energy: f64,
}

impl SimulationResult {
    pub fn total_energy(&self) -> f64 {
        self.devices.iter().map(|d| d.energy).sum::<f64>() + self.idle_bystander_energy
    }

    /// Mean seconds per measured iteration.
    pub fn iteration_time(&self) -> Option<f64> {
        (!self.oom && self.iterations_simulated > 0).then(|| self.makespan / self.iterations_simulated as f64)
    }

    pub fn comm_bytes_per_iteration(&self) -> f64 {
        if self.iterations_simulated == 0 {
            0.0
        } else {
            self.comm_bytes.total() / self.iterations_simulated as f64
        }
    }
}

fn validate_run(plan: &ParallelPlan, domain: &TrustedDomain, config: &SimConfig) -> Result<Vec<usize>> {
    if config.iterations == 0 {
        return Err(Error::invalid("iterations", "must be at least 1"));
    }
    plan.validate()?;
    let idx = plan
        .participants
        .iter()
        .map(|id| domain.index_of(id))
        .collect::<Result<Vec<_>>>()?;
    for &i in &idx {
        let d = &domain.devices[i];
        if d.effective_throughput(domain.mode) <= 0.0 {
            return Err(Error::invalid(
                format!("devices[{}]", d.id),
                format!("no compute in {} mode", domain.mode),
            ));
        }
    }
    Ok(idx)
}

/// Runs `config.warmup_iterations + config.iterations` iterations and reports
/// metrics over the measured ones.
pub fn simulate(plan: &ParallelPlan, domain: &TrustedDomain, config: &SimConfig) -> Result<SimulationResult> {
    run(plan, domain, config, false).map(|(r, _)| r)
}

/// Like [`simulate`], also returning the activity trace of every iteration.
pub fn simulate_traced(
    plan: &ParallelPlan,
    domain: &TrustedDomain,
    config: &SimConfig,
) -> Result<(SimulationResult, EventTrace)> {
    run(plan, domain, config, true).map(|(r, t)| (r, t.unwrap_or_default()))
}

fn run(
    plan: &ParallelPlan,
    domain: &TrustedDomain,
    config: &SimConfig,
    traced: bool,
) -> Result<(SimulationResult, Option<EventTrace>)> {
    let idx = validate_run(plan, domain, config)?;
    let memory = check_memory(plan, domain)?;
    let n = idx.len();
    let mut result = SimulationResult {
        kind: plan.kind(),
        participants: plan.participants.clone(),
        latency_per_sample: None,
        energy_per_sample: None,
        makespan: 0.0,
        samples: 0,
        iterations_simulated: 0,
        oom: !memory.fits(),
        oom_devices: memory.offenders(),
        devices: memory
            .devices
            .iter()
            .map(|m| DeviceStats {
                device: m.device.clone(),
                peak_mem: m.required,
                compute_time: 0.0,
                comm_time: 0.0,
                idle_time: 0.0,
                energy: 0.0,
                bytes_sent: 0.0,
            })
            .collect(),
        comm_bytes: CommBytes::default(),
        idle_bystander_energy: 0.0,
    };
    if result.oom {
        return Ok((result, None));
    }

    let devices: Vec<_> = idx.iter().map(|&i| &domain.devices[i]).collect();
    let throughput: Vec<f64> = devices.iter().map(|d| d.effective_throughput(domain.mode)).collect();
    let members: Vec<usize> = (0..n).collect();
    let total_iters = config.warmup_iterations + config.iterations;

    let mut engine = Engine::new(n);
    let mut window_comm = CommBytes::default();
    for it in 0..total_iters {
        for step in iteration_steps(plan, it) {
            let group = match step {
                Step::Compute(c) => {
                    let times: Vec<f64> = c.flops.iter().zip(&throughput).map(|(f, t)| f / t).collect();
                    Group {
                        members: members.clone(),
                        activities: (0..n)
                            .filter(|&i| c.active[i])
                            .map(|i| Activity {
                                device: i,
                                kind: ActivityKind::Compute,
                                duration: times[i],
                                bytes: 0.0,
                            })
                            .collect(),
                        min_span: times.iter().copied().fold(0.0, f64::max),
                        barrier: false,
                    }
                }
                Step::Collective(ev) => {
                    let duration = collective_time(ev.op, ev.payload_bytes, &ev.participants, &domain.network);
                    let wire = wire_bytes_per_device(ev.op, ev.payload_bytes, ev.participants.len());
                    if it >= config.warmup_iterations {
                        window_comm.add(ev.op, ev.payload_bytes);
                    }
                    let who = ev
                        .participants
                        .iter()
                        .map(|id| local_index(plan, id))
                        .collect::<Vec<_>>();
                    Group {
                        members: who.clone(),
                        activities: who
                            .into_iter()
                            .map(|i| Activity {
                                device: i,
                                kind: ActivityKind::Comm,
                                duration,
                                bytes: wire,
                            })
                            .collect(),
                        min_span: duration,
                        barrier: false,
                    }
                }
                Step::Exchange(ex) => {
                    let mut duration = vec![None::<f64>; n];
                    let mut sent = vec![0.0; n];
                    let mut slot = 0.0f64;
                    for (ev, on) in ex.transfers.iter().zip(&ex.active) {
                        let t = collective_time(ev.op, ev.payload_bytes, &ev.participants, &domain.network);
                        slot = slot.max(t);
                        if !on {
                            continue;
                        }
                        if it >= config.warmup_iterations {
                            window_comm.add(ev.op, ev.payload_bytes);
                        }
                        let src = local_index(plan, &ev.participants[0]);
                        let dst = local_index(plan, &ev.participants[1]);
                        sent[src] += ev.payload_bytes;
                        for end in [src, dst] {
                            duration[end] = Some(duration[end].map_or(t, |d: f64| d.max(t)));
                        }
                    }
                    Group {
                        members: members.clone(),
                        activities: (0..n)
                            .filter_map(|i| {
                                duration[i].map(|d| Activity {
                                    device: i,
                                    kind: ActivityKind::Comm,
                                    duration: d,
                                    bytes: sent[i],
                                })
                            })
                            .collect(),
                        min_span: slot,
                        barrier: false,
                    }
                }
            };
            engine.submit(group);
        }
        engine.submit(Group {
            members: members.clone(),
            activities: Vec::new(),
            min_span: 0.0,
            barrier: true,
        });
    }
    let outcome = engine.run();

    let window_start = match config.warmup_iterations {
        0 => 0.0,
        w => outcome.barriers[w as usize - 1],
    };
    let window_end = *outcome.barriers.last().expect("at least one iteration");
    let makespan = window_end - window_start;

    let mut last_end = vec![window_start; n];
    for rec in outcome.records.iter().filter(|r| r.start >= window_start) {
        let d = &devices[rec.device];
        let stats = &mut result.devices[rec.device];
        let gap = rec.start - last_end[rec.device];
        if gap > 0.0 {
            stats.idle_time += gap;
            stats.energy += gap * d.power_idle;
        }
        last_end[rec.device] = last_end[rec.device].max(rec.start + rec.duration);
        match rec.kind {
            ActivityKind::Compute => {
                stats.compute_time += rec.duration;
                stats.energy += rec.duration * d.busy_power(domain.mode);
            }
            ActivityKind::Comm => {
                stats.comm_time += rec.duration;
                stats.energy += rec.duration * d.comm_power();
                stats.bytes_sent += rec.bytes;
            }
        }
    }
    for (i, stats) in result.devices.iter_mut().enumerate() {
        let tail = window_end - last_end[i];
        if tail > 0.0 {
            stats.idle_time += tail;
            stats.energy += tail * devices[i].power_idle;
        }
    }
    if config.meter_all_devices {
        result.idle_bystander_energy = domain
            .devices
            .iter()
            .enumerate()
            .filter(|(i, _)| !idx.contains(i))
            .map(|(_, d)| d.power_idle * makespan)
            .sum();
    }

    let samples = plan.job.global_batch * config.iterations;
    result.makespan = makespan;
    result.samples = samples;
    result.iterations_simulated = config.iterations;
    result.comm_bytes = window_comm;
    if samples > 0 {
        result.latency_per_sample = Some(makespan / samples as f64);
        result.energy_per_sample = Some(result.total_energy() / samples as f64);
    }

    let trace = traced.then(|| EventTrace::from_records(&outcome.records, &plan.participants));
    Ok((result, trace))
}

fn local_index(plan: &ParallelPlan, id: &str) -> usize {
    plan.participants
        .iter()
        .position(|p| p == id)
        .expect("communication participants come from the plan")
}

/// Closed-form pipeline iteration time: `(M + S - 1)` forward slots and as
/// many backward slots, each lasting the slowest stage plus the slowest
/// boundary transfer.
pub fn pipeline_iteration_time(plan: &ParallelPlan, domain: &TrustedDomain) -> Result<f64> {
    let Partition::Pipeline(p) = &plan.partition else {
        return Err(Error::invalid("partition", "not a pipeline plan"));
    };
    let flops = pipeline_stage_flops(plan);
    let mut bottleneck = 0.0f64;
    for (f, id) in flops.iter().zip(&plan.participants) {
        bottleneck = bottleneck.max(f / domain.throughput(id)?);
    }
    let payload = 4.0 * (plan.job.micro_batch * plan.job.seq_len * plan.spec.hidden_size) as f64;
    let transfer = plan
        .participants
        .windows(2)
        .map(|w| domain.network.link(&w[0], &w[1]).transfer_time(payload))
        .fold(0.0, f64::max);
    let slots = (p.micro_batch_count + p.stages.len() as u64 - 1) as f64;
    Ok(slots * (bottleneck + 2.0 * transfer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallelism::{make_dp_plan, make_pp_plan, make_single_plan};
    use crate::platform::{ExecMode, NetworkModel};
    use crate::workload::{flops_per_iteration, TrainingJob, TransformerSpec};

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn single_nano_gpt2_small() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let spec = TransformerSpec::gpt2_small();
        let job = TrainingJob::testbed();
        let plan = make_single_plan(&d, &spec, &job, "nano-0").unwrap();
        let r = simulate(&plan, &d, &SimConfig::default()).unwrap();
        let iter = flops_per_iteration(&spec, &job) / 240e9;
        assert!(rel(r.iteration_time().unwrap(), iter) < 1e-12);
        assert!(rel(r.latency_per_sample.unwrap(), 0.0993) < 0.01);
        assert!(rel(r.energy_per_sample.unwrap(), iter * 10.0 / 128.0) < 1e-12);
    }

    #[test]
    fn dp_without_sync_halves_iteration() {
        let mut d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        d.devices.truncate(2);
        let spec = TransformerSpec::gpt2_small();
        let job = TrainingJob {
            dp_sync_period: u64::MAX,
            ..TrainingJob::testbed()
        };
        let single = simulate(&make_single_plan(&d, &spec, &job, "nano-0").unwrap(), &d, &SimConfig::default()).unwrap();
        let dp = simulate(&make_dp_plan(&d, &spec, &job, &d.ids()).unwrap(), &d, &SimConfig::default()).unwrap();
        assert_eq!(dp.iteration_time().unwrap() * 2.0, single.iteration_time().unwrap());
    }

    #[test]
    fn zero_power_means_zero_energy() {
        let mut d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        for dev in &mut d.devices {
            dev.power_idle = 0.0;
            dev.power_cpu_busy = 0.0;
            dev.power_gpu_busy = 0.0;
            dev.power_net = 0.0;
        }
        let plan = make_dp_plan(&d, &TransformerSpec::distilbert(), &TrainingJob::testbed(), &d.ids()).unwrap();
        let r = simulate(&plan, &d, &SimConfig::default()).unwrap();
        assert_eq!(r.energy_per_sample, Some(0.0));
    }

    #[test]
    fn errors() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let spec = TransformerSpec::distilbert();
        let plan = make_single_plan(&d, &spec, &TrainingJob::testbed(), "nano-0").unwrap();
        assert!(simulate(&plan, &d, &SimConfig::measured(0)).is_err());
        let mut ghost = plan.clone();
        ghost.participants = vec!["ghost".into()];
        assert!(matches!(simulate(&ghost, &d, &SimConfig::default()), Err(Error::UnknownDevice(_))));
    }

    #[test]
    fn oom_reports_no_performance() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let plan = make_single_plan(&d, &TransformerSpec::gpt2_large(), &TrainingJob::testbed(), "nano-0").unwrap();
        let r = simulate(&plan, &d, &SimConfig::default()).unwrap();
        assert!(r.oom);
        assert_eq!(r.oom_devices, vec!["nano-0".to_string()]);
        assert!(r.latency_per_sample.is_none() && r.energy_per_sample.is_none());
    }

    #[test]
    fn pipeline_matches_closed_form() {
        let d = TrustedDomain::heterogeneous_mix4(ExecMode::GpuEnabled);
        let spec = TransformerSpec::gpt2_small();
        let job = TrainingJob::testbed();
        let plan = make_pp_plan(&d, &spec, &job, &d.ids(), None).unwrap();
        let r = simulate(&plan, &d, &SimConfig::default()).unwrap();
        let closed = pipeline_iteration_time(&plan, &d).unwrap();
        assert!(rel(r.iteration_time().unwrap(), closed) < 1e-9);
    }

    #[test]
    fn bystanders_are_metered_on_request() {
        let d = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let plan = make_single_plan(&d, &TransformerSpec::distilbert(), &TrainingJob::testbed(), "nano-0").unwrap();
        let quiet = simulate(&plan, &d, &SimConfig::default()).unwrap();
        let metered = simulate(
            &plan,
            &d,
            &SimConfig {
                meter_all_devices: true,
                ..SimConfig::default()
            },
        )
        .unwrap();
        assert_eq!(quiet.idle_bystander_energy, 0.0);
        assert!(rel(metered.idle_bystander_energy, 3.0 * 2.0 * metered.makespan) < 1e-12);
    }

    #[test]
    fn slow_link_slows_pipeline() {
        let spec = TransformerSpec::distilbert();
        let job = TrainingJob::testbed();
        let fast = TrustedDomain::homogeneous_nano4(ExecMode::GpuEnabled);
        let mut slow = fast.clone();
        slow.network = NetworkModel::wireless_1000mbps().with_link("nano-1", "nano-2", 1e8, 1e-3);
        let plan = make_pp_plan(&fast, &spec, &job, &fast.ids(), None).unwrap();
        let a = simulate(&plan, &fast, &SimConfig::measured(1)).unwrap();
        let b = simulate(&plan, &slow, &SimConfig::measured(1)).unwrap();
        assert!(b.makespan > a.makespan);
    }
}
