//! Checkpoint/restart under random device failures.
//!
//! The fault-free simulation gives the per-iteration time and energy. A run of
//! `horizon` useful iterations is then replayed on a wall clock: a checkpoint
//! is written every `interval / iteration_time` iterations; on a failure the
//! work since the last checkpoint is lost, the state is reloaded, and the lost
//! iterations run again. A failure during a reload restarts the reload.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::{simulate, SimConfig, SimulationResult};
use crate::error::Result;
use crate::parallelism::{check_memory, ParallelPlan};
use crate::platform::{FaultModel, TrustedDomain};

/// Merged failure times of independent exponential per-device processes.
pub struct FailureStream {
    rng: ChaCha8Rng,
    mtbf: f64,
    next: Vec<f64>,
}

impl FailureStream {
    pub fn new(devices: usize, mtbf: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next = (0..devices)
            .map(|_| {
                let e: f64 = Exp1.sample(&mut rng);
                e * mtbf
            })
            .collect();
        FailureStream { rng, mtbf, next }
    }
}

impl Iterator for FailureStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let (i, &t) = self
            .next
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        if !t.is_finite() {
            return None;
        }
        let e: f64 = Exp1.sample(&mut self.rng);
        self.next[i] = t + e * self.mtbf;
        Some(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub base: SimulationResult,
    pub horizon_iterations: u64,
    pub checkpoint_interval: Option<f64>,
    pub checkpoint_every_iterations: Option<u64>,
    pub checkpoint_write_time: f64,
    pub reload_time: f64,
    /// Wall time of the horizon without failures or checkpoints.
    pub fault_free_time: f64,
    pub wall_time: f64,
    pub failures: u64,
    pub checkpoints_written: u64,
    pub checkpoint_time: f64,
    pub recovery_time: f64,
    /// Wall time spent on work that was later rolled back.
    pub lost_time: f64,
    pub executed_iterations: u64,
    /// Useful samples per second of wall time.
    pub goodput: f64,
    pub fault_free_throughput: f64,
    pub energy_per_useful_sample: Option<f64>,
}

/// Draws failures from `fault_model` (seeded) and replays the run.
pub fn inject_faults(
    plan: &ParallelPlan,
    domain: &TrustedDomain,
    fault_model: &FaultModel,
    horizon: u64,
    checkpoint_interval: Option<f64>,
    config: &SimConfig,
) -> Result<FaultReport> {
    fault_model.validate()?;
    let stream = FailureStream::new(plan.participants.len(), fault_model.mtbf_per_device, fault_model.rng_seed);
    replay_failures(plan, domain, fault_model, horizon, checkpoint_interval, config, stream)
}

/// Replays the run against explicit system failure times (seconds since start,
/// ascending).
pub fn replay_failures(
    plan: &ParallelPlan,
    domain: &TrustedDomain,
    fault_model: &FaultModel,
    horizon: u64,
    checkpoint_interval: Option<f64>,
    config: &SimConfig,
    failures: impl IntoIterator<Item = f64>,
) -> Result<FaultReport> {
    fault_model.validate()?;
    let base = simulate(plan, domain, config)?;
    let state = check_memory(plan, domain)?.max_state_bytes();
    let write = state / fault_model.checkpoint_write_bandwidth;
    let reload = state / fault_model.recovery_reload_bandwidth;
    let mut report = FaultReport {
        base,
        horizon_iterations: horizon,
        checkpoint_interval,
        checkpoint_every_iterations: None,
        checkpoint_write_time: write,
        reload_time: reload,
        fault_free_time: 0.0,
        wall_time: 0.0,
        failures: 0,
        checkpoints_written: 0,
        checkpoint_time: 0.0,
        recovery_time: 0.0,
        lost_time: 0.0,
        executed_iterations: 0,
        goodput: 0.0,
        fault_free_throughput: 0.0,
        energy_per_useful_sample: None,
    };
    let Some(iter_time) = report.base.iteration_time() else {
        return Ok(report);
    };
    let iter_energy = report.base.total_energy() / report.base.iterations_simulated as f64;
    let idle_power: f64 = plan
        .participants
        .iter()
        .map(|id| domain.device(id).map(|d| d.power_idle))
        .sum::<Result<f64>>()?;

    let every = checkpoint_interval.map(|tau| ((tau / iter_time).round() as u64).max(1));
    report.checkpoint_every_iterations = every;

    let mut failures = failures.into_iter().peekable();
    let mut now = 0.0f64;
    let mut done = 0u64;
    let mut committed = 0u64;
    let mut committed_at = 0.0f64;
    let mut partial_iterations = 0.0f64;

    // Returns the failure time if one strikes before `until`.
    let mut strike = |until: f64, now: f64| -> Option<f64> {
        while failures.peek().is_some_and(|&f| f < now) {
            failures.next();
        }
        failures.next_if(|&f| f < until)
    };

    while done < horizon {
        let finish = now + iter_time;
        if let Some(f) = strike(finish, now) {
            report.failures += 1;
            partial_iterations += (f - now) / iter_time;
            report.lost_time += f - committed_at;
            now = f;
            done = committed;
            let mut recovered = now + reload;
            while let Some(g) = strike(recovered, now) {
                report.failures += 1;
                report.recovery_time += g - now;
                now = g;
                recovered = now + reload;
            }
            report.recovery_time += recovered - now;
            now = recovered;
            committed_at = now;
            continue;
        }
        now = finish;
        done += 1;
        report.executed_iterations += 1;
        if let Some(k) = every {
            if done - committed == k && done < horizon {
                let written = now + write;
                if let Some(f) = strike(written, now) {
                    report.failures += 1;
                    report.checkpoint_time += f - now;
                    report.lost_time += f - committed_at;
                    now = f;
                    done = committed;
                    let mut recovered = now + reload;
                    while let Some(g) = strike(recovered, now) {
                        report.failures += 1;
                        report.recovery_time += g - now;
                        now = g;
                        recovered = now + reload;
                    }
                    report.recovery_time += recovered - now;
                    now = recovered;
                    committed_at = now;
                    continue;
                }
                report.checkpoints_written += 1;
                report.checkpoint_time += write;
                now = written;
                committed = done;
                committed_at = now;
            }
        }
    }

    let samples = horizon * plan.job.global_batch;
    report.wall_time = now;
    report.fault_free_time = horizon as f64 * iter_time;
    report.goodput = if now > 0.0 { samples as f64 / now } else { 0.0 };
    report.fault_free_throughput = plan.job.global_batch as f64 / iter_time;
    if samples > 0 {
        let energy = (report.executed_iterations as f64 + partial_iterations) * iter_energy
            + (report.checkpoint_time + report.recovery_time) * idle_power;
        report.energy_per_useful_sample = Some(energy / samples as f64);
    }
    Ok(report)
}
