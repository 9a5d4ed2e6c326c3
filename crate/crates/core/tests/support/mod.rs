//! Brute-force and numerical oracles shared by the integration suites.
#![allow(dead_code)]

use edgetrain::parallelism::{make_plan, make_pp_plan, pipeline_stage_memory};
use edgetrain::scheduler::Objective;
use edgetrain::sim::{pipeline_iteration_time, simulate, SimConfig};
use edgetrain::workload::{block_flops_per_sample, head_flops_per_sample};
use edgetrain::{
    CommOp, DeviceProfile, ExecMode, NetworkModel, ParallelKind, TrainingJob, TransformerSpec, TrustedDomain,
};

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        ((a - b) / b).abs()
    }
}

pub fn ring_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i}")).collect()
}

/// Moves real chunks around a ring in lock step until every device holds the
/// expected result, timing each step by its slowest active link.
pub fn ring_simulation(op: CommOp, payload: f64, ids: &[String], net: &NetworkModel) -> f64 {
    let n = ids.len();
    if n < 2 {
        return 0.0;
    }
    let chunk_time = |from: usize| net.link(&ids[from], &ids[(from + 1) % n]).transfer_time(payload / n as f64);
    let step_time = (0..n).map(chunk_time).fold(0.0, f64::max);
    let mut elapsed = 0.0;
    match op {
        CommOp::AllReduce => {
            // data[dev][chunk]: partial sums, device d starts with value d+1 in every chunk.
            let mut data: Vec<Vec<u64>> = (0..n).map(|d| vec![d as u64 + 1; n]).collect();
            let full: u64 = (1..=n as u64).sum();
            // Reduce-scatter.
            let mut step = 0;
            while !(0..n).all(|d| data[d][(d + 1) % n] == full) {
                let sends: Vec<(usize, usize, u64)> = (0..n)
                    .map(|d| {
                        let c = (d + n - step % n) % n;
                        ((d + 1) % n, c, data[d][c])
                    })
                    .collect();
                for (to, c, v) in sends {
                    data[to][c] += v;
                }
                elapsed += step_time;
                step += 1;
            }
            // All-gather of reduced chunks.
            let mut step = 0;
            while !data.iter().all(|row| row.iter().all(|&v| v == full)) {
                let sends: Vec<(usize, usize, u64)> = (0..n)
                    .map(|d| {
                        let c = (d + 1 + n - step % n) % n;
                        ((d + 1) % n, c, data[d][c])
                    })
                    .collect();
                for (to, c, v) in sends {
                    data[to][c] = v;
                }
                elapsed += step_time;
                step += 1;
            }
        }
        CommOp::AllGather => {
            let mut have: Vec<Vec<bool>> = (0..n).map(|d| (0..n).map(|c| c == d).collect()).collect();
            let mut step = 0;
            while !have.iter().all(|row| row.iter().all(|&h| h)) {
                let sends: Vec<(usize, usize)> = (0..n).map(|d| ((d + 1) % n, (d + n - step % n) % n)).collect();
                for (to, c) in sends {
                    have[to][c] = true;
                }
                elapsed += step_time;
                step += 1;
            }
        }
        CommOp::PointToPoint => elapsed = net.link(&ids[0], &ids[1]).transfer_time(payload),
    }
    elapsed
}

pub fn domain_from(throughputs: &[f64], capacities: &[f64]) -> TrustedDomain {
    let devices = throughputs
        .iter()
        .zip(capacities)
        .enumerate()
        .map(|(i, (&t, &c))| DeviceProfile {
            gpu_throughput: t,
            mem_capacity: c,
            ..DeviceProfile::jetson_nano(format!("d{i}"))
        })
        .collect();
    TrustedDomain::new("grid", devices, NetworkModel::wireless_1000mbps(), ExecMode::GpuEnabled).unwrap()
}

pub fn compositions(total: u64, parts: usize) -> Vec<Vec<u64>> {
    if parts == 1 {
        return if total >= 1 { vec![vec![total]] } else { Vec::new() };
    }
    let mut out = Vec::new();
    for first in 1..=total.saturating_sub(parts as u64 - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Bottleneck of a block assignment, or `None` when a stage does not fit.
pub fn bottleneck(domain: &TrustedDomain, order: &[String], spec: &TransformerSpec, job: &TrainingJob, counts: &[u64]) -> Option<f64> {
    let stages = order.len();
    let in_flight = job.micro_batches().min(stages as u64);
    let m = job.micro_batch as f64;
    let mut worst = 0.0f64;
    for (j, (id, &b)) in order.iter().zip(counts).enumerate() {
        let d = domain.device(id).unwrap();
        let last = j + 1 == stages;
        let (state, act) = pipeline_stage_memory(spec, job, b, j == 0 || last, in_flight);
        if state + act > d.usable_memory() {
            return None;
        }
        let head = if last { head_flops_per_sample(spec, job.seq_len) } else { 0.0 };
        let flops = m * (b as f64 * block_flops_per_sample(spec, job.seq_len, job.seq_len) + head);
        worst = worst.max(flops / d.effective_throughput(domain.mode));
    }
    Some(worst)
}

/// Exhaustive search; compositions come out in lexicographic order, so the
/// first optimum is the lexicographically smallest.
pub fn brute_partition(domain: &TrustedDomain, order: &[String], spec: &TransformerSpec, job: &TrainingJob) -> Option<(Vec<u64>, f64)> {
    let mut best: Option<(Vec<u64>, f64)> = None;
    for counts in compositions(spec.num_blocks, order.len()) {
        if let Some(t) = bottleneck(domain, order, spec, job, &counts) {
            if best.as_ref().is_none_or(|(_, bt)| t < *bt) {
                best = Some((counts, t));
            }
        }
    }
    best
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let v = left.remove(i);
            prefix.push(v);
            go(prefix, left, out);
            prefix.pop();
            left.insert(i, v);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

pub fn brute_order(domain: &TrustedDomain, ids: &[String], spec: &TransformerSpec, job: &TrainingJob) -> Option<Vec<String>> {
    let mut best: Option<(f64, Vec<String>)> = None;
    for perm in permutations(ids.len()) {
        let order: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
        let Some((counts, _)) = brute_partition(domain, &order, spec, job) else { continue };
        let plan = make_pp_plan(domain, spec, job, &order, Some(&counts)).unwrap();
        let t = pipeline_iteration_time(&plan, domain).unwrap();
        if best.as_ref().is_none_or(|(bt, _)| t < *bt) {
            best = Some((t, order));
        }
    }
    best.map(|(_, o)| o)
}

pub fn brute_choice(
    domain: &TrustedDomain,
    ids: &[String],
    spec: &TransformerSpec,
    job: &TrainingJob,
    objective: &Objective,
    config: &SimConfig,
) -> Option<(ParallelKind, f64)> {
    let kinds: Vec<ParallelKind> = if ids.len() == 1 {
        vec![ParallelKind::SingleDevice]
    } else {
        vec![
            ParallelKind::DataParallel,
            ParallelKind::PipelineParallel,
            ParallelKind::TensorParallel,
            ParallelKind::SequenceParallel,
        ]
    };
    let mut best: Option<(ParallelKind, f64)> = None;
    for kind in kinds {
        let plan = if kind == ParallelKind::PipelineParallel {
            let Some(order) = brute_order(domain, ids, spec, job) else { continue };
            let (counts, _) = brute_partition(domain, &order, spec, job).unwrap();
            make_pp_plan(domain, spec, job, &order, Some(&counts))
        } else {
            make_plan(kind, domain, spec, job, ids)
        };
        let Ok(plan) = plan else { continue };
        let r = simulate(&plan, domain, config).unwrap();
        let Some(v) = objective.value(&r) else { continue };
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((kind, v));
        }
    }
    best
}

/// Golden-section minimisation of the first-order overhead `C/τ + τ/(2M)`
/// over log τ.
pub fn numeric_optimum(c: f64, mtbf: f64) -> f64 {
    let f = |x: f64| {
        let tau = x.exp();
        c / tau + tau / (2.0 * mtbf)
    };
    let (mut lo, mut hi) = ((c * 1e-6).ln(), (mtbf * 1e3).ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    ((lo + hi) / 2.0).exp()
}

/// Best subset over all non-empty subsets visited by size, then index order.
pub fn brute_select(
    domain: &TrustedDomain,
    spec: &TransformerSpec,
    job: &TrainingJob,
    objective: &Objective,
    config: &SimConfig,
) -> Option<(Vec<String>, f64)> {
    let n = domain.devices.len();
    let mut subsets: Vec<Vec<usize>> = (1u32..1 << n)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect())
        .collect();
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    let mut best: Option<(Vec<String>, f64)> = None;
    for s in subsets {
        let ids: Vec<String> = s.iter().map(|&i| domain.devices[i].id.clone()).collect();
        if let Some((_, v)) = brute_choice(domain, &ids, spec, job, objective, config) {
            if best.as_ref().is_none_or(|(_, b)| v < *b) {
                best = Some((ids, v));
            }
        }
    }
    best
}
