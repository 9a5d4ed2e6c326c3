//! The experiment grid: every model × parallelism × mode on one testbed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use edgetrain::parallelism::{make_plan, make_pp_plan, make_single_plan};
use edgetrain::scheduler::arrange_topology;
use edgetrain::sim::simulate;
use edgetrain::{Error, ExecMode, ParallelKind, Result, SimConfig, TrainingJob, TransformerSpec, TrustedDomain};

/// One cell of the grid. Latency and energy are empty when out of memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub kind: ParallelKind,
    pub mode: ExecMode,
    pub testbed: String,
    pub latency_per_sample: Option<f64>,
    pub energy_per_sample: Option<f64>,
    pub oom: bool,
    pub comm_bytes_per_iteration: f64,
}

/// Rows in (model, kind, mode) order, whatever order they finish in. Kinds
/// follow [`ParallelKind::ALL`]; the single-device baseline runs on the first
/// device of the domain.
pub fn sweep(
    domain: &TrustedDomain,
    models: &[TransformerSpec],
    modes: &[ExecMode],
    job: &TrainingJob,
    config: &SimConfig,
) -> Result<Vec<SweepRow>> {
    let cells: Vec<(&TransformerSpec, ParallelKind, ExecMode)> = models
        .iter()
        .flat_map(|m| ParallelKind::ALL.into_iter().flat_map(move |k| modes.iter().map(move |&md| (m, k, md))))
        .collect();
    cells
        .into_par_iter()
        .map(|(spec, kind, mode)| cell(&domain.with_mode(mode), spec, kind, job, config))
        .collect()
}

fn cell(domain: &TrustedDomain, spec: &TransformerSpec, kind: ParallelKind, job: &TrainingJob, config: &SimConfig) -> Result<SweepRow> {
    let ids = domain.ids();
    let plan = match kind {
        ParallelKind::SingleDevice => make_single_plan(domain, spec, job, &ids[0]),
        ParallelKind::PipelineParallel => {
            arrange_topology(domain, &ids, spec, job, kind).and_then(|order| make_pp_plan(domain, spec, job, &order, None))
        }
        _ => make_plan(kind, domain, spec, job, &ids),
    };
    let mut row = SweepRow {
        model: spec.name.clone(),
        kind,
        mode: domain.mode,
        testbed: domain.name.clone(),
        latency_per_sample: None,
        energy_per_sample: None,
        oom: true,
        comm_bytes_per_iteration: 0.0,
    };
    let plan = match plan {
        Ok(p) => p,
        // No stage split fits in memory.
        Err(Error::NoFeasiblePartition) => return Ok(row),
        Err(e) => return Err(e),
    };
    let r = simulate(&plan, domain, config)?;
    row.oom = r.oom;
    row.latency_per_sample = r.latency_per_sample;
    row.energy_per_sample = r.energy_per_sample;
    row.comm_bytes_per_iteration = r.comm_bytes_per_iteration();
    Ok(row)
}

/// CSV with a header row; empty fields for absent numbers.
pub fn to_csv(rows: &[SweepRow]) -> std::result::Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "kind",
        "mode",
        "testbed",
        "latency_per_sample",
        "energy_per_sample",
        "oom",
        "comm_bytes_per_iteration",
    ])?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.kind.short_name().to_string(),
            r.mode.to_string(),
            r.testbed.clone(),
            num(r.latency_per_sample),
            num(r.energy_per_sample),
            r.oom.to_string(),
            r.comm_bytes_per_iteration.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
