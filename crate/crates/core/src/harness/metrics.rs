use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatbase::FloatingLog;
use crate::mpc::{ControllerKind, ControllerStep, EpisodeLog};
use crate::qp::QpStatus;

/// Solves excluded from timing statistics at the start of each episode.
pub const TIMING_WARMUP: usize = 10;

/// Summary of one or more episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub controller: String,
    /// Episode seed, or `None` for an aggregate over seeds.
    pub seed: Option<u64>,
    pub episodes: usize,
    pub total_steps: usize,
    pub infeasible_count: usize,
    pub avg_target_dist: f64,
    pub avg_max_phi: f64,
    pub avg_mean_phi: f64,
    pub avg_min_dist: f64,
    /// Smallest sphere–obstacle distance seen anywhere.
    pub min_dist: f64,
    pub cumulative_cost: f64,
    pub solve_ms_mean: f64,
    pub solve_ms_std: f64,
    pub aborted: bool,
}

impl MetricsRecord {
    /// Metrics over the given episodes, each a slice of steps. Averages are
    /// taken over all steps; the first `TIMING_WARMUP` solves of each
    /// episode are left out of the timing figures unless an episode is
    /// shorter than that.
    pub fn from_episodes(
        scenario: &str,
        kind: ControllerKind,
        seed: Option<u64>,
        episodes: &[&[ControllerStep]],
        aborted: bool,
    ) -> Self {
        let steps: Vec<&ControllerStep> = episodes.iter().flat_map(|e| e.iter()).collect();
        let count = steps.len();
        let mean = |f: &dyn Fn(&ControllerStep) -> f64| {
            if count == 0 {
                0.0
            } else {
                steps.iter().map(|s| f(s)).sum::<f64>() / count as f64
            }
        };
        let times: Vec<f64> = episodes
            .iter()
            .flat_map(|e| {
                let skip = if e.len() > TIMING_WARMUP {
                    TIMING_WARMUP
                } else {
                    0
                };
                e.iter().skip(skip).map(|s| s.solve_ms)
            })
            .collect();
        let (t_mean, t_std) = mean_std(&times);
        Self {
            scenario: scenario.to_string(),
            controller: kind.as_str().to_string(),
            seed,
            episodes: episodes.len(),
            total_steps: count,
            infeasible_count: steps.iter().filter(|s| s.infeasible).count(),
            avg_target_dist: mean(&|s| s.target_dist),
            avg_max_phi: mean(&|s| s.max_phi),
            avg_mean_phi: mean(&|s| s.mean_phi),
            avg_min_dist: mean(&|s| s.min_dist),
            min_dist: steps
                .iter()
                .map(|s| s.min_dist)
                .fold(f64::INFINITY, f64::min),
            cumulative_cost: steps.iter().map(|s| s.cost).sum(),
            solve_ms_mean: t_mean,
            solve_ms_std: t_std,
            aborted,
        }
    }

    pub fn from_log(scenario: &str, seed: u64, log: &EpisodeLog) -> Self {
        Self::from_episodes(
            scenario,
            log.kind,
            Some(seed),
            &[&log.steps],
            log.aborted.is_some(),
        )
    }

    /// Aggregate over seeded episodes. Episodes are reduced in seed order,
    /// so the result does not depend on the order of `runs`.
    pub fn aggregate(scenario: &str, kind: ControllerKind, runs: &[(u64, &EpisodeLog)]) -> Self {
        let mut sorted: Vec<&(u64, &EpisodeLog)> = runs.iter().collect();
        sorted.sort_by_key(|(seed, _)| *seed);
        let eps: Vec<&[ControllerStep]> = sorted.iter().map(|(_, l)| l.steps.as_slice()).collect();
        let aborted = sorted.iter().any(|(_, l)| l.aborted.is_some());
        Self::from_episodes(scenario, kind, None, &eps, aborted)
    }
}

/// Population mean and standard deviation; zeros for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Zeroes every wall-clock field so that logs are reproducible.
pub fn strip_timing(log: &mut EpisodeLog) {
    for s in &mut log.steps {
        s.solve_ms = 0.0;
    }
}

fn status_from_str(s: &str) -> Option<QpStatus> {
    [
        QpStatus::Solved,
        QpStatus::PrimalInfeasible,
        QpStatus::MaxIter,
    ]
    .into_iter()
    .find(|st| st.as_str() == s)
}

/// Step-log CSV: scalar columns followed by `tip_*`, `target_*`, `u_*` and
/// `phi_*` blocks whose widths are fixed by the header.
pub fn write_step_log(log: &EpisodeLog, path: &Path) -> Result<()> {
    write_log_with(log, &[], |_| Vec::new(), path)
}

/// Step log of a floating-base run with trailing `base_x`, `base_y`,
/// `base_theta` and `base_dist` columns.
pub fn write_floating_log(log: &FloatingLog, path: &Path) -> Result<()> {
    write_log_with(
        &log.log,
        &["base_x", "base_y", "base_theta", "base_dist"],
        |k| {
            let mut extra: Vec<String> = log
                .poses
                .get(k)
                .map(|p| p.iter().map(f64::to_string).collect())
                .unwrap_or_default();
            extra.extend(log.base_dist.get(k).map(f64::to_string));
            extra
        },
        path,
    )
}

fn write_log_with(
    log: &EpisodeLog,
    extra_header: &[&str],
    extra: impl Fn(usize) -> Vec<String>,
    path: &Path,
) -> Result<()> {
    let first = log
        .steps
        .first()
        .ok_or_else(|| Error::param("cannot write an empty step log"))?;
    let (w, m, l) = (first.tip.len(), first.u.len(), first.link_phi.len());
    let mut header: Vec<String> = [
        "t",
        "controller",
        "status",
        "infeasible",
        "solve_ms",
        "cost",
        "max_phi",
        "mean_phi",
        "min_dist",
        "slack_total",
        "target_dist",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..w).map(|i| format!("tip_{i}")));
    header.extend((0..w).map(|i| format!("target_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.extend((0..l).map(|i| format!("phi_{i}")));
    header.extend(extra_header.iter().map(|s| s.to_string()));
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(&header)?;
    for (k, s) in log.steps.iter().enumerate() {
        let mut row = vec![
            s.t.to_string(),
            log.kind.as_str().to_string(),
            s.status.as_str().to_string(),
            u8::from(s.infeasible).to_string(),
            s.solve_ms.to_string(),
            s.cost.to_string(),
            s.max_phi.to_string(),
            s.mean_phi.to_string(),
            s.min_dist.to_string(),
            s.slack_total.to_string(),
            s.target_dist.to_string(),
        ];
        for block in [&s.tip, &s.target, &s.u] {
            row.extend(block.iter().map(f64::to_string));
        }
        row.extend(s.link_phi.iter().map(f64::to_string));
        let mut tail = extra(k);
        tail.resize(extra_header.len(), String::new());
        row.extend(tail);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a step log; trailing columns such as the base pose are ignored.
pub fn read_step_log(path: &Path) -> Result<EpisodeLog> {
    let bad = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let width = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let (w, m, l) = (width("tip_"), width("u_"), width("phi_"));
    let mut kind = None;
    let mut steps = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 11 + 2 * w + m + l {
            return Err(bad(format!("row has {} fields", rec.len())));
        }
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {}: {e}", &header[i])))
        };
        let block = |start: usize, len: usize| -> Result<DVector<f64>> {
            (start..start + len)
                .map(num)
                .collect::<Result<Vec<_>>>()
                .map(DVector::from_vec)
        };
        let k = match &rec[1] {
            "kmpc" => ControllerKind::Kmpc,
            "lti" => ControllerKind::Lti,
            "ltv" => ControllerKind::Ltv,
            "nmpc" => ControllerKind::Nmpc,
            other => return Err(bad(format!("unknown controller {other}"))),
        };
        kind = Some(k);
        steps.push(ControllerStep {
            t: rec[0]
                .parse()
                .map_err(|e| bad(format!("step index: {e}")))?,
            status: status_from_str(&rec[2])
                .ok_or_else(|| bad(format!("unknown status {}", &rec[2])))?,
            infeasible: &rec[3] == "1",
            solve_ms: num(4)?,
            cost: num(5)?,
            max_phi: num(6)?,
            mean_phi: num(7)?,
            min_dist: num(8)?,
            slack_total: num(9)?,
            target_dist: num(10)?,
            tip: block(11, w)?,
            target: block(11 + w, w)?,
            u: block(11 + 2 * w, m)?,
            link_phi: block(11 + 2 * w + m, l)?.as_slice().to_vec(),
        });
    }
    let kind = kind.ok_or_else(|| bad("step log has no rows".into()))?;
    Ok(EpisodeLog {
        kind,
        steps,
        aborted: None,
    })
}
