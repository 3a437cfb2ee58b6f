//! Turns workload statistics into latency and throughput forecasts for a
//! hardware point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{LoraMergePolicy, ModelConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hardware::{EfficiencyProfile, HardwareSpec};
use crate::ops::foundational::bmm;
use crate::sim::build_model;
use crate::stats::{OpClass, PhaseSummary, RunSummary, StatsDelta};
use crate::dtype::DataType;
use crate::units::{GB, TERA};

/// Anything that can report its statistics broken down by operator class.
pub trait Workload {
    fn class_totals(&self) -> Vec<(OpClass, StatsDelta)>;

    fn total(&self) -> StatsDelta {
        self.class_totals().into_iter().map(|(_, d)| d).sum()
    }
}

impl Workload for RunSummary {
    fn class_totals(&self) -> Vec<(OpClass, StatsDelta)> {
        self.by_class.iter().map(|(c, d)| (*c, *d)).collect()
    }

    fn total(&self) -> StatsDelta {
        self.totals
    }
}

impl Workload for PhaseSummary {
    fn class_totals(&self) -> Vec<(OpClass, StatsDelta)> {
        self.by_class.iter().map(|(c, d)| (*c, *d)).collect()
    }
}

impl Workload for BTreeMap<OpClass, StatsDelta> {
    fn class_totals(&self) -> Vec<(OpClass, StatsDelta)> {
        self.iter().map(|(c, d)| (*c, *d)).collect()
    }
}

/// A bare delta, attributed to [`OpClass::Other`].
impl Workload for StatsDelta {
    fn class_totals(&self) -> Vec<(OpClass, StatsDelta)> {
        vec![(OpClass::Other, *self)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForecastResult {
    pub t_c: f64,
    pub t_m: f64,
    pub ttft: f64,
    pub tc_over_tm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tpot: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_lora: Option<f64>,
}

impl ForecastResult {
    pub fn compute_bound(&self) -> bool {
        self.tc_over_tm > 1.0
    }
}

fn dispatch_time(w: &impl Workload, hw: &HardwareSpec) -> f64 {
    w.total().dispatches as f64 * hw.dispatch_latency
}

fn check(hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<()> {
    hw.validate()?;
    eff.validate()
}

/// Compute-side time: each class's ops at its achieved fraction of peak,
/// plus dispatch overhead.
pub fn time_compute(w: &impl Workload, hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<f64> {
    check(hw, eff)?;
    let ops: f64 = w
        .class_totals()
        .into_iter()
        .map(|(c, d)| d.opcount as f64 / (eff.ec(c) * hw.peak_tops * TERA))
        .sum();
    Ok(ops + dispatch_time(w, hw))
}

/// Memory-side time: each class's traffic (weights, activations and KV) at
/// its achieved fraction of peak bandwidth, plus dispatch overhead.
pub fn time_memory(w: &impl Workload, hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<f64> {
    check(hw, eff)?;
    let bytes: f64 = w
        .class_totals()
        .into_iter()
        .map(|(c, d)| d.traffic().as_f64() / (eff.em(c) * hw.peak_bw * GB))
        .sum();
    Ok(bytes + dispatch_time(w, hw))
}

fn ratio(t_c: f64, t_m: f64) -> f64 {
    if t_m == 0.0 {
        if t_c == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        t_c / t_m
    }
}

/// Prefill latency: the slower of compute and memory.
pub fn forecast_ttft(w: &impl Workload, hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<ForecastResult> {
    let t_c = time_compute(w, hw, eff)?;
    let t_m = time_memory(w, hw, eff)?;
    Ok(ForecastResult {
        t_c,
        t_m,
        ttft: t_c.max(t_m),
        tc_over_tm: ratio(t_c, t_m),
        tpot: None,
        tps: None,
        t_lora: None,
    })
}

/// Per-token decode time from the bytes read for one token (weights, KV
/// cache and activations) at the average achieved bandwidth.
pub fn tpot(step: &StatsDelta, hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<f64> {
    check(hw, eff)?;
    let t = step.reads().as_f64() / (hw.peak_bw * GB * eff.em_avg)
        + step.dispatches as f64 * hw.dispatch_latency;
    if t > 0.0 {
        Ok(t)
    } else {
        Err(Error::UndefinedTps)
    }
}

/// Decode forecast for one token's workload.
pub fn forecast_tpot_tps(w: &impl Workload, hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<ForecastResult> {
    let mut r = forecast_ttft(w, hw, eff)?;
    let t = tpot(&w.total(), hw, eff)?;
    r.tpot = Some(t);
    r.tps = Some(1.0 / t);
    Ok(r)
}

/// Time to merge a freshly trained adapter into the weights. Zero when the
/// model carries no adapter.
pub fn forecast_lora_update(cfg: &ModelConfig, hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<f64> {
    check(hw, eff)?;
    let rank = match (cfg.lora_merge_policy, cfg.lora_rank) {
        (LoraMergePolicy::None, _) | (_, None) => return Ok(0.0),
        (_, Some(r)) => r,
    };
    let merge = build_model(cfg)?.lora_merge_total(rank)?;
    Ok(lora_time(&merge, hw, eff))
}

/// Max-combined compute and memory time of a merge workload.
pub fn lora_time(merge: &StatsDelta, hw: &HardwareSpec, eff: &EfficiencyProfile) -> f64 {
    let t_c = merge.opcount as f64 / (eff.ec(OpClass::Gemm) * hw.peak_tops * TERA);
    let t_m = merge.traffic().as_f64() / (eff.em(OpClass::Gemm) * hw.peak_bw * GB);
    t_c.max(t_m)
}

/// Inclusive arithmetic range `start:stop:step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Axis {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        let ok = start.is_finite() && stop.is_finite() && step.is_finite() && step > 0.0 && stop >= start;
        if !ok {
            return Err(Error::Hardware(format!(
                "axis {start}:{stop}:{step} needs start <= stop and a positive step"
            )));
        }
        Ok(Axis { start, stop, step })
    }

    pub fn single(v: f64) -> Self {
        Axis {
            start: v,
            stop: v,
            step: 1.0,
        }
    }

    /// The default hardware axis, 10 to 100 in steps of 10.
    pub fn default_hw() -> Self {
        Axis {
            start: 10.0,
            stop: 100.0,
            step: 10.0,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Hardware(format!("bad axis value `{t}` in `{s}`")))
        };
        match parts.as_slice() {
            [v] => Ok(Axis::single(num(v)?)),
            [a, b, c] => Axis::new(num(a)?, num(b)?, num(c)?),
            _ => Err(Error::Hardware(format!("axis `{s}` is not start:stop:step"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub tops: f64,
    pub bw: f64,
    pub ec: f64,
    pub em: f64,
    pub result: ForecastResult,
}

fn grid<W: Workload + Sync>(
    w: &W,
    points: Vec<(f64, f64, f64, f64)>,
    dispatch_latency: f64,
    exec: Execution,
) -> Result<Vec<GridPoint>> {
    exec.map(&points, |&(tops, bw, ec, em)| {
        let hw = HardwareSpec::new(tops, bw).with_dispatch_latency(dispatch_latency);
        let eff = EfficiencyProfile::uniform(ec, em);
        forecast_ttft(w, &hw, &eff).map(|result| GridPoint {
            tops,
            bw,
            ec,
            em,
            result,
        })
    })
    .into_iter()
    .collect()
}

/// Forecasts over the cross product of compute and bandwidth axes at fixed
/// efficiencies. Row-major: tops outer, bandwidth inner.
pub fn efficiency_grid<W: Workload + Sync>(
    w: &W,
    tops: &Axis,
    bw: &Axis,
    ec: f64,
    em: f64,
    dispatch_latency: f64,
    exec: Execution,
) -> Result<Vec<GridPoint>> {
    let mut points = Vec::new();
    for t in tops.values() {
        for b in bw.values() {
            points.push((t, b, ec, em));
        }
    }
    grid(w, points, dispatch_latency, exec)
}

/// Forecasts at one hardware point over swept compute and memory
/// efficiencies. Row-major: ec outer, em inner.
pub fn efficiency_sweep<W: Workload + Sync>(
    w: &W,
    hw: &HardwareSpec,
    ec: &Axis,
    em: &Axis,
    exec: Execution,
) -> Result<Vec<GridPoint>> {
    let mut points = Vec::new();
    for c in ec.values() {
        for m in em.values() {
            points.push((hw.peak_tops, hw.peak_bw, c, m));
        }
    }
    grid(w, points, hw.dispatch_latency, exec)
}

pub const GRID_CSV_HEADER: &str = "tops,bw,ec,em,t_c,t_m,tc_over_tm,ttft";

pub fn grid_csv(points: &[GridPoint]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for p in points {
        let r = &p.result;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.tops, p.bw, p.ec, p.em, r.t_c, r.t_m, r.tc_over_tm, r.ttft
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TilingRow {
    pub seq: u64,
    pub padded_seq: u64,
    pub ideal_ops: u64,
    pub padded_ops: u64,
    pub efficiency: f64,
    /// Cumulative ideal ops over cumulative padded ops up to `seq`.
    pub running_avg: f64,
}

/// Attention-score and weighted-sum BMM work for one decode step when the
/// context is padded up to a multiple of `tile`.
pub fn bmm_tiling_efficiency(
    tile: u64,
    head_dim: u64,
    heads: u64,
    seqs: impl IntoIterator<Item = u64>,
) -> Result<Vec<TilingRow>> {
    if tile == 0 {
        return Err(Error::Shape("tile size must be at least 1".into()));
    }
    let ops = |s: u64| -> Result<u64> {
        Ok(bmm(heads, 1, head_dim, s, DataType::Bf16)?.opcount
            + bmm(heads, 1, s, head_dim, DataType::Bf16)?.opcount)
    };
    let (mut cum_ideal, mut cum_padded) = (0u128, 0u128);
    let mut rows = Vec::new();
    for seq in seqs {
        let padded_seq = seq.div_ceil(tile) * tile;
        let ideal_ops = ops(seq)?;
        let padded_ops = ops(padded_seq)?;
        cum_ideal += u128::from(ideal_ops);
        cum_padded += u128::from(padded_ops);
        rows.push(TilingRow {
            seq,
            padded_seq,
            ideal_ops,
            padded_ops,
            efficiency: ideal_ops as f64 / padded_ops as f64,
            running_avg: cum_ideal as f64 / cum_padded as f64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelinePoint {
    pub token: u64,
    pub mem_rd: u64,
    pub tpot: f64,
    pub tps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TpsTimeline {
    pub points: Vec<TimelinePoint>,
    pub first_tps: f64,
    pub last_tps: f64,
    /// Percentage drop from first to last token.
    pub drop_pct: f64,
}

/// Per-token TPS over the decode part of a run.
pub fn decode_tps_timeline(run: &RunSummary, hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<TpsTimeline> {
    tps_timeline(&run.per_token, hw, eff)
}

pub fn tps_timeline(steps: &[StatsDelta], hw: &HardwareSpec, eff: &EfficiencyProfile) -> Result<TpsTimeline> {
    let mut points = Vec::with_capacity(steps.len());
    for (i, step) in steps.iter().enumerate() {
        let t = tpot(step, hw, eff)?;
        points.push(TimelinePoint {
            token: i as u64 + 1,
            mem_rd: step.reads().ceil_bytes(),
            tpot: t,
            tps: 1.0 / t,
        });
    }
    let (first_tps, last_tps) = match (points.first(), points.last()) {
        (Some(f), Some(l)) => (f.tps, l.tps),
        _ => return Err(Error::Scenario("timeline has no decode tokens".into())),
    };
    Ok(TpsTimeline {
        points,
        first_tps,
        last_tps,
        drop_pct: 100.0 * (first_tps - last_tps) / first_tps,
    })
}

pub const TIMELINE_CSV_HEADER: &str = "token_index,mem_rd,tpot,tps";

pub fn timeline_csv(t: &TpsTimeline) -> String {
    let mut out = String::from(TIMELINE_CSV_HEADER);
    out.push('\n');
    for p in &t.points {
        let _ = writeln!(out, "{},{},{},{}", p.token, p.mem_rd, p.tpot, p.tps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Bytes;

    fn ops(n: u64) -> StatsDelta {
        StatsDelta {
            opcount: n,
            ..StatsDelta::ZERO
        }
    }

    #[test]
    fn ttft_example() {
        let hw = HardwareSpec::new(0.3264, 100.0);
        let w = ops(29_290_000_000_000);
        let full = forecast_ttft(&w, &hw, &EfficiencyProfile::uniform(1.0, 1.0)).unwrap();
        assert!((full.ttft - 89.74).abs() < 0.01);
        let half = forecast_ttft(&w, &hw, &EfficiencyProfile::uniform(0.5, 1.0)).unwrap();
        assert!((half.ttft - 179.47).abs() < 0.02);
        assert!(half.compute_bound());
    }

    #[test]
    fn tps_example() {
        let step = StatsDelta {
            mem_rd: Bytes::from_bytes((12.85 * GB) as u64),
            ..StatsDelta::ZERO
        };
        let r = forecast_tpot_tps(&step, &HardwareSpec::new(1.0, 240.0), &EfficiencyProfile::uniform(1.0, 0.1))
            .unwrap();
        assert!((r.tpot.unwrap() - 0.535).abs() < 1e-3);
        assert!((r.tps.unwrap() - 1.87).abs() < 0.01);
    }

    #[test]
    fn empty_workload() {
        let hw = HardwareSpec::new(1.0, 1.0);
        let eff = EfficiencyProfile::default();
        assert!(matches!(
            forecast_tpot_tps(&StatsDelta::ZERO, &hw, &eff),
            Err(Error::UndefinedTps)
        ));
        let lat = hw.with_dispatch_latency(1e-3);
        let d = StatsDelta {
            dispatches: 10,
            ..StatsDelta::ZERO
        };
        assert!((time_compute(&d, &lat, &eff).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn axis_values() {
        assert_eq!(Axis::default_hw().values().len(), 10);
        let a: Axis = "10:100:10".parse().unwrap();
        assert_eq!(a.values().last(), Some(&100.0));
        assert_eq!("5".parse::<Axis>().unwrap().values(), vec![5.0]);
        assert!("10:5:1".parse::<Axis>().is_err());
        assert!("1:2".parse::<Axis>().is_err());
    }

    #[test]
    fn grid_order() {
        let w = ops(1_000_000);
        let g = efficiency_grid(&w, &Axis::new(1.0, 2.0, 1.0).unwrap(), &Axis::new(1.0, 3.0, 1.0).unwrap(), 1.0, 1.0, 0.0, Execution::Sequential)
            .unwrap();
        let order: Vec<(f64, f64)> = g.iter().map(|p| (p.tops, p.bw)).collect();
        assert_eq!(order, vec![(1.0, 1.0), (1.0, 2.0), (1.0, 3.0), (2.0, 1.0), (2.0, 2.0), (2.0, 3.0)]);
        assert_eq!(grid_csv(&g).lines().count(), 7);
    }

    #[test]
    fn tiling_sawtooth() {
        let rows = bmm_tiling_efficiency(64, 128, 32, [64, 65, 128]).unwrap();
        assert_eq!(rows[0].efficiency, 1.0);
        assert!((rows[1].efficiency - 65.0 / 128.0).abs() < 0.01);
        assert_eq!(rows[2].efficiency, 1.0);
    }
}
