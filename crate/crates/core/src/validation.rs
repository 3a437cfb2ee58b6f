//! Built-in regression table: published reference workloads for the
//! Llama2-7B presets, checked against the model at fixed tolerances.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::config::{KvQuant, Variant};
use crate::error::Result;
use crate::exec::Execution;
use crate::forecast::{forecast_tpot_tps, forecast_ttft};
use crate::hardware::{EfficiencyProfile, HardwareSpec};
use crate::ops::foundational::{bmm, linear, LinearShape};
use crate::sim::{build_model, simulate_chunked_prefill, simulate_prefill, summarize, LayerGraph};
use crate::stats::{Mode, OpClass, StatsDelta};
use crate::units::{GB, GIGA, TERA};
use crate::DataType;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub criterion: u8,
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    /// Allowed deviation, already in the units of `expected`.
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn relative(criterion: u8, name: String, expected: f64, actual: f64, rel: f64) -> Self {
        let tolerance = expected.abs() * rel;
        CheckRow {
            criterion,
            name,
            expected,
            actual,
            tolerance,
            pass: (actual - expected).abs() <= tolerance,
        }
    }

    fn absolute(criterion: u8, name: String, expected: f64, actual: f64, tol: f64) -> Self {
        CheckRow {
            criterion,
            name,
            expected,
            actual,
            tolerance: tol,
            pass: (actual - expected).abs() <= tol,
        }
    }

    fn holds(criterion: u8, name: String, ok: bool) -> Self {
        CheckRow {
            criterion,
            name,
            expected: 1.0,
            actual: f64::from(u8::from(ok)),
            tolerance: 0.0,
            pass: ok,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2}: {:<44} expected {:>12.4} got {:>12.4} (tol {:.4})",
            if self.pass { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.expected,
            self.actual,
            self.tolerance
        )
    }
}

/// Prefill reference: prompt, TOPs, GEMM %, BMM %, softmax %, KV GB.
const PREFILL: [(u64, f64, f64, f64, f64, f64); 8] = [
    (256, 3.42, 99.0, 1.0, 0.0, 0.1),
    (1024, 14.09, 96.0, 3.9, 0.0, 0.5),
    (2048, 29.29, 92.4, 7.5, 0.1, 1.0),
    (4096, 63.04, 85.9, 14.0, 0.2, 2.0),
    (8192, 143.87, 75.2, 24.5, 0.3, 4.0),
    (16384, 358.94, 60.3, 39.1, 0.5, 8.0),
    (32768, 1002.67, 43.2, 56.0, 0.7, 16.0),
    (65536, 3144.41, 27.5, 71.6, 0.8, 32.0),
];

/// Decode reference per prompt: GOPs and GB for bf16-bf16, bf16-int4,
/// bf16-int4-kv4.
const DECODE: [(u64, [f64; 3], [f64; 3]); 7] = [
    (32, [13.34, 26.55, 26.61], [12.85, 3.74, 3.55]),
    (64, [13.36, 26.57, 26.64], [12.88, 3.77, 3.57]),
    (128, [13.39, 25.60, 26.69], [12.94, 3.83, 3.59]),
    (256, [13.46, 26.67, 26.79], [13.07, 3.96, 3.59]),
    (512, [13.59, 26.81, 26.99], [13.32, 4.21, 3.64]),
    (1024, [13.86, 27.08, 27.40], [13.82, 4.71, 3.73]),
    (2048, [14.41, 27.62, 28.21], [14.83, 5.72, 3.92]),
];

const DECODE_VARIANTS: [Variant; 3] = [Variant::Bf16Bf16, Variant::Bf16Int4, Variant::Bf16Int4Kv4];

/// Prefill TTFT reference at 326.4 GOPS: prompt, 100 %, 50 %.
const TTFT: [(u64, f64, f64); 7] = [
    (32, 1.30, 2.60),
    (64, 2.61, 5.21),
    (128, 5.21, 10.42),
    (256, 10.48, 20.96),
    (512, 21.17, 42.34),
    (1024, 43.17, 84.34),
    (2048, 89.74, 179.47),
];

/// Decode TPS reference at 240 GB/s, 10 % efficiency, bf16-bf16.
const TPS_CPU: [(u64, f64); 7] = [
    (32, 1.87),
    (64, 1.86),
    (128, 1.85),
    (256, 1.84),
    (512, 1.80),
    (1024, 1.74),
    (2048, 1.62),
];

/// Decode TPS reference at 256 GB/s, 50 % efficiency, bf16-int4.
const TPS_IGPU: [(u64, f64); 2] = [(128, 33.4), (1536, 27.2)];

/// Adapter merge totals in GOPs per rank.
const LORA: [(u64, f64); 4] = [(16, 220.2), (32, 427.4), (64, 841.9), (128, 1670.8)];

/// Adapter merge per-layer GOPs: (k, n, [r16, r32, r64, r128]).
const LORA_CELLS: [(u64, u64, [f64; 4]); 2] = [
    (4096, 4096, [0.6, 1.1, 2.2, 4.3]),
    (4096, 11008, [1.5, 3.0, 5.9, 11.6]),
];

/// Long generation: prompt, variant, last/first memory ratio.
const TIMELINE: [(u64, Variant, f64); 6] = [
    (128, Variant::Bf16Bf16, 1.15),
    (128, Variant::Bf16Int4, 1.53),
    (128, Variant::Bf16Int4Kv4, 1.10),
    (4096, Variant::Bf16Bf16, 1.18),
    (4096, Variant::Bf16Int4, 1.26),
    (4096, Variant::Bf16Int4Kv4, 1.08),
];

fn graph(v: Variant) -> Result<LayerGraph> {
    build_model(&v.config())
}

fn decode_gb(g: &LayerGraph, past: u64) -> Result<f64> {
    Ok(g.decode_step(past)?.reads().as_f64() / GB)
}

fn prefill_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    let g = graph(Variant::Bf16Bf16)?;
    for (p, tops, gemm, bmm_pct, sm, kv) in PREFILL {
        let s = summarize(&simulate_prefill(&g, p)?);
        rows.push(CheckRow::relative(1, format!("prefill {p} TOPs"), tops, s.totals.opcount as f64 / TERA, 0.02));
        // KV sizes are listed to one decimal
        rows.push(CheckRow::absolute(
            1,
            format!("prefill {p} KV GB"),
            kv,
            s.totals.kv_wr.as_f64() / GB,
            (0.02 * kv).max(0.05),
        ));
        for (label, class, want) in [
            ("GEMM", OpClass::Gemm, gemm),
            ("BMM", OpClass::Bmm, bmm_pct),
            ("softmax", OpClass::Softmax, sm),
        ] {
            rows.push(CheckRow::absolute(
                1,
                format!("prefill {p} {label} share %"),
                want,
                s.opcount_share(class),
                1.5,
            ));
        }
    }
    Ok(())
}

fn decode_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    for (i, v) in DECODE_VARIANTS.into_iter().enumerate() {
        let g = graph(v)?;
        for (p, gops, gb) in DECODE {
            let d = g.decode_step(p)?;
            rows.push(CheckRow::relative(2, format!("decode {v} {p} GOPs"), gops[i], d.opcount as f64 / GIGA, 0.05));
            rows.push(CheckRow::relative(2, format!("decode {v} {p} GB"), gb[i], d.reads().as_f64() / GB, 0.05));
        }
    }
    Ok(())
}

fn ttft_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    let g = graph(Variant::Bf16Bf16)?;
    let hw = HardwareSpec::new(0.3264, 100.0);
    for (p, full, half) in TTFT {
        let s = summarize(&simulate_prefill(&g, p)?);
        for (ec, want) in [(1.0, full), (0.5, half)] {
            let r = forecast_ttft(&s, &hw, &EfficiencyProfile::uniform(ec, 1.0))?;
            rows.push(CheckRow::relative(3, format!("TTFT {p} at ec {ec}"), want, r.ttft, 0.01));
        }
    }
    Ok(())
}

fn tps_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    let cases = [
        (Variant::Bf16Bf16, 240.0, 0.10, &TPS_CPU[..], 0.03),
        (Variant::Bf16Int4, 256.0, 0.50, &TPS_IGPU[..], 0.05),
    ];
    for (v, bw, em, table, tol) in cases {
        let g = graph(v)?;
        let hw = HardwareSpec::new(1.0, bw);
        let eff = EfficiencyProfile::uniform(1.0, em);
        for &(p, want) in table {
            let r = forecast_tpot_tps(&g.decode_step(p)?, &hw, &eff)?;
            rows.push(CheckRow::relative(4, format!("TPS {v} {p} at {bw} GB/s"), want, r.tps.unwrap_or(0.0), tol));
        }
    }
    Ok(())
}

fn lora_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    let g = graph(Variant::Bf16Bf16)?;
    for (i, (r, want)) in LORA.into_iter().enumerate() {
        let got = g.lora_merge_total(r)?.opcount as f64 / GIGA;
        rows.push(CheckRow::relative(5, format!("LoRA merge total r={r}"), want, got, 0.01));
        for (k, n, cells) in LORA_CELLS {
            let one = crate::ops::derived::lora_merge(k, n, r, DataType::Bf16, DataType::Bf16)?;
            rows.push(CheckRow::absolute(
                5,
                format!("LoRA merge {k}x{n} r={r}"),
                cells[i],
                one.opcount as f64 / GIGA,
                0.05,
            ));
        }
    }
    Ok(())
}

/// Chunked prefill is evaluated with fused attention. In eager mode the
/// full score matrices dominate prefill traffic and shrink with chunking.
fn chunk_rows(rows: &mut Vec<CheckRow>, exec: Execution) -> Result<()> {
    let g = graph(Variant::Bf16Int4Fused)?;
    let plain = summarize(&simulate_prefill(&g, 4096)?).totals;
    let mut last_rd = 0.0;
    let mut monotone = true;
    for c in [4096, 2048, 1024, 512, 256, 128, 64] {
        let t = summarize(&simulate_chunked_prefill(&g, 4096, c, exec)?).totals;
        let rd = t.mem_rd.as_f64() / plain.mem_rd.as_f64();
        monotone &= rd >= last_rd;
        last_rd = rd;
        if c == 64 {
            rows.push(CheckRow::absolute(
                6,
                "chunk 64 dispatch ratio".into(),
                64.0,
                t.dispatches as f64 / plain.dispatches as f64,
                0.0,
            ));
            let ops = t.opcount as f64 / plain.opcount as f64;
            rows.push(CheckRow::holds(6, format!("chunk 64 opcount ratio {ops:.3} <= 1.35"), ops <= 1.35));
            rows.push(CheckRow::holds(6, format!("chunk 64 mem_rd ratio {rd:.3} > 1"), rd > 1.0));
        }
    }
    rows.push(CheckRow::holds(6, "mem_rd ratio rises as chunks shrink".into(), monotone));
    Ok(())
}

fn timeline_rows(rows: &mut Vec<CheckRow>, exec: Execution) -> Result<()> {
    for (p, v, want) in TIMELINE {
        let g = graph(v)?;
        let tokens: Vec<u64> = (0..2000).collect();
        let steps: Vec<StatsDelta> = exec
            .map(&tokens, |t| g.decode_step(p + t))
            .into_iter()
            .collect::<Result<_>>()?;
        let first = steps[0].reads().as_f64();
        let last = steps[steps.len() - 1].reads().as_f64();
        rows.push(CheckRow::relative(7, format!("timeline {v} {p} last/first"), want, last / first, 0.10));
        let monotone = steps.windows(2).all(|w| w[0].mem_rd <= w[1].mem_rd);
        rows.push(CheckRow::holds(7, format!("timeline {v} {p} mem_rd non-decreasing"), monotone));
    }
    Ok(())
}

/// Decode memory per token at prompt 8192 for a mechanism and KV scheme.
pub fn attention_mem(kv_heads: Option<u64>, mla: bool, mode: Mode, kv: KvQuant) -> Result<f64> {
    let mut cfg = if mla {
        Variant::Bf16Int4Mla.config()
    } else {
        Variant::Bf16Int4.config()
    };
    if let Some(h) = kv_heads {
        cfg.num_kv_heads = h;
    }
    cfg.mode = mode;
    cfg.kv_qscheme = kv;
    decode_gb(&build_model(&cfg)?, 8192)
}

fn attention_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    let mechs: [(&str, Option<u64>, bool); 4] = [
        ("MHA", Some(32), false),
        ("GQA", Some(8), false),
        ("MQA", Some(1), false),
        ("MLA", None, true),
    ];
    let mut fused = [0.0; 4];
    for (i, (name, heads, mla)) in mechs.into_iter().enumerate() {
        let eager = attention_mem(heads, mla, Mode::Eager, KvQuant::None)?;
        fused[i] = attention_mem(heads, mla, Mode::Fused, KvQuant::None)?;
        let kv8 = attention_mem(heads, mla, Mode::Fused, KvQuant::Int8)?;
        let kv4 = attention_mem(heads, mla, Mode::Fused, KvQuant::Int4)?;
        rows.push(CheckRow::holds(8, format!("{name} fused < eager"), fused[i] < eager));
        rows.push(CheckRow::holds(8, format!("{name} kv4 < kv8 < none"), kv4 < kv8 && kv8 < fused[i]));
    }
    for mode in [Mode::Eager, Mode::Fused] {
        let m = |h| attention_mem(Some(h), false, mode, KvQuant::None);
        let (mha, gqa, mqa) = (m(32)?, m(8)?, m(1)?);
        let mla = attention_mem(None, true, mode, KvQuant::None)?;
        rows.push(CheckRow::holds(8, format!("{mode} MQA <= GQA <= MHA"), mqa <= gqa && gqa <= mha));
        rows.push(CheckRow::holds(8, format!("{mode} MLA < MHA"), mla < mha));
    }
    Ok(())
}

/// Multiply-accumulate count of a naive GEMM loop nest, as ops
/// (one multiply per MAC plus the adds between products).
fn loop_nest_ops(b: u64, m: u64, k: u64, n: u64) -> u64 {
    let mut ops = 0;
    for _ in 0..b {
        for _ in 0..m {
            for _ in 0..n {
                for kk in 0..k {
                    ops += if kk == 0 { 1 } else { 2 };
                }
            }
        }
    }
    ops
}

fn oracle_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    let mut mismatches = 0u32;
    for m in 1..=8 {
        for k in 1..=8 {
            for n in 1..=8 {
                let dt = DataType::Bf16;
                if linear(&LinearShape::dense(m, k, n, dt))?.opcount != loop_nest_ops(1, m, k, n) {
                    mismatches += 1;
                }
                if bmm(2, m, k, n, dt)?.opcount != loop_nest_ops(2, m, k, n) {
                    mismatches += 1;
                }
            }
        }
    }
    rows.push(CheckRow::absolute(9, "linear/bmm vs loop nest mismatches".into(), 0.0, f64::from(mismatches), 0.0));
    Ok(())
}

fn law_rows(rows: &mut Vec<CheckRow>) -> Result<()> {
    let mut rng = StdRng::seed_from_u64(7);
    let mut violations = 0u32;
    for _ in 0..2000 {
        let w = StatsDelta {
            opcount: rng.random_range(0..1u64 << 50),
            mem_rd: crate::Bytes::from_bytes(rng.random_range(1..1u64 << 40)),
            dispatches: rng.random_range(0..2000),
            ..StatsDelta::ZERO
        };
        let hw = HardwareSpec::new(rng.random_range(0.1..500.0), rng.random_range(1.0..3000.0))
            .with_dispatch_latency(rng.random_range(0.0..1e-4));
        let ec = rng.random_range(0.01..=1.0);
        let em = rng.random_range(0.01..=1.0);
        let r = forecast_tpot_tps(&w, &hw, &EfficiencyProfile::uniform(ec, em))?;
        let better = forecast_tpot_tps(&w, &hw, &EfficiencyProfile::uniform((ec * 1.5).min(1.0), (em * 1.5).min(1.0)))?;
        let tps = r.tps.unwrap_or(0.0) * r.tpot.unwrap_or(0.0);
        if r.ttft != r.t_c.max(r.t_m) || (tps - 1.0).abs() > 4.0 * f64::EPSILON || better.ttft > r.ttft || better.tpot > r.tpot {
            violations += 1;
        }
    }
    rows.push(CheckRow::absolute(10, "forecast law violations".into(), 0.0, f64::from(violations), 0.0));
    Ok(())
}

/// Runs every check. Failing checks are reported, not returned as errors.
pub fn run_all(exec: Execution) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    prefill_rows(&mut rows)?;
    decode_rows(&mut rows)?;
    ttft_rows(&mut rows)?;
    tps_rows(&mut rows)?;
    lora_rows(&mut rows)?;
    chunk_rows(&mut rows, exec)?;
    timeline_rows(&mut rows, exec)?;
    attention_rows(&mut rows)?;
    oracle_rows(&mut rows)?;
    law_rows(&mut rows)?;
    Ok(rows)
}
