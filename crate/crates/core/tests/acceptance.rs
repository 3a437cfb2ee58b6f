//! Acceptance gate. Runs every criterion, prints one line per check and one
//! summary line per criterion, and exits non-zero if a check fails that is
//! not listed in `UNATTAINABLE`.

#![allow(clippy::type_complexity)]

use std::collections::BTreeMap;
use std::process::ExitCode;

use llmcast_core::forecast::{forecast_tpot_tps, forecast_ttft, time_compute, time_memory};
use llmcast_core::ops::attention::{attention, AttentionSpec};
use llmcast_core::ops::derived::{mlp, rmsnorm, softmax, MlpShape, OpConstants};
use llmcast_core::ops::foundational::{bmm, linear, LinearShape};
use llmcast_core::sim::{simulate_chunked_prefill, simulate_prefill, summarize};
use llmcast_core::{
    build_model, ActFnAlgo, Bytes, DataType, EfficiencyProfile, Execution, HardwareSpec, KvQuant, Mode, OpClass,
    StatsDelta, Variant,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const GIB: f64 = 1073741824.0;

/// Checks the reference values cannot be met by any consistent reading of
/// the model. They are still evaluated and reported as FAIL.
const UNATTAINABLE: &[&str] = &[
    // 50 % efficiency must double the 100 % column (2 x 43.17 = 86.34)
    "TTFT 1024 ec=0.5",
    // the decode table's own bf16-int4 memory at 1536 (~5.2 GB between the
    // 1024 and 2048 rows) gives ~24.6 TPS at 256 GB/s and 50 %, not 27.2
    "TPS igpu 1536",
];

struct Check {
    criterion: u8,
    name: String,
    detail: String,
    pass: bool,
}

#[derive(Default)]
struct Report {
    checks: Vec<Check>,
}

impl Report {
    fn rel(&mut self, criterion: u8, name: String, expected: f64, actual: f64, tol: f64) {
        let err = (actual - expected).abs() / expected.abs();
        self.checks.push(Check {
            criterion,
            name,
            detail: format!("expected {expected}, got {actual:.4}, rel err {:.2} % (tol {} %)", err * 100.0, tol * 100.0),
            pass: err <= tol,
        });
    }

    fn abs(&mut self, criterion: u8, name: String, expected: f64, actual: f64, tol: f64) {
        let err = (actual - expected).abs();
        self.checks.push(Check {
            criterion,
            name,
            detail: format!("expected {expected}, got {actual:.4}, abs err {err:.4} (tol {tol})"),
            pass: err <= tol,
        });
    }

    fn holds(&mut self, criterion: u8, name: String, detail: String, pass: bool) {
        self.checks.push(Check {
            criterion,
            name,
            detail,
            pass,
        });
    }
}

fn gb(b: Bytes) -> f64 {
    b.as_f64() / GIB
}

fn criterion_1(r: &mut Report) {
    // prompt, TOPs, GEMM %, BMM %, softmax %, KV GB
    let table = [
        (256u64, 3.42, 99.0, 1.0, 0.0, 0.1),
        (1024, 14.09, 96.0, 3.9, 0.0, 0.5),
        (2048, 29.29, 92.4, 7.5, 0.1, 1.0),
        (4096, 63.04, 85.9, 14.0, 0.2, 2.0),
        (8192, 143.87, 75.2, 24.5, 0.3, 4.0),
        (16384, 358.94, 60.3, 39.1, 0.5, 8.0),
        (32768, 1002.67, 43.2, 56.0, 0.7, 16.0),
        (65536, 3144.41, 27.5, 71.6, 0.8, 32.0),
    ];
    let g = build_model(&Variant::Bf16Bf16.config()).unwrap();
    for (p, tops, gemm, bmm_pct, sm, kv) in table {
        let s = summarize(&simulate_prefill(&g, p).unwrap());
        r.rel(1, format!("prefill {p} TOPs"), tops, s.totals.opcount as f64 / 1e12, 0.02);
        // the table prints one decimal, so 0.1 stands for anything in [0.05, 0.15)
        r.abs(1, format!("prefill {p} KV GB"), kv, gb(s.totals.kv_wr), (0.02 * kv).max(0.05));
        for (label, class, want) in [("GEMM", OpClass::Gemm, gemm), ("BMM", OpClass::Bmm, bmm_pct), ("softmax", OpClass::Softmax, sm)] {
            let share = 100.0 * s.class(class).opcount as f64 / s.totals.opcount as f64;
            r.abs(1, format!("prefill {p} {label} share"), want, share, 1.5);
        }
    }
}

fn criterion_2(r: &mut Report) {
    // prompt, GOPs and GB for bf16-bf16, bf16-int4, bf16-int4-kv4
    let table = [
        (32u64, [13.34, 26.55, 26.61], [12.85, 3.74, 3.55]),
        (64, [13.36, 26.57, 26.64], [12.88, 3.77, 3.57]),
        (128, [13.39, 25.60, 26.69], [12.94, 3.83, 3.59]),
        (256, [13.46, 26.67, 26.79], [13.07, 3.96, 3.59]),
        (512, [13.59, 26.81, 26.99], [13.32, 4.21, 3.64]),
        (1024, [13.86, 27.08, 27.40], [13.82, 4.71, 3.73]),
        (2048, [14.41, 27.62, 28.21], [14.83, 5.72, 3.92]),
    ];
    for (i, v) in [Variant::Bf16Bf16, Variant::Bf16Int4, Variant::Bf16Int4Kv4].into_iter().enumerate() {
        let g = build_model(&v.config()).unwrap();
        for (p, gops, mem) in table {
            let d = g.decode_step(p).unwrap();
            r.rel(2, format!("decode {v} {p} GOPs"), gops[i], d.opcount as f64 / 1e9, 0.05);
            r.rel(2, format!("decode {v} {p} GB"), mem[i], gb(d.mem_rd + d.kv_rd), 0.05);
        }
    }
}

fn criterion_3(r: &mut Report) {
    let table = [
        (32u64, 1.30, 2.60),
        (64, 2.61, 5.21),
        (128, 5.21, 10.42),
        (256, 10.48, 20.96),
        (512, 21.17, 42.34),
        (1024, 43.17, 84.34),
        (2048, 89.74, 179.47),
    ];
    let g = build_model(&Variant::Bf16Bf16.config()).unwrap();
    let hw = HardwareSpec::new(0.3264, 240.0);
    for (p, full, half) in table {
        let s = summarize(&simulate_prefill(&g, p).unwrap());
        for (ec, want) in [(1.0, full), (0.5, half)] {
            let f = forecast_ttft(&s, &hw, &EfficiencyProfile::uniform(ec, 1.0)).unwrap();
            r.rel(3, format!("TTFT {p} ec={ec}"), want, f.ttft, 0.01);
        }
    }
}

fn criterion_4(r: &mut Report) {
    let cases: [(&str, Variant, f64, f64, &[(u64, f64)], f64); 2] = [
        (
            "cpu",
            Variant::Bf16Bf16,
            240.0,
            0.10,
            &[(32, 1.87), (64, 1.86), (128, 1.85), (256, 1.84), (512, 1.80), (1024, 1.74), (2048, 1.62)],
            0.03,
        ),
        ("igpu", Variant::Bf16Int4, 256.0, 0.50, &[(128, 33.4), (1536, 27.2)], 0.05),
    ];
    for (label, v, bw, em, table, tol) in cases {
        let g = build_model(&v.config()).unwrap();
        let hw = HardwareSpec::new(1.0, bw);
        for &(p, want) in table {
            let step = g.decode_step(p).unwrap();
            // independent of the forecaster: bytes over achieved bandwidth
            let by_hand = bw * GIB * em / (step.mem_rd + step.kv_rd).as_f64();
            let f = forecast_tpot_tps(&step, &hw, &EfficiencyProfile::uniform(1.0, em)).unwrap();
            let tps = f.tps.unwrap();
            assert!((tps - by_hand).abs() / by_hand < 1e-12);
            r.rel(4, format!("TPS {label} {p}"), want, tps, tol);
        }
    }
}

fn criterion_5(r: &mut Report) {
    let totals = [(16u64, 220.2), (32, 427.4), (64, 841.9), (128, 1670.8)];
    let cells = [(4096u64, 4096u64, [0.6, 1.1, 2.2, 4.3]), (4096, 11008, [1.5, 3.0, 5.9, 11.6])];
    let g = build_model(&Variant::Bf16Bf16.config()).unwrap();
    for (i, (rank, want)) in totals.into_iter().enumerate() {
        let got = g.lora_merge_total(rank).unwrap().opcount as f64 / 1e9;
        r.rel(5, format!("LoRA total r={rank}"), want, got, 0.01);
        // per layer: B x A product then the add into W
        let per_layer = |k: u64, n: u64| (2 * k * rank * n + 2 * k * n) as f64 / 1e9;
        let by_hand = 32.0 * (4.0 * per_layer(4096, 4096) + 3.0 * per_layer(4096, 11008));
        assert!((got - by_hand).abs() < 1e-9, "{got} vs {by_hand}");
        for (k, n, want) in cells {
            let one = llmcast_core::ops::derived::lora_merge(k, n, rank, DataType::Bf16, DataType::Bf16).unwrap();
            r.abs(5, format!("LoRA {k}x{n} r={rank}"), want[i], one.opcount as f64 / 1e9, 0.05);
        }
    }
}

fn criterion_6(r: &mut Report) {
    let g = build_model(&Variant::Bf16Int4Fused.config()).unwrap();
    let base = summarize(&simulate_prefill(&g, 4096).unwrap()).totals;
    let mut ratios = Vec::new();
    for c in [4096u64, 2048, 1024, 512, 256, 128, 64] {
        let t = summarize(&simulate_chunked_prefill(&g, 4096, c, Execution::Parallel).unwrap()).totals;
        ratios.push((c, t.mem_rd.as_f64() / base.mem_rd.as_f64()));
        if c == 64 {
            r.abs(6, "chunk 64 dispatch ratio".into(), 64.0, t.dispatches as f64 / base.dispatches as f64, 0.0);
            let ops = t.opcount as f64 / base.opcount as f64;
            r.holds(6, "chunk 64 opcount ratio <= 1.35".into(), format!("{ops:.4}"), ops <= 1.35);
            let rd = t.mem_rd.as_f64() / base.mem_rd.as_f64();
            r.holds(6, "chunk 64 mem_rd ratio > 1".into(), format!("{rd:.4}"), rd > 1.0);
        }
    }
    let monotone = ratios.windows(2).all(|w| w[1].1 >= w[0].1);
    r.holds(6, "mem_rd ratio rises as chunk shrinks".into(), format!("{ratios:.3?}"), monotone);
}

fn criterion_7(r: &mut Report) {
    let table = [
        (128u64, Variant::Bf16Bf16, 1.15),
        (128, Variant::Bf16Int4, 1.53),
        (128, Variant::Bf16Int4Kv4, 1.10),
        (4096, Variant::Bf16Bf16, 1.18),
        (4096, Variant::Bf16Int4, 1.26),
        (4096, Variant::Bf16Int4Kv4, 1.08),
    ];
    for (p, v, want) in table {
        let g = build_model(&v.config()).unwrap();
        let mem: Vec<f64> = (0..2000).map(|t| g.decode_step(p + t).unwrap()).map(|d| (d.mem_rd + d.kv_rd).as_f64()).collect();
        r.rel(7, format!("timeline {v} {p} last/first"), want, mem[1999] / mem[0], 0.10);
        let rd: Vec<u64> = (0..2000).map(|t| g.decode_step(p + t).unwrap().mem_rd.ceil_bytes()).collect();
        r.holds(7, format!("timeline {v} {p} mem_rd non-decreasing"), String::new(), rd.windows(2).all(|w| w[0] <= w[1]));
    }
}

fn criterion_8(r: &mut Report) {
    let mem = |heads: Option<u64>, mode: Mode, kv: KvQuant| {
        let mut cfg = match heads {
            Some(h) => {
                let mut c = Variant::Bf16Int4.config();
                c.num_kv_heads = h;
                c
            }
            None => Variant::Bf16Int4Mla.config(),
        };
        cfg.mode = mode;
        cfg.kv_qscheme = kv;
        let d = build_model(&cfg).unwrap().decode_step(8192).unwrap();
        gb(d.mem_rd + d.kv_rd)
    };
    let mechs = [("MHA", Some(32)), ("GQA", Some(8)), ("MQA", Some(1)), ("MLA", None)];
    for (name, heads) in mechs {
        let eager = mem(heads, Mode::Eager, KvQuant::None);
        let fused = mem(heads, Mode::Fused, KvQuant::None);
        let kv8 = mem(heads, Mode::Fused, KvQuant::Int8);
        let kv4 = mem(heads, Mode::Fused, KvQuant::Int4);
        r.holds(8, format!("{name} fused < eager"), format!("{fused:.3} vs {eager:.3}"), fused < eager);
        r.holds(8, format!("{name} kv4 < kv8 < none"), format!("{kv4:.3} < {kv8:.3} < {fused:.3}"), kv4 < kv8 && kv8 < fused);
    }
    for mode in [Mode::Eager, Mode::Fused] {
        let [mha, gqa, mqa, mla] = mechs.map(|(_, h)| mem(h, mode, KvQuant::None));
        r.holds(8, format!("{mode} MQA < GQA < MHA"), format!("{mqa:.3} < {gqa:.3} < {mha:.3}"), mqa < gqa && gqa < mha);
        r.holds(8, format!("{mode} MLA < MHA"), format!("{mla:.3} < {mha:.3}"), mla < mha);
    }
}

/// Ops of a naive loop nest: the first product of each output is a bare
/// multiply, every later one a multiply plus an add.
fn loop_nest(b: u64, m: u64, k: u64, n: u64) -> u64 {
    let mut ops = 0;
    for _ in 0..b * m * n {
        for kk in 0..k {
            ops += if kk == 0 { 1 } else { 2 };
        }
    }
    ops
}

fn criterion_9(r: &mut Report) {
    let mut bad = 0;
    for m in 1..=8 {
        for k in 1..=8 {
            for n in 1..=8 {
                for b in 1..=3 {
                    bad += u32::from(bmm(b, m, k, n, DataType::Bf16).unwrap().opcount != loop_nest(b, m, k, n));
                }
                bad += u32::from(linear(&LinearShape::dense(m, k, n, DataType::Bf16)).unwrap().opcount != loop_nest(1, m, k, n));
            }
        }
    }
    r.abs(9, "linear/bmm vs loop nest mismatches".into(), 0.0, f64::from(bad), 0.0);

    let mut rng = StdRng::seed_from_u64(9);
    let consts = OpConstants::default();
    let dtypes = [DataType::Bf16, DataType::Fp16, DataType::Fp32, DataType::Int8];
    let mut bad = 0u32;
    let mut less_traffic = true;
    for _ in 0..1000 {
        let seq = rng.random_range(1..=64);
        let dt = dtypes[rng.random_range(0..dtypes.len())];
        let pair = |f: &dyn Fn(Mode) -> StatsDelta| (f(Mode::Eager), f(Mode::Fused));
        let hidden = 32 * rng.random_range(1..=8);
        let cols = rng.random_range(1..=256);
        let inter = 32 * rng.random_range(1..=16);
        let mlp_shape = MlpShape {
            seq,
            hidden,
            inter,
            dtype_in: dt,
            dtype_wts: if rng.random_bool(0.5) { DataType::Int4 } else { dt },
            group: Some(32),
            bias: rng.random_bool(0.5),
            lora: None,
            actfn: ActFnAlgo::Pwl,
            table_size: 64,
            poly_degree: None,
        };
        let mut spec = AttentionSpec::from_config(&if rng.random_bool(0.3) {
            Variant::Bf16Int4Mla.config()
        } else {
            Variant::Bf16Bf16.config()
        });
        if spec.mla.is_none() {
            let heads = [1, 2, 4, 8][rng.random_range(0..4)];
            spec.num_heads = heads;
            spec.num_kv_heads = [1, heads][rng.random_range(0..2)];
            spec.head_dim = 2 * rng.random_range(1..=32);
            spec.hidden = heads * spec.head_dim;
        }
        let past = rng.random_range(0..512);
        let results = [
            pair(&|m| rmsnorm(seq, hidden, dt, m, &consts).unwrap()),
            pair(&|m| softmax(seq, cols, ActFnAlgo::Pwl, 64, None, dt, m, &consts).unwrap()),
            pair(&|m| mlp(&mlp_shape, m).unwrap()),
            pair(&|m| attention(&spec, seq, past, m, &consts).unwrap()),
        ];
        for (eager, fused) in results {
            bad += u32::from(eager.opcount != fused.opcount);
            less_traffic &= fused.traffic() <= eager.traffic() && fused.dispatches <= eager.dispatches;
        }
    }
    r.abs(9, "fused vs eager opcount mismatches over 1000 shapes".into(), 0.0, f64::from(bad), 0.0);
    r.holds(9, "fused never moves more bytes or launches more kernels".into(), String::new(), less_traffic);
}

fn criterion_10(r: &mut Report) {
    let mut rng = StdRng::seed_from_u64(10);
    let mut violations = 0u32;
    for _ in 0..10_000 {
        let mut w: BTreeMap<OpClass, StatsDelta> = BTreeMap::new();
        for &c in OpClass::ALL {
            if rng.random_bool(0.6) {
                w.insert(
                    c,
                    StatsDelta {
                        opcount: rng.random_range(0..1u64 << 48),
                        mem_rd: Bytes::from_bytes(rng.random_range(1..1u64 << 38)),
                        mem_wr: Bytes::from_bytes(rng.random_range(0..1u64 << 36)),
                        kv_rd: Bytes::from_bytes(rng.random_range(0..1u64 << 34)),
                        kv_wr: Bytes::ZERO,
                        dispatches: rng.random_range(0..500),
                    },
                );
            }
        }
        w.entry(OpClass::Gemm).or_insert(StatsDelta::kernel(1, Bytes::from_bytes(1), Bytes::ZERO));
        let hw = HardwareSpec::new(rng.random_range(0.05..1000.0), rng.random_range(1.0..5000.0))
            .with_dispatch_latency(if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1e-4) });
        let mut eff = EfficiencyProfile::uniform(rng.random_range(0.01..=1.0), rng.random_range(0.01..=1.0));
        for &c in OpClass::ALL {
            if rng.random_bool(0.3) {
                eff.ec.insert(c, rng.random_range(0.01..=1.0));
                eff.em.insert(c, rng.random_range(0.01..=1.0));
            }
        }
        let f = forecast_tpot_tps(&w, &hw, &eff).unwrap();
        let (tpot, tps) = (f.tpot.unwrap(), f.tps.unwrap());
        let mut ok = f.ttft == f.t_c.max(f.t_m) && (tps * tpot - 1.0).abs() <= 2.0 * f64::EPSILON;

        // raising any single efficiency never slows anything down
        let c = OpClass::ALL[rng.random_range(0..OpClass::ALL.len())];
        let mut up = eff.clone();
        up.ec.insert(c, (eff.ec(c) * rng.random_range(1.0..2.0)).min(1.0));
        up.em.insert(c, (eff.em(c) * rng.random_range(1.0..2.0)).min(1.0));
        up.em_avg = (eff.em_avg * rng.random_range(1.0..2.0)).min(1.0);
        let g = forecast_tpot_tps(&w, &hw, &up).unwrap();
        ok &= time_compute(&w, &hw, &up).unwrap() <= time_compute(&w, &hw, &eff).unwrap();
        ok &= time_memory(&w, &hw, &up).unwrap() <= time_memory(&w, &hw, &eff).unwrap();
        ok &= g.ttft <= f.ttft && g.tpot.unwrap() <= tpot;
        violations += u32::from(!ok);
    }
    r.abs(10, "forecast law violations over 10000 points".into(), 0.0, f64::from(violations), 0.0);
}

fn main() -> ExitCode {
    let mut report = Report::default();
    let criteria: [(u8, fn(&mut Report)); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut unexpected = Vec::new();
    for (n, run) in criteria {
        let start = report.checks.len();
        run(&mut report);
        let checks = &report.checks[start..];
        for c in checks {
            let tag = if c.pass { "ok  " } else { "FAIL" };
            println!("  {tag} [{}] {}: {}", c.criterion, c.name, c.detail);
            let known = UNATTAINABLE.contains(&c.name.as_str());
            if !c.pass && !known {
                unexpected.push(c.name.clone());
            }
            if c.pass && known {
                println!("       note: listed as unattainable but passed");
            }
        }
        let failed = checks.iter().filter(|c| !c.pass).count();
        if failed == 0 {
            println!("PASS criterion {n} ({} checks)", checks.len());
        } else {
            println!("FAIL criterion {n} ({failed} of {} checks failed)", checks.len());
        }
    }
    if unexpected.is_empty() {
        println!("acceptance: no failures beyond the {} documented unattainable checks", UNATTAINABLE.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
