use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use llmcast_core::config::{parse_model_config, KvQuant, ModelConfig, ScenarioConfig, ScenarioPhase, Variant};
use llmcast_core::forecast::{
    bmm_tiling_efficiency, decode_tps_timeline, efficiency_grid, efficiency_sweep, forecast_lora_update,
    forecast_tpot_tps, forecast_ttft, grid_csv, timeline_csv, Axis, GridPoint,
};
use llmcast_core::hardware::{EfficiencyProfile, HardwareProfile, HardwareSpec};
use llmcast_core::plotdata::{plotdata_csv, Series};
use llmcast_core::sim::{build_model, run_scenario, summarize, LayerGraph};
use llmcast_core::stats::ExportFormat;
use llmcast_core::units::{GB, GIGA};
use llmcast_core::{validation, Error, Execution, Mode};

/// Analytical LLM inference workload simulator and performance forecaster.
#[derive(Parser)]
#[command(name = "llmcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and export its workload summary.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Forecast TTFT, TPOT and TPS for a scenario on one hardware point.
    Forecast {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        hw: HwArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Sweep prefill forecasts over hardware or efficiency grids, or tabulate
    /// BMM tiling efficiency.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2048, value_parser = positive_u64)]
        prompt: u64,
        /// Same `start:stop:step` axis for compute (TOPS) and bandwidth (GB/s).
        #[arg(long)]
        grid: Option<Axis>,
        #[arg(long)]
        tops_axis: Option<Axis>,
        #[arg(long)]
        bw_axis: Option<Axis>,
        /// Sweep efficiencies at fixed --tops/--bw instead of hardware.
        #[arg(long, requires = "em_axis")]
        ec_axis: Option<Axis>,
        #[arg(long, requires = "ec_axis")]
        em_axis: Option<Axis>,
        /// Tabulate decode BMM tiling efficiency for these tile sizes.
        #[arg(long, value_delimiter = ',')]
        tiles: Vec<u64>,
        /// Longest context for --tiles.
        #[arg(long, default_value_t = 4096, value_parser = positive_u64)]
        max_seq: u64,
        #[command(flatten)]
        hw: HwArgs,
        /// Evaluate points on one thread.
        #[arg(long)]
        sequential: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Per-token decode memory and TPS over a long generation.
    Timeline {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 4096, value_parser = positive_u64)]
        prompt: u64,
        #[arg(long, default_value_t = 2000, value_parser = positive_u64)]
        gen: u64,
        #[command(flatten)]
        hw: HwArgs,
        /// Also write (series_label, x, y) rows of memory per token here.
        #[arg(long)]
        plotdata: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Decode memory for MHA, GQA, MQA and MLA across fusion and KV
    /// compression settings.
    CompareAttention {
        #[arg(long, default_value_t = 8192, value_parser = positive_u64)]
        prompt: u64,
        /// Tokens generated; the last token is reported alongside the first.
        #[arg(long, default_value_t = 2000, value_parser = positive_u64)]
        gen: u64,
        /// KV heads used for the grouped-query row.
        #[arg(long, default_value_t = 8, value_parser = positive_u64)]
        gqa_heads: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// LoRA merge cost per projection and for the whole model.
    Lora {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [16u64, 32, 64, 128])]
        ranks: Vec<u64>,
        #[command(flatten)]
        hw: HwArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the built-in regression table and print one line per check.
    Validate {
        /// Exit with status 1 if any check fails.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Model config JSON file.
    #[arg(long, conflicts_with = "variant")]
    config: Option<PathBuf>,
    /// Named preset, e.g. bf16-int4-kv4.
    #[arg(long)]
    variant: Option<String>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelConfig> {
        match (&self.config, &self.variant) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok(parse_model_config(&text)?)
            }
            (None, Some(name)) => Ok(llmcast_core::preset_variant(name)?),
            _ => Err(Error::Constraint("exactly one of --config or --variant is required".into()).into()),
        }
    }

    fn graph(&self) -> Result<LayerGraph> {
        Ok(build_model(&self.load()?)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
    Chunked,
    Timeline,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 2048)]
    prompt: u64,
    /// Tokens to generate.
    #[arg(long, default_value_t = 0)]
    gen: u64,
    /// Prefill chunk size.
    #[arg(long)]
    chunk: Option<u64>,
    /// Phase to run. Defaults to chunked prefill with --chunk, a prefill plus
    /// decode timeline with --gen, and plain prefill otherwise.
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
}

impl ScenarioArgs {
    fn scenario(&self) -> Result<ScenarioConfig> {
        let phase = match (self.phase, self.chunk, self.gen) {
            (Some(PhaseArg::Prefill), ..) => ScenarioPhase::Prefill,
            (Some(PhaseArg::Decode), ..) => ScenarioPhase::Decode,
            (Some(PhaseArg::Chunked), ..) | (None, Some(_), _) => ScenarioPhase::ChunkedPrefill,
            (Some(PhaseArg::Timeline), ..) => ScenarioPhase::Timeline,
            (None, None, 0) => ScenarioPhase::Prefill,
            (None, None, _) => ScenarioPhase::Timeline,
        };
        let s = ScenarioConfig {
            phase,
            prompt_len: self.prompt,
            gen_len: self.gen,
            chunk_size: self.chunk,
        };
        if phase == ScenarioPhase::ChunkedPrefill && s.chunk_size.is_none() {
            return Err(Error::Scenario("chunked prefill needs --chunk".into()).into());
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct HwArgs {
    /// Hardware profile JSON (peak_tops, peak_bw, dispatch_latency, ec, em, em_avg).
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Peak compute in TOPS.
    #[arg(long, value_parser = positive_f64)]
    tops: Option<f64>,
    /// Peak bandwidth in GB/s.
    #[arg(long, value_parser = positive_f64)]
    bw: Option<f64>,
    /// Compute efficiency for every operator class.
    #[arg(long, value_parser = positive_f64)]
    ec: Option<f64>,
    /// Memory efficiency for every operator class and for decode.
    #[arg(long, value_parser = positive_f64)]
    em: Option<f64>,
    /// Seconds per kernel dispatch.
    #[arg(long)]
    dispatch_latency: Option<f64>,
}

impl HwArgs {
    fn profile(&self) -> Result<(HardwareSpec, EfficiencyProfile)> {
        let file = match &self.hw {
            Some(p) => Some(HardwareProfile::load(p).with_context(|| format!("loading {}", p.display()))?),
            None => None,
        };
        let mut eff = file.as_ref().map(|f| f.efficiency.clone()).unwrap_or_default();
        if let Some(ec) = self.ec {
            eff.ec.clear();
            eff.default_ec = ec;
        }
        if let Some(em) = self.em {
            eff.em.clear();
            eff.default_em = em;
            eff.em_avg = em;
        }
        let tops = self.tops.or(file.as_ref().map(|f| f.hardware.peak_tops));
        let bw = self.bw.or(file.as_ref().map(|f| f.hardware.peak_bw));
        let (Some(tops), Some(bw)) = (tops, bw) else {
            return Err(Error::Hardware("peak compute and bandwidth are required (--tops/--bw or --hw)".into()).into());
        };
        let mut hw = HardwareSpec::new(tops, bw);
        hw.onchip_bytes = file.as_ref().and_then(|f| f.hardware.onchip_bytes);
        hw.dispatch_latency = self
            .dispatch_latency
            .or(file.as_ref().map(|f| f.hardware.dispatch_latency))
            .unwrap_or(0.0);
        hw.validate()?;
        eff.validate()?;
        Ok((hw, eff))
    }
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output file; relative paths resolve under $LIFE_OUT_DIR when set.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl OutputArgs {
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => write_file(path, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os("LIFE_OUT_DIR") {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let path = resolve(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn positive_u64(s: &str) -> std::result::Result<u64, String> {
    match s.parse::<u64>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("`{s}` is not a positive integer")),
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn simulate(model: &ModelArgs, scenario: &ScenarioArgs, output: &OutputArgs) -> Result<()> {
    let graph = model.graph()?;
    let db = run_scenario(&graph, &scenario.scenario()?, Execution::Sequential)?;
    let format = match output.format {
        Format::Json => ExportFormat::Json,
        Format::Csv => ExportFormat::Csv,
    };
    output.emit(&summarize(&db).render(format)?)
}

fn forecast(model: &ModelArgs, scenario: &ScenarioArgs, hw: &HwArgs, output: &OutputArgs) -> Result<()> {
    let cfg = model.load()?;
    let graph = build_model(&cfg)?;
    let s = scenario.scenario()?;
    let (hw, eff) = hw.profile()?;
    let prefill = summarize(&run_scenario(&graph, &ScenarioConfig::prefill(s.prompt_len), Execution::Sequential)?);
    let mut r = forecast_ttft(&prefill, &hw, &eff)?;
    let decode = forecast_tpot_tps(&graph.decode_step(s.prompt_len)?, &hw, &eff)?;
    r.tpot = decode.tpot;
    r.tps = decode.tps;
    r.t_lora = Some(forecast_lora_update(&cfg, &hw, &eff)?);
    match output.format {
        Format::Json => output.emit(&json(&r)?),
        Format::Csv => output.emit(&format!(
            "t_c,t_m,tc_over_tm,ttft,tpot,tps,t_lora\n{},{},{},{},{},{},{}\n",
            r.t_c,
            r.t_m,
            r.tc_over_tm,
            r.ttft,
            r.tpot.unwrap_or(f64::NAN),
            r.tps.unwrap_or(f64::NAN),
            r.t_lora.unwrap_or(0.0)
        )),
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    model: &ModelArgs,
    prompt: u64,
    grid: Option<Axis>,
    tops_axis: Option<Axis>,
    bw_axis: Option<Axis>,
    ec_axis: Option<Axis>,
    em_axis: Option<Axis>,
    tiles: &[u64],
    max_seq: u64,
    hw: &HwArgs,
    exec: Execution,
    output: &OutputArgs,
) -> Result<()> {
    if !tiles.is_empty() {
        let cfg = model.load()?;
        let mut series = Vec::new();
        for &tile in tiles {
            let rows = bmm_tiling_efficiency(tile, cfg.head_dim(), cfg.num_heads, 1..=max_seq)?;
            series.push(Series::new(
                format!("tile {tile} efficiency"),
                rows.iter().map(|r| (r.seq as f64, r.efficiency)).collect(),
            ));
            series.push(Series::new(
                format!("tile {tile} running average"),
                rows.iter().map(|r| (r.seq as f64, r.running_avg)).collect(),
            ));
        }
        return output.emit(&plotdata_csv(&series)?);
    }
    let graph = model.graph()?;
    let summary = summarize(&run_scenario(&graph, &ScenarioConfig::prefill(prompt), exec)?);
    let points: Vec<GridPoint> = match (ec_axis, em_axis) {
        (Some(ec), Some(em)) => {
            let (hw, _) = hw.profile()?;
            efficiency_sweep(&summary, &hw, &ec, &em, exec)?
        }
        _ => {
            let default = grid.unwrap_or_else(Axis::default_hw);
            let ec = hw.ec.unwrap_or(1.0);
            let em = hw.em.unwrap_or(1.0);
            EfficiencyProfile::uniform(ec, em).validate()?;
            efficiency_grid(
                &summary,
                &tops_axis.unwrap_or(default),
                &bw_axis.unwrap_or(default),
                ec,
                em,
                hw.dispatch_latency.unwrap_or(0.0),
                exec,
            )?
        }
    };
    match output.format {
        Format::Json => output.emit(&json(&points)?),
        Format::Csv => output.emit(&grid_csv(&points)),
    }
}

fn timeline(
    model: &ModelArgs,
    prompt: u64,
    gen: u64,
    hw: &HwArgs,
    plotdata: Option<&Path>,
    output: &OutputArgs,
) -> Result<()> {
    let graph = model.graph()?;
    let (hw, eff) = hw.profile()?;
    let db = run_scenario(&graph, &ScenarioConfig::decode(prompt, gen), Execution::Sequential)?;
    let t = decode_tps_timeline(&summarize(&db), &hw, &eff)?;
    if let Some(path) = plotdata {
        let label = format!("{} prompt {prompt}", model.variant.as_deref().unwrap_or("model"));
        let series = Series::new(
            label,
            t.points.iter().map(|p| (p.token as f64, p.mem_rd as f64 / GB)).collect(),
        );
        write_file(path, &plotdata_csv(&[series])?)?;
    }
    match output.format {
        Format::Json => output.emit(&json(&t)?),
        Format::Csv => output.emit(&timeline_csv(&t)),
    }
}

fn compare_attention(prompt: u64, gen: u64, gqa_heads: u64, output: &OutputArgs) -> Result<()> {
    let mechanisms = [
        ("MHA", Variant::Bf16Int4, None),
        ("GQA", Variant::Bf16Int4, Some(gqa_heads)),
        ("MQA", Variant::Bf16Int4, Some(1)),
        ("MLA", Variant::Bf16Int4Mla, None),
    ];
    let settings = [
        ("eager", Mode::Eager, KvQuant::None),
        ("fused", Mode::Fused, KvQuant::None),
        ("fused-kv8", Mode::Fused, KvQuant::Int8),
        ("fused-kv4", Mode::Fused, KvQuant::Int4),
    ];
    let mut rows = Vec::new();
    for (setting, mode, kv) in settings {
        for (mech, variant, heads) in mechanisms {
            let mut cfg = variant.config();
            if let Some(h) = heads {
                cfg.num_kv_heads = h;
            }
            cfg.mode = mode;
            cfg.kv_qscheme = kv;
            let g = build_model(&cfg)?;
            let first = g.decode_step(prompt)?.reads().as_f64() / GB;
            let last = g.decode_step(prompt + gen - 1)?.reads().as_f64() / GB;
            rows.push(serde_json::json!({
                "setting": setting,
                "mechanism": mech,
                "first_token_gb": first,
                "last_token_gb": last,
            }));
        }
    }
    match output.format {
        Format::Json => output.emit(&json(&rows)?),
        Format::Csv => {
            let mut out = String::from("setting,mechanism,first_token_gb,last_token_gb\n");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    r["setting"].as_str().unwrap_or_default(),
                    r["mechanism"].as_str().unwrap_or_default(),
                    r["first_token_gb"],
                    r["last_token_gb"]
                );
            }
            output.emit(&out)
        }
    }
}

fn lora(model: &ModelArgs, ranks: &[u64], hw: &HwArgs, output: &OutputArgs) -> Result<()> {
    let cfg = model.load()?;
    let graph = build_model(&cfg)?;
    let timing = if hw.tops.is_some() || hw.hw.is_some() {
        Some(hw.profile()?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &r in ranks {
        if r == 0 {
            bail!(Error::Constraint("LoRA ranks must be positive".into()));
        }
        for (name, k, n) in graph.projections() {
            let d = llmcast_core::ops::derived::lora_merge(k, n, r, cfg.dtype_wts, cfg.dtype_lora())?;
            rows.push((r, name.to_string(), k, n, d.opcount as f64 / GIGA, None));
        }
        let total = graph.lora_merge_total(r)?;
        let secs = timing
            .as_ref()
            .map(|(hw, eff)| llmcast_core::forecast::lora_time(&total, hw, eff));
        rows.push((r, "total".into(), 0, 0, total.opcount as f64 / GIGA, secs));
    }
    match output.format {
        Format::Json => {
            let v: Vec<_> = rows
                .iter()
                .map(|(r, name, k, n, gops, secs)| {
                    serde_json::json!({"rank": r, "layer": name, "k": k, "n": n, "gops": gops, "t_lora": secs})
                })
                .collect();
            output.emit(&json(&v)?)
        }
        Format::Csv => {
            let mut out = String::from("rank,layer,k,n,gops,t_lora\n");
            for (r, name, k, n, gops, secs) in &rows {
                let secs = secs.map(|s| s.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{r},{name},{k},{n},{gops},{secs}");
            }
            output.emit(&out)
        }
    }
}

fn validate(strict: bool) -> Result<bool> {
    let rows = validation::run_all(Execution::Parallel)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    for r in &rows {
        println!("{}", r.line());
    }
    println!("{} checks, {} passed, {} failed", rows.len(), rows.len() - failed, failed);
    Ok(!strict || failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { model, scenario, output } => simulate(&model, &scenario, &output)?,
        Command::Forecast {
            model,
            scenario,
            hw,
            output,
        } => forecast(&model, &scenario, &hw, &output)?,
        Command::Sweep {
            model,
            prompt,
            grid,
            tops_axis,
            bw_axis,
            ec_axis,
            em_axis,
            tiles,
            max_seq,
            hw,
            sequential,
            output,
        } => {
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            };
            sweep(
                &model, prompt, grid, tops_axis, bw_axis, ec_axis, em_axis, &tiles, max_seq, &hw, exec, &output,
            )?
        }
        Command::Timeline {
            model,
            prompt,
            gen,
            hw,
            plotdata,
            output,
        } => timeline(&model, prompt, gen, &hw, plotdata.as_deref(), &output)?,
        Command::CompareAttention {
            prompt,
            gen,
            gqa_heads,
            output,
        } => compare_attention(prompt, gen, gqa_heads, &output)?,
        Command::Lora { model, ranks, hw, output } => lora(&model, &ranks, &hw, &output)?,
        Command::Validate { strict } => return validate(strict),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
