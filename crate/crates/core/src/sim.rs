//! Model-level simulation: lays out a decoder as an operator graph and
//! accumulates per-operator statistics over prefill, decode and chunked
//! prefill passes.

use std::collections::BTreeMap;

use crate::config::{ModelConfig, ScenarioConfig, ScenarioPhase};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ops::attention::{attention_parts, AttentionSpec};
use crate::ops::derived::{
    hadamard, lora_merge, mlp_parts, rmsnorm_group, rmsnorm_parts, rope, single_kernel, total,
    MlpShape, OpConstants, Part,
};
use crate::ops::foundational::{
    elementwise, embedding_tokens, linear, tiled_dispatches, LinearShape, LoraAdapter,
};
use crate::stats::{Bytes, Mode, OpClass, Phase, RecordFilter, RunSummary, StatsDb, StatsDelta};

/// Node in a decoder layer or in the model prologue/epilogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Embedding,
    Norm { name: &'static str, width: u64 },
    Linear { name: &'static str, k: u64, n: u64 },
    Rope { name: &'static str, heads: u64 },
    Attention,
    Hadamard { name: &'static str, width: u64 },
    Residual { name: &'static str },
    Mlp,
    LmHead,
}

/// Knobs that do not belong to the model description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    pub consts: OpConstants,
    /// Tile every kernel through this much local memory.
    pub onchip_bytes: Option<u64>,
}

/// A model laid out as prologue, one repeated decoder layer and epilogue.
#[derive(Debug, Clone)]
pub struct LayerGraph {
    pub config: ModelConfig,
    pub attention: AttentionSpec,
    pub prologue: Vec<Node>,
    pub layer: Vec<Node>,
    pub epilogue: Vec<Node>,
    pub options: SimOptions,
}

pub fn build_model(config: &ModelConfig) -> Result<LayerGraph> {
    build_model_with(config, SimOptions::default())
}

pub fn build_model_with(config: &ModelConfig, options: SimOptions) -> Result<LayerGraph> {
    config.validate()?;
    let cfg = config;
    let h = cfg.num_heads;
    let hidden = cfg.hidden_size;
    let mut layer = vec![Node::Norm {
        name: "input_norm",
        width: hidden,
    }];
    let attn_out = match cfg.mla_dims() {
        Some(m) => {
            layer.push(Node::Attention);
            h * m.v_head_dim
        }
        None => {
            let hd = cfg.head_dim();
            let kv = cfg.num_kv_heads * hd;
            layer.extend([
                Node::Linear { name: "q_proj", k: hidden, n: h * hd },
                Node::Linear { name: "k_proj", k: hidden, n: kv },
                Node::Linear { name: "v_proj", k: hidden, n: kv },
                Node::Rope { name: "rope_q", heads: h },
                Node::Rope { name: "rope_k", heads: cfg.num_kv_heads },
                Node::Attention,
            ]);
            h * hd
        }
    };
    if cfg.hadamard {
        layer.push(Node::Hadamard {
            name: "hadamard_o",
            width: attn_out,
        });
    }
    layer.extend([
        Node::Linear {
            name: "o_proj",
            k: attn_out,
            n: hidden,
        },
        Node::Residual {
            name: "attn_residual",
        },
        Node::Norm {
            name: "post_attn_norm",
            width: hidden,
        },
        Node::Mlp,
        Node::Residual {
            name: "mlp_residual",
        },
    ]);
    Ok(LayerGraph {
        config: cfg.clone(),
        attention: AttentionSpec::from_config(cfg),
        prologue: vec![Node::Embedding],
        layer,
        epilogue: vec![
            Node::Norm {
                name: "final_norm",
                width: hidden,
            },
            Node::LmHead,
        ],
        options,
    })
}

impl LayerGraph {
    pub fn layers(&self) -> u64 {
        self.config.num_decoder_layers
    }

    fn lora(&self) -> Option<LoraAdapter> {
        self.config.inline_lora_rank().map(|rank| LoraAdapter {
            rank,
            dtype: self.config.dtype_lora(),
        })
    }

    fn node_parts(&self, node: &Node, new: u64, past: u64) -> Result<Vec<Part>> {
        let cfg = &self.config;
        let dt = cfg.dtype_in;
        let consts = &self.options.consts;
        let one = |name: &str, class, delta| Ok(vec![Part::new(name, class, delta)]);
        match node {
            Node::Embedding => one(
                "embedding",
                OpClass::Embedding,
                embedding_tokens(new, cfg.vocab_size, cfg.hidden_size, dt)?,
            ),
            Node::Norm { name, width } => Ok(vec![single_kernel(
                name,
                OpClass::Norm,
                rmsnorm_parts(new, *width, dt, Mode::Eager, consts)?,
                &rmsnorm_group(new, *width, dt),
            )]),
            Node::Linear { name, k, n } => one(
                name,
                OpClass::Gemm,
                linear(
                    &LinearShape::dense(new, *k, *n, dt)
                        .with_weights(cfg.dtype_wts, cfg.weight_group())
                        .with_bias(cfg.bias)
                        .with_lora(self.lora()),
                )?,
            ),
            Node::Rope { name, heads } => one(
                name,
                OpClass::Rope,
                rope(new, *heads, cfg.head_dim(), cfg.rope_table_size, dt, consts)?,
            ),
            Node::Attention => attention_parts(&self.attention, new, past, cfg.mode, consts),
            Node::Hadamard { name, width } => one(name, OpClass::Elementwise, hadamard(new, *width, dt)?),
            Node::Residual { name } => one(
                name,
                OpClass::Elementwise,
                elementwise(new, cfg.hidden_size, dt, 2)?,
            ),
            Node::Mlp => {
                let mut parts = mlp_parts(
                    &MlpShape {
                        seq: new,
                        hidden: cfg.hidden_size,
                        inter: cfg.intermediate_size,
                        dtype_in: dt,
                        dtype_wts: cfg.dtype_wts,
                        group: cfg.weight_group(),
                        bias: cfg.bias,
                        lora: self.lora(),
                        actfn: cfg.actfn_algo,
                        table_size: cfg.actfn_table_size,
                        poly_degree: cfg.poly_degree,
                    },
                    cfg.mode,
                )?;
                if cfg.hadamard {
                    let at = parts.len() - 1;
                    parts.insert(
                        at,
                        Part::new(
                            "hadamard_down",
                            OpClass::Elementwise,
                            hadamard(new, cfg.intermediate_size, dt)?,
                        ),
                    );
                }
                Ok(parts)
            }
            Node::LmHead => one(
                "lm_head",
                OpClass::Gemm,
                linear(
                    &LinearShape::dense(new, cfg.hidden_size, cfg.vocab_size, dt)
                        .with_weights(cfg.dtype_wts, cfg.weight_group())
                        .with_bias(cfg.bias),
                )?,
            ),
        }
    }

    fn nodes_parts(&self, nodes: &[Node], new: u64, past: u64) -> Result<Vec<Part>> {
        let mut out = Vec::new();
        for node in nodes {
            let mut parts = self.node_parts(node, new, past)?;
            if let Some(cap) = self.options.onchip_bytes {
                for p in parts.iter_mut().filter(|p| p.delta.dispatches > 0) {
                    p.delta.dispatches = tiled_dispatches(p.extent, Some(cap));
                }
            }
            out.extend(parts);
        }
        Ok(out)
    }

    /// All operator parts of one forward pass over `new` tokens with `past`
    /// tokens already cached. Decoder-layer parts are scaled by the layer
    /// count.
    pub fn pass(&self, new: u64, past: u64) -> Result<Vec<Part>> {
        if new == 0 {
            return Err(Error::Scenario("a forward pass needs at least one token".into()));
        }
        let mut parts = self.nodes_parts(&self.prologue, new, past)?;
        let layers = self.layers();
        parts.extend(
            self.nodes_parts(&self.layer, new, past)?
                .into_iter()
                .map(|mut p| {
                    p.delta = p.delta.scaled(layers);
                    p
                }),
        );
        parts.extend(self.nodes_parts(&self.epilogue, new, past)?);
        Ok(parts)
    }

    pub fn pass_total(&self, new: u64, past: u64) -> Result<StatsDelta> {
        self.pass(new, past).map(|p| total(&p))
    }

    /// Cost of generating one token with `past` tokens in the cache.
    pub fn decode_step(&self, past: u64) -> Result<StatsDelta> {
        self.pass_total(1, past)
    }

    /// KV-cache bytes added per token across all layers.
    pub fn kv_bytes_per_token(&self) -> Bytes {
        self.attention.kv_bytes_per_token() * self.layers()
    }

    /// Weight matrices adapted by LoRA, as `(name, k, n)`.
    pub fn projections(&self) -> Vec<(&'static str, u64, u64)> {
        let cfg = &self.config;
        let mut out = Vec::new();
        if let Some(m) = cfg.mla_dims() {
            let h = cfg.num_heads;
            out.extend([
                ("q_a_proj", cfg.hidden_size, m.q_lora_rank),
                ("q_b_proj", m.q_lora_rank, h * (m.qk_nope_head_dim + m.qk_rope_head_dim)),
                ("kv_a_proj", cfg.hidden_size, m.kv_lora_rank + m.qk_rope_head_dim),
                ("kv_b_proj", m.kv_lora_rank, h * (m.qk_nope_head_dim + m.v_head_dim)),
            ]);
        }
        for node in &self.layer {
            if let Node::Linear { name, k, n } = node {
                out.push((name, *k, *n));
            }
        }
        out.extend([
            ("gate_proj", cfg.hidden_size, cfg.intermediate_size),
            ("up_proj", cfg.hidden_size, cfg.intermediate_size),
            ("down_proj", cfg.intermediate_size, cfg.hidden_size),
        ]);
        out
    }

    /// One-time cost of merging rank-`rank` adapters into every projection
    /// of every layer.
    pub fn lora_merge_total(&self, rank: u64) -> Result<StatsDelta> {
        let cfg = &self.config;
        let per_layer: StatsDelta = self
            .projections()
            .into_iter()
            .map(|(_, k, n)| lora_merge(k, n, rank, cfg.dtype_wts, cfg.dtype_lora()))
            .sum::<Result<StatsDelta>>()?;
        Ok(per_layer.scaled(self.layers()))
    }
}

fn record(db: &mut StatsDb, mode: Mode, phase: Phase, parts: Vec<Part>) {
    for p in parts {
        db.update(&p.name, p.class, phase, mode, p.delta);
    }
}

pub fn simulate_prefill(graph: &LayerGraph, prompt_len: u64) -> Result<StatsDb> {
    ScenarioConfig::prefill(prompt_len).validate()?;
    let mut db = StatsDb::new();
    record(&mut db, graph.config.mode, Phase::Prefill, graph.pass(prompt_len, 0)?);
    Ok(db)
}

/// Prefill in chunks of `chunk_size`; chunk `i` attends to the `i * chunk`
/// tokens cached before it.
pub fn simulate_chunked_prefill(
    graph: &LayerGraph,
    prompt_len: u64,
    chunk_size: u64,
    exec: Execution,
) -> Result<StatsDb> {
    ScenarioConfig::chunked_prefill(prompt_len, chunk_size).validate()?;
    let starts: Vec<u64> = (0..prompt_len).step_by(chunk_size as usize).collect();
    let passes = exec.map(&starts, |&past| {
        graph.pass(chunk_size.min(prompt_len - past), past)
    });
    let mut db = StatsDb::new();
    for (i, parts) in passes.into_iter().enumerate() {
        record(&mut db, graph.config.mode, Phase::Chunk(i as u32), parts?);
    }
    Ok(db)
}

/// Generates `gen_len` tokens after a `prompt_len` prompt, one record set
/// per token. Token `t` (1-based) sees `prompt_len + t - 1` cached tokens.
pub fn simulate_decode(
    graph: &LayerGraph,
    prompt_len: u64,
    gen_len: u64,
    exec: Execution,
) -> Result<StatsDb> {
    ScenarioConfig::decode(prompt_len, gen_len).validate()?;
    let mut db = StatsDb::new();
    decode_into(&mut db, graph, prompt_len, gen_len, exec)?;
    Ok(db)
}

fn decode_into(
    db: &mut StatsDb,
    graph: &LayerGraph,
    prompt_len: u64,
    gen_len: u64,
    exec: Execution,
) -> Result<()> {
    let tokens: Vec<u64> = (1..=gen_len).collect();
    let passes = exec.map(&tokens, |&t| graph.pass(1, prompt_len + t - 1));
    for (t, parts) in tokens.into_iter().zip(passes) {
        record(db, graph.config.mode, Phase::Token(t as u32), parts?);
    }
    Ok(())
}

/// Prefill followed by per-token decode.
pub fn simulate_timeline(
    graph: &LayerGraph,
    prompt_len: u64,
    gen_len: u64,
    exec: Execution,
) -> Result<StatsDb> {
    ScenarioConfig::timeline(prompt_len, gen_len).validate()?;
    let mut db = simulate_prefill(graph, prompt_len)?;
    decode_into(&mut db, graph, prompt_len, gen_len, exec)?;
    Ok(db)
}

pub fn run_scenario(graph: &LayerGraph, scenario: &ScenarioConfig, exec: Execution) -> Result<StatsDb> {
    scenario.validate()?;
    let ScenarioConfig {
        prompt_len,
        gen_len,
        ..
    } = *scenario;
    match scenario.phase {
        ScenarioPhase::Prefill => simulate_prefill(graph, prompt_len),
        ScenarioPhase::Decode => simulate_decode(graph, prompt_len, gen_len, exec),
        ScenarioPhase::ChunkedPrefill => simulate_chunked_prefill(
            graph,
            prompt_len,
            scenario.chunk_size.unwrap_or(prompt_len),
            exec,
        ),
        ScenarioPhase::Timeline => simulate_timeline(graph, prompt_len, gen_len, exec),
    }
}

pub fn summarize(db: &StatsDb) -> RunSummary {
    db.summarize(RecordFilter::default())
}

/// Percentage of opcount per operator class.
pub fn operator_distribution(summary: &RunSummary) -> BTreeMap<OpClass, f64> {
    summary
        .by_class
        .keys()
        .map(|c| (*c, summary.opcount_share(*c)))
        .collect()
}
