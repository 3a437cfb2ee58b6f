//! Model and scenario configuration.
//!
//! Model configs are JSON objects whose keys are the field names of
//! [`ModelConfig`]. Parsing is strict: unknown keys are rejected by name and
//! every structural invariant is checked before a config is handed out.
//! Trailing commas are accepted because hand-written configs often carry them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::stats::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActFnAlgo {
    Pwl,
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    None,
    Pergrp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvQuant {
    None,
    Int8,
    Int4,
}

impl KvQuant {
    pub const ALL: [KvQuant; 3] = [KvQuant::None, KvQuant::Int8, KvQuant::Int4];

    /// Storage type of cached K/V elements.
    pub fn storage(self, dtype_in: DataType) -> DataType {
        match self {
            KvQuant::None => dtype_in,
            KvQuant::Int8 => DataType::Int8,
            KvQuant::Int4 => DataType::Int4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraMergePolicy {
    Inline,
    AheadOfTime,
    None,
}

/// Analytical description of a dense decoder-only LLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub dtype_in: DataType,
    pub hidden_size: u64,
    pub vocab_size: u64,
    pub intermediate_size: u64,
    pub actfn_algo: ActFnAlgo,
    pub actfn_table_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly_degree: Option<u64>,
    pub dtype_wts: DataType,
    pub gemm_quant_scheme: QuantScheme,
    pub gemm_grpsize: u64,
    pub bias: bool,
    pub rope_table_size: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub num_decoder_layers: u64,
    pub kv_qscheme: KvQuant,
    pub max_position_embeddings: u64,
    pub mla: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_lora_rank: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_lora_rank: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qk_nope_head_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qk_rope_head_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_head_dim: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype_lora: Option<DataType>,
    #[serde(default = "default_merge_policy")]
    pub lora_merge_policy: LoraMergePolicy,
    /// Online Hadamard rotations ahead of o_proj and down_proj (rotation-based
    /// 4-bit schemes).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub hadamard: bool,
}

fn default_merge_policy() -> LoraMergePolicy {
    LoraMergePolicy::None
}

/// Low-rank latent attention dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlaDims {
    pub q_lora_rank: u64,
    pub kv_lora_rank: u64,
    pub qk_nope_head_dim: u64,
    pub qk_rope_head_dim: u64,
    pub v_head_dim: u64,
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "dtype_in",
    "hidden_size",
    "vocab_size",
    "intermediate_size",
    "actfn_algo",
    "actfn_table_size",
    "poly_degree",
    "dtype_wts",
    "gemm_quant_scheme",
    "gemm_grpsize",
    "bias",
    "rope_table_size",
    "num_heads",
    "num_kv_heads",
    "num_decoder_layers",
    "kv_qscheme",
    "max_position_embeddings",
    "mla",
    "q_lora_rank",
    "kv_lora_rank",
    "qk_nope_head_dim",
    "qk_rope_head_dim",
    "v_head_dim",
    "lora_rank",
    "dtype_lora",
    "lora_merge_policy",
    "hadamard",
];

const DTYPE_KEYS: &[&str] = &["dtype_in", "dtype_wts", "dtype_lora"];

/// Llama2-7B with latent attention, int4 per-group weights.
pub const LLAMA2_7B_MLA_JSON: &str = r#"{
    "mode": "eager",
    "dtype_in": "bf16",
    "hidden_size": 4096,
    "vocab_size": 32000,
    "intermediate_size": 11008,
    "actfn_algo": "pwl",
    "actfn_table_size": 256,
    "dtype_wts": "int4",
    "gemm_quant_scheme": "pergrp",
    "gemm_grpsize": 128,
    "bias": false,
    "rope_table_size": 4096,
    "num_heads": 32,
    "num_kv_heads": 32,
    "num_decoder_layers": 32,
    "kv_qscheme": "none",
    "max_position_embeddings": 4096,
    "mla": true,
    "q_lora_rank": 128,
    "kv_lora_rank": 128,
    "qk_nope_head_dim": 128,
    "qk_rope_head_dim": 64,
    "v_head_dim": 128,
}
"#;

impl ModelConfig {
    pub fn head_dim(&self) -> u64 {
        self.hidden_size / self.num_heads
    }

    pub fn dtype_lora(&self) -> DataType {
        self.dtype_lora.unwrap_or(self.dtype_in)
    }

    pub fn kv_dtype(&self) -> DataType {
        self.kv_qscheme.storage(self.dtype_in)
    }

    pub fn mla_dims(&self) -> Option<MlaDims> {
        if !self.mla {
            return None;
        }
        Some(MlaDims {
            q_lora_rank: self.q_lora_rank?,
            kv_lora_rank: self.kv_lora_rank?,
            qk_nope_head_dim: self.qk_nope_head_dim?,
            qk_rope_head_dim: self.qk_rope_head_dim?,
            v_head_dim: self.v_head_dim?,
        })
    }

    /// Group size along k for weight scales; `None` means one scale per
    /// output channel.
    pub fn weight_group(&self) -> Option<u64> {
        match self.gemm_quant_scheme {
            QuantScheme::Pergrp => Some(self.gemm_grpsize),
            QuantScheme::None => None,
        }
    }

    /// LoRA rank applied to each projection call, if adapters merge inline.
    pub fn inline_lora_rank(&self) -> Option<u64> {
        match self.lora_merge_policy {
            LoraMergePolicy::Inline => self.lora_rank,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("vocab_size", self.vocab_size),
            ("intermediate_size", self.intermediate_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("num_decoder_layers", self.num_decoder_layers),
            ("max_position_embeddings", self.max_position_embeddings),
            ("rope_table_size", self.rope_table_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(constraint(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(constraint(format!(
                "hidden_size ({}) must be divisible by num_heads ({})",
                self.hidden_size, self.num_heads
            )));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(constraint(format!(
                "num_heads ({}) must be divisible by num_kv_heads ({})",
                self.num_heads, self.num_kv_heads
            )));
        }
        match self.actfn_algo {
            ActFnAlgo::Pwl if self.actfn_table_size == 0 => {
                return Err(constraint("actfn_table_size must be positive for pwl"));
            }
            ActFnAlgo::Poly if self.poly_degree.unwrap_or(0) == 0 => {
                return Err(constraint("poly_degree must be present and positive for poly"));
            }
            _ => {}
        }
        if self.gemm_quant_scheme == QuantScheme::Pergrp {
            let g = self.gemm_grpsize;
            if g == 0 || !self.hidden_size.is_multiple_of(g) || !self.intermediate_size.is_multiple_of(g) {
                return Err(constraint(format!(
                    "gemm_grpsize ({g}) must divide hidden_size ({}) and intermediate_size ({})",
                    self.hidden_size, self.intermediate_size
                )));
            }
        } else if self.dtype_wts == DataType::Int4 || self.dtype_wts.is_microscaling() {
            return Err(constraint(format!(
                "dtype_wts {} requires gemm_quant_scheme pergrp",
                self.dtype_wts
            )));
        }
        if self.mla {
            let dims = [
                ("q_lora_rank", self.q_lora_rank),
                ("kv_lora_rank", self.kv_lora_rank),
                ("qk_nope_head_dim", self.qk_nope_head_dim),
                ("qk_rope_head_dim", self.qk_rope_head_dim),
                ("v_head_dim", self.v_head_dim),
            ];
            for (name, v) in dims {
                if v.unwrap_or(0) == 0 {
                    return Err(constraint(format!(
                        "mla requires {name} to be present and positive"
                    )));
                }
            }
        }
        if self.lora_merge_policy != LoraMergePolicy::None && self.lora_rank.unwrap_or(0) == 0 {
            return Err(constraint(
                "lora_merge_policy other than none requires a positive lora_rank",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn constraint(msg: impl Into<String>) -> Error {
    Error::Constraint(msg.into())
}

/// Blanks out commas that directly precede a closing bracket, leaving
/// offsets intact so syntax errors still point at the right column.
fn blank_trailing_commas(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = bytes.to_vec();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b',' => {
                let next = bytes[i + 1..].iter().find(|c| !c.is_ascii_whitespace());
                if matches!(next, Some(b'}') | Some(b']')) {
                    out[i] = b' ';
                }
            }
            _ => {}
        }
    }
    String::from_utf8(out).expect("only ascii bytes replaced")
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let cleaned = blank_trailing_commas(text);
    let value: Value = serde_json::from_str(&cleaned).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    model_config_from_value(value)
}

pub fn model_config_from_value(value: Value) -> Result<ModelConfig> {
    let Value::Object(map) = value else {
        return Err(constraint("config must be a JSON object"));
    };
    check_keys(&map)?;
    let cfg: ModelConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| constraint(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_keys(map: &Map<String, Value>) -> Result<()> {
    let unknown: Vec<String> = map
        .keys()
        .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownKeys(unknown));
    }
    for key in DTYPE_KEYS {
        if let Some(Value::String(name)) = map.get(*key) {
            name.parse::<DataType>()?;
        }
    }
    Ok(())
}

/// The model variants with named presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Bf16Bf16,
    Bf16Int4,
    Bf16Int4Fused,
    Bf16Int4Kv4,
    Bf16Int4Mla,
    Bf16Int4Lora,
    QuarotW4A4Kv4,
    Fp16Fp16,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Bf16Bf16,
        Variant::Bf16Int4,
        Variant::Bf16Int4Fused,
        Variant::Bf16Int4Kv4,
        Variant::Bf16Int4Mla,
        Variant::Bf16Int4Lora,
        Variant::QuarotW4A4Kv4,
        Variant::Fp16Fp16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bf16Bf16 => "bf16-bf16",
            Variant::Bf16Int4 => "bf16-int4",
            Variant::Bf16Int4Fused => "bf16-int4-fused",
            Variant::Bf16Int4Kv4 => "bf16-int4-kv4",
            Variant::Bf16Int4Mla => "bf16-int4-mla",
            Variant::Bf16Int4Lora => "bf16-int4-lora",
            Variant::QuarotW4A4Kv4 => "quarot-w4a4kv4",
            Variant::Fp16Fp16 => "fp16-fp16",
        }
    }

    /// Rank used by the LoRA preset.
    pub const LORA_RANK: u64 = 128;

    pub fn config(self) -> ModelConfig {
        preset_variant(self.name()).expect("built-in presets are valid")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == lower)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Builds a named Llama2-7B variant. Presets are assembled as JSON and go
/// through the same parser and validator as user configs.
pub fn preset_variant(name: &str) -> Result<ModelConfig> {
    let variant: Variant = name.parse()?;
    let base: Value = serde_json::from_str(&blank_trailing_commas(LLAMA2_7B_MLA_JSON))
        .expect("embedded config is valid json");
    let Value::Object(mut m) = base else {
        unreachable!("embedded config is an object")
    };
    for key in [
        "q_lora_rank",
        "kv_lora_rank",
        "qk_nope_head_dim",
        "qk_rope_head_dim",
        "v_head_dim",
    ] {
        if variant != Variant::Bf16Int4Mla {
            m.remove(key);
        }
    }
    let set = |m: &mut Map<String, Value>, k: &str, v: Value| {
        m.insert(k.to_string(), v);
    };
    let (act, wts, kv, fused) = match variant {
        Variant::Bf16Bf16 => ("bf16", "bf16", "none", false),
        Variant::Bf16Int4 => ("bf16", "int4", "none", false),
        Variant::Bf16Int4Fused => ("bf16", "int4", "none", true),
        Variant::Bf16Int4Kv4 => ("bf16", "int4", "int4", true),
        Variant::Bf16Int4Mla => ("bf16", "int4", "none", true),
        Variant::Bf16Int4Lora => ("bf16", "int4", "none", true),
        Variant::QuarotW4A4Kv4 => ("int8", "int4", "int4", true),
        Variant::Fp16Fp16 => ("fp16", "fp16", "none", false),
    };
    set(&mut m, "dtype_in", act.into());
    set(&mut m, "dtype_wts", wts.into());
    set(&mut m, "kv_qscheme", kv.into());
    set(&mut m, "mode", if fused { "fused" } else { "eager" }.into());
    set(&mut m, "mla", (variant == Variant::Bf16Int4Mla).into());
    if wts != "int4" {
        set(&mut m, "gemm_quant_scheme", "none".into());
    }
    if variant == Variant::Bf16Int4Lora {
        set(&mut m, "lora_rank", Variant::LORA_RANK.into());
        set(&mut m, "dtype_lora", "bf16".into());
        set(&mut m, "lora_merge_policy", "inline".into());
    }
    if variant == Variant::QuarotW4A4Kv4 {
        set(&mut m, "hadamard", true.into());
    }
    model_config_from_value(Value::Object(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioPhase {
    Prefill,
    Decode,
    ChunkedPrefill,
    Timeline,
}

/// Operating point of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub phase: ScenarioPhase,
    pub prompt_len: u64,
    pub gen_len: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<u64>,
}

impl ScenarioConfig {
    pub fn prefill(prompt_len: u64) -> Self {
        ScenarioConfig {
            phase: ScenarioPhase::Prefill,
            prompt_len,
            gen_len: 0,
            chunk_size: None,
        }
    }

    pub fn decode(prompt_len: u64, gen_len: u64) -> Self {
        ScenarioConfig {
            phase: ScenarioPhase::Decode,
            prompt_len,
            gen_len,
            chunk_size: None,
        }
    }

    pub fn chunked_prefill(prompt_len: u64, chunk_size: u64) -> Self {
        ScenarioConfig {
            phase: ScenarioPhase::ChunkedPrefill,
            prompt_len,
            gen_len: 0,
            chunk_size: Some(chunk_size),
        }
    }

    pub fn timeline(prompt_len: u64, gen_len: u64) -> Self {
        ScenarioConfig {
            phase: ScenarioPhase::Timeline,
            prompt_len,
            gen_len,
            chunk_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Scenario("prompt_len must be at least 1".into()));
        }
        match self.phase {
            ScenarioPhase::ChunkedPrefill => match self.chunk_size {
                Some(c) if c >= 1 && c <= self.prompt_len => {}
                Some(c) => {
                    return Err(Error::Scenario(format!(
                        "chunk_size ({c}) must be in 1..=prompt_len ({})",
                        self.prompt_len
                    )))
                }
                None => return Err(Error::Scenario("chunked_prefill requires chunk_size".into())),
            },
            ScenarioPhase::Timeline | ScenarioPhase::Decode if self.gen_len == 0 => {
                return Err(Error::Scenario("gen_len must be at least 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}
