//! Attention cores with KV-cache accounting.
//!
//! Multi-head, grouped-query and multi-query attention share one model
//! that differs only in the number of KV heads. Latent attention caches a
//! compressed KV vector per token and expands it on every call.

use crate::config::{ActFnAlgo, ModelConfig, MlaDims};
use crate::dtype::DataType;
use crate::error::{shape_err, Result};
use crate::ops::derived::{
    rmsnorm_group, rmsnorm_parts, rope, single_kernel, softmax_group, softmax_parts, FusionGroup,
    OpConstants, Part,
};
use crate::ops::foundational::{bmm_broadcast, elementwise, linear, LinearShape, LoraAdapter};
use crate::stats::{Bytes, Mode, OpClass, StatsDelta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Mha,
    Gqa,
    Mqa,
    Mla,
}

/// Everything the attention core needs from a model description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub hidden: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub mla: Option<MlaDims>,
    pub dtype_in: DataType,
    pub kv_dtype: DataType,
    pub dtype_wts: DataType,
    pub group: Option<u64>,
    pub bias: bool,
    pub lora: Option<LoraAdapter>,
    pub softmax_algo: ActFnAlgo,
    pub table_size: u64,
    pub poly_degree: Option<u64>,
    pub rope_table_size: u64,
}

impl AttentionSpec {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        AttentionSpec {
            hidden: cfg.hidden_size,
            num_heads: cfg.num_heads,
            num_kv_heads: cfg.num_kv_heads,
            head_dim: cfg.head_dim(),
            mla: cfg.mla_dims(),
            dtype_in: cfg.dtype_in,
            kv_dtype: cfg.kv_dtype(),
            dtype_wts: cfg.dtype_wts,
            group: cfg.weight_group(),
            bias: cfg.bias,
            lora: cfg.inline_lora_rank().map(|rank| LoraAdapter {
                rank,
                dtype: cfg.dtype_lora(),
            }),
            softmax_algo: cfg.actfn_algo,
            table_size: cfg.actfn_table_size,
            poly_degree: cfg.poly_degree,
            rope_table_size: cfg.rope_table_size,
        }
    }

    pub fn kind(&self) -> AttentionKind {
        if self.mla.is_some() {
            AttentionKind::Mla
        } else if self.num_kv_heads == self.num_heads {
            AttentionKind::Mha
        } else if self.num_kv_heads == 1 {
            AttentionKind::Mqa
        } else {
            AttentionKind::Gqa
        }
    }

    fn kv_quantized(&self) -> bool {
        self.kv_dtype != self.dtype_in
    }

    /// Cached elements per token and their number of quantization groups.
    fn cache_layout(&self) -> (u64, u64) {
        match self.mla {
            Some(m) => (m.kv_lora_rank + m.qk_rope_head_dim, 1),
            None => (2 * self.num_kv_heads * self.head_dim, 2 * self.num_kv_heads),
        }
    }

    /// KV-cache bytes held per token per layer, including quantization
    /// scales and zero points.
    pub fn kv_bytes_per_token(&self) -> Bytes {
        self.cache_bytes(1)
    }

    fn cache_bytes(&self, tokens: u64) -> Bytes {
        let (elements, groups) = self.cache_layout();
        let mut b = self.kv_dtype.size_of(tokens * elements);
        if self.kv_quantized() {
            b += self.dtype_in.size_of(2 * tokens * groups);
        }
        b
    }

    fn proj(&self, m: u64, k: u64, n: u64) -> Result<StatsDelta> {
        linear(
            &LinearShape::dense(m, k, n, self.dtype_in)
                .with_weights(self.dtype_wts, self.group)
                .with_bias(self.bias)
                .with_lora(self.lora),
        )
    }
}

fn cache_parts(spec: &AttentionSpec, new_seq: u64, total: u64) -> [Part; 2] {
    let (elements, _) = spec.cache_layout();
    let quant_ops = |tokens: u64| {
        if spec.kv_quantized() {
            2 * tokens * elements
        } else {
            0
        }
    };
    let store = StatsDelta {
        opcount: quant_ops(new_seq),
        kv_wr: spec.cache_bytes(new_seq),
        ..StatsDelta::ZERO
    };
    let load = StatsDelta {
        opcount: quant_ops(total),
        kv_rd: spec.cache_bytes(total),
        ..StatsDelta::ZERO
    };
    [
        Part::new("kv_store", OpClass::Other, store),
        Part::new("kv_load", OpClass::Other, load),
    ]
}

/// Scores, scaling, softmax and weighted sum, as four parts.
#[allow(clippy::too_many_arguments)]
fn core_parts(
    spec: &AttentionSpec,
    new_seq: u64,
    total: u64,
    qk_dim: u64,
    v_dim: u64,
    kv_groups: u64,
    consts: &OpConstants,
) -> Result<Vec<Part>> {
    let h = spec.num_heads;
    let rows = h * new_seq;
    let dt = spec.dtype_in;
    let softmax = single_kernel(
        "softmax",
        OpClass::Softmax,
        softmax_parts(
            rows,
            total,
            spec.softmax_algo,
            spec.table_size,
            spec.poly_degree,
            dt,
            Mode::Eager,
            consts,
        )?,
        &softmax_group(rows, total, dt),
    );
    Ok(vec![
        Part::new(
            "qk_bmm",
            OpClass::Bmm,
            bmm_broadcast(h, kv_groups, new_seq, qk_dim, total, dt)?,
        ),
        Part::new("attn_scale", OpClass::Elementwise, elementwise(rows, total, dt, 1)?),
        softmax,
        Part::new(
            "pv_bmm",
            OpClass::Bmm,
            bmm_broadcast(h, kv_groups, new_seq, total, v_dim, dt)?,
        ),
    ])
}

fn core_group(spec: &AttentionSpec, new_seq: u64, total: u64) -> FusionGroup {
    let scores = spec.dtype_in.size_of(spec.num_heads * new_seq * total);
    FusionGroup::new()
        .intermediate(0, &[1], scores)
        .intermediate(1, &[2], scores)
        .intermediate(2, &[3], scores)
}

/// Attention for `new_seq` incoming tokens attending to `past_len` cached
/// tokens plus themselves.
///
/// For latent attention the returned parts include the down and up
/// projections and the rotary embedding; for the other kinds those live in
/// the surrounding layer. The output projection is never included.
pub fn attention_parts(
    spec: &AttentionSpec,
    new_seq: u64,
    past_len: u64,
    mode: Mode,
    consts: &OpConstants,
) -> Result<Vec<Part>> {
    if new_seq == 0 {
        return Err(shape_err("attention needs at least one new token"));
    }
    let h = spec.num_heads;
    if h == 0 || spec.num_kv_heads == 0 || !h.is_multiple_of(spec.num_kv_heads) {
        return Err(shape_err(format!(
            "num_kv_heads {} must divide num_heads {}",
            spec.num_kv_heads, h
        )));
    }
    let total = new_seq + past_len;
    let dt = spec.dtype_in;
    match spec.mla {
        None => {
            let hd = spec.head_dim;
            let kvh = spec.num_kv_heads;
            let mut parts = cache_parts(spec, new_seq, total).to_vec();
            let core = core_parts(spec, new_seq, total, hd, hd, kvh, consts)?;
            parts.extend(core);
            if mode == Mode::Fused {
                // the fused kernel reads K and V straight from the cache
                let operand = dt.size_of(kvh * hd * total);
                core_group(spec, new_seq, total)
                    .streamed(0, operand)
                    .streamed(3, operand)
                    .apply(&mut parts[2..]);
            }
            Ok(parts)
        }
        Some(m) => {
            let qk = m.qk_nope_head_dim + m.qk_rope_head_dim;
            let norm = |name: &str, width: u64| -> Result<Part> {
                Ok(single_kernel(
                    name,
                    OpClass::Norm,
                    rmsnorm_parts(new_seq, width, dt, Mode::Eager, consts)?,
                    &rmsnorm_group(new_seq, width, dt),
                ))
            };
            let rope_part = |name: &str, heads: u64| -> Result<Part> {
                Ok(Part::new(
                    name,
                    OpClass::Rope,
                    rope(new_seq, heads, m.qk_rope_head_dim, spec.rope_table_size, dt, consts)?,
                ))
            };
            let mut parts = vec![
                Part::new("q_a_proj", OpClass::Gemm, spec.proj(new_seq, spec.hidden, m.q_lora_rank)?),
                norm("q_a_norm", m.q_lora_rank)?,
                Part::new("q_b_proj", OpClass::Gemm, spec.proj(new_seq, m.q_lora_rank, h * qk)?),
                Part::new(
                    "kv_a_proj",
                    OpClass::Gemm,
                    spec.proj(new_seq, spec.hidden, m.kv_lora_rank + m.qk_rope_head_dim)?,
                ),
                norm("kv_a_norm", m.kv_lora_rank)?,
                rope_part("rope_q", h)?,
                rope_part("rope_k", 1)?,
            ];
            parts.extend(cache_parts(spec, new_seq, total));
            let start = parts.len();
            parts.push(Part::new(
                "kv_b_proj",
                OpClass::Gemm,
                spec.proj(total, m.kv_lora_rank, h * (m.qk_nope_head_dim + m.v_head_dim))?,
            ));
            parts.extend(core_parts(spec, new_seq, total, qk, m.v_head_dim, h, consts)?);
            if mode == Mode::Fused {
                // The fused kernel expands the cached latent on chip: the
                // up-projection reads the cache it already streams, and the
                // expanded K and V never reach memory.
                let k_nope = dt.size_of(h * m.qk_nope_head_dim * total);
                let v = dt.size_of(h * m.v_head_dim * total);
                let mut group = core_group(spec, new_seq, total);
                for i in &mut group.intermediates {
                    i.producer += 1;
                    for c in &mut i.consumers {
                        *c += 1;
                    }
                }
                group
                    .intermediate(0, &[], k_nope + v)
                    .streamed(0, dt.size_of(total * m.kv_lora_rank))
                    .streamed(1, k_nope)
                    .streamed(4, v)
                    .apply(&mut parts[start..]);
            }
            Ok(parts)
        }
    }
}

pub fn attention(
    spec: &AttentionSpec,
    new_seq: u64,
    past_len: u64,
    mode: Mode,
    consts: &OpConstants,
) -> Result<StatsDelta> {
    attention_parts(spec, new_seq, past_len, mode, consts).map(|p| p.iter().map(|p| p.delta).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset_variant, Variant};

    fn spec(v: Variant) -> AttentionSpec {
        AttentionSpec::from_config(&v.config())
    }

    #[test]
    fn kv_bytes_per_token() {
        assert_eq!(spec(Variant::Bf16Bf16).kv_bytes_per_token(), Bytes::from_bytes(524_288 / 32));
        // int4 payload plus a bf16 scale and zero per head per tensor
        assert_eq!(spec(Variant::Bf16Int4Kv4).kv_bytes_per_token(), Bytes::from_bytes(4096 + 256));
        let mla = spec(Variant::Bf16Int4Mla);
        assert_eq!(mla.kv_bytes_per_token(), Bytes::from_bytes(192 * 2));
    }

    #[test]
    fn decode_kv_traffic() {
        let s = spec(Variant::Bf16Bf16);
        let d = attention(&s, 1, 2047, Mode::Eager, &OpConstants::default()).unwrap();
        assert_eq!(d.kv_rd, Bytes::from_bytes(2048 * 16_384));
        assert_eq!(d.kv_wr, Bytes::from_bytes(16_384));
        assert_eq!(d.dispatches, 4);
        let f = attention(&s, 1, 2047, Mode::Fused, &OpConstants::default()).unwrap();
        assert_eq!(f.dispatches, 1);
        assert!(f.traffic() < d.traffic());
        assert_eq!(f.opcount, d.opcount);
    }

    #[test]
    fn kinds() {
        assert_eq!(spec(Variant::Bf16Bf16).kind(), AttentionKind::Mha);
        assert_eq!(spec(Variant::Bf16Int4Mla).kind(), AttentionKind::Mla);
        let mut cfg = preset_variant("bf16-bf16").unwrap();
        cfg.num_kv_heads = 8;
        assert_eq!(AttentionSpec::from_config(&cfg).kind(), AttentionKind::Gqa);
        cfg.num_kv_heads = 1;
        assert_eq!(AttentionSpec::from_config(&cfg).kind(), AttentionKind::Mqa);
    }

    #[test]
    fn grouped_heads_cut_only_memory() {
        let mut cfg = preset_variant("bf16-bf16").unwrap();
        let mha = attention(&AttentionSpec::from_config(&cfg), 1, 511, Mode::Eager, &OpConstants::default()).unwrap();
        cfg.num_kv_heads = 8;
        let gqa = attention(&AttentionSpec::from_config(&cfg), 1, 511, Mode::Eager, &OpConstants::default()).unwrap();
        assert_eq!(mha.opcount, gqa.opcount);
        assert!(gqa.kv_rd < mha.kv_rd);
        assert!(gqa.mem_rd < mha.mem_rd);
    }

    #[test]
    fn rejects_bad_heads() {
        let mut s = spec(Variant::Bf16Bf16);
        s.num_kv_heads = 5;
        assert!(attention(&s, 1, 0, Mode::Eager, &OpConstants::default()).is_err());
        assert!(attention(&spec(Variant::Bf16Bf16), 0, 3, Mode::Eager, &OpConstants::default()).is_err());
    }
}
