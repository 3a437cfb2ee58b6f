//! Closed-form cost of single-dispatch operators.
//!
//! Nothing here touches tensor values: each function maps shapes and
//! datatypes to op counts and byte traffic. All functions reject zero-sized
//! dimensions.

use crate::dtype::DataType;
use crate::error::{shape_err, Result};
use crate::stats::{Bytes, StatsDelta};

fn nonzero(dims: &[(&str, u64)]) -> Result<()> {
    match dims.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(shape_err(format!("{name} must be at least 1"))),
        None => Ok(()),
    }
}

/// Low-rank adapter attached to a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraAdapter {
    pub rank: u64,
    pub dtype: DataType,
}

/// `(m, k) x (k, n)` GEMM with optional bias, quantized weights and an
/// inline LoRA merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub dtype_a: DataType,
    pub dtype_b: DataType,
    pub dtype_out: DataType,
    pub bias: bool,
    /// Quantization group along k. `None` is one scale per output channel.
    pub group: Option<u64>,
    pub lora: Option<LoraAdapter>,
}

impl LinearShape {
    /// Plain GEMM with every tensor in `dtype`.
    pub fn dense(m: u64, k: u64, n: u64, dtype: DataType) -> Self {
        LinearShape {
            m,
            k,
            n,
            dtype_a: dtype,
            dtype_b: dtype,
            dtype_out: dtype,
            bias: false,
            group: None,
            lora: None,
        }
    }

    pub fn with_weights(mut self, dtype_b: DataType, group: Option<u64>) -> Self {
        self.dtype_b = dtype_b;
        self.group = group;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_lora(mut self, lora: Option<LoraAdapter>) -> Self {
        self.lora = lora;
        self
    }
}

/// Linear cost split the way it is accounted: the compute pass with its
/// activation traffic, and the parameter stream (zero ops).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearCost {
    pub compute: StatsDelta,
    pub params: StatsDelta,
}

impl LinearCost {
    pub fn total(&self) -> StatsDelta {
        self.compute + self.params
    }
}

pub fn linear_parts(s: &LinearShape) -> Result<LinearCost> {
    let LinearShape { m, k, n, .. } = *s;
    nonzero(&[("m", m), ("k", k), ("n", n)])?;

    let mut opcount = 2 * m * k * n - m * n;
    let act_rd = s.dtype_a.size_of(m * k);
    let out_wr = s.dtype_out.size_of(m * n);
    let mut param_rd = s.dtype_b.size_of(k * n);

    if s.bias {
        opcount += m * n;
        param_rd += s.dtype_a.size_of(n);
    }

    if s.dtype_b.is_quantized() {
        let g = s.group.unwrap_or(k);
        if g == 0 || k % g != 0 {
            return Err(shape_err(format!("group size {g} does not divide k = {k}")));
        }
        let groups = (k / g) * n;
        // dequantize: shift + scale per weight
        opcount += 2 * k * n;
        if s.dtype_b.is_microscaling() {
            // one shared 8-bit exponent per block
            param_rd += Bytes::from_bytes(groups);
        } else {
            param_rd += s.dtype_a.size_of(groups);
            if s.dtype_b == DataType::Int4 {
                // asymmetric: zero point per group
                param_rd += s.dtype_b.size_of(groups);
            }
        }
    }

    if let Some(lora) = s.lora {
        let r = lora.rank;
        nonzero(&[("lora rank", r)])?;
        param_rd += lora.dtype.size_of(k * r + r * n);
        // A@B, then add into the weight matrix
        opcount += 2 * k * r * n + k * n;
    }

    Ok(LinearCost {
        compute: StatsDelta::kernel(opcount, act_rd, out_wr),
        params: StatsDelta {
            mem_rd: param_rd,
            ..StatsDelta::ZERO
        },
    })
}

pub fn linear(s: &LinearShape) -> Result<StatsDelta> {
    linear_parts(s).map(|c| c.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantDirection {
    Quantize,
    Dequantize,
}

/// Shift-and-scale (de)quantization of `num_el` elements sharing
/// `num_qparams` quantization parameters.
pub fn quantize_dequantize(
    num_el: u64,
    num_qparams: u64,
    full: DataType,
    quant: DataType,
    direction: QuantDirection,
) -> Result<StatsDelta> {
    nonzero(&[("num_el", num_el)])?;
    let full_bytes = full.size_of(num_el);
    let q_bytes = quant.size_of(num_el);
    let params = full.size_of(num_qparams);
    let (rd, wr) = match direction {
        QuantDirection::Quantize => (full_bytes + params, q_bytes),
        QuantDirection::Dequantize => (q_bytes + params, full_bytes),
    };
    Ok(StatsDelta::kernel(2 * num_el, rd, wr))
}

pub fn bmm(b: u64, m: u64, k: u64, n: u64, dtype: DataType) -> Result<StatsDelta> {
    bmm_broadcast(b, b, m, k, n, dtype)
}

/// BMM whose right operand has `b_rhs` distinct batches broadcast across
/// `b` left batches (grouped-query attention). MACs follow `b`; the right
/// operand is read once per distinct batch.
pub fn bmm_broadcast(
    b: u64,
    b_rhs: u64,
    m: u64,
    k: u64,
    n: u64,
    dtype: DataType,
) -> Result<StatsDelta> {
    nonzero(&[("b", b), ("b_rhs", b_rhs), ("m", m), ("k", k), ("n", n)])?;
    if !b.is_multiple_of(b_rhs) {
        return Err(shape_err(format!(
            "rhs batch {b_rhs} does not divide batch {b}"
        )));
    }
    Ok(StatsDelta::kernel(
        2 * b * m * k * n - b * m * n,
        dtype.size_of(b * m * k + b_rhs * k * n),
        dtype.size_of(b * m * n),
    ))
}

/// Elementwise op over an `(m, n)` tensor with `arity` input tensors.
pub fn elementwise(m: u64, n: u64, dtype: DataType, arity: u64) -> Result<StatsDelta> {
    nonzero(&[("m", m), ("n", n), ("arity", arity)])?;
    let el = m * n;
    Ok(StatsDelta::kernel(
        el,
        dtype.size_of(arity * el),
        dtype.size_of(el),
    ))
}

/// Table-driven piecewise-linear activation.
pub fn nonlinear_pwl(num_el: u64, table_size: u64, dtype: DataType) -> Result<StatsDelta> {
    nonzero(&[("num_el", num_el), ("table_size", table_size)])?;
    Ok(StatsDelta::kernel(
        2 * num_el,
        dtype.size_of(num_el + table_size),
        dtype.size_of(num_el),
    ))
}

/// Horner-style polynomial activation of degree `degree`.
pub fn nonlinear_poly(num_el: u64, degree: u64, dtype: DataType) -> Result<StatsDelta> {
    nonzero(&[("num_el", num_el), ("degree", degree)])?;
    let per_el = degree * (degree + 1) / 2 + degree;
    Ok(StatsDelta::kernel(
        per_el * num_el,
        dtype.size_of(num_el + degree),
        dtype.size_of(num_el),
    ))
}

/// Embedding lookup for one token. The whole table is charged as read.
pub fn embedding(vocab_size: u64, hidden_size: u64, dtype: DataType) -> Result<StatsDelta> {
    embedding_tokens(1, vocab_size, hidden_size, dtype)
}

/// Embedding lookup for `tokens` tokens in one call: one op and one output
/// row per token, with a single pass over the table.
pub fn embedding_tokens(
    tokens: u64,
    vocab_size: u64,
    hidden_size: u64,
    dtype: DataType,
) -> Result<StatsDelta> {
    nonzero(&[("tokens", tokens), ("vocab_size", vocab_size), ("hidden_size", hidden_size)])?;
    Ok(StatsDelta::kernel(
        tokens,
        dtype.size_of(vocab_size * hidden_size),
        dtype.size_of(tokens * hidden_size),
    ))
}

/// Dispatch count for a kernel that touches `extent` bytes when tensors are
/// tiled through `onchip_bytes` of local memory.
pub fn tiled_dispatches(extent: Bytes, onchip_bytes: Option<u64>) -> u64 {
    match onchip_bytes {
        Some(cap) if cap > 0 => extent.ceil_bytes().div_ceil(cap).max(1),
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use DataType::*;

    #[test]
    fn linear_bf16_gemv() {
        let c = linear_parts(&LinearShape::dense(1, 4096, 4096, Bf16)).unwrap();
        assert_eq!(c.compute.opcount, 33_550_336);
        assert_eq!(c.compute.mem_rd, Bytes::from_bytes(8_192));
        assert_eq!(c.params.mem_rd, Bytes::from_bytes(33_554_432));
        assert_eq!(c.compute.mem_wr, Bytes::from_bytes(8_192));
        assert_eq!(c.total().dispatches, 1);
    }

    #[test]
    fn linear_int4_per_group() {
        let s = LinearShape::dense(1, 4096, 4096, Bf16).with_weights(Int4, Some(128));
        let c = linear_parts(&s).unwrap();
        assert_eq!(c.compute.opcount, 67_104_768);
        assert_eq!(
            c.params.mem_rd,
            Bytes::from_bytes(8_388_608 + 262_144 + 65_536)
        );
    }

    #[test]
    fn linear_inline_lora_extra_ops() {
        let base = linear(&LinearShape::dense(1, 4096, 4096, Bf16)).unwrap();
        let lora = linear(&LinearShape::dense(1, 4096, 4096, Bf16).with_lora(Some(LoraAdapter {
            rank: 128,
            dtype: Bf16,
        })))
        .unwrap();
        assert_eq!(lora.opcount - base.opcount, 4_311_744_512);
        assert_eq!(
            lora.mem_rd.whole().unwrap() - base.mem_rd.whole().unwrap(),
            (4096 * 128 + 128 * 4096) * 2
        );
    }

    #[test]
    fn linear_bias() {
        let plain = linear(&LinearShape::dense(2, 3, 4, Bf16)).unwrap();
        let biased = linear(&LinearShape::dense(2, 3, 4, Bf16).with_bias(true)).unwrap();
        assert_eq!(biased.opcount - plain.opcount, 8);
        assert_eq!(biased.mem_rd, plain.mem_rd + Bytes::from_bytes(8));
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        assert!(linear(&LinearShape::dense(0, 4, 4, Bf16)).is_err());
        let s = LinearShape::dense(1, 100, 4, Bf16).with_weights(Int4, Some(128));
        assert!(linear(&s).is_err());
    }

    #[test]
    fn int8_per_channel_scales() {
        let plain = linear(&LinearShape::dense(1, 64, 32, Bf16)).unwrap();
        let q = linear_parts(&LinearShape::dense(1, 64, 32, Bf16).with_weights(Int8, None)).unwrap();
        assert_eq!(q.params.mem_rd, Bytes::from_bytes(64 * 32 + 32 * 2));
        assert_eq!(q.total().opcount - plain.opcount, 2 * 64 * 32);
    }

    #[test]
    fn mx_block_scales() {
        let q = linear_parts(&LinearShape::dense(1, 64, 32, Bf16).with_weights(Mxint8, Some(32)))
            .unwrap();
        assert_eq!(q.params.mem_rd, Bytes::from_bytes(64 * 32 + 2 * 32));
    }

    #[test]
    fn quant_dequant_examples() {
        let d = quantize_dequantize(128, 1, Bf16, Int4, QuantDirection::Dequantize).unwrap();
        assert_eq!(d.opcount, 256);
        assert_eq!(d.traffic(), Bytes::from_bytes(322));
        let q = quantize_dequantize(128, 1, Bf16, Int4, QuantDirection::Quantize).unwrap();
        assert_eq!(q.traffic(), d.traffic());
        assert_eq!(q.mem_wr, Bytes::from_bytes(64));
        assert_eq!(
            quantize_dequantize(1, 1, Bf16, Int4, QuantDirection::Quantize).unwrap().opcount,
            2
        );
        let big = quantize_dequantize(4096 * 4096, 131_072, Bf16, Int4, QuantDirection::Dequantize)
            .unwrap();
        assert_eq!(big.opcount, 33_554_432);
    }

    #[test]
    fn bmm_examples() {
        let qk = bmm(32, 2048, 128, 2048, Bf16).unwrap();
        assert_eq!(qk.opcount, 34_225_520_640);
        assert_eq!(qk.mem_rd, Bytes::from_bytes(33_554_432));
        assert_eq!(qk.mem_wr, Bytes::from_bytes(268_435_456));
        assert_eq!(bmm(1, 1, 1, 1, Bf16).unwrap().opcount, 1);
        assert_eq!(bmm(32, 1, 128, 2049, Bf16).unwrap().opcount, 16_719_840);
    }

    #[test]
    fn broadcast_bmm_reads_rhs_once_per_group() {
        let full = bmm(32, 1, 128, 100, Bf16).unwrap();
        let mqa = bmm_broadcast(32, 1, 1, 128, 100, Bf16).unwrap();
        assert_eq!(full.opcount, mqa.opcount);
        assert!(mqa.mem_rd < full.mem_rd);
        assert!(bmm_broadcast(32, 5, 1, 1, 1, Bf16).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let e = elementwise(2, 3, Bf16, 2).unwrap();
        assert_eq!((e.opcount, e.mem_rd, e.mem_wr), (6, Bytes::from_bytes(24), Bytes::from_bytes(12)));
        assert_eq!(elementwise(1, 1, Bf16, 2).unwrap().opcount, 1);
        assert_eq!(elementwise(2048, 4096, Bf16, 2).unwrap().opcount, 8_388_608);
    }

    #[test]
    fn pwl_examples() {
        assert_eq!(nonlinear_pwl(2048 * 11008, 256, Bf16).unwrap().opcount, 45_088_768);
        let one = nonlinear_pwl(1, 256, Bf16).unwrap();
        assert_eq!((one.opcount, one.mem_rd), (2, Bytes::from_bytes(514)));
        assert_eq!(nonlinear_pwl(256, 256, Bf16).unwrap().mem_rd, Bytes::from_bytes(1024));
    }

    #[test]
    fn poly_examples() {
        assert_eq!(nonlinear_poly(10, 2, Bf16).unwrap().opcount, 50);
        assert_eq!(nonlinear_poly(1, 1, Bf16).unwrap().opcount, 2);
        assert_eq!(nonlinear_poly(100, 4, Bf16).unwrap().opcount, 1_400);
        assert!(nonlinear_poly(10, 0, Bf16).is_err());
    }

    #[test]
    fn embedding_examples() {
        let e = embedding(32000, 4096, Bf16).unwrap();
        assert_eq!(e.mem_rd, Bytes::from_bytes(262_144_000));
        assert_eq!(e.mem_wr, Bytes::from_bytes(8_192));
        assert_eq!(e.opcount, 1);
        assert_eq!(embedding(1, 1, Bf16).unwrap().mem_rd, Bytes::from_bytes(2));
        assert_eq!(embedding(32000, 4096, Int4).unwrap().mem_rd, Bytes::from_bytes(65_536_000));
        let many = embedding_tokens(8, 32000, 4096, Bf16).unwrap();
        assert_eq!(many.opcount, 8);
        assert_eq!(many.mem_rd, e.mem_rd);
    }

    #[test]
    fn tiling() {
        assert_eq!(tiled_dispatches(Bytes::from_bytes(10), None), 1);
        assert_eq!(tiled_dispatches(Bytes::from_bytes(10), Some(4)), 3);
        assert_eq!(tiled_dispatches(Bytes::ZERO, Some(4)), 1);
    }
}
