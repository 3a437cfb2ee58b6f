//! Operators built from the foundational ones.
//!
//! A derived op returns its stages as [`Part`]s so the simulator can keep
//! per-class attribution. In eager mode every stage is its own kernel. In
//! fused mode a [`FusionGroup`] removes the traffic of intermediates that
//! never leave the kernel and collapses the group to one dispatch.

use crate::config::{ActFnAlgo, LoraMergePolicy};
use crate::dtype::DataType;
use crate::error::{shape_err, Result};
use crate::ops::foundational::{
    elementwise, linear, nonlinear_poly, nonlinear_pwl, LinearShape, LoraAdapter,
};
use crate::stats::{Bytes, Mode, OpClass, StatsDelta};

/// Tunable constants for the derived formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpConstants {
    /// Newton iterations for reciprocal and reciprocal square root.
    pub inverse_iters: u64,
    /// Ops per element for a rotary embedding (two mul, one add).
    pub rope_ops_per_el: u64,
}

impl Default for OpConstants {
    fn default() -> Self {
        OpConstants {
            inverse_iters: 4,
            rope_ops_per_el: 3,
        }
    }
}

/// One stage of a derived op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    pub name: String,
    pub class: OpClass,
    pub delta: StatsDelta,
    /// Bytes touched by the kernel this part launches, for tiling. Zero
    /// when the part launches nothing.
    pub extent: Bytes,
}

impl Part {
    pub fn new(name: impl Into<String>, class: OpClass, delta: StatsDelta) -> Self {
        let extent = if delta.dispatches > 0 {
            delta.traffic()
        } else {
            Bytes::ZERO
        };
        Part {
            name: name.into(),
            class,
            delta,
            extent,
        }
    }
}

pub fn total(parts: &[Part]) -> StatsDelta {
    parts.iter().map(|p| p.delta).sum()
}

/// A tensor written by one member of a fusion group and read by others.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intermediate {
    pub producer: usize,
    pub consumers: Vec<usize>,
    pub bytes: Bytes,
}

/// Operators executed as a single kernel.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FusionGroup {
    pub intermediates: Vec<Intermediate>,
    /// Operand reads served from data the kernel already streams, as
    /// `(member, bytes)`.
    pub streamed: Vec<(usize, Bytes)>,
}

impl FusionGroup {
    pub fn new() -> Self {
        FusionGroup::default()
    }

    pub fn intermediate(mut self, producer: usize, consumers: &[usize], bytes: Bytes) -> Self {
        self.intermediates.push(Intermediate {
            producer,
            consumers: consumers.to_vec(),
            bytes,
        });
        self
    }

    pub fn streamed(mut self, member: usize, bytes: Bytes) -> Self {
        self.streamed.push((member, bytes));
        self
    }

    /// Traffic removed by fusing: each intermediate's write plus every read
    /// of it, and the streamed operand reads.
    pub fn elided(&self) -> Bytes {
        let inter: Bytes = self
            .intermediates
            .iter()
            .map(|i| i.bytes * (1 + i.consumers.len() as u64))
            .sum();
        inter + self.streamed.iter().map(|(_, b)| *b).sum()
    }

    /// Applies the group to `members` in place.
    pub fn apply(&self, members: &mut [Part]) {
        for i in &self.intermediates {
            let p = &mut members[i.producer].delta;
            p.mem_wr = p.mem_wr.saturating_sub(i.bytes);
            for &c in &i.consumers {
                let d = &mut members[c].delta;
                d.mem_rd = d.mem_rd.saturating_sub(i.bytes);
            }
        }
        for &(m, b) in &self.streamed {
            let d = &mut members[m].delta;
            d.mem_rd = d.mem_rd.saturating_sub(b);
        }
        let extent: Bytes = members.iter().map(|p| p.delta.traffic()).sum();
        for (idx, part) in members.iter_mut().enumerate() {
            part.delta.dispatches = u64::from(idx == 0);
            part.extent = if idx == 0 { extent } else { Bytes::ZERO };
        }
    }

    pub fn apply_if(&self, mode: Mode, members: &mut [Part]) {
        if mode == Mode::Fused {
            self.apply(members);
        }
    }
}

/// Collapses a chain into one part, as a single-kernel implementation would
/// report it.
pub fn single_kernel(name: &str, class: OpClass, mut stages: Vec<Part>, group: &FusionGroup) -> Part {
    group.apply(&mut stages);
    let extent = stages[0].extent;
    Part {
        name: name.to_string(),
        class,
        delta: total(&stages),
        extent,
    }
}

pub fn quantized_linear(shape: &LinearShape) -> Result<StatsDelta> {
    if !shape.dtype_b.is_quantized() {
        return Err(shape_err(format!(
            "quantized linear needs quantized weights, got {}",
            shape.dtype_b
        )));
    }
    linear(shape)
}

/// Linear layer carrying a LoRA adapter under a merge policy. Only inline
/// merging adds per-call cost; ahead-of-time merging is paid once through
/// [`lora_merge`].
pub fn lora_linear(
    shape: &LinearShape,
    rank: Option<u64>,
    dtype_lora: DataType,
    policy: LoraMergePolicy,
) -> Result<StatsDelta> {
    let adapter = match (policy, rank) {
        (LoraMergePolicy::None, _) => None,
        (_, None) | (_, Some(0)) => {
            return Err(shape_err("a LoRA merge policy needs a positive lora_rank"))
        }
        (LoraMergePolicy::AheadOfTime, Some(_)) => None,
        (LoraMergePolicy::Inline, Some(rank)) => Some(LoraAdapter {
            rank,
            dtype: dtype_lora,
        }),
    };
    linear(&shape.with_lora(adapter))
}

/// One-time merge `W += alpha * A @ B` for a `(k, n)` weight: the adapter
/// product, the alpha scaling and the accumulate.
pub fn lora_merge(k: u64, n: u64, rank: u64, dtype_wts: DataType, dtype_lora: DataType) -> Result<StatsDelta> {
    if k == 0 || n == 0 || rank == 0 {
        return Err(shape_err("lora merge dimensions must be at least 1"));
    }
    Ok(StatsDelta::kernel(
        2 * k * rank * n + 2 * k * n,
        dtype_wts.size_of(k * n) + dtype_lora.size_of(k * rank + rank * n),
        dtype_wts.size_of(k * n),
    ))
}

/// Reciprocal by Newton iteration.
pub fn inverse(num_el: u64, dtype: DataType, consts: &OpConstants) -> Result<StatsDelta> {
    unary("inverse", num_el, consts.inverse_iters, dtype)
}

/// Reciprocal square root by Newton iteration.
pub fn inv_sqrt(num_el: u64, dtype: DataType, consts: &OpConstants) -> Result<StatsDelta> {
    unary("inv_sqrt", num_el, consts.inverse_iters, dtype)
}

fn unary(what: &str, num_el: u64, ops_per_el: u64, dtype: DataType) -> Result<StatsDelta> {
    if num_el == 0 {
        return Err(shape_err(format!("{what} needs at least one element")));
    }
    Ok(StatsDelta::kernel(
        ops_per_el * num_el,
        dtype.size_of(num_el),
        dtype.size_of(num_el),
    ))
}

/// Rotary embedding over `seq` tokens and `heads` heads. The cos and sin
/// caches (`table_size` rows of `head_dim` each) are streamed in full.
pub fn rope(
    seq: u64,
    heads: u64,
    head_dim: u64,
    table_size: u64,
    dtype: DataType,
    consts: &OpConstants,
) -> Result<StatsDelta> {
    if seq == 0 || heads == 0 || head_dim == 0 || table_size == 0 {
        return Err(shape_err("rope dimensions must be at least 1"));
    }
    let el = seq * heads * head_dim;
    Ok(StatsDelta::kernel(
        consts.rope_ops_per_el * el,
        dtype.size_of(el + 2 * table_size * head_dim),
        dtype.size_of(el),
    ))
}

/// RMSNorm stages: sum of squares, reciprocal root, row scaling, weight.
pub fn rmsnorm_parts(
    seq: u64,
    hidden: u64,
    dtype: DataType,
    mode: Mode,
    consts: &OpConstants,
) -> Result<Vec<Part>> {
    if seq == 0 || hidden == 0 {
        return Err(shape_err("rmsnorm dimensions must be at least 1"));
    }
    let el = seq * hidden;
    let x = dtype.size_of(el);
    let rows = dtype.size_of(seq);
    let mut parts = vec![
        Part::new(
            "norm_sumsq",
            OpClass::Norm,
            StatsDelta::kernel(2 * el, x, rows),
        ),
        Part::new("norm_rsqrt", OpClass::Norm, inv_sqrt(seq, dtype, consts)?),
        Part::new(
            "norm_scale",
            OpClass::Norm,
            StatsDelta::kernel(el, x + rows, x),
        ),
        Part::new(
            "norm_weight",
            OpClass::Norm,
            StatsDelta::kernel(el, x + dtype.size_of(hidden), x),
        ),
    ];
    rmsnorm_group(seq, hidden, dtype).apply_if(mode, &mut parts);
    Ok(parts)
}

pub fn rmsnorm_group(seq: u64, hidden: u64, dtype: DataType) -> FusionGroup {
    let rows = dtype.size_of(seq);
    FusionGroup::new()
        .intermediate(0, &[1], rows)
        .intermediate(1, &[2], rows)
        .intermediate(2, &[3], dtype.size_of(seq * hidden))
}

pub fn rmsnorm(seq: u64, hidden: u64, dtype: DataType, mode: Mode, consts: &OpConstants) -> Result<StatsDelta> {
    rmsnorm_parts(seq, hidden, dtype, mode, consts).map(|p| total(&p))
}

/// Activation function over `num_el` elements.
pub fn activation(
    num_el: u64,
    algo: ActFnAlgo,
    table_size: u64,
    poly_degree: Option<u64>,
    dtype: DataType,
) -> Result<StatsDelta> {
    match algo {
        ActFnAlgo::Pwl => nonlinear_pwl(num_el, table_size, dtype),
        ActFnAlgo::Poly => nonlinear_poly(
            num_el,
            poly_degree.ok_or_else(|| shape_err("polynomial activation needs a degree"))?,
            dtype,
        ),
    }
}

/// Row softmax stages over a `(rows, cols)` tensor: exponent, row sum,
/// reciprocal, normalization.
#[allow(clippy::too_many_arguments)]
pub fn softmax_parts(
    rows: u64,
    cols: u64,
    algo: ActFnAlgo,
    table_size: u64,
    poly_degree: Option<u64>,
    dtype: DataType,
    mode: Mode,
    consts: &OpConstants,
) -> Result<Vec<Part>> {
    if rows == 0 || cols == 0 {
        return Err(shape_err("softmax dimensions must be at least 1"));
    }
    let el = rows * cols;
    let x = dtype.size_of(el);
    let r = dtype.size_of(rows);
    let mut parts = vec![
        Part::new(
            "softmax_exp",
            OpClass::Softmax,
            activation(el, algo, table_size, poly_degree, dtype)?,
        ),
        Part::new("softmax_sum", OpClass::Softmax, StatsDelta::kernel(el, x, r)),
        Part::new("softmax_inv", OpClass::Softmax, inverse(rows, dtype, consts)?),
        Part::new(
            "softmax_norm",
            OpClass::Softmax,
            StatsDelta::kernel(el, x + r, x),
        ),
    ];
    softmax_group(rows, cols, dtype).apply_if(mode, &mut parts);
    Ok(parts)
}

pub fn softmax_group(rows: u64, cols: u64, dtype: DataType) -> FusionGroup {
    let r = dtype.size_of(rows);
    FusionGroup::new()
        .intermediate(0, &[1, 3], dtype.size_of(rows * cols))
        .intermediate(1, &[2], r)
        .intermediate(2, &[3], r)
}

#[allow(clippy::too_many_arguments)]
pub fn softmax(
    rows: u64,
    cols: u64,
    algo: ActFnAlgo,
    table_size: u64,
    poly_degree: Option<u64>,
    dtype: DataType,
    mode: Mode,
    consts: &OpConstants,
) -> Result<StatsDelta> {
    softmax_parts(rows, cols, algo, table_size, poly_degree, dtype, mode, consts).map(|p| total(&p))
}

/// Gated MLP shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub seq: u64,
    pub hidden: u64,
    pub inter: u64,
    pub dtype_in: DataType,
    pub dtype_wts: DataType,
    pub group: Option<u64>,
    pub bias: bool,
    pub lora: Option<LoraAdapter>,
    pub actfn: ActFnAlgo,
    pub table_size: u64,
    pub poly_degree: Option<u64>,
}

/// gate and up projections, activation, gating multiply, down projection.
/// Fused mode runs activation and gating as one kernel.
pub fn mlp_parts(s: &MlpShape, mode: Mode) -> Result<Vec<Part>> {
    let proj = |k: u64, n: u64| {
        linear(
            &LinearShape::dense(s.seq, k, n, s.dtype_in)
                .with_weights(s.dtype_wts, s.group)
                .with_bias(s.bias)
                .with_lora(s.lora),
        )
    };
    let el = s.seq * s.inter;
    let mut parts = vec![
        Part::new("gate_proj", OpClass::Gemm, proj(s.hidden, s.inter)?),
        Part::new("up_proj", OpClass::Gemm, proj(s.hidden, s.inter)?),
        Part::new(
            "act_fn",
            OpClass::Nonlinear,
            activation(el, s.actfn, s.table_size, s.poly_degree, s.dtype_in)?,
        ),
        Part::new(
            "gate_mul",
            OpClass::Elementwise,
            elementwise(s.seq, s.inter, s.dtype_in, 2)?,
        ),
        Part::new("down_proj", OpClass::Gemm, proj(s.inter, s.hidden)?),
    ];
    if mode == Mode::Fused {
        FusionGroup::new()
            .intermediate(0, &[1], s.dtype_in.size_of(el))
            .apply(&mut parts[2..4]);
    }
    Ok(parts)
}

pub fn mlp(s: &MlpShape, mode: Mode) -> Result<StatsDelta> {
    mlp_parts(s, mode).map(|p| total(&p))
}

/// Online Walsh-Hadamard rotation of `seq` rows of width `k`.
pub fn hadamard(seq: u64, k: u64, dtype: DataType) -> Result<StatsDelta> {
    if seq == 0 || k == 0 {
        return Err(shape_err("hadamard dimensions must be at least 1"));
    }
    let el = seq * k;
    let log2k = u64::from(k.next_power_of_two().trailing_zeros());
    Ok(StatsDelta::kernel(
        2 * el * log2k,
        dtype.size_of(el),
        dtype.size_of(el),
    ))
}
