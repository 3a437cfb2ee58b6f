//! Statistics database: hardware-agnostic counters per operator and phase.
//!
//! Every operator model returns a [`StatsDelta`]. The simulator tags each
//! delta with the operator name, its class, the run phase and the execution
//! mode, and appends it to a [`StatsDb`]. Aggregation into a [`RunSummary`]
//! is order independent and exact: op counts are integers and byte counts are
//! kept in bits so that 4-bit datatypes never round.

use std::collections::BTreeMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An exact byte quantity, stored in bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bytes(u64);

impl Bytes {
    pub const ZERO: Bytes = Bytes(0);

    pub const fn from_bits(bits: u64) -> Self {
        Bytes(bits)
    }

    pub const fn from_bytes(bytes: u64) -> Self {
        Bytes(bytes * 8)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    /// The byte count if it is integral.
    pub fn whole(self) -> Option<u64> {
        self.0.is_multiple_of(8).then_some(self.0 / 8)
    }

    /// Rendered byte count; fractional bytes round up.
    pub fn ceil_bytes(self) -> u64 {
        self.0.div_ceil(8)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 8.0
    }

    pub fn saturating_sub(self, other: Bytes) -> Bytes {
        Bytes(self.0.saturating_sub(other.0))
    }
}

impl Add for Bytes {
    type Output = Bytes;
    fn add(self, rhs: Bytes) -> Bytes {
        Bytes(self.0 + rhs.0)
    }
}

impl AddAssign for Bytes {
    fn add_assign(&mut self, rhs: Bytes) {
        self.0 += rhs.0;
    }
}

impl Mul<u64> for Bytes {
    type Output = Bytes;
    fn mul(self, rhs: u64) -> Bytes {
        Bytes(self.0 * rhs)
    }
}

impl Sum for Bytes {
    fn sum<I: Iterator<Item = Bytes>>(iter: I) -> Bytes {
        iter.fold(Bytes::ZERO, Add::add)
    }
}

impl fmt::Display for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.ceil_bytes())
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.ceil_bytes())
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        u64::deserialize(d).map(Bytes::from_bytes)
    }
}

/// Counters produced by one operator invocation (or a sum of them).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsDelta {
    pub opcount: u64,
    pub mem_rd: Bytes,
    pub mem_wr: Bytes,
    pub kv_rd: Bytes,
    pub kv_wr: Bytes,
    pub dispatches: u64,
}

impl StatsDelta {
    pub const ZERO: StatsDelta = StatsDelta {
        opcount: 0,
        mem_rd: Bytes::ZERO,
        mem_wr: Bytes::ZERO,
        kv_rd: Bytes::ZERO,
        kv_wr: Bytes::ZERO,
        dispatches: 0,
    };

    /// A single-dispatch kernel.
    pub fn kernel(opcount: u64, mem_rd: Bytes, mem_wr: Bytes) -> Self {
        StatsDelta {
            opcount,
            mem_rd,
            mem_wr,
            dispatches: 1,
            ..StatsDelta::ZERO
        }
    }

    /// All bytes moved: activations, parameters and KV cache, both directions.
    pub fn traffic(&self) -> Bytes {
        self.mem_rd + self.mem_wr + self.kv_rd + self.kv_wr
    }

    /// Bytes read, including KV cache reads.
    pub fn reads(&self) -> Bytes {
        self.mem_rd + self.kv_rd
    }

    pub fn scaled(self, factor: u64) -> Self {
        StatsDelta {
            opcount: self.opcount * factor,
            mem_rd: self.mem_rd * factor,
            mem_wr: self.mem_wr * factor,
            kv_rd: self.kv_rd * factor,
            kv_wr: self.kv_wr * factor,
            dispatches: self.dispatches * factor,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == StatsDelta::ZERO
    }
}

impl Add for StatsDelta {
    type Output = StatsDelta;
    fn add(mut self, rhs: StatsDelta) -> StatsDelta {
        self += rhs;
        self
    }
}

impl AddAssign for StatsDelta {
    fn add_assign(&mut self, rhs: StatsDelta) {
        self.opcount += rhs.opcount;
        self.mem_rd += rhs.mem_rd;
        self.mem_wr += rhs.mem_wr;
        self.kv_rd += rhs.kv_rd;
        self.kv_wr += rhs.kv_wr;
        self.dispatches += rhs.dispatches;
    }
}

impl Sum for StatsDelta {
    fn sum<I: Iterator<Item = StatsDelta>>(iter: I) -> StatsDelta {
        iter.fold(StatsDelta::ZERO, Add::add)
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $label)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($label => Ok($name::$variant),)+
                    other => Err(Error::Import(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

string_enum!(
    /// Operator class used for aggregation and per-class efficiencies.
    OpClass {
        Gemm => "gemm",
        Bmm => "bmm",
        Softmax => "softmax",
        Elementwise => "elementwise",
        Nonlinear => "nonlinear",
        Embedding => "embedding",
        Norm => "norm",
        Rope => "rope",
        Other => "other",
    }
);

string_enum!(
    /// Whether intermediate tensors between chained operators hit memory.
    Mode {
        Eager => "eager",
        Fused => "fused",
    }
);

/// Position of a record within a run. Ordering follows run order:
/// prefill, then decode, then chunks and tokens by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Prefill,
    Decode,
    Chunk(u32),
    Token(u32),
}

impl Phase {
    pub fn is_token(self) -> bool {
        matches!(self, Phase::Token(_))
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Prefill => f.write_str("prefill"),
            Phase::Decode => f.write_str("decode"),
            Phase::Chunk(i) => write!(f, "chunk_{i}"),
            Phase::Token(t) => write!(f, "token_{t}"),
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Import(format!("unknown phase `{s}`"));
        match s {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            _ => {
                if let Some(i) = s.strip_prefix("chunk_") {
                    i.parse().map(Phase::Chunk).map_err(|_| bad())
                } else if let Some(t) = s.strip_prefix("token_") {
                    t.parse().map(Phase::Token).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl Serialize for Phase {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsRecord {
    pub op_name: String,
    pub op_class: OpClass,
    pub phase: Phase,
    pub mode: Mode,
    pub delta: StatsDelta,
}

/// Which phases a summary covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhaseFilter {
    #[default]
    Any,
    Prefill,
    /// Decode records, including per-token timeline records.
    Decode,
    Chunks,
    Exact(Phase),
}

impl PhaseFilter {
    pub fn matches(self, phase: Phase) -> bool {
        match self {
            PhaseFilter::Any => true,
            PhaseFilter::Prefill => phase == Phase::Prefill,
            PhaseFilter::Decode => matches!(phase, Phase::Decode | Phase::Token(_)),
            PhaseFilter::Chunks => matches!(phase, Phase::Chunk(_)),
            PhaseFilter::Exact(p) => phase == p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordFilter {
    pub phase: PhaseFilter,
    pub class: Option<OpClass>,
}

impl RecordFilter {
    pub fn phase(phase: PhaseFilter) -> Self {
        RecordFilter { phase, class: None }
    }

    fn matches(&self, rec: &StatsRecord) -> bool {
        self.phase.matches(rec.phase) && self.class.is_none_or(|c| c == rec.op_class)
    }
}

/// Append-only store of operator records for one run.
#[derive(Debug, Clone, Default)]
pub struct StatsDb {
    records: Vec<StatsRecord>,
    totals: StatsDelta,
}

impl StatsDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, rec: StatsRecord) {
        self.totals += rec.delta;
        self.records.push(rec);
    }

    /// Shorthand mirroring the shape of a per-operator stats update call.
    pub fn update(
        &mut self,
        op_name: &str,
        op_class: OpClass,
        phase: Phase,
        mode: Mode,
        delta: StatsDelta,
    ) {
        self.record(StatsRecord {
            op_name: op_name.to_string(),
            op_class,
            phase,
            mode,
            delta,
        });
    }

    pub fn records(&self) -> &[StatsRecord] {
        &self.records
    }

    pub fn totals(&self) -> StatsDelta {
        self.totals
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn summarize(&self, filter: RecordFilter) -> RunSummary {
        RunSummary::from_records(self.records.iter().filter(|r| filter.matches(r)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub by_class: BTreeMap<OpClass, StatsDelta>,
}

impl PhaseSummary {
    pub fn total(&self) -> StatsDelta {
        self.by_class.values().copied().sum()
    }
}

/// Aggregated view of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RunSummary {
    pub totals: StatsDelta,
    pub by_class: BTreeMap<OpClass, StatsDelta>,
    #[serde(default)]
    pub by_op: BTreeMap<String, StatsDelta>,
    pub phases: Vec<PhaseSummary>,
    pub per_token: Vec<StatsDelta>,
    pub dispatch_total: u64,
}

impl RunSummary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a StatsRecord>) -> Self {
        let mut by_phase: BTreeMap<Phase, BTreeMap<OpClass, StatsDelta>> = BTreeMap::new();
        let mut by_op: BTreeMap<String, StatsDelta> = BTreeMap::new();
        for rec in records {
            *by_phase
                .entry(rec.phase)
                .or_default()
                .entry(rec.op_class)
                .or_default() += rec.delta;
            *by_op.entry(rec.op_name.clone()).or_default() += rec.delta;
        }
        let phases = by_phase
            .into_iter()
            .map(|(phase, by_class)| PhaseSummary { phase, by_class })
            .collect();
        let mut summary = RunSummary::from_phases(phases);
        summary.by_op = by_op;
        summary
    }

    /// Rebuilds the derived totals from a per-phase breakdown.
    pub fn from_phases(mut phases: Vec<PhaseSummary>) -> Self {
        phases.sort_by_key(|p| p.phase);
        let mut by_class: BTreeMap<OpClass, StatsDelta> = BTreeMap::new();
        for p in &phases {
            for (class, delta) in &p.by_class {
                *by_class.entry(*class).or_default() += *delta;
            }
        }
        let totals: StatsDelta = by_class.values().copied().sum();
        let per_token = phases
            .iter()
            .filter(|p| p.phase.is_token())
            .map(PhaseSummary::total)
            .collect();
        RunSummary {
            dispatch_total: totals.dispatches,
            totals,
            by_class,
            by_op: BTreeMap::new(),
            phases,
            per_token,
        }
    }

    pub fn class(&self, class: OpClass) -> StatsDelta {
        self.by_class.get(&class).copied().unwrap_or_default()
    }

    /// Percentage of the total opcount spent in `class`.
    pub fn opcount_share(&self, class: OpClass) -> f64 {
        if self.totals.opcount == 0 {
            return 0.0;
        }
        100.0 * self.class(class).opcount as f64 / self.totals.opcount as f64
    }

    pub fn phase(&self, phase: Phase) -> Option<&PhaseSummary> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for p in &self.phases {
            for (class, d) in &p.by_class {
                w.write_record([
                    p.phase.to_string(),
                    class.to_string(),
                    d.opcount.to_string(),
                    d.mem_rd.to_string(),
                    d.mem_wr.to_string(),
                    d.kv_rd.to_string(),
                    d.kv_wr.to_string(),
                    d.dispatches.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        if r.headers()?.iter().ne(CSV_HEADER) {
            return Err(Error::Import(format!(
                "expected header {}",
                CSV_HEADER.join(",")
            )));
        }
        let mut by_phase: BTreeMap<Phase, BTreeMap<OpClass, StatsDelta>> = BTreeMap::new();
        for row in r.records() {
            let row = row?;
            let int = |i: usize| -> Result<u64> {
                row[i]
                    .parse()
                    .map_err(|_| Error::Import(format!("bad integer `{}`", &row[i])))
            };
            let delta = StatsDelta {
                opcount: int(2)?,
                mem_rd: Bytes::from_bytes(int(3)?),
                mem_wr: Bytes::from_bytes(int(4)?),
                kv_rd: Bytes::from_bytes(int(5)?),
                kv_wr: Bytes::from_bytes(int(6)?),
                dispatches: int(7)?,
            };
            *by_phase
                .entry(row[0].parse()?)
                .or_default()
                .entry(row[1].parse()?)
                .or_default() += delta;
        }
        Ok(RunSummary::from_phases(
            by_phase
                .into_iter()
                .map(|(phase, by_class)| PhaseSummary { phase, by_class })
                .collect(),
        ))
    }

    pub fn render(&self, format: ExportFormat) -> Result<String> {
        match format {
            ExportFormat::Json => self.to_json(),
            ExportFormat::Csv => self.to_csv(),
        }
    }

    pub fn export(&self, format: ExportFormat, path: &Path) -> Result<()> {
        std::fs::write(path, self.render(format)?)?;
        Ok(())
    }

    pub fn import(format: ExportFormat, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match format {
            ExportFormat::Json => Self::from_json(&text),
            ExportFormat::Csv => Self::from_csv(&text),
        }
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "phase",
    "op_class",
    "opcount",
    "mem_rd",
    "mem_wr",
    "kv_rd",
    "kv_wr",
    "dispatches",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::Constraint(format!(
                "format must be json or csv, got `{other}`"
            ))),
        }
    }
}
