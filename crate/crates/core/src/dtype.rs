//! Element datatypes and their storage widths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Bytes;

/// Storage datatype of a tensor.
///
/// Widths are tracked in bits so that sub-byte formats (int4) stay exact.
/// The `mx*` formats are one byte per element; their shared block scales are
/// charged by the quantized linear model, not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Bf16,
    Fp16,
    Fp32,
    Int16,
    Int8,
    Int4,
    Mxfp8,
    Mxint8,
}

impl DataType {
    pub const ALL: [DataType; 8] = [
        DataType::Bf16,
        DataType::Fp16,
        DataType::Fp32,
        DataType::Int16,
        DataType::Int8,
        DataType::Int4,
        DataType::Mxfp8,
        DataType::Mxint8,
    ];

    pub fn bits(self) -> u64 {
        match self {
            DataType::Fp32 => 32,
            DataType::Bf16 | DataType::Fp16 | DataType::Int16 => 16,
            DataType::Int8 | DataType::Mxfp8 | DataType::Mxint8 => 8,
            DataType::Int4 => 4,
        }
    }

    pub fn bytes_per_element(self) -> f64 {
        self.bits() as f64 / 8.0
    }

    /// Storage for `count` elements of this type.
    pub fn size_of(self, count: u64) -> Bytes {
        Bytes::from_bits(count * self.bits())
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::Bf16 => "bf16",
            DataType::Fp16 => "fp16",
            DataType::Fp32 => "fp32",
            DataType::Int16 => "int16",
            DataType::Int8 => "int8",
            DataType::Int4 => "int4",
            DataType::Mxfp8 => "mxfp8",
            DataType::Mxint8 => "mxint8",
        }
    }

    /// Integer and microscaling formats that need a dequantize step before a
    /// floating point GEMM can consume them.
    pub fn is_quantized(self) -> bool {
        matches!(
            self,
            DataType::Int16 | DataType::Int8 | DataType::Int4 | DataType::Mxfp8 | DataType::Mxint8
        )
    }

    pub fn is_microscaling(self) -> bool {
        matches!(self, DataType::Mxfp8 | DataType::Mxint8)
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DataType::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::UnknownDataType(s.to_string()))
    }
}
