//! Target hardware and achieved efficiencies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::OpClass;

/// Peak capabilities of an accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    /// Tera-operations per second.
    pub peak_tops: f64,
    /// Memory bandwidth in GB/s, with GB = 2^30 bytes.
    pub peak_bw: f64,
    /// Fixed cost per kernel dispatch, in seconds.
    #[serde(default)]
    pub dispatch_latency: f64,
    /// Local memory per dispatch; when set, kernels are tiled through it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onchip_bytes: Option<u64>,
}

impl HardwareSpec {
    pub fn new(peak_tops: f64, peak_bw: f64) -> Self {
        HardwareSpec {
            peak_tops,
            peak_bw,
            dispatch_latency: 0.0,
            onchip_bytes: None,
        }
    }

    pub fn with_dispatch_latency(mut self, seconds: f64) -> Self {
        self.dispatch_latency = seconds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_tops.is_finite() && self.peak_tops > 0.0) {
            return Err(Error::Hardware(format!("peak_tops must be positive, got {}", self.peak_tops)));
        }
        if !(self.peak_bw.is_finite() && self.peak_bw > 0.0) {
            return Err(Error::Hardware(format!("peak_bw must be positive, got {}", self.peak_bw)));
        }
        if !(self.dispatch_latency.is_finite() && self.dispatch_latency >= 0.0) {
            return Err(Error::Hardware(format!(
                "dispatch_latency must be non-negative, got {}",
                self.dispatch_latency
            )));
        }
        if self.onchip_bytes == Some(0) {
            return Err(Error::Hardware("onchip_bytes must be positive".into()));
        }
        Ok(())
    }
}

/// Fraction of peak compute (`ec`) and bandwidth (`em`) achieved per op
/// class. Missing classes fall back to `default_ec` / `default_em`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyProfile {
    #[serde(default)]
    pub ec: BTreeMap<OpClass, f64>,
    #[serde(default)]
    pub em: BTreeMap<OpClass, f64>,
    #[serde(default = "one")]
    pub default_ec: f64,
    #[serde(default = "one")]
    pub default_em: f64,
    /// Bandwidth efficiency applied to whole-token memory traffic.
    #[serde(default = "one")]
    pub em_avg: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for EfficiencyProfile {
    fn default() -> Self {
        EfficiencyProfile::uniform(1.0, 1.0)
    }
}

impl EfficiencyProfile {
    /// Same compute and memory efficiency for every class.
    pub fn uniform(ec: f64, em: f64) -> Self {
        EfficiencyProfile {
            ec: BTreeMap::new(),
            em: BTreeMap::new(),
            default_ec: ec,
            default_em: em,
            em_avg: em,
        }
    }

    pub fn ec(&self, class: OpClass) -> f64 {
        self.ec.get(&class).copied().unwrap_or(self.default_ec)
    }

    pub fn em(&self, class: OpClass) -> f64 {
        self.em.get(&class).copied().unwrap_or(self.default_em)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Hardware(format!("{what} must be in (0, 1], got {v}")))
            }
        };
        check("default_ec", self.default_ec)?;
        check("default_em", self.default_em)?;
        check("em_avg", self.em_avg)?;
        for (c, v) in &self.ec {
            check(&format!("ec[{c}]"), *v)?;
        }
        for (c, v) in &self.em {
            check(&format!("em[{c}]"), *v)?;
        }
        Ok(())
    }
}

/// Hardware plus efficiencies, as stored in a `--hw` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    #[serde(flatten)]
    pub hardware: HardwareSpec,
    #[serde(flatten)]
    pub efficiency: EfficiencyProfile,
}

impl HardwareProfile {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: HardwareProfile =
            serde_json::from_str(text).map_err(|e| Error::Hardware(e.to_string()))?;
        p.hardware.validate()?;
        p.efficiency.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
