//! Design variables: the user-facing hardware knobs, read from a TOML file.
//!
//! ```toml
//! bits = 3
//! time_steps = 4
//! clamp_range = 3.0
//! conv_replicas = 1
//!
//! [pm_width]
//! conv5 = 31
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{QuantConfig, DEFAULT_PSUM_HEADROOM};
use crate::error::{Error, Result};
use crate::model::PoolMode;

/// Largest number of processing modules a module-select mask can address.
pub const MAX_MODULES: usize = 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignVars {
    pub bits: u32,
    pub time_steps: u32,
    pub clamp_range: f64,
    /// Copies of every convolution module.
    pub conv_replicas: usize,
    /// On-chip memory budget in bits for weight ROMs plus activation buffers.
    pub onchip_capacity_bits: u64,
    /// Report-only clock used to convert cycles to microseconds.
    pub clock_mhz: f64,
    /// Pool mode for manifests that leave it out.
    pub pool_mode_default: PoolMode,
    pub psum_headroom: u32,
    /// Extra cycles per kernel fetched from external memory.
    pub external_penalty_cycles: u32,
    /// Cycles to move one kernel (one weight-memory row) into a module.
    pub kernel_load_cycles: u32,
    /// Read width of a linear-layer weight row; bounds the parallel features.
    pub weight_row_bits: u32,
    /// Column count overrides keyed by module (`conv5`, `pool2`).
    pub pm_width: BTreeMap<String, usize>,
    pub reorder: bool,
    pub intra_parallel: bool,
    pub enable_bias: bool,
    /// Stage weights from external memory even when they would fit on chip.
    pub force_external: bool,
}

impl Default for DesignVars {
    fn default() -> Self {
        Self {
            bits: 3,
            time_steps: 4,
            clamp_range: 3.0,
            conv_replicas: 1,
            onchip_capacity_bits: 10_000_000,
            clock_mhz: 200.0,
            pool_mode_default: PoolMode::Avg,
            psum_headroom: DEFAULT_PSUM_HEADROOM,
            external_penalty_cycles: 20,
            kernel_load_cycles: 2,
            weight_row_bits: 72,
            pm_width: BTreeMap::new(),
            reorder: true,
            intra_parallel: true,
            enable_bias: false,
            force_external: false,
        }
    }
}

impl DesignVars {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let dv: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("design variables: {e}")))?;
        dv.validate()?;
        Ok(dv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("design variables always serialize")
    }

    pub fn quant(&self) -> QuantConfig {
        QuantConfig { bits: self.bits, time_steps: self.time_steps, clamp_range: self.clamp_range }
    }

    pub fn validate(&self) -> Result<()> {
        self.quant().validate()?;
        if self.conv_replicas == 0 || self.conv_replicas > MAX_MODULES {
            return Err(Error::Config(format!("conv_replicas must be in 1..={MAX_MODULES}")));
        }
        if !(self.clock_mhz > 0.0 && self.clock_mhz.is_finite()) {
            return Err(Error::Config("clock_mhz must be positive".into()));
        }
        if self.weight_row_bits < self.bits {
            return Err(Error::Config("weight_row_bits must hold at least one weight".into()));
        }
        if let Some((k, _)) = self.pm_width.iter().find(|(_, &v)| v == 0) {
            return Err(Error::Config(format!("pm_width.{k} must be positive")));
        }
        Ok(())
    }

    pub fn with_replicas(mut self, replicas: usize) -> Self {
        self.conv_replicas = replicas;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let dv = DesignVars::from_toml_str("conv_replicas = 4\n[pm_width]\nconv5 = 31\n").unwrap();
        assert_eq!(dv.bits, 3);
        assert_eq!(dv.conv_replicas, 4);
        assert_eq!(dv.pm_width["conv5"], 31);
        assert_eq!(DesignVars::from_toml_str(&dv.to_toml_string()).unwrap(), dv);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(DesignVars::from_toml_str("bits = 0").is_err());
        assert!(DesignVars::from_toml_str("conv_replicas = 0").is_err());
        assert!(DesignVars::from_toml_str("unknown = 1").is_err());
        assert!(matches!(DesignVars::from_toml_str("bits = ").unwrap_err(), Error::Parse(_)));
    }
}
