//! Overlay architecture template: unit counts, tile geometry, and bandwidths.

use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ARCH_FORMAT_VERSION: u32 = 1;

/// Vector-processor composition inside one MMU. Fixed at 4x4x4 by default
/// (static stream routing), carried as data so alternate grids can be swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmuGrid {
    pub rows: u64,
    pub cols: u64,
    pub depth: u64,
}

impl MmuGrid {
    pub fn procs(&self) -> u64 {
        self.rows * self.cols * self.depth
    }
}

impl Default for MmuGrid {
    fn default() -> Self {
        Self { rows: 4, cols: 4, depth: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub num_lmu: u32,
    pub num_mmu: u32,
    pub num_sfu: u32,
    /// Per-processor tile dims in elements.
    pub aie_m: u64,
    pub aie_k: u64,
    pub aie_n: u64,
    #[serde(default)]
    pub mmu_grid: MmuGrid,
    /// MACs per cycle for one vector processor.
    pub macs_per_cycle_per_proc: u64,
    /// Aggregate off-chip bandwidth, bytes per cycle.
    pub dram_bandwidth: u64,
    /// Per stream port of the fully connected network, bytes per cycle.
    pub stream_width: u64,
    /// Bytes per LMU.
    pub lmu_capacity: u64,
    /// Bytes per element (4 for FP32).
    pub elem_size: u64,
    /// Elements per cycle per SFU.
    pub sfu_throughput: u64,
    /// Fixed cost added to every MMU launch (pipeline fill/drain), cycles.
    #[serde(default)]
    pub launch_overhead: u64,
    /// Token capacity of each stream channel in the simulator.
    #[serde(default = "default_stream_capacity")]
    pub stream_capacity: usize,
    /// Cycles per ready-list poll when a load waits on an unresolved dependency.
    #[serde(default = "default_sync_poll_cost")]
    pub sync_poll_cost: u64,
}

fn default_format_version() -> u32 {
    ARCH_FORMAT_VERSION
}

fn default_stream_capacity() -> usize {
    4
}

fn default_sync_poll_cost() -> u64 {
    1
}

#[derive(Debug, thiserror::Error)]
pub enum ArchError {
    #[error("invalid arch config: field `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl ArchConfig {
    /// The reference instantiation: 6 MMUs of 4x4x4 tiles, 14 LMUs, 3 SFUs.
    pub fn default_vck190() -> Self {
        Self {
            format_version: ARCH_FORMAT_VERSION,
            num_lmu: 14,
            num_mmu: 6,
            num_sfu: 3,
            aie_m: 8,
            aie_k: 8,
            aie_n: 8,
            mmu_grid: MmuGrid::default(),
            macs_per_cycle_per_proc: 8,
            dram_bandwidth: 16,
            stream_width: 16,
            lmu_capacity: 128 * 1024,
            elem_size: 4,
            sfu_throughput: 8,
            launch_overhead: 0,
            stream_capacity: 4,
            sync_poll_cost: 1,
        }
    }

    /// The worked-example instantiation: 7 LMUs, 2 MMUs, 1 SFU.
    pub fn case_study() -> Self {
        Self { num_lmu: 7, num_mmu: 2, num_sfu: 1, ..Self::default_vck190() }
    }

    /// Storage-granularity tile dims: one MMU tile without aggregation.
    pub fn storage_tile(&self) -> (u64, u64, u64) {
        (
            self.aie_m * self.mmu_grid.rows,
            self.aie_k * self.mmu_grid.cols,
            self.aie_n * self.mmu_grid.depth,
        )
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let err = |field: &'static str, reason: &str| {
            Err(ArchError::Validation { field, reason: reason.to_string() })
        };
        if self.num_lmu == 0 {
            return err("num_lmu", "must be positive");
        }
        if self.num_mmu == 0 {
            return err("num_mmu", "must be positive");
        }
        // num_sfu may be zero: a pure-matmul overlay is valid, non-linear
        // layers just have no feasible mode on it.
        for (field, v) in [
            ("aie_m", self.aie_m),
            ("aie_k", self.aie_k),
            ("aie_n", self.aie_n),
            ("macs_per_cycle_per_proc", self.macs_per_cycle_per_proc),
            ("dram_bandwidth", self.dram_bandwidth),
            ("stream_width", self.stream_width),
            ("elem_size", self.elem_size),
            ("sfu_throughput", self.sfu_throughput),
        ] {
            if v == 0 {
                return err(field, "must be positive");
            }
        }
        if self.mmu_grid.rows == 0 || self.mmu_grid.cols == 0 || self.mmu_grid.depth == 0 {
            return err("mmu_grid", "all grid dims must be positive");
        }
        if self.stream_capacity == 0 {
            return err("stream_capacity", "must be positive");
        }
        let (sm, sk, sn) = self.storage_tile();
        let largest_tile = (sm * sk).max(sk * sn).max(sm * sn) * self.elem_size;
        if self.lmu_capacity < largest_tile {
            return err(
                "lmu_capacity",
                "must hold at least one MMU-granularity tile of the largest operand",
            );
        }
        Ok(())
    }

    /// Stable hash over the serialized config; embedded in instruction binaries.
    pub fn config_hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("arch serialization cannot fail");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ArchConfig =
            serde_json::from_str(&text).map_err(|e| ArchError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchError> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ArchConfig::default_vck190();
        cfg.validate().unwrap();
        assert_eq!((cfg.num_lmu, cfg.num_mmu, cfg.num_sfu), (14, 6, 3));
        assert_eq!(cfg.mmu_grid, MmuGrid { rows: 4, cols: 4, depth: 4 });
        assert_eq!(cfg.elem_size, 4);
    }

    #[test]
    fn case_study_override() {
        let cfg = ArchConfig::case_study();
        cfg.validate().unwrap();
        assert_eq!((cfg.num_lmu, cfg.num_mmu, cfg.num_sfu), (7, 2, 1));
    }

    #[test]
    fn zero_mmu_rejected() {
        let cfg = ArchConfig { num_mmu: 0, ..ArchConfig::default_vck190() };
        match cfg.validate() {
            Err(ArchError::Validation { field, .. }) => assert_eq!(field, "num_mmu"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn undersized_lmu_rejected() {
        let cfg = ArchConfig { lmu_capacity: 64, ..ArchConfig::default_vck190() };
        match cfg.validate() {
            Err(ArchError::Validation { field, .. }) => assert_eq!(field, "lmu_capacity"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn config_file_round_trip() {
        let dir = std::env::temp_dir().join("dora_arch_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("arch.json");
        let cfg = ArchConfig::case_study();
        cfg.save(&path).unwrap();
        let loaded = ArchConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
    }
}
