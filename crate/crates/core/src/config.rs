//! Hardware and model configuration, validation, and config-file loading.
//!
//! Config files are JSON objects. A hardware file holds the fields of
//! [`HardwareConfig`], a model file those of [`ModelConfig`]; optional fields
//! fall back to the documented defaults. See `docs/config_schema.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Violation};

fn default_elem_bytes() -> u64 {
    2
}

fn default_prefetch_depth() -> usize {
    1
}

fn default_flow_window() -> usize {
    2
}

fn default_matrices() -> u64 {
    3
}

/// Multi-chiplet package description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub macs_per_chiplet: u64,
    pub clock_hz: f64,
    pub buffer_bytes_per_chiplet: u64,
    pub ddr_bw_bytes_per_s_per_channel: f64,
    pub ddr_channels: usize,
    /// Bandwidth of one directed D2D link.
    pub d2d_bw_bytes_per_s: f64,
    pub d2d_hop_latency_s: f64,
    #[serde(default = "default_elem_bytes")]
    pub weight_bytes_per_element: u64,
    /// Overrides the MAC-derived compute rate (2 ops per MAC) when set.
    #[serde(default)]
    pub effective_tops: Option<f64>,
    /// Fixed control cost charged once per micro-slice DDR load, D2D transfer
    /// and compute dispatch.
    #[serde(default)]
    pub microslice_overhead_s: f64,
    /// Maximum DDR-loaded micro-slices per chiplet that are in flight or
    /// waiting for their first compute.
    #[serde(default = "default_prefetch_depth")]
    pub ddr_prefetch_depth: usize,
    /// Admission window per chiplet, in largest micro-slices, on top of one
    /// slot per other chiplet: a load starts only if committed bytes on
    /// every chiplet it visits stay within the window.
    #[serde(default = "default_flow_window")]
    pub flow_window_slices: usize,
    /// Fixed latency of one scheduler dispatch decision.
    #[serde(default)]
    pub scheduler_latency_s: f64,
}

impl HardwareConfig {
    /// The 2x2 test-chip package: 2048 MACs at 800 MHz per die, four
    /// 25.6 GB/s DDR channels, 288 GB/s D2D links with 4.02 ns hop latency.
    pub fn test_chip() -> Self {
        HardwareConfig {
            grid_rows: 2,
            grid_cols: 2,
            macs_per_chiplet: 2048,
            clock_hz: 800e6,
            buffer_bytes_per_chiplet: 16 * 1024 * 1024,
            ddr_bw_bytes_per_s_per_channel: 25.6e9,
            ddr_channels: 4,
            d2d_bw_bytes_per_s: 288e9,
            d2d_hop_latency_s: 4.02e-9,
            weight_bytes_per_element: 2,
            effective_tops: None,
            microslice_overhead_s: 0.5e-6,
            ddr_prefetch_depth: 1,
            flow_window_slices: 2,
            scheduler_latency_s: 0.0,
        }
    }

    pub fn num_chiplets(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Same package re-gridded, keeping one DDR channel per die when the
    /// original had one per die.
    pub fn with_grid(&self, rows: usize, cols: usize) -> Self {
        let per_die = self.ddr_channels == self.num_chiplets();
        let mut hw = self.clone();
        hw.grid_rows = rows;
        hw.grid_cols = cols;
        if per_die {
            hw.ddr_channels = rows * cols;
        }
        hw
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        load_json(path.as_ref())
    }
}

/// Shapes of one MoE model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub d_model: u64,
    pub d_expert: u64,
    #[serde(default = "default_matrices")]
    pub matrices_per_expert: u64,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_layers: usize,
    pub micro_slices_per_expert: usize,
    pub attention_heads: usize,
}

impl ModelConfig {
    fn preset(
        name: &str,
        d_model: u64,
        d_expert: u64,
        e: usize,
        k: usize,
        heads: usize,
        layers: usize,
    ) -> Self {
        ModelConfig {
            name: name.to_string(),
            d_model,
            d_expert,
            matrices_per_expert: 3,
            num_experts: e,
            top_k: k,
            num_layers: layers,
            micro_slices_per_expert: 16,
            attention_heads: heads,
        }
    }

    pub fn phi35() -> Self {
        Self::preset("phi35", 4096, 3200, 16, 2, 32, 32).with_micro_slices(32)
    }

    pub fn yuan2_m32() -> Self {
        Self::preset("yuan2-m32", 2048, 4096, 32, 2, 16, 24)
    }

    pub fn deepseek_moe() -> Self {
        Self::preset("deepseek-moe", 2048, 1408, 64, 8, 16, 28)
    }

    pub fn qwen3_a3b() -> Self {
        Self::preset("qwen3-a3b", 2048, 768, 128, 8, 32, 48)
    }

    /// All four shipped model presets, smallest expert count first.
    pub fn presets() -> Vec<Self> {
        vec![
            Self::phi35(),
            Self::yuan2_m32(),
            Self::deepseek_moe(),
            Self::qwen3_a3b(),
        ]
    }

    /// Divides the hidden and expert widths by `factor`.
    pub fn scaled_down(&self, factor: u64) -> Self {
        let mut m = self.clone();
        m.d_model = (m.d_model / factor).max(1);
        m.d_expert = (m.d_expert / factor).max(1);
        m
    }

    pub fn with_micro_slices(&self, m: usize) -> Self {
        let mut c = self.clone();
        c.micro_slices_per_expert = m;
        c
    }

    pub fn expert_elements(&self) -> u64 {
        self.matrices_per_expert * self.d_model * self.d_expert
    }

    /// `matrices_per_expert * d_model * d_expert * elem_bytes`.
    pub fn expert_weight_bytes(&self, elem_bytes: u64) -> u64 {
        self.expert_elements() * elem_bytes
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        load_json(path.as_ref())
    }
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Checks every invariant of both configs and reports all violations at once.
pub fn validate_configs(
    hw: &HardwareConfig,
    model: &ModelConfig,
) -> Result<(HardwareConfig, ModelConfig), ConfigError> {
    let mut v = Vec::new();
    let mut check = |ok: bool, field: &'static str, reason: &str| {
        if !ok {
            v.push(Violation {
                field,
                reason: reason.to_string(),
            });
        }
    };
    let pos = |x: f64| x.is_finite() && x > 0.0;

    check(hw.grid_rows >= 1, "grid_rows", "must be at least 1");
    check(hw.grid_cols >= 1, "grid_cols", "must be at least 1");
    check(
        hw.num_chiplets() <= 64,
        "grid",
        "at most 64 chiplets are supported",
    );
    check(
        hw.macs_per_chiplet > 0,
        "macs_per_chiplet",
        "must be positive",
    );
    check(pos(hw.clock_hz), "clock_hz", "must be positive");
    check(
        hw.buffer_bytes_per_chiplet > 0,
        "buffer_bytes_per_chiplet",
        "must be positive",
    );
    check(
        pos(hw.ddr_bw_bytes_per_s_per_channel),
        "ddr_bw_bytes_per_s_per_channel",
        "must be positive",
    );
    check(hw.ddr_channels > 0, "ddr_channels", "must be positive");
    check(
        pos(hw.d2d_bw_bytes_per_s),
        "d2d_bw_bytes_per_s",
        "must be positive",
    );
    check(
        pos(hw.d2d_hop_latency_s),
        "d2d_hop_latency_s",
        "must be positive",
    );
    check(
        hw.weight_bytes_per_element > 0,
        "weight_bytes_per_element",
        "must be positive",
    );
    if let Some(t) = hw.effective_tops {
        check(pos(t), "effective_tops", "must be positive when set");
    }
    check(
        hw.microslice_overhead_s.is_finite() && hw.microslice_overhead_s >= 0.0,
        "microslice_overhead_s",
        "must be non-negative",
    );
    check(
        hw.ddr_prefetch_depth >= 1,
        "ddr_prefetch_depth",
        "must be at least 1",
    );
    check(
        hw.flow_window_slices >= 2,
        "flow_window_slices",
        "must be at least 2",
    );
    check(
        hw.scheduler_latency_s.is_finite() && hw.scheduler_latency_s >= 0.0,
        "scheduler_latency_s",
        "must be non-negative",
    );

    check(model.d_model > 0, "d_model", "must be positive");
    check(model.d_expert > 0, "d_expert", "must be positive");
    check(
        model.matrices_per_expert > 0,
        "matrices_per_expert",
        "must be positive",
    );
    check(model.num_experts > 0, "num_experts", "must be positive");
    check(
        model.top_k >= 1 && model.top_k <= model.num_experts,
        "top_k",
        "must satisfy 1 <= top_k <= num_experts",
    );
    check(model.num_layers >= 1, "num_layers", "must be at least 1");
    check(
        model.attention_heads >= 1,
        "attention_heads",
        "must be at least 1",
    );
    check(
        model.micro_slices_per_expert >= 1,
        "micro_slices_per_expert",
        "must be at least 1",
    );

    if model.micro_slices_per_expert >= 1 && model.d_expert > 0 {
        let cols = crate::timing::partition_columns(model.d_expert, model.micro_slices_per_expert);
        match cols {
            None => check(
                false,
                "micro_slices_per_expert",
                "d_expert cannot be split into that many non-empty micro-slices",
            ),
            Some(cols) => {
                let largest = cols.iter().copied().max().unwrap_or(0)
                    * model.matrices_per_expert
                    * model.d_model
                    * hw.weight_bytes_per_element;
                check(
                    hw.buffer_bytes_per_chiplet >= 2 * largest,
                    "buffer_bytes_per_chiplet",
                    &format!("must hold two micro-slices ({} bytes)", 2 * largest),
                );
            }
        }
    }

    if v.is_empty() {
        Ok((hw.clone(), model.clone()))
    } else {
        Err(ConfigError::Invalid(v))
    }
}
