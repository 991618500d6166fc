//! Experiment configuration: a flat `key = value` file with dotted keys.
//! Every key has a default; unknown keys are rejected.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::loadgen::{LoadGenConfig, LoadMode, SearchConfig};
use crate::memory::MemoryConfig;
use crate::nic::NicConfig;
use crate::stack::{KernelPathCosts, PmdConfig, PmdMode, StackKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration_ns: u64,
    /// Upper bound on the time allowed for in-flight frames to return.
    pub drain_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub nic_count: u32,
    pub core_count: u32,
    pub stack: StackKind,
    pub force_bind: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpuConfig {
    pub freq_ghz: f64,
    /// Multiplier on per-packet processing cycles.
    pub work_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub gbps: f64,
    pub latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstConfig {
    pub rate_gbps: f64,
    pub packets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub topology: TopologyConfig,
    pub cpu: CpuConfig,
    pub link: LinkConfig,
    pub nic: NicConfig,
    pub memory: MemoryConfig,
    pub kernel: KernelPathCosts,
    pub pmd: PmdConfig,
    pub loadgen: LoadGenConfig,
    pub search: SearchConfig,
    pub burst: BurstConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            sim: SimConfig { duration_ns: 1_000_000, drain_ns: 5_000_000 },
            topology: TopologyConfig { nic_count: 1, core_count: 1, stack: StackKind::Pmd, force_bind: true },
            cpu: CpuConfig { freq_ghz: 2.0, work_scale: 1.0 },
            link: LinkConfig { gbps: 200.0, latency_ns: 1000 },
            nic: NicConfig::default(),
            memory: MemoryConfig::default(),
            kernel: KernelPathCosts::default(),
            pmd: PmdConfig::default(),
            loadgen: LoadGenConfig::default(),
            search: SearchConfig::default(),
            burst: BurstConfig { rate_gbps: 40.0, packets: 1024 },
            output: OutputConfig { dir: "out".into() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! int_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                let clean = s.replace('_', "");
                let r = match clean.strip_prefix("0x").or_else(|| clean.strip_prefix("0X")) {
                    Some(h) => <$t>::from_str_radix(h, 16),
                    None => clean.parse::<$t>(),
                };
                r.map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

int_value!(u16, u32, u64);

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(f64, bool, StackKind, PmdMode, LoadMode, crate::loadgen::Protocol);

impl Value for String {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl ExperimentConfig {
            /// Sets one dotted key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => self.$($field).+ = Value::parse(value).map_err(|e| format!("{key}: {e}"))?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Every key with its current value.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, Value::render(&self.$($field).+))),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "sim.duration_ns" => sim.duration_ns;
    "sim.drain_ns" => sim.drain_ns;
    "topology.nic_count" => topology.nic_count;
    "topology.core_count" => topology.core_count;
    "topology.stack" => topology.stack;
    "topology.force_bind" => topology.force_bind;
    "cpu.freq_ghz" => cpu.freq_ghz;
    "cpu.work_scale" => cpu.work_scale;
    "link.gbps" => link.gbps;
    "link.latency_ns" => link.latency_ns;
    "nic.wb_threshold" => nic.wb_threshold;
    "nic.descriptor_cache_capacity" => nic.descriptor_cache_capacity;
    "nic.rx_ring_size" => nic.rx_ring_size;
    "nic.tx_ring_size" => nic.tx_ring_size;
    "nic.dma_latency_ns" => nic.dma_latency_ns;
    "nic.pcie_gbps" => nic.pcie_gbps;
    "nic.tlp_payload_bytes" => nic.tlp_payload_bytes;
    "nic.tlp_overhead_bytes" => nic.tlp_overhead_bytes;
    "nic.dca_enabled" => nic.dca_enabled;
    "nic.flush_timeout_ns" => nic.flush_timeout_ns;
    "nic.rx_buffer_size" => nic.rx_buffer_size;
    "nic.vendor_id" => nic.vendor_id;
    "nic.device_id" => nic.device_id;
    "memory.l1d.size" => memory.l1d.size;
    "memory.l1d.associativity" => memory.l1d.associativity;
    "memory.l1d.block" => memory.l1d.block;
    "memory.l1d.hit_latency" => memory.l1d.hit_latency;
    "memory.l2.size" => memory.l2.size;
    "memory.l2.associativity" => memory.l2.associativity;
    "memory.l2.block" => memory.l2.block;
    "memory.l2.hit_latency" => memory.l2.hit_latency;
    "memory.l2.inclusive" => memory.l2.inclusive;
    "memory.llc.size" => memory.llc.size;
    "memory.llc.associativity" => memory.llc.associativity;
    "memory.llc.block" => memory.llc.block;
    "memory.llc.hit_latency" => memory.llc.hit_latency;
    "memory.llc.inclusive" => memory.llc.inclusive;
    "memory.llc.dca_way_quota" => memory.llc.dca_way_quota;
    "memory.dram_latency_ns" => memory.dram_latency_ns;
    "memory.channels" => memory.channels;
    "memory.interval_ns" => memory.interval_ns;
    "memory.mlp" => memory.mlp;
    "kernel.irq_entry" => kernel.irq_entry;
    "kernel.softirq_per_packet" => kernel.softirq_per_packet;
    "kernel.syscall" => kernel.syscall;
    "kernel.copy_per_byte" => kernel.copy_per_byte;
    "kernel.context_switch" => kernel.context_switch;
    "kernel.socket_overhead_per_packet" => kernel.socket_overhead_per_packet;
    "kernel.serialized_per_packet" => kernel.serialized_per_packet;
    "pmd.burst_size" => pmd.burst_size;
    "pmd.poll_iteration" => pmd.poll_iteration;
    "pmd.per_packet_process" => pmd.per_packet_process;
    "pmd.mode" => pmd.mode;
    "pmd.pipeline_ring_capacity" => pmd.pipeline_ring_capacity;
    "pmd.accumulate" => pmd.accumulate;
    "pmd.accumulate_timeout_ns" => pmd.accumulate_timeout_ns;
    "pmd.mempool_buffers" => pmd.mempool_buffers;
    "pmd.mempool_buffer_size" => pmd.mempool_buffer_size;
    "loadgen.mode" => loadgen.mode;
    "loadgen.rate_gbps" => loadgen.rate_gbps;
    "loadgen.frame_size" => loadgen.frame_size;
    "loadgen.ts_offset" => loadgen.ts_offset;
    "loadgen.protocol" => loadgen.protocol;
    "loadgen.trace_path" => loadgen.trace_path;
    "loadgen.jitter" => loadgen.jitter;
    "loadgen.random_payload" => loadgen.random_payload;
    "loadgen.verify_payload" => loadgen.verify_payload;
    "loadgen.histogram_bin_ns" => loadgen.histogram_bin_ns;
    "loadgen.dump_samples" => loadgen.dump_samples;
    "search.start_rate" => search.start_rate;
    "search.coarse_step" => search.coarse_step;
    "search.fine_step" => search.fine_step;
    "search.hold_window_ns" => search.hold_window_ns;
    "search.zero_drop_required" => search.zero_drop_required;
    "burst.rate_gbps" => burst.rate_gbps;
    "burst.packets" => burst.packets;
    "output.dir" => output.dir;
}

/// Cumulative sensitivity knobs, in their canonical order.
pub const KNOBS: &[&str] = &["3ghz", "low-latency-pcie", "2x-mem-ch", "2x-rob-lsq", "2x-lsus", "2x-l1", "2x-l2-llc", "dca"];

impl ExperimentConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate().map_err(|msg| ConfigError { line: None, msg })?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError { line: Some(line), msg };
            let (k, v) = body.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{body}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), line) {
                return Err(err(format!("duplicate key `{k}` (first set on line {prev})")));
            }
            self.set(k, v).map_err(err)?;
        }
        Ok(())
    }

    /// Reads the `config` object echoed in a run report.
    pub fn from_report_json(text: &str) -> Result<Self, ConfigError> {
        let err = |msg: String| ConfigError { line: None, msg };
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| err(format!("report json: {e}")))?;
        let obj = v.get("config").and_then(|c| c.as_object()).ok_or_else(|| err("report has no config object".into()))?;
        let mut cfg = ExperimentConfig::default();
        for (k, val) in obj {
            let s = val.as_str().ok_or_else(|| err(format!("config value for `{k}` is not a string")))?;
            cfg.set(k, s).map_err(err)?;
        }
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }

    /// Reads either config text or a report JSON.
    pub fn load(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            Self::from_report_json(text)
        } else {
            Self::parse(text)
        }
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn echo(&self) -> std::collections::BTreeMap<String, String> {
        self.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn freq_hz(&self) -> f64 {
        self.cpu.freq_ghz * 1e9
    }

    /// Cores each port occupies.
    pub fn cores_per_port(&self) -> u32 {
        match (self.topology.stack, self.pmd.mode) {
            (StackKind::Pmd, PmdMode::Pipeline) => 2,
            _ => 1,
        }
    }

    /// PMD per-packet cycles after the work scale.
    pub fn effective_pmd(&self) -> PmdConfig {
        let mut p = self.pmd.clone();
        p.per_packet_process = (p.per_packet_process as f64 * self.cpu.work_scale).round() as u64;
        p
    }

    /// Kernel protocol-processing cycles after the work scale.
    pub fn effective_kernel(&self) -> KernelPathCosts {
        let mut k = self.kernel.clone();
        let s = self.cpu.work_scale;
        k.softirq_per_packet = (k.softirq_per_packet as f64 * s).round() as u64;
        k.socket_overhead_per_packet = (k.socket_overhead_per_packet as f64 * s).round() as u64;
        k
    }

    /// Applies one sensitivity knob on top of the current settings.
    pub fn apply_knob(&mut self, knob: &str) -> Result<(), String> {
        match knob {
            "3ghz" => self.cpu.freq_ghz = 3.0,
            "low-latency-pcie" => self.nic.dma_latency_ns *= 0.5,
            "2x-mem-ch" => self.memory.channels *= 2,
            "2x-rob-lsq" | "2x-lsus" => self.cpu.work_scale *= 0.9,
            "2x-l1" => self.memory.l1d.size *= 2,
            "2x-l2-llc" => {
                self.memory.l2.size *= 2;
                self.memory.llc.size *= 2;
            }
            "dca" => self.nic.dca_enabled = true,
            other => return Err(format!("unknown knob `{other}` (known: {})", KNOBS.join(", "))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.nic.validate()?;
        self.memory.validate()?;
        self.kernel.validate()?;
        self.pmd.validate()?;
        self.loadgen.validate()?;
        self.search.validate()?;
        let t = &self.topology;
        if t.nic_count == 0 || t.nic_count > 64 {
            return Err("topology.nic_count must be in 1..=64".into());
        }
        let need = t.nic_count * self.cores_per_port();
        if t.core_count < need {
            return Err(format!(
                "topology.core_count {} too small: {} NIC(s) with this stack need {need} core(s)",
                t.core_count, t.nic_count
            ));
        }
        if !(self.cpu.freq_ghz > 0.0 && self.cpu.freq_ghz.is_finite()) {
            return Err("cpu.freq_ghz must be positive".into());
        }
        if !(self.cpu.work_scale > 0.0 && self.cpu.work_scale.is_finite()) {
            return Err("cpu.work_scale must be positive".into());
        }
        if !(self.link.gbps > 0.0 && self.link.gbps.is_finite()) {
            return Err("link.gbps must be positive".into());
        }
        if self.sim.duration_ns == 0 {
            return Err("sim.duration_ns must be positive".into());
        }
        let lg = &self.loadgen;
        if lg.rate_gbps > self.link.gbps * t.nic_count as f64 {
            return Err(format!(
                "loadgen.rate_gbps {} exceeds the aggregate link bandwidth {}",
                lg.rate_gbps,
                self.link.gbps * t.nic_count as f64
            ));
        }
        if lg.frame_size > self.nic.rx_buffer_size || lg.frame_size > self.pmd.mempool_buffer_size {
            return Err("loadgen.frame_size exceeds nic.rx_buffer_size or pmd.mempool_buffer_size".into());
        }
        if lg.frame_size > u16::MAX as u32 {
            return Err("loadgen.frame_size exceeds the descriptor length field".into());
        }
        if (self.pmd.mempool_buffers as u64) < (self.nic.rx_ring_size + self.nic.tx_ring_size) as u64 {
            return Err("pmd.mempool_buffers must cover both rings".into());
        }
        if self.burst.packets == 0 || !(self.burst.rate_gbps > 0.0) {
            return Err("burst.packets and burst.rate_gbps must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let d = ExperimentConfig::default();
        d.validate().unwrap();
        let again = ExperimentConfig::parse(&d.to_text()).unwrap();
        assert_eq!(again, d);
        assert_eq!(KEYS.len(), d.pairs().len());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = ExperimentConfig::parse("# test\nnic.wb_threshold = 8  # small\n\ntopology.stack=kernel\nnic.vendor_id = 0x1234\n").unwrap();
        assert_eq!(c.nic.wb_threshold, 8);
        assert_eq!(c.topology.stack, StackKind::Kernel);
        assert_eq!(c.nic.vendor_id, 0x1234);
    }

    #[test]
    fn unknown_key_is_line_anchored() {
        let e = ExperimentConfig::parse("seed = 3\nnic.wb_thresh = 4\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.to_string().contains("nic.wb_thresh"), "{e}");
    }

    #[test]
    fn bad_values() {
        assert_eq!(ExperimentConfig::parse("seed = x").unwrap_err().line, Some(1));
        assert_eq!(ExperimentConfig::parse("\nseed").unwrap_err().line, Some(2));
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").unwrap_err().msg.contains("duplicate"));
    }

    #[test]
    fn cross_field_checks() {
        let e = ExperimentConfig::parse("pmd.mode = pipeline\n").unwrap_err();
        assert!(e.msg.contains("core_count"), "{e}");
        assert!(ExperimentConfig::parse("pmd.mode = pipeline\ntopology.core_count = 2\n").is_ok());
        assert!(ExperimentConfig::parse("pmd.mode = pipeline\ntopology.core_count = 2\npmd.pipeline_ring_capacity = 0\n").is_err());
        assert!(ExperimentConfig::parse("nic.wb_threshold = 65\n").is_err());
        assert!(ExperimentConfig::parse("loadgen.frame_size = 20\n").is_err());
        assert!(ExperimentConfig::parse("loadgen.rate_gbps = 250\n").is_err());
    }

    #[test]
    fn knobs_accumulate() {
        let mut c = ExperimentConfig::default();
        for k in KNOBS {
            c.apply_knob(k).unwrap();
        }
        assert_eq!(c.cpu.freq_ghz, 3.0);
        assert_eq!(c.nic.dma_latency_ns, 125.0);
        assert_eq!(c.memory.channels, 2);
        assert!((c.cpu.work_scale - 0.81).abs() < 1e-12);
        assert_eq!(c.memory.llc.size, 16 * 1024 * 1024);
        assert!(c.nic.dca_enabled);
        assert!(c.apply_knob("turbo").is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = 77;
        let j = serde_json::json!({ "config": c.echo() }).to_string();
        assert_eq!(ExperimentConfig::load(&j).unwrap(), c);
    }
}
