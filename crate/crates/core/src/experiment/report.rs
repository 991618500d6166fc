use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Driver, Testbed};
use crate::loadgen::{LatencyStats, LoadGenCounters, TrialOutcome};
use crate::memory::{WritebackCounts, WritebackSeries};
use crate::nic::NicStats;
use crate::stack::{CostBreakdown, DriverStats, KernelStats, PmdStats};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub nic_rx: u64,
    pub runt: u64,
    pub pipeline_ring: u64,
}

impl DropCounts {
    pub fn total(&self) -> u64 {
        self.nic_rx + self.runt + self.pipeline_ring
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortReport {
    pub port: usize,
    pub nic: NicStats,
    pub driver: DriverStats,
    pub pmd: Option<PmdStats>,
    pub kernel: Option<KernelStats>,
    pub loadgen: LoadGenCounters,
    pub drops: DropCounts,
    /// Frames neither returned nor dropped when the run ended.
    pub unaccounted: u64,
    pub latency: LatencyStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreReport {
    pub core: usize,
    pub costs: CostBreakdown,
    pub busy_ps: u64,
    pub utilization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub tx: u64,
    pub rx: u64,
    pub drops: u64,
    pub corrupt: u64,
    pub drop_pct: f64,
    pub offered_gbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub rate_gbps: f64,
    pub tx: u64,
    pub rx: u64,
    pub drops: u64,
    pub passed: bool,
}

impl TrialRecord {
    pub fn new(rate_gbps: f64, o: &TrialOutcome, zero_drop: bool) -> Self {
        TrialRecord { rate_gbps, tx: o.tx, rx: o.rx, drops: o.drops, passed: o.passes(zero_drop) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Writebacks {
    pub totals: WritebackCounts,
    pub series: WritebackSeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub model_version: String,
    /// Every configuration key after defaults and overrides.
    pub config: BTreeMap<String, String>,
    pub end_tick_ps: u64,
    pub events_processed: u64,
    pub totals: Totals,
    pub ports: Vec<PortReport>,
    pub cores: Vec<CoreReport>,
    pub serial_lock_acquisitions: u64,
    pub serial_lock_contended: u64,
    pub writebacks: Writebacks,
    pub max_sustainable_gbps: Option<f64>,
    pub search_trials: Option<Vec<TrialRecord>>,
    pub search_diagnostic: Option<String>,
    pub wall_clock_ms: f64,
}

impl RunReport {
    pub fn from_testbed(tb: &Testbed) -> Self {
        let elapsed = tb.now();
        let ports: Vec<PortReport> = (0..tb.gens.len())
            .map(|p| {
                let (driver, pmd, kernel) = match &tb.drivers[p] {
                    Driver::Pmd(d) => (d.ring.stats.clone(), Some(d.stats.clone()), None),
                    Driver::Kernel(d) => (d.ring.stats.clone(), None, Some(d.stats.clone())),
                };
                let lg = &tb.gens[p];
                let drops = tb.port_drops(p);
                let c = &lg.counters;
                PortReport {
                    port: p,
                    nic: tb.nics[p].stats().clone(),
                    driver,
                    pmd,
                    kernel,
                    loadgen: c.clone(),
                    drops,
                    unaccounted: c.tx.saturating_sub(c.rx + c.corrupt + drops.total()),
                    latency: lg.finalize_stats(),
                }
            })
            .collect();
        let cores = tb
            .cores
            .iter()
            .map(|c| CoreReport { core: c.id, costs: c.costs, busy_ps: c.busy_ps(), utilization: c.utilization(elapsed) })
            .collect();
        let (tx, rx, drops) = tb.totals();
        let corrupt = ports.iter().map(|p| p.loadgen.corrupt).sum();
        RunReport {
            schema_version: SCHEMA_VERSION.into(),
            model_version: format!("kbsim {}", env!("CARGO_PKG_VERSION")),
            config: tb.cfg.echo(),
            end_tick_ps: elapsed.as_ps(),
            events_processed: tb.engine.events_processed(),
            totals: Totals {
                tx,
                rx,
                drops,
                corrupt,
                drop_pct: if tx == 0 { 0.0 } else { 100.0 * tx.saturating_sub(rx) as f64 / tx as f64 },
                offered_gbps: tb.offered_gbps,
            },
            ports,
            cores,
            serial_lock_acquisitions: tb.lock.acquisitions,
            serial_lock_contended: tb.lock.contended,
            writebacks: Writebacks { totals: tb.mem.totals(), series: tb.mem.interval_stats().clone() },
            max_sustainable_gbps: None,
            search_trials: None,
            search_diagnostic: None,
            wall_clock_ms: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the wall-clock field zeroed, for reproducibility checks.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_ms = 0.0;
        r.to_json()
    }
}
