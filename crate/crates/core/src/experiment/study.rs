use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{RunError, RunReport, Testbed, Traffic, TrialRecord, TRAFFIC_START};
use crate::config::{ExperimentConfig, KNOBS};
use crate::loadgen::{bandwidth_search, LoadMode, TrialOutcome, TrialSystem};
use crate::memory::WritebackSeries;
use crate::sim::Tick;
use crate::stack::StackKind;

/// Result of a plain run or a search, with the optional raw sample dump.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub samples_csv: Option<String>,
}

fn simulate(cfg: &ExperimentConfig, traffic: &Traffic) -> Result<Testbed, RunError> {
    let mut tb = Testbed::new(cfg)?;
    tb.start(traffic);
    tb.run_to_completion()?;
    Ok(tb)
}

fn output(tb: &Testbed, started: Instant) -> RunOutput {
    let mut report = RunReport::from_testbed(tb);
    report.wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
    RunOutput { report, samples_csv: tb.cfg.loadgen.dump_samples.then(|| tb.samples_csv()) }
}

/// Runs the configured experiment; search mode delegates to [`search`].
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    if cfg.loadgen.mode == LoadMode::Search {
        return search(cfg);
    }
    let started = Instant::now();
    let traffic = Testbed::configured_traffic(cfg)?;
    let tb = simulate(cfg, &traffic)?;
    Ok(output(&tb, started))
}

/// Each trial is a fresh simulation holding one aggregate rate.
pub struct SimTrials<'a> {
    pub cfg: &'a ExperimentConfig,
}

impl SimTrials<'_> {
    fn trial_config(&self, rate_gbps: f64) -> ExperimentConfig {
        let mut c = self.cfg.clone();
        c.loadgen.mode = LoadMode::Static;
        c.loadgen.rate_gbps = rate_gbps;
        c.sim.duration_ns = self.cfg.search.hold_window_ns;
        c
    }

    fn traffic(&self, rate_gbps: f64) -> Traffic {
        Traffic::Static { rate_gbps, duration: Tick::from_ns(self.cfg.search.hold_window_ns), limit: None }
    }
}

impl TrialSystem for SimTrials<'_> {
    fn trial(&self, rate_gbps: f64) -> TrialOutcome {
        let Ok(mut tb) = Testbed::new(&self.trial_config(rate_gbps)) else {
            return TrialOutcome { tx: 1, rx: 0, drops: 1 };
        };
        // a drop already decides a zero-drop trial
        tb.abort_on_drop = self.cfg.search.zero_drop_required;
        tb.start(&self.traffic(rate_gbps));
        if tb.run_to_completion().is_err() {
            return TrialOutcome { tx: 1, rx: 0, drops: 1 };
        }
        let (tx, rx, drops) = tb.totals();
        TrialOutcome { tx, rx, drops }
    }

    fn ceiling_gbps(&self) -> f64 {
        self.cfg.link.gbps * self.cfg.topology.nic_count as f64
    }
}

/// Finds the highest sustainable aggregate rate, then reports a full run
/// at that rate (or at the start rate when nothing passes).
pub fn search(cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let started = Instant::now();
    let sys = SimTrials { cfg };
    let res = bandwidth_search(&sys, &cfg.search);
    let rate = if res.max_sustainable_gbps > 0.0 { res.max_sustainable_gbps } else { cfg.search.start_rate };
    let tb = simulate(&sys.trial_config(rate), &sys.traffic(rate))?;
    let mut out = output(&tb, started);
    let mut echo = cfg.echo();
    echo.insert("loadgen.mode".into(), LoadMode::Search.to_string());
    out.report.config = echo;
    out.report.max_sustainable_gbps = Some(res.max_sustainable_gbps);
    out.report.search_trials = Some(
        res.trials.iter().map(|(r, o)| TrialRecord::new(*r, o, cfg.search.zero_drop_required)).collect(),
    );
    out.report.search_diagnostic = res.diagnostic;
    out.report.wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// One sweep dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum Axis {
    Nics(Vec<u32>),
    Stack(Vec<StackKind>),
    /// Cumulative knobs; the first point is always the baseline.
    Knobs(Vec<String>),
    Key(String, Vec<String>),
}

impl FromStr for Axis {
    type Err = String;

    /// `nics`, `stack`, `knobs`, or `name=v1,v2,...` to pick values.
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, vals) = match s.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v.split(',').map(str::trim).filter(|v| !v.is_empty()).collect::<Vec<_>>())),
            None => (s.trim(), None),
        };
        match name {
            "nics" => {
                let v = vals.unwrap_or_else(|| vec!["1", "2", "3", "4"]);
                let n: Result<Vec<u32>, String> = v.iter().map(|x| x.parse::<u32>().map_err(|e| format!("nics value `{x}`: {e}"))).collect();
                Ok(Axis::Nics(n?))
            }
            "stack" => {
                let v = vals.unwrap_or_else(|| vec!["kernel", "pmd"]);
                Ok(Axis::Stack(v.iter().map(|x| x.parse()).collect::<Result<_, _>>()?))
            }
            "knobs" => {
                let v = vals.map(|v| v.into_iter().map(String::from).collect()).unwrap_or_else(|| KNOBS.iter().map(|k| k.to_string()).collect::<Vec<_>>());
                if let Some(bad) = v.iter().find(|k| !KNOBS.contains(&k.as_str())) {
                    return Err(format!("unknown knob `{bad}` (known: {})", KNOBS.join(", ")));
                }
                Ok(Axis::Knobs(v))
            }
            key => match vals {
                Some(v) if !v.is_empty() => {
                    if !crate::config::KEYS.contains(&key) {
                        return Err(format!("unknown key `{key}`"));
                    }
                    Ok(Axis::Key(key.to_string(), v.into_iter().map(String::from).collect()))
                }
                _ => Err(format!("axis `{s}`: expected nics, stack, knobs or key=v1,v2")),
            },
        }
    }
}

impl Axis {
    /// (label, edit) pairs in grid order.
    fn points(&self) -> Vec<(String, Vec<(String, String)>)> {
        match self {
            Axis::Nics(v) => v.iter().map(|n| (format!("nics={n}"), vec![("topology.nic_count".into(), n.to_string())])).collect(),
            Axis::Stack(v) => v.iter().map(|s| (format!("stack={s}"), vec![("topology.stack".into(), s.to_string())])).collect(),
            Axis::Knobs(v) => {
                let mut out = vec![("baseline".to_string(), Vec::new())];
                let mut acc = Vec::new();
                for k in v {
                    acc.push(("knob".to_string(), k.clone()));
                    out.push((format!("+{k}"), acc.clone()));
                }
                out
            }
            Axis::Key(k, v) => v.iter().map(|x| (format!("{k}={x}"), vec![(k.clone(), x.clone())])).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub label: String,
    pub config: Result<ExperimentConfig, String>,
}

/// Cartesian product of the axes, first axis outermost. Core counts grow
/// to cover the ports each point needs.
pub fn sweep_points(base: &ExperimentConfig, axes: &[Axis]) -> Vec<SweepPoint> {
    let mut grid: Vec<(Vec<String>, Vec<(String, String)>)> = vec![(Vec::new(), Vec::new())];
    for axis in axes {
        let pts = axis.points();
        grid = grid
            .into_iter()
            .flat_map(|(labels, edits)| {
                pts.iter().map(move |(l, e)| {
                    let mut labels = labels.clone();
                    labels.push(l.clone());
                    let mut edits = edits.clone();
                    edits.extend(e.iter().cloned());
                    (labels, edits)
                })
            })
            .collect();
    }
    grid.into_iter()
        .map(|(labels, edits)| {
            let label = if labels.is_empty() { "baseline".to_string() } else { labels.join(";") };
            let config = (|| {
                let mut c = base.clone();
                for (k, v) in &edits {
                    if k == "knob" {
                        c.apply_knob(v)?;
                    } else {
                        c.set(k, v)?;
                    }
                }
                let need = c.topology.nic_count * c.cores_per_port();
                c.topology.core_count = c.topology.core_count.max(need);
                let cap = c.link.gbps * c.topology.nic_count as f64;
                c.loadgen.rate_gbps = c.loadgen.rate_gbps.min(cap);
                c.validate()?;
                Ok(c)
            })();
            SweepPoint { label, config }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_point: String,
    pub max_sustainable_gbps: Option<f64>,
    pub error: Option<String>,
    pub report: Option<RunReport>,
}

/// Searches every point independently; failures are recorded per row.
pub fn sweep(points: &[SweepPoint]) -> Vec<SweepRow> {
    points
        .par_iter()
        .map(|p| {
            let res = p.config.clone().map_err(RunError::Config).and_then(|c| search(&c));
            match res {
                Ok(out) => SweepRow {
                    axis_point: p.label.clone(),
                    max_sustainable_gbps: out.report.max_sustainable_gbps,
                    error: None,
                    report: Some(out.report),
                },
                Err(e) => SweepRow { axis_point: p.label.clone(), max_sustainable_gbps: None, error: Some(e.to_string()), report: None },
            }
        })
        .collect()
}

/// `axis_point,max_sustainable_gbps`; failed points leave the value empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis_point", "max_sustainable_gbps"]).expect("in-memory write");
    for r in rows {
        let v = r.max_sustainable_gbps.map(|g| g.to_string()).unwrap_or_default();
        w.write_record([r.axis_point.as_str(), v.as_str()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstOutcome {
    pub burst_size: u32,
    pub sent: u64,
    pub returned: u64,
    pub dropped: u64,
    pub window_start_ns: u64,
    pub window_end_ns: u64,
    pub total_l2: u64,
    pub total_llc: u64,
    pub peak_llc: u64,
    pub buffers_distinct: u64,
    pub series: WritebackSeries,
}

impl BurstOutcome {
    pub fn csv(&self) -> String {
        self.series.to_csv(self.window_start_ns)
    }
}

/// Sends `burst.packets` back-to-back frames once per burst size, with the
/// driver gathering full bursts before processing. DCA is turned on and the
/// L2 made non-inclusive for every setting.
pub fn burst_study(cfg: &ExperimentConfig, bursts: &[u32]) -> Result<Vec<BurstOutcome>, RunError> {
    if cfg.topology.stack != StackKind::Pmd {
        return Err(RunError::Config("burst study needs topology.stack = pmd".into()));
    }
    bursts
        .iter()
        .map(|&b| {
            let mut c = cfg.clone();
            c.pmd.burst_size = b;
            c.pmd.accumulate = true;
            c.nic.dca_enabled = true;
            c.memory.l2.inclusive = false;
            c.topology.nic_count = 1;
            c.loadgen.rate_gbps = c.burst.rate_gbps.min(c.link.gbps);
            let traffic = Traffic::Static {
                rate_gbps: c.loadgen.rate_gbps,
                duration: Tick(u64::MAX / 4),
                limit: Some(c.burst.packets),
            };
            let tb = simulate(&c, &traffic)?;
            let (sent, returned, dropped) = tb.totals();
            let interval = c.memory.interval_ns;
            let start = Tick::from_ns(TRAFFIC_START.as_ps() / 1000 / interval * interval);
            let series = tb.memory().interval_stats().window(start, tb.now());
            let buffers_distinct = match &tb.drivers[0] {
                super::Driver::Pmd(d) => d.ring.stats.buffers_distinct,
                super::Driver::Kernel(d) => d.ring.stats.buffers_distinct,
            };
            Ok(BurstOutcome {
                burst_size: b,
                sent,
                returned,
                dropped,
                window_start_ns: start.as_ps() / 1000,
                window_end_ns: tb.now().as_ps() / 1000,
                total_l2: series.total_l2(),
                total_llc: series.total_llc(),
                peak_llc: series.peak_llc(),
                buffers_distinct,
                series,
            })
        })
        .collect()
}
