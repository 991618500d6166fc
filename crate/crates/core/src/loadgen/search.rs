use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::sim::Tick;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub start_rate: f64,
    pub coarse_step: f64,
    pub fine_step: f64,
    pub hold_window_ns: u64,
    pub zero_drop_required: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            start_rate: 5.0,
            coarse_step: 5.0,
            fine_step: 1.0,
            hold_window_ns: 10_000_000,
            zero_drop_required: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fine_step > 0.0 && self.fine_step <= self.coarse_step) {
            return Err("search.fine_step must be positive and at most search.coarse_step".into());
        }
        if self.start_rate <= 0.0 {
            return Err("search.start_rate must be positive".into());
        }
        if self.hold_window_ns == 0 {
            return Err("search.hold_window_ns must be positive".into());
        }
        Ok(())
    }
}

/// Result of holding one offered rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub tx: u64,
    pub rx: u64,
    pub drops: u64,
}

impl TrialOutcome {
    /// Without the zero-drop rule a trial may lose up to 0.1% of frames.
    pub fn passes(&self, zero_drop_required: bool) -> bool {
        if zero_drop_required {
            self.drops == 0 && self.rx == self.tx
        } else {
            self.tx.saturating_sub(self.rx) * 1000 <= self.tx
        }
    }
}

/// Anything that can be offered a load for one hold window.
pub trait TrialSystem {
    fn trial(&self, rate_gbps: f64) -> TrialOutcome;
    /// Highest rate worth offering (the link ceiling).
    fn ceiling_gbps(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub max_sustainable_gbps: f64,
    pub trials: Vec<(f64, TrialOutcome)>,
    pub diagnostic: Option<String>,
}

fn snap(r: f64) -> f64 {
    (r * 1e6).round() / 1e6
}

/// Ramps by `coarse_step` until a trial fails, then refines upward from the
/// last passing rate by `fine_step`.
pub fn bandwidth_search(sys: &impl TrialSystem, cfg: &SearchConfig) -> SearchResult {
    let cap = sys.ceiling_gbps();
    let mut trials = Vec::new();
    let run = |r: f64, trials: &mut Vec<(f64, TrialOutcome)>| {
        let out = sys.trial(r);
        trials.push((r, out));
        out.passes(cfg.zero_drop_required)
    };
    let mut good: Option<f64> = None;
    let mut failed_at: Option<f64> = None;
    let mut i = 0u64;
    loop {
        let r = snap((cfg.start_rate + i as f64 * cfg.coarse_step).min(cap));
        if run(r, &mut trials) {
            good = Some(r);
            if r >= cap {
                break;
            }
            i += 1;
        } else {
            failed_at = Some(r);
            break;
        }
    }
    let Some(mut best) = good else {
        let out = trials[0].1;
        return SearchResult {
            max_sustainable_gbps: 0.0,
            diagnostic: Some(format!(
                "start rate {} Gbps not sustained: tx {} rx {} drops {}",
                cfg.start_rate, out.tx, out.rx, out.drops
            )),
            trials,
        };
    };
    if let Some(fail) = failed_at {
        let mut j = 1u64;
        loop {
            let r = snap(best + cfg.fine_step);
            if j > 1_000_000 || r >= fail - 1e-9 {
                break;
            }
            if !run(r, &mut trials) {
                break;
            }
            best = r;
            j += 1;
        }
    }
    SearchResult { max_sustainable_gbps: best, trials, diagnostic: None }
}

/// Highest rate on a `step` grid up to the ceiling for which every grid
/// rate at or below it passes.
pub fn exhaustive_sweep(sys: &impl TrialSystem, step: f64, zero_drop_required: bool) -> f64 {
    let cap = sys.ceiling_gbps();
    let mut best = 0.0;
    let mut k = 1u64;
    loop {
        let r = snap(k as f64 * step);
        if r > cap + 1e-9 {
            break;
        }
        if !sys.trial(r).passes(zero_drop_required) {
            break;
        }
        best = r;
        k += 1;
    }
    best
}

/// A server with a fixed per-frame service time and a finite queue.
/// `capacity_gbps = None` is a sink that never drops.
#[derive(Clone, Debug)]
pub struct SyntheticServer {
    pub capacity_gbps: Option<f64>,
    pub queue_frames: usize,
    pub frame_size: u32,
    pub hold_window: Tick,
    pub link_gbps: f64,
}

impl SyntheticServer {
    pub fn new(capacity_gbps: Option<f64>) -> Self {
        SyntheticServer {
            capacity_gbps,
            queue_frames: 64,
            frame_size: 1500,
            hold_window: Tick::from_ms(10),
            link_gbps: 200.0,
        }
    }
}

impl TrialSystem for SyntheticServer {
    fn trial(&self, rate_gbps: f64) -> TrialOutcome {
        let gap = Tick::for_bits(self.frame_size as u64, rate_gbps).as_ps().max(1);
        let n = self.hold_window.as_ps().div_ceil(gap);
        let service = match self.capacity_gbps {
            None => return TrialOutcome { tx: n, rx: n, drops: 0 },
            Some(k) if k <= 0.0 => return TrialOutcome { tx: n, rx: 0, drops: n },
            Some(k) => Tick::for_bits(self.frame_size as u64, k).as_ps(),
        };
        let mut departures: VecDeque<u64> = VecDeque::new();
        let mut last_departure = 0u64;
        let mut drops = 0;
        for i in 0..n {
            let a = i * gap;
            while departures.front().is_some_and(|&d| d <= a) {
                departures.pop_front();
            }
            if departures.len() >= self.queue_frames {
                drops += 1;
                continue;
            }
            last_departure = last_departure.max(a) + service;
            departures.push_back(last_departure);
        }
        TrialOutcome { tx: n, rx: n - drops, drops }
    }

    fn ceiling_gbps(&self) -> f64 {
        self.link_gbps
    }
}
