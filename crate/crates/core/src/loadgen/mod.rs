//! Traffic generator attached to the far end of each link. Emits stamped
//! frames at a fixed rate or from a trace and measures round-trip latency
//! of the frames that come back.

mod search;
mod stats;

pub use search::{
    bandwidth_search, exhaustive_sweep, SearchConfig, SearchResult, SyntheticServer, TrialOutcome, TrialSystem,
};
pub use stats::{ps_to_ns, HistogramBin, LatencyStats};

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{swap_macs, Frame, MacAddr, ETHERTYPE_EXPERIMENTAL, ETH_HEADER_LEN, TIMESTAMP_LEN};
use crate::sim::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    Static,
    Trace,
    Search,
}

impl fmt::Display for LoadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoadMode::Static => "static",
            LoadMode::Trace => "trace",
            LoadMode::Search => "search",
        })
    }
}

impl FromStr for LoadMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "static" => Ok(LoadMode::Static),
            "trace" => Ok(LoadMode::Trace),
            "search" => Ok(LoadMode::Search),
            _ => Err(format!("expected static, trace or search, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Ethernet,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ethernet")
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ethernet" => Ok(Protocol::Ethernet),
            _ => Err(format!("only `ethernet` is supported, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadGenConfig {
    pub mode: LoadMode,
    pub rate_gbps: f64,
    pub frame_size: u32,
    pub ts_offset: u32,
    pub protocol: Protocol,
    /// Empty means no trace.
    pub trace_path: String,
    pub jitter: bool,
    pub random_payload: bool,
    pub verify_payload: bool,
    pub histogram_bin_ns: u64,
    pub dump_samples: bool,
}

impl Default for LoadGenConfig {
    fn default() -> Self {
        LoadGenConfig {
            mode: LoadMode::Static,
            rate_gbps: 10.0,
            frame_size: 1500,
            ts_offset: 0,
            protocol: Protocol::Ethernet,
            trace_path: String::new(),
            jitter: false,
            random_payload: false,
            verify_payload: false,
            histogram_bin_ns: 100,
            dump_samples: false,
        }
    }
}

impl LoadGenConfig {
    pub fn stamp_fits(&self, frame_size: u32) -> bool {
        frame_size as usize >= ETH_HEADER_LEN + self.ts_offset as usize + TIMESTAMP_LEN
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.stamp_fits(self.frame_size) {
            return Err(format!(
                "loadgen.frame_size {} too small for an 8-byte stamp at payload offset {}",
                self.frame_size, self.ts_offset
            ));
        }
        if !(self.rate_gbps > 0.0 && self.rate_gbps.is_finite()) {
            return Err("loadgen.rate_gbps must be positive".into());
        }
        if self.mode == LoadMode::Trace && self.trace_path.is_empty() {
            return Err("loadgen.mode = trace needs loadgen.trace_path".into());
        }
        if self.histogram_bin_ns == 0 {
            return Err("loadgen.histogram_bin_ns must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct TraceRecord {
    pub timestamp_ns: u64,
    pub size_bytes: u32,
    #[serde(default)]
    pub payload_hex: Option<String>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Record { line: u64, msg: String },
    #[error("trace: {0}")]
    Csv(#[from] csv::Error),
}

/// Parses a `timestamp_ns,size_bytes[,payload_hex]` CSV trace.
pub fn read_trace(input: impl Read, cfg: &LoadGenConfig) -> Result<Vec<TraceRecord>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let mut out: Vec<TraceRecord> = Vec::new();
    for rec in rdr.deserialize::<TraceRecord>() {
        let rec = rec?;
        let line = out.len() as u64 + 2;
        let err = |msg: String| TraceError::Record { line, msg };
        if let Some(prev) = out.last() {
            if rec.timestamp_ns < prev.timestamp_ns {
                return Err(err("timestamps must be non-decreasing".into()));
            }
        }
        if !cfg.stamp_fits(rec.size_bytes) {
            return Err(err(format!("size {} cannot hold the timestamp", rec.size_bytes)));
        }
        if let Some(h) = rec.payload_hex.as_deref().filter(|h| !h.is_empty()) {
            hex::decode(h).map_err(|e| err(format!("payload_hex: {e}")))?;
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tx_tick: Tick,
    pub rx_tick: Tick,
}

#[derive(Clone, Debug)]
enum Plan {
    Idle,
    Static { start: Tick, gap_ps: f64, until: Tick, limit: Option<u64>, k: u64 },
    Trace { start: Tick, records: Vec<TraceRecord>, k: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadGenCounters {
    pub tx: u64,
    pub rx: u64,
    pub corrupt: u64,
    pub payload_mismatches: u64,
    pub tx_bytes: u64,
}

pub struct LoadGen {
    cfg: LoadGenConfig,
    dst: MacAddr,
    src: MacAddr,
    rng: ChaCha8Rng,
    plan: Plan,
    pub counters: LoadGenCounters,
    samples: Vec<Sample>,
    originals: HashMap<u64, VecDeque<Vec<u8>>>,
    first_tx: Option<Tick>,
    last_tx: Tick,
}

impl LoadGen {
    pub fn new(port: usize, cfg: LoadGenConfig, rng: ChaCha8Rng) -> Self {
        let p = port as u8;
        LoadGen {
            cfg,
            dst: [0x02, 0, 0, 0, 0, p + 1],
            src: [0x02, 0, 0, 0, 0x10, p],
            rng,
            plan: Plan::Idle,
            counters: LoadGenCounters::default(),
            samples: Vec::new(),
            originals: HashMap::new(),
            first_tx: None,
            last_tx: Tick::ZERO,
        }
    }

    pub fn config(&self) -> &LoadGenConfig {
        &self.cfg
    }

    pub fn mac(&self) -> MacAddr {
        self.src
    }

    fn planned(&self) -> Option<Tick> {
        match &self.plan {
            Plan::Idle => None,
            Plan::Static { start, gap_ps, until, limit, k } => {
                if limit.is_some_and(|l| *k >= l) {
                    return None;
                }
                let t = *start + Tick::from_ps((*k as f64 * gap_ps).round() as u64);
                (t < *until).then_some(t)
            }
            Plan::Trace { start, records, k } => records.get(*k).map(|r| *start + Tick::from_ns(r.timestamp_ns)),
        }
    }

    /// Constant-rate emission from `start` while the tick is before `until`,
    /// optionally capped at `limit` frames. Returns the first emission tick.
    pub fn start_static(&mut self, start: Tick, rate_gbps: f64, until: Tick, limit: Option<u64>) -> Option<Tick> {
        let gap_ps = self.cfg.frame_size as f64 * 8.0 * 1000.0 / rate_gbps;
        self.plan = Plan::Static { start, gap_ps, until, limit, k: 0 };
        self.next_emission()
    }

    pub fn start_trace(&mut self, start: Tick, records: Vec<TraceRecord>) -> Option<Tick> {
        self.plan = Plan::Trace { start, records, k: 0 };
        self.next_emission()
    }

    /// Inter-frame gap at `rate_gbps` for the configured frame size.
    pub fn gap(&self, rate_gbps: f64) -> Tick {
        Tick::for_bits(self.cfg.frame_size as u64, rate_gbps)
    }

    fn next_emission(&mut self) -> Option<Tick> {
        let t = self.planned()?;
        if let (true, Plan::Static { gap_ps, .. }) = (self.cfg.jitter, &self.plan) {
            let quarter = (gap_ps / 4.0) as i64;
            if quarter > 0 {
                let j = self.rng.gen_range(-quarter..=quarter);
                let t = Tick::from_ps((t.as_ps() as i64 + j).max(self.last_tx.as_ps() as i64) as u64);
                return Some(t);
            }
        }
        Some(t)
    }

    fn fill(&mut self, size: usize, hex_payload: Option<&str>) -> Frame {
        let plen = size - ETH_HEADER_LEN;
        let mut payload = vec![0u8; plen];
        match hex_payload.filter(|h| !h.is_empty()) {
            Some(h) => {
                let bytes = hex::decode(h).expect("validated when the trace was read");
                let n = bytes.len().min(plen);
                payload[..n].copy_from_slice(&bytes[..n]);
            }
            None if self.cfg.random_payload => self.rng.fill_bytes(&mut payload),
            None => {
                let seq = self.counters.tx;
                for (i, b) in payload.iter_mut().enumerate() {
                    *b = (i as u64 ^ seq) as u8;
                }
            }
        }
        Frame::ethernet(self.dst, self.src, ETHERTYPE_EXPERIMENTAL, &payload)
    }

    /// Writes `now` as the 8-byte little-endian stamp.
    pub fn stamp_packet(&self, frame: &mut Frame, now: Tick) -> bool {
        frame.set_timestamp(self.cfg.ts_offset as usize, now.as_ps())
    }

    /// Builds and stamps the frame due at `now`; returns it with the next
    /// emission tick.
    pub fn generate_next(&mut self, now: Tick) -> (Frame, Option<Tick>) {
        let (size, hex_payload) = match &self.plan {
            Plan::Trace { records, k, .. } => {
                let r = &records[*k];
                (r.size_bytes as usize, r.payload_hex.clone())
            }
            _ => (self.cfg.frame_size as usize, None),
        };
        let mut frame = self.fill(size, hex_payload.as_deref());
        self.stamp_packet(&mut frame, now);
        if self.cfg.verify_payload {
            let mut expect = frame.bytes().to_vec();
            swap_macs(&mut expect);
            self.originals.entry(now.as_ps()).or_default().push_back(expect);
        }
        self.counters.tx += 1;
        self.counters.tx_bytes += frame.len() as u64;
        self.first_tx.get_or_insert(now);
        self.last_tx = now;
        match &mut self.plan {
            Plan::Static { k, .. } => *k += 1,
            Plan::Trace { k, .. } => *k += 1,
            Plan::Idle => {}
        }
        (frame, self.next_emission())
    }

    /// Records a returned frame.
    pub fn on_receive(&mut self, frame: &Frame, now: Tick) {
        let ethertype_ok = frame.bytes().get(12..14) == Some(&ETHERTYPE_EXPERIMENTAL.to_be_bytes()[..]);
        let stamp = frame.timestamp(self.cfg.ts_offset as usize);
        let plausible = match (stamp, self.first_tx) {
            (Some(s), Some(first)) => ethertype_ok && s >= first.as_ps() && s <= self.last_tx.as_ps() && s <= now.as_ps(),
            _ => false,
        };
        let Some(stamp) = stamp.filter(|_| plausible) else {
            self.counters.corrupt += 1;
            return;
        };
        self.counters.rx += 1;
        let tx_tick = Tick::from_ps(stamp);
        self.samples.push(Sample { tx_tick, rx_tick: now });
        if self.cfg.verify_payload {
            let matched = match self.originals.get_mut(&stamp) {
                Some(q) => match q.iter().position(|b| b.as_slice() == frame.bytes()) {
                    Some(i) => {
                        q.remove(i);
                        true
                    }
                    None => {
                        q.pop_front();
                        false
                    }
                },
                None => false,
            };
            if self.originals.get(&stamp).is_some_and(|q| q.is_empty()) {
                self.originals.remove(&stamp);
            }
            if !matched {
                self.counters.payload_mismatches += 1;
            }
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn rtts_ps(&self) -> Vec<u64> {
        self.samples.iter().map(|s| (s.rx_tick - s.tx_tick).as_ps()).collect()
    }

    pub fn finalize_stats(&self) -> LatencyStats {
        LatencyStats::from_samples(&self.rtts_ps(), self.counters.tx, self.counters.rx, self.cfg.histogram_bin_ns)
    }

    /// Raw sample dump in `tx_tick,rx_tick,rtt_ps` form.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("tx_tick,rx_tick,rtt_ps\n");
        for x in &self.samples {
            s.push_str(&format!("{},{},{}\n", x.tx_tick.as_ps(), x.rx_tick.as_ps(), (x.rx_tick - x.tx_tick).as_ps()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::substream;

    fn lg(cfg: LoadGenConfig) -> LoadGen {
        LoadGen::new(0, cfg, substream(1, 99))
    }

    fn emissions(g: &mut LoadGen, first: Option<Tick>) -> Vec<Tick> {
        let mut out = Vec::new();
        let mut next = first;
        while let Some(t) = next {
            out.push(t);
            next = g.generate_next(t).1;
        }
        out
    }

    #[test]
    fn gap_examples() {
        let g = lg(LoadGenConfig { frame_size: 1000, ..Default::default() });
        assert_eq!(g.gap(8.0), Tick::from_us(1));
        assert_eq!(g.gap(80.0), Tick::from_ns(100));
    }

    #[test]
    fn static_rate_fidelity() {
        let mut g = lg(LoadGenConfig { frame_size: 1000, ..Default::default() });
        let first = g.start_static(Tick::ZERO, 8.0, Tick::from_us(10), None);
        let ts = emissions(&mut g, first);
        assert_eq!(ts.len(), 10);
        assert_eq!(ts[3], Tick::from_us(3));
    }

    #[test]
    fn trace_replay_ticks() {
        let cfg = LoadGenConfig { ts_offset: 8, ..Default::default() };
        let csv = "timestamp_ns,size_bytes,payload_hex\n0,64,\n5000,64,deadbeef\n5000,128\n";
        let recs = read_trace(csv.as_bytes(), &cfg).unwrap();
        let mut g = lg(cfg);
        let first = g.start_trace(Tick::from_ns(100), recs);
        let mut next = first;
        let mut got = Vec::new();
        while let Some(t) = next {
            let (f, n) = g.generate_next(t);
            got.push((t, f));
            next = n;
        }
        let ticks: Vec<_> = got.iter().map(|(t, _)| *t).collect();
        assert_eq!(ticks, vec![Tick::from_ns(100), Tick::from_ns(5100), Tick::from_ns(5100)]);
        assert_eq!(got[1].1.payload()[0..4], [0xde, 0xad, 0xbe, 0xef]);
        assert_eq!(got[2].1.len(), 128);
    }

    #[test]
    fn trace_rejects_bad_records() {
        let cfg = LoadGenConfig::default();
        assert!(read_trace("timestamp_ns,size_bytes\n10,64\n5,64\n".as_bytes(), &cfg).is_err());
        assert!(read_trace("timestamp_ns,size_bytes\n10,20\n".as_bytes(), &cfg).is_err());
        assert!(read_trace("timestamp_ns,size_bytes,payload_hex\n10,64,zz\n".as_bytes(), &cfg).is_err());
    }

    #[test]
    fn stamp_positions() {
        let mut g = lg(LoadGenConfig::default());
        g.start_static(Tick::ZERO, 10.0, Tick::from_us(1), None);
        let (f, _) = g.generate_next(Tick::from_ps(12345));
        assert_eq!(&f.payload()[0..8], &12345u64.to_le_bytes());

        let mut g = lg(LoadGenConfig { ts_offset: 100, ..Default::default() });
        g.start_static(Tick::ZERO, 10.0, Tick::from_us(1), None);
        let (f, _) = g.generate_next(Tick::from_ps(777));
        let filler: Vec<u8> = (0..100u64).map(|i| i as u8).collect();
        assert_eq!(&f.payload()[..100], &filler[..]);
        assert_eq!(f.timestamp(100), Some(777));
    }

    #[test]
    fn stamp_survives_l2fwd() {
        let mut g = lg(LoadGenConfig::default());
        g.start_static(Tick::ZERO, 10.0, Tick::from_us(1), None);
        let (f, _) = g.generate_next(Tick::from_ps(4242));
        let mut b = f.into_bytes();
        crate::stack::l2fwd_process(&mut b);
        assert_eq!(Frame::from_bytes(b).timestamp(0), Some(4242));
    }

    #[test]
    fn receive_rtt_and_corrupt() {
        let mut g = lg(LoadGenConfig { verify_payload: true, ..Default::default() });
        g.start_static(Tick::from_ps(1000), 10.0, Tick::from_us(1), None);
        let (f, _) = g.generate_next(Tick::from_ps(1000));
        let mut back = f.clone().into_bytes();
        swap_macs(&mut back);
        g.on_receive(&Frame::from_bytes(back), Tick::from_ps(3500));
        assert_eq!(g.rtts_ps(), vec![2500]);
        assert_eq!(g.counters.payload_mismatches, 0);
        g.on_receive(&Frame::from_bytes(vec![0x55; 80]), Tick::from_ps(4000));
        assert_eq!(g.counters.corrupt, 1);
        assert_eq!(g.counters.rx, 1);
        // unswapped echo is flagged
        g.on_receive(&f, Tick::from_ps(5000));
        assert_eq!(g.counters.payload_mismatches, 1);
    }

    #[test]
    fn histogram_conserves() {
        let mut g = lg(LoadGenConfig::default());
        let mut next = g.start_static(Tick::ZERO, 100.0, Tick::from_ms(1), Some(1000));
        while let Some(t) = next {
            let (f, n) = g.generate_next(t);
            g.on_receive(&f, t + Tick::from_ns(500 + (t.as_ps() % 7_000) / 10));
            next = n;
        }
        let s = g.finalize_stats();
        assert_eq!(s.count, 1000);
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<u64>(), 1000);
    }

    #[test]
    fn jitter_stays_monotone_and_seeded() {
        let cfg = LoadGenConfig { jitter: true, ..Default::default() };
        let mut a = lg(cfg.clone());
        let mut b = lg(cfg);
        let fa = a.start_static(Tick::ZERO, 10.0, Tick::from_us(50), None);
        let fb = b.start_static(Tick::ZERO, 10.0, Tick::from_us(50), None);
        let ta = emissions(&mut a, fa);
        let tb = emissions(&mut b, fb);
        assert_eq!(ta, tb);
        assert!(ta.windows(2).all(|w| w[0] <= w[1]));
    }
}
