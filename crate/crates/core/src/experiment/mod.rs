//! A simulated node: NICs, drivers, cores and memory on one event loop,
//! with one load generator per port across a fixed-latency link.

mod report;
mod study;

use std::collections::HashMap;

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::frame::Frame;
use crate::loadgen::{read_trace, LoadGen, TraceRecord};
use crate::memory::{AccessKind, MemoryHierarchy};
use crate::nic::{Nic, NicEvent, NicHost};
use crate::sim::{Engine, SimError, Tick};
use crate::stack::{
    bind_device, CoreModel, DriverEnv, KernelDriver, KernelEvent, Mempool, PmdDriver, PmdMode, RingDriver,
    SerialLock, StackKind,
};

pub use report::{CoreReport, DropCounts, PortReport, RunReport, Totals, TrialRecord, SCHEMA_VERSION};
pub use study::{
    burst_study, run, search, sweep, sweep_csv, sweep_points, Axis, BurstOutcome, RunOutput, SimTrials, SweepPoint,
    SweepRow,
};

#[derive(Debug, Error)]
pub enum RunError {
    /// The configuration or an input it names is unusable.
    #[error("{0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Sim(String),
}

const MEMPOOL_BASE: u64 = 0x4000_0000;
const MEMPOOL_STRIDE: u64 = 0x0800_0000;
const RX_RING_BASE: u64 = 0x1000_0000;
const RING_STRIDE: u64 = 0x10_0000;
const TX_RING_OFFSET: u64 = 0x8000;
/// Traffic starts after the NICs have prefetched their first descriptors.
pub const TRAFFIC_START: Tick = Tick::from_us(10);

#[derive(Debug)]
pub enum Event {
    Nic(usize, NicEvent),
    /// A generator frame reaches the NIC's wire port.
    WireArrive(usize, Frame),
    Emit(usize),
    /// A forwarded frame reaches the generator.
    LoadGenRecv(usize, Frame),
    PmdStep(usize),
    PipeRx(usize),
    PipeWorker(usize),
    Kernel(usize, KernelEvent),
}

/// What each port's generator sends.
#[derive(Clone, Debug)]
pub enum Traffic {
    Static { rate_gbps: f64, duration: Tick, limit: Option<u64> },
    Trace(Vec<TraceRecord>),
}

enum Driver {
    Pmd(PmdDriver),
    Kernel(KernelDriver),
}

struct PortHost<'a> {
    port: usize,
    engine: &'a mut Engine<Event>,
    mem: &'a mut MemoryHierarchy,
    bufs: &'a mut HashMap<u64, Vec<u8>>,
    wire_free: &'a mut Tick,
    link_gbps: f64,
    link_latency: Tick,
    fault: &'a mut Option<SimError>,
}

impl PortHost<'_> {
    fn push(&mut self, at: Tick, ev: Event) {
        if let Err(e) = self.engine.schedule_at(at, ev) {
            self.fault.get_or_insert(e);
        }
    }
}

impl NicHost for PortHost<'_> {
    fn now(&self) -> Tick {
        self.engine.now()
    }

    fn schedule(&mut self, at: Tick, ev: NicEvent) {
        let p = self.port;
        self.push(at, Event::Nic(p, ev));
    }

    fn dma_write(&mut self, addr: u64, data: &[u8], dca: bool) -> Tick {
        match self.bufs.get_mut(&addr) {
            Some(b) => {
                b.clear();
                b.extend_from_slice(data);
            }
            None => {
                self.bufs.insert(addr, data.to_vec());
            }
        }
        self.mem.dma_write(self.engine.now(), addr, data.len() as u64, dca).latency
    }

    fn dma_write_meta(&mut self, addr: u64, len: u64, dca: bool) -> Tick {
        self.mem.dma_write(self.engine.now(), addr, len, dca).latency
    }

    fn dma_read(&mut self, addr: u64, len: usize) -> (Vec<u8>, Tick) {
        let mut v = self.bufs.get(&addr).cloned().unwrap_or_default();
        v.resize(len, 0);
        (v, self.mem.dma_read(self.engine.now(), addr, len as u64).latency)
    }

    fn dma_read_meta(&mut self, addr: u64, len: u64) -> Tick {
        self.mem.dma_read(self.engine.now(), addr, len).latency
    }

    fn transmit(&mut self, frame: Frame) {
        let now = self.engine.now();
        let start = now.max(*self.wire_free);
        let end = start + Tick::for_bits(frame.len() as u64, self.link_gbps);
        *self.wire_free = end;
        let p = self.port;
        self.push(end + self.link_latency, Event::LoadGenRecv(p, frame));
    }

    fn interrupt(&mut self) {
        let (p, now) = (self.port, self.engine.now());
        self.push(now, Event::Kernel(p, KernelEvent::Irq));
    }
}

impl DriverEnv for PortHost<'_> {
    fn cpu_access(&mut self, addr: u64, kind: AccessKind, core: usize) -> Tick {
        self.mem.cpu_access(self.engine.now(), addr, kind, core).latency
    }

    fn buffer_mut(&mut self, addr: u64) -> Option<&mut Vec<u8>> {
        self.bufs.get_mut(&addr)
    }
}

/// Per-port link state in both directions.
#[derive(Clone, Copy, Debug, Default)]
struct Link {
    to_nic_free: Tick,
    to_gen_free: Tick,
}

pub struct Testbed {
    cfg: ExperimentConfig,
    engine: Engine<Event>,
    nics: Vec<Nic>,
    drivers: Vec<Driver>,
    cores: Vec<CoreModel>,
    gens: Vec<LoadGen>,
    links: Vec<Link>,
    mem: MemoryHierarchy,
    bufs: HashMap<u64, Vec<u8>>,
    lock: SerialLock,
    fault: Option<SimError>,
    emitting: usize,
    offered_gbps: f64,
    /// Stop as soon as any frame is lost.
    pub abort_on_drop: bool,
    aborted: bool,
}

macro_rules! host {
    ($s:ident, $p:expr) => {
        PortHost {
            port: $p,
            engine: &mut $s.engine,
            mem: &mut $s.mem,
            bufs: &mut $s.bufs,
            wire_free: &mut $s.links[$p].to_gen_free,
            link_gbps: $s.cfg.link.gbps,
            link_latency: Tick::from_ns($s.cfg.link.latency_ns),
            fault: &mut $s.fault,
        }
    };
}

impl Testbed {
    /// Builds the node, binds every NIC and starts the drivers.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        cfg.validate().map_err(RunError::Config)?;
        let cfg = cfg.clone();
        let ports = cfg.topology.nic_count as usize;
        let freq = cfg.freq_hz();
        let mut tb = Testbed {
            engine: Engine::new(cfg.seed),
            nics: (0..ports).map(|p| Nic::new(p, cfg.nic.clone())).collect(),
            drivers: Vec::with_capacity(ports),
            cores: (0..cfg.topology.core_count as usize).map(|c| CoreModel::new(c, freq)).collect(),
            gens: Vec::with_capacity(ports),
            links: vec![Link::default(); ports],
            mem: MemoryHierarchy::new(cfg.memory.clone(), cfg.topology.core_count as usize, freq),
            bufs: HashMap::new(),
            lock: SerialLock::default(),
            fault: None,
            emitting: 0,
            offered_gbps: 0.0,
            abort_on_drop: false,
            aborted: false,
            cfg,
        };
        for p in 0..ports {
            tb.bring_up(p)?;
            let rng = tb.engine.substream(1000 + p as u64);
            tb.gens.push(LoadGen::new(p, tb.cfg.loadgen.clone(), rng));
        }
        Ok(tb)
    }

    fn bring_up(&mut self, p: usize) -> Result<(), RunError> {
        let stack = self.cfg.topology.stack;
        let force = self.cfg.topology.force_bind;
        let pool = Mempool::new(
            MEMPOOL_BASE + p as u64 * MEMPOOL_STRIDE,
            self.cfg.pmd.mempool_buffers as usize,
            self.cfg.pmd.mempool_buffer_size as u64,
        );
        let rx_base = RX_RING_BASE + p as u64 * RING_STRIDE;
        let mlp = self.cfg.memory.mlp;
        let mut nic = std::mem::replace(&mut self.nics[p], Nic::new(p, self.cfg.nic.clone()));
        let res = {
            let mut host = host!(self, p);
            bind_device(&mut nic, stack, force, &mut host)
                .and_then(|_| RingDriver::attach(&mut nic, &mut host, pool, rx_base, rx_base + TX_RING_OFFSET))
        };
        self.nics[p] = nic;
        let ring = res.map_err(|e| RunError::Config(format!("port {p}: {e}")))?;
        let driver = match stack {
            StackKind::Pmd => {
                let pmd = self.cfg.effective_pmd();
                let (rx, worker) = match pmd.mode {
                    PmdMode::RunToCompletion => (p, p),
                    PmdMode::Pipeline => (2 * p, 2 * p + 1),
                };
                match pmd.mode {
                    PmdMode::RunToCompletion => self.push(Tick::ZERO, Event::PmdStep(p)),
                    PmdMode::Pipeline => {
                        self.push(Tick::ZERO, Event::PipeRx(p));
                        self.push(Tick::ZERO, Event::PipeWorker(p));
                    }
                }
                Driver::Pmd(PmdDriver::new(ring, pmd, mlp, rx, worker))
            }
            StackKind::Kernel => Driver::Kernel(KernelDriver::new(ring, self.cfg.effective_kernel(), mlp, p)),
        };
        self.drivers.push(driver);
        Ok(())
    }

    fn push(&mut self, at: Tick, ev: Event) {
        if let Err(e) = self.engine.schedule_at(at, ev) {
            self.fault.get_or_insert(e);
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Starts every generator; a static aggregate rate is split evenly
    /// across ports.
    pub fn start(&mut self, traffic: &Traffic) {
        let ports = self.gens.len();
        for p in 0..ports {
            let first = match traffic {
                Traffic::Static { rate_gbps, duration, limit } => {
                    self.offered_gbps = *rate_gbps;
                    let per_port = rate_gbps / ports as f64;
                    let limit = limit.map(|l| l / ports as u64 + u64::from((p as u64) < l % ports as u64));
                    self.gens[p].start_static(TRAFFIC_START, per_port, TRAFFIC_START + *duration, limit)
                }
                Traffic::Trace(records) => self.gens[p].start_trace(TRAFFIC_START, records.clone()),
            };
            if let Some(t) = first {
                self.emitting += 1;
                self.push(t, Event::Emit(p));
            }
        }
    }

    /// Traffic for a plain run as configured.
    pub fn configured_traffic(cfg: &ExperimentConfig) -> Result<Traffic, RunError> {
        use crate::loadgen::LoadMode;
        match cfg.loadgen.mode {
            LoadMode::Trace => {
                let f = std::fs::File::open(&cfg.loadgen.trace_path)
                    .map_err(|e| RunError::Config(format!("loadgen.trace_path `{}`: {e}", cfg.loadgen.trace_path)))?;
                let recs = read_trace(std::io::BufReader::new(f), &cfg.loadgen)
                    .map_err(|e| RunError::Config(format!("trace `{}`: {e}", cfg.loadgen.trace_path)))?;
                Ok(Traffic::Trace(recs))
            }
            _ => Ok(Traffic::Static {
                rate_gbps: cfg.loadgen.rate_gbps,
                duration: Tick::from_ns(cfg.sim.duration_ns),
                limit: None,
            }),
        }
    }

    fn port_drops(&self, p: usize) -> DropCounts {
        let ring = match &self.drivers[p] {
            Driver::Pmd(d) => &d.ring.stats,
            Driver::Kernel(d) => &d.ring.stats,
        };
        DropCounts { nic_rx: self.nics[p].stats().rx_dropped, runt: ring.runt_drops, pipeline_ring: ring.ring_drops }
    }

    fn settled(&self) -> bool {
        (0..self.gens.len()).all(|p| {
            let c = &self.gens[p].counters;
            c.tx == c.rx + c.corrupt + self.port_drops(p).total()
        })
    }

    fn any_drop(&self) -> bool {
        (0..self.gens.len()).any(|p| self.port_drops(p).total() > 0)
    }

    /// Runs until all traffic is sent and accounted for, or the drain limit
    /// after the last emission passes.
    pub fn run_to_completion(&mut self) -> Result<(), RunError> {
        let mut deadline: Option<Tick> = None;
        loop {
            if let Some(e) = self.fault.take() {
                return Err(RunError::Sim(e.to_string()));
            }
            if self.emitting == 0 {
                let d = *deadline.get_or_insert(self.engine.now() + Tick::from_ns(self.cfg.sim.drain_ns));
                if self.settled() {
                    break;
                }
                if self.engine.peek_time().is_none_or(|t| t > d) {
                    self.engine.advance_to(d.max(self.engine.now()));
                    break;
                }
            }
            if self.abort_on_drop && self.any_drop() {
                self.aborted = true;
                break;
            }
            let Some((now, ev)) = self.engine.pop_until(Tick(u64::MAX)) else {
                break;
            };
            self.dispatch(now, ev);
        }
        Ok(())
    }

    fn dispatch(&mut self, now: Tick, ev: Event) {
        match ev {
            Event::Nic(p, ev) => {
                let mut host = host!(self, p);
                self.nics[p].handle(ev, &mut host);
            }
            Event::WireArrive(p, frame) => {
                let mut host = host!(self, p);
                self.nics[p].wire_receive(frame, &mut host);
            }
            Event::Emit(p) => {
                let (frame, next) = self.gens[p].generate_next(now);
                let link = &mut self.links[p];
                let start = now.max(link.to_nic_free);
                let end = start + Tick::for_bits(frame.len() as u64, self.cfg.link.gbps);
                link.to_nic_free = end;
                self.push(end + Tick::from_ns(self.cfg.link.latency_ns), Event::WireArrive(p, frame));
                match next {
                    Some(t) => self.push(t, Event::Emit(p)),
                    None => self.emitting -= 1,
                }
            }
            Event::LoadGenRecv(p, frame) => self.gens[p].on_receive(&frame, now),
            Event::PmdStep(p) => {
                let Driver::Pmd(d) = &mut self.drivers[p] else { return };
                let core = &mut self.cores[d.rx_core];
                let mut host = host!(self, p);
                let (_, end) = d.run_to_completion_step(now, &mut self.nics[p], &mut host, core);
                self.push(end, Event::PmdStep(p));
            }
            Event::PipeRx(p) => {
                let Driver::Pmd(d) = &mut self.drivers[p] else { return };
                let core = &mut self.cores[d.rx_core];
                let mut host = host!(self, p);
                let end = d.pipeline_rx_step(now, &mut self.nics[p], &mut host, core);
                self.push(end, Event::PipeRx(p));
            }
            Event::PipeWorker(p) => {
                let Driver::Pmd(d) = &mut self.drivers[p] else { return };
                let core = &mut self.cores[d.worker_core];
                let mut host = host!(self, p);
                let (_, end) = d.pipeline_worker_step(now, &mut self.nics[p], &mut host, core);
                self.push(end, Event::PipeWorker(p));
            }
            Event::Kernel(p, ev) => {
                let Driver::Kernel(d) = &mut self.drivers[p] else { return };
                let core = &mut self.cores[d.core];
                let mut host = host!(self, p);
                if let Some((at, next)) = d.handle(ev, now, &mut self.nics[p], &mut host, core, &mut self.lock) {
                    self.push(at, Event::Kernel(p, next));
                }
            }
        }
    }

    pub fn now(&self) -> Tick {
        self.engine.now()
    }

    pub fn nic(&self, p: usize) -> &Nic {
        &self.nics[p]
    }

    pub fn loadgen(&self, p: usize) -> &LoadGen {
        &self.gens[p]
    }

    pub fn memory(&self) -> &MemoryHierarchy {
        &self.mem
    }

    pub fn was_aborted(&self) -> bool {
        self.aborted
    }

    /// Sums over all ports: (tx, rx, drops).
    pub fn totals(&self) -> (u64, u64, u64) {
        (0..self.gens.len()).fold((0, 0, 0), |(t, r, d), p| {
            let c = &self.gens[p].counters;
            (t + c.tx, r + c.rx, d + self.port_drops(p).total())
        })
    }

    /// Raw samples of every port in port order.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("tx_tick,rx_tick,rtt_ps\n");
        for g in &self.gens {
            out.extend(g.samples_csv().lines().skip(1).map(|l| format!("{l}\n")));
        }
        out
    }
}
