//! e1000-style NIC: MMIO register file with interrupt mask, RX/TX
//! descriptor rings, an RX descriptor cache with threshold writeback, and
//! per-direction DMA engines with PCIe serialization and latency.

pub mod regs;
mod ring;

pub use ring::{Descriptor, DescriptorCache, DescriptorRing, Direction, UsedDescriptor, DESCRIPTOR_BYTES};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::pci::{PciConfigSpace, PciError};
use crate::sim::Tick;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NicConfig {
    pub wb_threshold: u32,
    pub descriptor_cache_capacity: u32,
    pub rx_ring_size: u32,
    pub tx_ring_size: u32,
    pub dma_latency_ns: f64,
    pub pcie_gbps: f64,
    pub tlp_payload_bytes: u32,
    pub tlp_overhead_bytes: u32,
    pub dca_enabled: bool,
    pub flush_timeout_ns: u64,
    pub rx_buffer_size: u32,
    pub vendor_id: u16,
    pub device_id: u16,
}

impl Default for NicConfig {
    fn default() -> Self {
        NicConfig {
            wb_threshold: 32,
            descriptor_cache_capacity: 64,
            rx_ring_size: 256,
            tx_ring_size: 256,
            dma_latency_ns: 250.0,
            pcie_gbps: 64.0,
            tlp_payload_bytes: 256,
            tlp_overhead_bytes: 24,
            dca_enabled: false,
            flush_timeout_ns: 10_000,
            rx_buffer_size: 2048,
            vendor_id: 0x8086,
            device_id: 0x1075,
        }
    }
}

impl NicConfig {
    /// Writeback only once the whole descriptor cache is used.
    pub fn legacy_writeback(mut self) -> Self {
        self.wb_threshold = self.descriptor_cache_capacity;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.wb_threshold == 0 || self.wb_threshold > self.descriptor_cache_capacity {
            return Err(format!(
                "nic.wb_threshold must be in 1..={} (descriptor_cache_capacity)",
                self.descriptor_cache_capacity
            ));
        }
        for (name, v) in [("nic.rx_ring_size", self.rx_ring_size), ("nic.tx_ring_size", self.tx_ring_size)] {
            if v < 2 || !v.is_power_of_two() {
                return Err(format!("{name} must be a power of two >= 2"));
            }
        }
        if self.pcie_gbps <= 0.0 || !self.pcie_gbps.is_finite() {
            return Err("nic.pcie_gbps must be positive".into());
        }
        if self.dma_latency_ns < 0.0 {
            return Err("nic.dma_latency_ns must be >= 0".into());
        }
        if self.tlp_payload_bytes == 0 {
            return Err("nic.tlp_payload_bytes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum NicError {
    #[error("unmodeled register offset {0:#06x}")]
    UnknownRegister(u32),
    #[error("ring length {0} bytes is not a power-of-two number of descriptors")]
    BadRingLength(u32),
    #[error(transparent)]
    Pci(#[from] PciError),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NicStats {
    pub frames_in: u64,
    pub frames_out: u64,
    pub rx_dropped: u64,
    pub frames_delivered: u64,
    pub tx_descriptors_completed: u64,
    /// Batch size -> count, for threshold-triggered writebacks.
    pub writeback_batches: BTreeMap<u32, u64>,
    /// Batch size -> count, for quiescent flushes.
    pub flush_batches: BTreeMap<u32, u64>,
    pub interrupts_raised: u64,
}

impl NicStats {
    pub fn max_writeback_batch(&self) -> Option<u32> {
        self.writeback_batches.keys().next_back().copied()
    }
}

/// Internal NIC events; the owner routes them back to [`Nic::handle`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NicEvent {
    RxDescFetched { count: u32 },
    RxDmaDone { index: u32, buffer_addr: u64, frame: Frame },
    RxLanded { index: u32, length: u16 },
    RxWritebackDone { batch: Vec<UsedDescriptor> },
    FlushCheck,
    TxDescFetched { count: u32 },
    TxFrameReady { index: u32, frame: Frame },
}

/// Services a NIC needs from the rest of the simulated machine.
pub trait NicHost {
    fn now(&self) -> Tick;
    fn schedule(&mut self, at: Tick, ev: NicEvent);
    /// Stores payload bytes at `addr`; returns memory-side latency.
    fn dma_write(&mut self, addr: u64, data: &[u8], dca: bool) -> Tick;
    /// Descriptor-status write (timing and cache effects only).
    fn dma_write_meta(&mut self, addr: u64, len: u64, dca: bool) -> Tick;
    fn dma_read(&mut self, addr: u64, len: usize) -> (Vec<u8>, Tick);
    fn dma_read_meta(&mut self, addr: u64, len: u64) -> Tick;
    /// Frame leaves the NIC port now.
    fn transmit(&mut self, frame: Frame);
    /// Rising edge of the legacy interrupt line.
    fn interrupt(&mut self);
}

/// One direction of the PCIe link: serializes transfers at `gbps` with
/// per-TLP header overhead.
#[derive(Clone, Debug)]
pub struct DmaEngine {
    gbps: f64,
    tlp_payload: u64,
    tlp_overhead: u64,
    free_at: Tick,
}

impl DmaEngine {
    pub fn new(gbps: f64, tlp_payload: u32, tlp_overhead: u32) -> Self {
        DmaEngine { gbps, tlp_payload: tlp_payload as u64, tlp_overhead: tlp_overhead as u64, free_at: Tick::ZERO }
    }

    pub fn wire_bytes(&self, bytes: u64) -> u64 {
        bytes + bytes.div_ceil(self.tlp_payload) * self.tlp_overhead
    }

    /// Reserves the engine; returns the tick the transfer finishes.
    pub fn reserve(&mut self, now: Tick, bytes: u64) -> Tick {
        let start = now.max(self.free_at);
        self.free_at = start + Tick::for_bits(self.wire_bytes(bytes), self.gbps);
        self.free_at
    }
}

pub struct Nic {
    id: usize,
    cfg: NicConfig,
    pci: PciConfigSpace,
    ctrl: u32,
    icr: u32,
    ims: u32,
    line: bool,
    rx: DescriptorRing,
    tx: DescriptorRing,
    cache: DescriptorCache,
    rx_fetch_ptr: u32,
    tx_fetch_ptr: u32,
    tx_fetching: bool,
    rx_engine: DmaEngine,
    tx_engine: DmaEngine,
    dma_latency: Tick,
    last_rx_ready: Tick,
    last_tx_ready: Tick,
    last_activity: Tick,
    flush_pending: bool,
    claimed: bool,
    stats: NicStats,
}

impl Nic {
    pub fn new(id: usize, cfg: NicConfig) -> Self {
        let engine = || DmaEngine::new(cfg.pcie_gbps, cfg.tlp_payload_bytes, cfg.tlp_overhead_bytes);
        Nic {
            id,
            pci: PciConfigSpace::new(cfg.vendor_id, cfg.device_id),
            ctrl: 0,
            icr: 0,
            ims: 0,
            line: false,
            rx: DescriptorRing::unconfigured(Direction::Rx),
            tx: DescriptorRing::unconfigured(Direction::Tx),
            cache: DescriptorCache::new(cfg.descriptor_cache_capacity),
            rx_fetch_ptr: 0,
            tx_fetch_ptr: 0,
            tx_fetching: false,
            rx_engine: engine(),
            tx_engine: engine(),
            dma_latency: Tick::from_ns_f64(cfg.dma_latency_ns),
            last_rx_ready: Tick::ZERO,
            last_tx_ready: Tick::ZERO,
            last_activity: Tick::ZERO,
            flush_pending: false,
            claimed: false,
            stats: NicStats::default(),
            cfg,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &NicConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &NicStats {
        &self.stats
    }

    pub fn pci(&self) -> &PciConfigSpace {
        &self.pci
    }

    pub fn rx_ring(&self) -> &DescriptorRing {
        &self.rx
    }

    pub fn rx_ring_mut(&mut self) -> &mut DescriptorRing {
        &mut self.rx
    }

    pub fn tx_ring(&self) -> &DescriptorRing {
        &self.tx
    }

    pub fn tx_ring_mut(&mut self) -> &mut DescriptorRing {
        &mut self.tx
    }

    pub fn descriptor_cache(&self) -> &DescriptorCache {
        &self.cache
    }

    pub fn is_claimed(&self) -> bool {
        self.claimed
    }

    pub(crate) fn claim(&mut self) {
        self.claimed = true;
    }

    pub fn interrupt_line(&self) -> bool {
        self.line
    }

    pub fn icr(&self) -> u32 {
        self.icr
    }

    pub fn ims(&self) -> u32 {
        self.ims
    }

    fn enabled(&self) -> bool {
        self.ctrl & regs::CTRL_SLU != 0 && self.pci.command().bus_master() && self.rx.is_configured()
    }

    /// RX work still inside the NIC (cache, DMA, writeback not yet visible).
    pub fn rx_pending(&self) -> u32 {
        self.cache.in_flight + self.cache.landing + self.cache.used.len() as u32
    }

    fn update_irq(&mut self, host: &mut impl NicHost) {
        let level = (self.icr & self.ims) != 0 && !self.pci.intx_disabled();
        if level && !self.line {
            self.stats.interrupts_raised += 1;
            host.interrupt();
        }
        self.line = level;
    }

    pub fn set_interrupt_cause(&mut self, bits: u32, host: &mut impl NicHost) {
        self.icr |= bits;
        self.update_irq(host);
    }

    pub fn read_config(&self, offset: u8, width: u8) -> Result<u32, NicError> {
        Ok(self.pci.read_config(offset, width)?)
    }

    pub fn write_config(&mut self, offset: u8, width: u8, value: u32, host: &mut impl NicHost) -> Result<(), NicError> {
        if self.pci.write_config(offset, width, value)?.is_some() {
            self.update_irq(host);
        }
        Ok(())
    }

    pub fn mmio_read(&mut self, offset: u32, host: &mut impl NicHost) -> Result<u32, NicError> {
        use regs::*;
        let v = match offset {
            CTRL => self.ctrl,
            ICR => {
                let v = self.icr;
                self.icr = 0;
                self.update_irq(host);
                v
            }
            IMS => self.ims,
            IMC => 0,
            RDBA => self.rx.base as u32,
            RDLEN => self.rx.size() * DESCRIPTOR_BYTES as u32,
            RDH => self.rx.head(),
            RDT => self.rx.tail(),
            TDBA => self.tx.base as u32,
            TDLEN => self.tx.size() * DESCRIPTOR_BYTES as u32,
            TDH => self.tx.head(),
            TDT => self.tx.tail(),
            other => return Err(NicError::UnknownRegister(other)),
        };
        Ok(v)
    }

    pub fn mmio_write(&mut self, offset: u32, value: u32, host: &mut impl NicHost) -> Result<(), NicError> {
        use regs::*;
        match offset {
            CTRL => self.ctrl = value,
            ICR => {
                // write-1-to-clear
                self.icr &= !value;
                self.update_irq(host);
            }
            IMS => {
                self.ims |= value;
                self.update_irq(host);
            }
            IMC => {
                self.ims &= !value;
                self.update_irq(host);
            }
            RDBA => self.rx.base = value as u64,
            RDLEN => {
                if !self.rx.configure(value) {
                    return Err(NicError::BadRingLength(value));
                }
                self.rx_fetch_ptr = 0;
            }
            RDH => self.rx.set_head(value),
            RDT => {
                self.rx.set_tail(value);
                self.maybe_fetch_rx(host);
            }
            TDBA => self.tx.base = value as u64,
            TDLEN => {
                if !self.tx.configure(value) {
                    return Err(NicError::BadRingLength(value));
                }
                self.tx_fetch_ptr = 0;
            }
            TDH => self.tx.set_head(value),
            TDT => self.transmit_tail_write(value, host),
            other => return Err(NicError::UnknownRegister(other)),
        }
        Ok(())
    }

    fn maybe_fetch_rx(&mut self, host: &mut impl NicHost) {
        if !self.rx.is_configured() || self.cache.fetching > 0 {
            return;
        }
        if self.cache.prefetched.len() as u32 >= self.cache.capacity / 2 {
            return;
        }
        let n = self.cache.free_slots().min(self.rx.distance(self.rx_fetch_ptr, self.rx.tail()));
        if n == 0 {
            return;
        }
        self.cache.fetching = n;
        let now = host.now();
        let done = self.rx_engine.reserve(now, n as u64 * DESCRIPTOR_BYTES);
        let mem = host.dma_read_meta(self.rx.desc_addr(self.rx_fetch_ptr), n as u64 * DESCRIPTOR_BYTES);
        host.schedule(done + self.dma_latency + mem, NicEvent::RxDescFetched { count: n });
    }

    /// A frame arrives from the wire.
    pub fn wire_receive(&mut self, frame: Frame, host: &mut impl NicHost) {
        self.stats.frames_in += 1;
        let now = host.now();
        self.last_activity = now;
        if !self.enabled() || frame.len() > self.cfg.rx_buffer_size as usize {
            self.stats.rx_dropped += 1;
            return;
        }
        let Some((index, buffer_addr)) = self.cache.prefetched.pop_front() else {
            self.stats.rx_dropped += 1;
            self.maybe_fetch_rx(host);
            return;
        };
        self.cache.in_flight += 1;
        let done = self.rx_engine.reserve(now, frame.len() as u64);
        host.schedule(done + self.dma_latency, NicEvent::RxDmaDone { index, buffer_addr, frame });
        self.maybe_fetch_rx(host);
    }

    /// Writes back every used descriptor. Returns the batch size.
    pub fn descriptor_writeback(&mut self, flush: bool, host: &mut impl NicHost) -> u32 {
        let batch = std::mem::take(&mut self.cache.used);
        let n = batch.len() as u32;
        if n == 0 {
            return 0;
        }
        let hist = if flush { &mut self.stats.flush_batches } else { &mut self.stats.writeback_batches };
        *hist.entry(n).or_insert(0) += 1;
        let done = self.rx_engine.reserve(host.now(), n as u64 * DESCRIPTOR_BYTES);
        host.schedule(done + self.dma_latency, NicEvent::RxWritebackDone { batch });
        self.maybe_fetch_rx(host);
        n
    }

    fn schedule_flush_check(&mut self, host: &mut impl NicHost) {
        if !self.flush_pending {
            self.flush_pending = true;
            host.schedule(self.last_activity + Tick::from_ns(self.cfg.flush_timeout_ns), NicEvent::FlushCheck);
        }
    }

    pub fn transmit_tail_write(&mut self, new_tail: u32, host: &mut impl NicHost) {
        if !self.tx.is_configured() {
            return;
        }
        let new_tail = self.tx.wrap(new_tail);
        if new_tail == self.tx.tail() {
            return;
        }
        self.tx.set_tail(new_tail);
        self.maybe_fetch_tx(host);
    }

    fn maybe_fetch_tx(&mut self, host: &mut impl NicHost) {
        if self.tx_fetching {
            return;
        }
        let n = self.tx.distance(self.tx_fetch_ptr, self.tx.tail());
        if n == 0 {
            return;
        }
        self.tx_fetching = true;
        let now = host.now();
        let done = self.tx_engine.reserve(now, n as u64 * DESCRIPTOR_BYTES);
        let mem = host.dma_read_meta(self.tx.desc_addr(self.tx_fetch_ptr), n as u64 * DESCRIPTOR_BYTES);
        host.schedule(done + self.dma_latency + mem, NicEvent::TxDescFetched { count: n });
    }

    pub fn handle(&mut self, ev: NicEvent, host: &mut impl NicHost) {
        debug_assert!(self.cache.occupancy() <= self.cache.capacity, "descriptor cache overcommitted");
        let now = host.now();
        match ev {
            NicEvent::RxDescFetched { count } => {
                for _ in 0..count {
                    let idx = self.rx_fetch_ptr;
                    let addr = self.rx.desc(idx).buffer_addr;
                    self.cache.prefetched.push_back((idx, addr));
                    self.rx_fetch_ptr = self.rx.wrap(idx + 1);
                }
                self.cache.fetching = 0;
                self.maybe_fetch_rx(host);
            }
            NicEvent::RxDmaDone { index, buffer_addr, frame } => {
                self.cache.in_flight -= 1;
                self.cache.landing += 1;
                self.stats.frames_delivered += 1;
                let length = frame.len() as u16;
                let mem = host.dma_write(buffer_addr, frame.bytes(), self.cfg.dca_enabled);
                let ready = (now + mem).max(self.last_rx_ready);
                self.last_rx_ready = ready;
                host.schedule(ready, NicEvent::RxLanded { index, length });
            }
            NicEvent::RxLanded { index, length } => {
                self.cache.landing -= 1;
                self.cache.used.push(UsedDescriptor { index, length });
                self.last_activity = now;
                if self.cache.used.len() as u32 >= self.cfg.wb_threshold {
                    self.descriptor_writeback(false, host);
                } else {
                    self.schedule_flush_check(host);
                }
            }
            NicEvent::RxWritebackDone { batch } => {
                if let (Some(first), Some(last)) = (batch.first(), batch.last()) {
                    let first_addr = self.rx.desc_addr(first.index);
                    let contiguous = self.rx.distance(first.index, last.index) + 1 == batch.len() as u32;
                    if contiguous && last.index >= first.index {
                        host.dma_write_meta(first_addr, batch.len() as u64 * DESCRIPTOR_BYTES, self.cfg.dca_enabled);
                    } else {
                        for u in &batch {
                            host.dma_write_meta(self.rx.desc_addr(u.index), DESCRIPTOR_BYTES, self.cfg.dca_enabled);
                        }
                    }
                    for u in &batch {
                        let d = self.rx.desc_mut(u.index);
                        d.length = u.length;
                        d.status_dd = true;
                    }
                    let head = self.rx.wrap(last.index + 1);
                    self.rx.set_head(head);
                }
                self.set_interrupt_cause(regs::ICR_RXT0, host);
            }
            NicEvent::FlushCheck => {
                self.flush_pending = false;
                if self.cache.used.is_empty() {
                    return;
                }
                let deadline = self.last_activity + Tick::from_ns(self.cfg.flush_timeout_ns);
                if now >= deadline {
                    self.descriptor_writeback(true, host);
                } else {
                    self.schedule_flush_check(host);
                }
            }
            NicEvent::TxDescFetched { count } => {
                for _ in 0..count {
                    let idx = self.tx_fetch_ptr;
                    let d = *self.tx.desc(idx);
                    let done = self.tx_engine.reserve(now, d.length as u64);
                    let (bytes, mem) = host.dma_read(d.buffer_addr, d.length as usize);
                    let ready = (done + self.dma_latency + mem).max(self.last_tx_ready);
                    self.last_tx_ready = ready;
                    host.schedule(ready, NicEvent::TxFrameReady { index: idx, frame: Frame::from_bytes(bytes) });
                    self.tx_fetch_ptr = self.tx.wrap(idx + 1);
                }
                self.tx_fetching = false;
                self.maybe_fetch_tx(host);
            }
            NicEvent::TxFrameReady { index, frame } => {
                host.transmit(frame);
                self.tx.desc_mut(index).status_dd = true;
                self.tx.set_head(index + 1);
                self.stats.frames_out += 1;
                self.stats.tx_descriptors_completed += 1;
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use std::collections::HashMap;

    use super::*;
    use crate::sim::Engine;

    /// Stand-alone host: flat byte store, fixed memory latency, wire capture.
    #[derive(Default)]
    pub struct Bench {
        pub memory: HashMap<u64, Vec<u8>>,
        pub wire: Vec<(Tick, Frame)>,
        pub irqs: u64,
    }

    pub struct BenchHost<'a> {
        pub engine: &'a mut Engine<NicEvent>,
        pub bench: &'a mut Bench,
    }

    impl NicHost for BenchHost<'_> {
        fn now(&self) -> Tick {
            self.engine.now()
        }
        fn schedule(&mut self, at: Tick, ev: NicEvent) {
            self.engine.schedule_at(at, ev).unwrap();
        }
        fn dma_write(&mut self, addr: u64, data: &[u8], _dca: bool) -> Tick {
            self.bench.memory.insert(addr, data.to_vec());
            Tick::from_ns(50)
        }
        fn dma_write_meta(&mut self, _addr: u64, _len: u64, _dca: bool) -> Tick {
            Tick::from_ns(50)
        }
        fn dma_read(&mut self, addr: u64, len: usize) -> (Vec<u8>, Tick) {
            let mut v = self.bench.memory.get(&addr).cloned().unwrap_or_default();
            v.resize(len, 0);
            (v, Tick::from_ns(50))
        }
        fn dma_read_meta(&mut self, _addr: u64, _len: u64) -> Tick {
            Tick::from_ns(50)
        }
        fn transmit(&mut self, frame: Frame) {
            let now = self.engine.now();
            self.bench.wire.push((now, frame));
        }
        fn interrupt(&mut self) {
            self.bench.irqs += 1;
        }
    }

    pub struct Rig {
        pub nic: Nic,
        pub engine: Engine<NicEvent>,
        pub bench: Bench,
    }

    impl Rig {
        pub fn new(cfg: NicConfig) -> Self {
            Rig { nic: Nic::new(0, cfg), engine: Engine::new(1), bench: Bench::default() }
        }

        pub fn with<R>(&mut self, f: impl FnOnce(&mut Nic, &mut BenchHost<'_>) -> R) -> R {
            let mut host = BenchHost { engine: &mut self.engine, bench: &mut self.bench };
            f(&mut self.nic, &mut host)
        }

        pub fn run_until(&mut self, t: Tick) {
            while let Some((_, ev)) = self.engine.pop_until(t) {
                let mut host = BenchHost { engine: &mut self.engine, bench: &mut self.bench };
                self.nic.handle(ev, &mut host);
            }
            self.engine.advance_to(t);
        }

        /// Enables the device and posts `ring - 1` RX buffers at 0x10000 + i*2048.
        pub fn bring_up(&mut self) {
            let rx = self.nic.config().rx_ring_size;
            let tx = self.nic.config().tx_ring_size;
            self.with(|nic, h| {
                nic.write_config(0x04, 2, 0x0006, h).unwrap();
                nic.mmio_write(regs::CTRL, regs::CTRL_SLU, h).unwrap();
                nic.mmio_write(regs::RDBA, 0x1000, h).unwrap();
                nic.mmio_write(regs::RDLEN, rx * 16, h).unwrap();
                nic.mmio_write(regs::TDBA, 0x8000, h).unwrap();
                nic.mmio_write(regs::TDLEN, tx * 16, h).unwrap();
                for i in 0..rx {
                    nic.rx_ring_mut().desc_mut(i).buffer_addr = 0x10000 + i as u64 * 2048;
                }
                nic.mmio_write(regs::RDT, rx - 1, h).unwrap();
            });
            self.run_until(self.engine.now() + Tick::from_us(5));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::Rig;
    use super::*;

    fn frame(n: usize, tag: u8) -> Frame {
        Frame::ethernet([1; 6], [2; 6], 0x88B5, &vec![tag; n - 14])
    }

    #[test]
    fn ims_then_cause_asserts() {
        let mut rig = Rig::new(NicConfig::default());
        rig.with(|nic, h| {
            nic.mmio_write(regs::IMS, 0x80, h).unwrap();
            nic.set_interrupt_cause(0x80, h);
            assert!(nic.interrupt_line());
        });
        assert_eq!(rig.bench.irqs, 1);
    }

    #[test]
    fn imc_masks_everything() {
        let mut rig = Rig::new(NicConfig::default());
        rig.with(|nic, h| {
            nic.mmio_write(regs::IMS, 0xFFFF_FFFF, h).unwrap();
            nic.mmio_write(regs::IMC, 0xFFFF_FFFF, h).unwrap();
            nic.set_interrupt_cause(0xFFFF_FFFF, h);
            assert!(!nic.interrupt_line());
        });
        assert_eq!(rig.bench.irqs, 0);
    }

    #[test]
    fn icr_read_to_clear() {
        let mut rig = Rig::new(NicConfig::default());
        rig.with(|nic, h| {
            nic.set_interrupt_cause(0x5, h);
            assert_eq!(nic.mmio_read(regs::ICR, h).unwrap(), 0x5);
            assert_eq!(nic.mmio_read(regs::ICR, h).unwrap(), 0x0);
        });
    }

    #[test]
    fn intx_disable_gates_line() {
        let mut rig = Rig::new(NicConfig::default());
        rig.with(|nic, h| {
            nic.mmio_write(regs::IMS, 0x80, h).unwrap();
            nic.write_config(0x05, 1, 0x04, h).unwrap();
            nic.set_interrupt_cause(0x80, h);
            assert!(!nic.interrupt_line());
            // clearing the disable bit re-evaluates the pending cause
            nic.write_config(0x05, 1, 0x00, h).unwrap();
            assert!(nic.interrupt_line());
        });
        assert_eq!(rig.bench.irqs, 1);
    }

    #[test]
    fn unknown_register() {
        let mut rig = Rig::new(NicConfig::default());
        rig.with(|nic, h| {
            assert_eq!(nic.mmio_read(0x4444, h), Err(NicError::UnknownRegister(0x4444)));
            assert_eq!(nic.mmio_write(0x0008, 1, h), Err(NicError::UnknownRegister(0x0008)));
        });
    }

    fn feed(rig: &mut Rig, n: usize, spacing: Tick) {
        for i in 0..n {
            let t = rig.engine.now() + spacing;
            rig.run_until(t);
            rig.with(|nic, h| nic.wire_receive(frame(200, i as u8), h));
        }
    }

    #[test]
    fn threshold_one_writes_back_each_frame() {
        let mut rig = Rig::new(NicConfig { wb_threshold: 1, ..NicConfig::default() });
        rig.bring_up();
        feed(&mut rig, 5, Tick::from_us(2));
        rig.run_until(rig.engine.now() + Tick::from_us(5));
        assert_eq!(rig.nic.stats().writeback_batches.get(&1), Some(&5));
    }

    #[test]
    fn threshold_32_waits_for_32() {
        let mut rig = Rig::new(NicConfig::default());
        rig.bring_up();
        feed(&mut rig, 31, Tick::from_ns(300));
        rig.run_until(rig.engine.now() + Tick::from_ns(2000));
        assert!(rig.nic.stats().writeback_batches.is_empty());
        assert!(!rig.nic.rx_ring().desc(0).status_dd);
        feed(&mut rig, 1, Tick::from_ns(300));
        rig.run_until(rig.engine.now() + Tick::from_ns(2000));
        assert_eq!(rig.nic.stats().writeback_batches.get(&32), Some(&1));
        assert!((0..32).all(|i| rig.nic.rx_ring().desc(i).status_dd));
        assert_eq!(rig.nic.rx_ring().head(), 32);
    }

    #[test]
    fn quiescent_flush() {
        let mut rig = Rig::new(NicConfig::default());
        rig.bring_up();
        feed(&mut rig, 3, Tick::from_ns(300));
        rig.run_until(rig.engine.now() + Tick::from_us(5));
        assert!(rig.nic.stats().flush_batches.is_empty());
        rig.run_until(rig.engine.now() + Tick::from_us(20));
        assert_eq!(rig.nic.stats().flush_batches.get(&3), Some(&1));
        assert_eq!(rig.bench.memory.get(&0x10000).map(|v| v.len()), Some(200));
    }

    #[test]
    fn drop_without_free_descriptor() {
        let mut rig = Rig::new(NicConfig::default());
        rig.bring_up();
        rig.with(|nic, h| {
            // exhaust prefetched descriptors without advancing time
            while !nic.descriptor_cache().prefetched.is_empty() {
                nic.wire_receive(frame(64, 0), h);
            }
            let before = nic.descriptor_cache().occupancy();
            let head = nic.rx_ring().head();
            nic.wire_receive(frame(64, 0), h);
            assert_eq!(nic.stats().rx_dropped, 1);
            assert_eq!(nic.descriptor_cache().occupancy(), before);
            assert_eq!(nic.rx_ring().head(), head);
        });
    }

    #[test]
    fn disabled_nic_drops() {
        let mut rig = Rig::new(NicConfig::default());
        rig.with(|nic, h| nic.wire_receive(frame(64, 0), h));
        assert_eq!(rig.nic.stats().rx_dropped, 1);
        assert_eq!(rig.nic.stats().frames_in, 1);
    }

    fn post_tx(rig: &mut Rig, frames: &[Frame]) {
        rig.with(|nic, h| {
            let mut tail = nic.tx_ring().tail();
            for f in frames {
                let addr = 0x100_0000 + tail as u64 * 2048;
                h.bench.memory.insert(addr, f.bytes().to_vec());
                let d = nic.tx_ring_mut().desc_mut(tail);
                d.buffer_addr = addr;
                d.length = f.len() as u16;
                d.status_dd = false;
                tail = nic.tx_ring().wrap(tail + 1);
            }
            nic.mmio_write(regs::TDT, tail, h).unwrap();
        });
    }

    #[test]
    fn tx_single_frame_integrity() {
        let mut rig = Rig::new(NicConfig::default());
        rig.bring_up();
        let f = frame(300, 0x5A);
        post_tx(&mut rig, std::slice::from_ref(&f));
        rig.run_until(rig.engine.now() + Tick::from_us(10));
        assert_eq!(rig.bench.wire.len(), 1);
        assert_eq!(rig.bench.wire[0].1, f);
        assert!(rig.nic.tx_ring().desc(0).status_dd);
        assert_eq!(rig.nic.tx_ring().head(), 1);
    }

    #[test]
    fn tx_ring_order() {
        let mut rig = Rig::new(NicConfig::default());
        rig.bring_up();
        let frames: Vec<_> = (0..32).map(|i| frame(100, i)).collect();
        post_tx(&mut rig, &frames);
        rig.run_until(rig.engine.now() + Tick::from_us(50));
        let got: Vec<_> = rig.bench.wire.iter().map(|(_, f)| f.clone()).collect();
        assert_eq!(got, frames);
        assert!(rig.bench.wire.windows(2).all(|w| w[0].0 <= w[1].0));
        assert_eq!(rig.nic.stats().frames_out, rig.nic.stats().tx_descriptors_completed);
    }

    #[test]
    fn tx_same_tail_is_noop() {
        let mut rig = Rig::new(NicConfig::default());
        rig.bring_up();
        rig.with(|nic, h| {
            let t = nic.tx_ring().tail();
            nic.mmio_write(regs::TDT, t, h).unwrap();
        });
        assert_eq!(rig.engine.pending(), 0);
    }

    #[test]
    fn engine_serializes_with_tlp_overhead() {
        let mut e = DmaEngine::new(64.0, 256, 24);
        assert_eq!(e.wire_bytes(1500), 1644);
        let a = e.reserve(Tick::ZERO, 1500);
        let b = e.reserve(Tick::ZERO, 1500);
        assert_eq!(b.as_ps(), 2 * a.as_ps());
        assert_eq!(a, Tick::for_bits(1644, 64.0));
    }
}
