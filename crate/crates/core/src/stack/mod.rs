//! Software stacks driving a NIC: the interrupt-driven kernel path with its
//! echo application, and the polling-mode driver with L2Fwd.
//!
//! Both stacks share the [`RingDriver`] buffer management; they differ in
//! how completions are discovered and in what each packet costs.

mod kernel;
mod mempool;
mod pmd;

pub use kernel::{KernelDriver, KernelEvent, KernelPathCosts, KernelStats, SerialLock};
pub use mempool::{Mempool, MempoolError};
pub use pmd::{PmdConfig, PmdDriver, PmdMode, PmdStats};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::swap_macs;
use crate::memory::AccessKind;
use crate::nic::{regs, Nic, NicError, NicHost, DESCRIPTOR_BYTES};
use crate::pci::{self, command};
use crate::sim::Tick;

/// Vendor ID the drivers' probe tables match against.
pub const DRIVER_VENDOR_ID: u16 = 0x8086;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackKind {
    Kernel,
    Pmd,
}

impl fmt::Display for StackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StackKind::Kernel => "kernel",
            StackKind::Pmd => "pmd",
        })
    }
}

impl FromStr for StackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kernel" => Ok(StackKind::Kernel),
            "pmd" => Ok(StackKind::Pmd),
            _ => Err(format!("expected kernel or pmd, got `{s}`")),
        }
    }
}

/// Cycles (or cycle-equivalents for stalls and spinning) by category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub poll: u64,
    pub process: u64,
    pub stall: u64,
    pub copy: u64,
    pub irq: u64,
    pub softirq: u64,
    pub syscall: u64,
    pub socket: u64,
    pub context_switch: u64,
    pub lock: u64,
    pub spin: u64,
}

impl CostBreakdown {
    /// Cost-table cycles, excluding memory stalls and lock spinning.
    pub fn table_cycles(&self) -> u64 {
        self.poll
            + self.process
            + self.copy
            + self.irq
            + self.softirq
            + self.syscall
            + self.socket
            + self.context_switch
            + self.lock
    }
}

/// One simulated core. Work items run back to back; time only moves forward.
#[derive(Clone, Debug)]
pub struct CoreModel {
    pub id: usize,
    freq_hz: f64,
    busy_until: Tick,
    busy_ps: u64,
    pub costs: CostBreakdown,
    intervals: Option<Vec<(Tick, Tick)>>,
}

impl CoreModel {
    pub fn new(id: usize, freq_hz: f64) -> Self {
        CoreModel { id, freq_hz, busy_until: Tick::ZERO, busy_ps: 0, costs: CostBreakdown::default(), intervals: None }
    }

    /// Keeps every busy interval for inspection.
    pub fn record_intervals(&mut self) {
        self.intervals.get_or_insert_with(Vec::new);
    }

    pub fn intervals(&self) -> &[(Tick, Tick)] {
        self.intervals.as_deref().unwrap_or(&[])
    }

    pub fn freq_hz(&self) -> f64 {
        self.freq_hz
    }

    pub fn busy_until(&self) -> Tick {
        self.busy_until
    }

    pub fn busy_ps(&self) -> u64 {
        self.busy_ps
    }

    pub fn cycles(&self, cycles: u64) -> Tick {
        Tick::from_cycles(cycles as f64, self.freq_hz)
    }

    pub fn to_cycles(&self, t: Tick) -> u64 {
        (t.as_ps() as f64 * self.freq_hz / 1e12).round() as u64
    }

    /// Occupies the core for `dur` starting no earlier than `start`.
    pub fn run(&mut self, start: Tick, dur: Tick) -> Tick {
        let begin = start.max(self.busy_until);
        let end = begin + dur;
        if let Some(iv) = self.intervals.as_mut() {
            if dur > Tick::ZERO {
                iv.push((begin, end));
            }
        }
        self.busy_until = end;
        self.busy_ps += dur.as_ps();
        end
    }

    pub fn utilization(&self, elapsed: Tick) -> f64 {
        if elapsed == Tick::ZERO {
            0.0
        } else {
            self.busy_ps as f64 / elapsed.as_ps() as f64
        }
    }
}

/// What a driver needs beyond NIC-side DMA: core memory accesses and the
/// packet bytes held in host buffers.
pub trait DriverEnv: NicHost {
    fn cpu_access(&mut self, addr: u64, kind: AccessKind, core: usize) -> Tick;
    fn buffer_mut(&mut self, addr: u64) -> Option<&mut Vec<u8>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Packet {
    pub buffer: u64,
    pub length: u16,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverStats {
    pub rx_packets: u64,
    pub tx_posted: u64,
    pub tx_completed: u64,
    pub runt_drops: u64,
    pub ring_drops: u64,
    pub mempool_exhausted: u64,
    pub rdt_writes: u64,
    pub tdt_writes: u64,
    pub buffers_high_water: u64,
    pub buffers_distinct: u64,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DriverError {
    #[error("device is already bound")]
    AlreadyBound,
    #[error("vendor id {found:#06x} does not match {expected:#06x}")]
    VendorMismatch { found: u16, expected: u16 },
    #[error("mempool of {0} buffers cannot fill the RX ring")]
    MempoolTooSmall(usize),
    #[error(transparent)]
    Nic(#[from] NicError),
    #[error(transparent)]
    Mempool(#[from] MempoolError),
}

/// Proof that a NIC was bound to a driver of `kind`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Binding {
    pub kind: StackKind,
    pub forced: bool,
}

/// Claims `nic` for a driver. The vendor ID is compared against the
/// driver's table; `force` accepts a mismatch.
pub fn bind_device(
    nic: &mut Nic,
    kind: StackKind,
    force: bool,
    host: &mut impl NicHost,
) -> Result<Binding, DriverError> {
    if nic.is_claimed() {
        return Err(DriverError::AlreadyBound);
    }
    let found = nic.read_config(pci::VENDOR_ID, 2)? as u16;
    let mismatch = found != DRIVER_VENDOR_ID;
    if mismatch && !force {
        return Err(DriverError::VendorMismatch { found, expected: DRIVER_VENDOR_ID });
    }
    let cmd = nic.read_config(pci::COMMAND, 1)? as u16;
    nic.write_config(pci::COMMAND, 1, (cmd | command::MEM_SPACE | command::BUS_MASTER) as u32, host)?;
    match kind {
        StackKind::Pmd => {
            let hi = nic.read_config(pci::COMMAND + 1, 1)?;
            nic.write_config(pci::COMMAND + 1, 1, hi | (command::INTX_DISABLE >> 8) as u32, host)?;
            nic.mmio_write(regs::IMC, 0xFFFF_FFFF, host)?;
        }
        StackKind::Kernel => {
            nic.mmio_write(regs::IMS, regs::ICR_RXT0, host)?;
        }
    }
    nic.claim();
    Ok(Binding { kind, forced: mismatch })
}

/// Swaps the Ethernet MAC addresses in place. Returns false for a runt.
pub fn l2fwd_process(bytes: &mut [u8]) -> bool {
    swap_macs(bytes)
}

/// Driver-side view of both descriptor rings and the buffers behind them.
#[derive(Clone, Debug)]
pub struct RingDriver {
    pub mempool: Mempool,
    rx_next: u32,
    rx_tail: u32,
    rx_tail_written: u32,
    tx_bufs: Vec<Option<u64>>,
    tx_tail: u32,
    tx_tail_written: u32,
    tx_clean: u32,
    rx_size: u32,
    tx_size: u32,
    pub stats: DriverStats,
}

impl RingDriver {
    /// Programs both rings and posts a buffer in every RX slot but one.
    pub fn attach(
        nic: &mut Nic,
        host: &mut impl NicHost,
        mut mempool: Mempool,
        rx_base: u64,
        tx_base: u64,
    ) -> Result<Self, DriverError> {
        let rx_size = nic.config().rx_ring_size;
        let tx_size = nic.config().tx_ring_size;
        if mempool.available() < rx_size as usize {
            return Err(DriverError::MempoolTooSmall(mempool.available()));
        }
        nic.mmio_write(regs::RDBA, rx_base as u32, host)?;
        nic.mmio_write(regs::RDLEN, rx_size * DESCRIPTOR_BYTES as u32, host)?;
        nic.mmio_write(regs::TDBA, tx_base as u32, host)?;
        nic.mmio_write(regs::TDLEN, tx_size * DESCRIPTOR_BYTES as u32, host)?;
        for i in 0..rx_size {
            let buf = mempool.alloc().expect("checked above");
            nic.rx_ring_mut().desc_mut(i).buffer_addr = buf;
        }
        nic.mmio_write(regs::CTRL, regs::CTRL_SLU, host)?;
        let mut d = RingDriver {
            mempool,
            rx_next: 0,
            rx_tail: rx_size - 1,
            rx_tail_written: 0,
            tx_bufs: vec![None; tx_size as usize],
            tx_tail: 0,
            tx_tail_written: 0,
            tx_clean: 0,
            rx_size,
            tx_size,
            stats: DriverStats::default(),
        };
        d.write_rx_tail(nic, host);
        Ok(d)
    }

    pub fn rx_next(&self) -> u32 {
        self.rx_next
    }

    /// Takes up to `max` completed RX descriptors, replacing each buffer.
    /// Descriptor reads are charged to `core` into `stall`.
    pub fn rx_collect(
        &mut self,
        nic: &mut Nic,
        env: &mut impl DriverEnv,
        core: usize,
        max: usize,
        stall: &mut Tick,
        out: &mut Vec<Packet>,
    ) {
        let mut last_line = u64::MAX;
        for _ in 0..max {
            let idx = self.rx_next;
            let addr = nic.rx_ring().desc_addr(idx);
            if addr / 64 != last_line {
                last_line = addr / 64;
                *stall += env.cpu_access(addr, AccessKind::Read, core);
            }
            let d = *nic.rx_ring().desc(idx);
            if !d.status_dd {
                break;
            }
            let Some(fresh) = self.mempool.alloc() else {
                self.stats.mempool_exhausted += 1;
                break;
            };
            let slot = nic.rx_ring_mut().desc_mut(idx);
            slot.status_dd = false;
            slot.buffer_addr = fresh;
            slot.length = 0;
            out.push(Packet { buffer: d.buffer_addr, length: d.length });
            self.rx_next = (idx + 1) & (self.rx_size - 1);
            self.rx_tail = idx;
            self.stats.rx_packets += 1;
        }
        self.track_pool();
    }

    fn track_pool(&mut self) {
        self.stats.buffers_high_water = self.mempool.high_water() as u64;
        self.stats.buffers_distinct = self.mempool.distinct_used() as u64;
    }

    pub fn rx_refills_pending(&self) -> u32 {
        (self.rx_tail.wrapping_sub(self.rx_tail_written)) & (self.rx_size - 1)
    }

    pub fn write_rx_tail(&mut self, nic: &mut Nic, host: &mut impl NicHost) {
        if self.rx_tail != self.rx_tail_written {
            nic.mmio_write(regs::RDT, self.rx_tail, host).expect("RDT is modeled");
            self.rx_tail_written = self.rx_tail;
            self.stats.rdt_writes += 1;
        }
    }

    pub fn tx_free_slots(&self) -> u32 {
        self.tx_size - 1 - ((self.tx_tail.wrapping_sub(self.tx_clean)) & (self.tx_size - 1))
    }

    /// Returns completed TX buffers to the mempool.
    pub fn tx_reclaim(&mut self, nic: &Nic) -> u32 {
        let mut n = 0;
        while self.tx_clean != self.tx_tail && nic.tx_ring().desc(self.tx_clean).status_dd {
            let buf = self.tx_bufs[self.tx_clean as usize].take().expect("posted slot has a buffer");
            self.mempool.free(buf).expect("tx buffer belongs to the pool");
            self.tx_clean = (self.tx_clean + 1) & (self.tx_size - 1);
            n += 1;
        }
        self.stats.tx_completed += n as u64;
        n
    }

    /// Posts one packet if the TX ring has room.
    pub fn tx_post(&mut self, nic: &mut Nic, env: &mut impl DriverEnv, core: usize, p: Packet, stall: &mut Tick) -> bool {
        if self.tx_free_slots() == 0 {
            return false;
        }
        let idx = self.tx_tail;
        *stall += env.cpu_access(nic.tx_ring().desc_addr(idx), AccessKind::Write, core);
        let d = nic.tx_ring_mut().desc_mut(idx);
        d.buffer_addr = p.buffer;
        d.length = p.length;
        d.status_dd = false;
        self.tx_bufs[idx as usize] = Some(p.buffer);
        self.tx_tail = (idx + 1) & (self.tx_size - 1);
        self.stats.tx_posted += 1;
        true
    }

    pub fn write_tx_tail(&mut self, nic: &mut Nic, host: &mut impl NicHost) {
        if self.tx_tail != self.tx_tail_written {
            nic.mmio_write(regs::TDT, self.tx_tail, host).expect("TDT is modeled");
            self.tx_tail_written = self.tx_tail;
            self.stats.tdt_writes += 1;
        }
    }

    /// Applies L2Fwd to the buffer and touches its header from `core`.
    /// A runt is dropped and its buffer freed.
    pub fn forward(&mut self, env: &mut impl DriverEnv, core: usize, p: Packet, stall: &mut Tick) -> bool {
        *stall += env.cpu_access(p.buffer, AccessKind::Write, core);
        let ok = match env.buffer_mut(p.buffer) {
            Some(bytes) => {
                bytes.truncate(p.length as usize);
                l2fwd_process(bytes)
            }
            None => false,
        };
        if !ok {
            self.stats.runt_drops += 1;
            self.drop_packet(p);
        }
        ok
    }

    pub fn drop_packet(&mut self, p: Packet) {
        self.mempool.free(p.buffer).expect("packet buffer belongs to the pool");
    }
}


#[cfg(test)]
mod tests {
    use super::testing::Bed;
    use super::*;
    use crate::nic::NicConfig;

    #[test]
    fn pmd_bind_disables_intx_and_masks() {
        let mut bed = Bed::new(NicConfig::default());
        let b = bed.with(|nic, env| bind_device(nic, StackKind::Pmd, false, env)).unwrap();
        assert!(!b.forced);
        assert!(bed.nic.pci().intx_disabled());
        assert_eq!(bed.nic.ims(), 0);
        assert!(bed.nic.pci().command().bus_master());
        let again = bed.with(|nic, env| bind_device(nic, StackKind::Kernel, true, env));
        assert_eq!(again, Err(DriverError::AlreadyBound));
    }

    #[test]
    fn kernel_bind_enables_rx_interrupt() {
        let mut bed = Bed::new(NicConfig::default());
        bed.with(|nic, env| bind_device(nic, StackKind::Kernel, false, env)).unwrap();
        assert!(!bed.nic.pci().intx_disabled());
        assert_eq!(bed.nic.ims(), regs::ICR_RXT0);
    }

    #[test]
    fn vendor_mismatch_needs_force() {
        let cfg = NicConfig { vendor_id: 0x1234, ..NicConfig::default() };
        let mut bed = Bed::new(cfg.clone());
        let e = bed.with(|nic, env| bind_device(nic, StackKind::Pmd, false, env));
        assert_eq!(e, Err(DriverError::VendorMismatch { found: 0x1234, expected: DRIVER_VENDOR_ID }));
        assert!(!bed.nic.is_claimed());
        let mut bed = Bed::new(cfg);
        let b = bed.with(|nic, env| bind_device(nic, StackKind::Pmd, true, env)).unwrap();
        assert!(b.forced);
    }

    #[test]
    fn l2fwd_swaps_and_rejects_runts() {
        let mut f = Bed::frame(9).into_bytes();
        let payload = f[14..].to_vec();
        assert!(l2fwd_process(&mut f));
        assert_eq!(&f[0..6], &[0xBB; 6]);
        assert_eq!(&f[6..12], &[0xAA; 6]);
        assert_eq!(&f[14..], &payload[..]);
        let mut runt = vec![0u8; 13];
        assert!(!l2fwd_process(&mut runt));
    }

    #[test]
    fn core_intervals_do_not_overlap() {
        let mut c = CoreModel::new(0, 2e9);
        c.record_intervals();
        let a = c.run(Tick::from_ns(10), c.cycles(100));
        let b = c.run(Tick::from_ns(5), c.cycles(100));
        assert_eq!(a, Tick::from_ns(60));
        assert_eq!(b, Tick::from_ns(110));
        assert!(c.intervals().windows(2).all(|w| w[0].1 <= w[1].0));
    }

    #[test]
    fn doubling_frequency_halves_service_time() {
        let slow = CoreModel::new(0, 2e9);
        let fast = CoreModel::new(0, 4e9);
        for cycles in [1, 7, 700, 123_457] {
            let (s, f) = (slow.cycles(cycles).as_ps(), fast.cycles(cycles).as_ps());
            assert!(s.abs_diff(2 * f) <= 1, "{cycles}: {s} vs {f}");
        }
    }
}
