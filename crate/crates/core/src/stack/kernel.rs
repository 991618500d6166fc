use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{CoreModel, DriverEnv, Packet, RingDriver};
use crate::nic::{regs, Nic};
use crate::sim::Tick;

/// Cycle costs of the interrupt-driven receive and echo-transmit path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelPathCosts {
    pub irq_entry: u64,
    pub softirq_per_packet: u64,
    pub syscall: u64,
    pub copy_per_byte: f64,
    pub context_switch: u64,
    pub socket_overhead_per_packet: u64,
    /// Per-packet section executed under a lock shared by all ports.
    pub serialized_per_packet: u64,
}

impl Default for KernelPathCosts {
    fn default() -> Self {
        KernelPathCosts {
            irq_entry: 6000,
            softirq_per_packet: 200,
            syscall: 120,
            copy_per_byte: 0.1,
            context_switch: 3000,
            socket_overhead_per_packet: 100,
            serialized_per_packet: 600,
        }
    }
}

impl KernelPathCosts {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.copy_per_byte >= 0.0 && self.copy_per_byte.is_finite()) {
            return Err("kernel.copy_per_byte must be a finite value >= 0".into());
        }
        Ok(())
    }

    pub fn copy_cycles(&self, bytes: u64) -> u64 {
        (self.copy_per_byte * bytes as f64).round() as u64
    }

    /// Transmit half of the echo: socket send and driver xmit, no copy.
    pub fn tx_path(&self) -> u64 {
        self.socket_overhead_per_packet + self.softirq_per_packet
    }
}

/// FIFO lock shared between cores. Requests must arrive in time order.
#[derive(Clone, Debug, Default)]
pub struct SerialLock {
    free_at: Tick,
    pub acquisitions: u64,
    pub contended: u64,
}

impl SerialLock {
    /// Returns (grant time, release time).
    pub fn acquire(&mut self, now: Tick, hold: Tick) -> (Tick, Tick) {
        let grant = now.max(self.free_at);
        if grant > now {
            self.contended += 1;
        }
        self.acquisitions += 1;
        self.free_at = grant + hold;
        (grant, self.free_at)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelEvent {
    /// The NIC raised its interrupt line.
    Irq,
    /// Start the interrupt handler on the core.
    Isr,
    PacketStart,
    LockRequest,
    PacketFinish,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    pub interrupts_handled: u64,
    pub batches: u64,
    pub packets: u64,
    pub copies: u64,
}

/// Kernel driver plus echo application on one core.
#[derive(Clone, Debug)]
pub struct KernelDriver {
    pub ring: RingDriver,
    costs: KernelPathCosts,
    mlp: u32,
    pub core: usize,
    busy: bool,
    irq_pending: bool,
    batch: VecDeque<Packet>,
    current: Option<Packet>,
    pending_tx: VecDeque<Packet>,
    pub stats: KernelStats,
}

type Next = Option<(Tick, KernelEvent)>;

impl KernelDriver {
    pub fn new(ring: RingDriver, costs: KernelPathCosts, mlp: u32, core: usize) -> Self {
        KernelDriver {
            ring,
            costs,
            mlp: mlp.max(1),
            core,
            busy: false,
            irq_pending: false,
            batch: VecDeque::new(),
            current: None,
            pending_tx: VecDeque::new(),
            stats: KernelStats::default(),
        }
    }

    pub fn costs(&self) -> &KernelPathCosts {
        &self.costs
    }

    pub fn backlog(&self) -> usize {
        self.batch.len() + self.current.is_some() as usize + self.pending_tx.len()
    }

    fn stall(&self, core: &mut CoreModel, raw: Tick) -> Tick {
        let st = Tick::from_ps(raw.as_ps() / self.mlp as u64);
        core.costs.stall += core.to_cycles(st);
        st
    }

    /// Dispatches one event. The caller schedules the returned follow-up.
    pub fn handle(
        &mut self,
        ev: KernelEvent,
        now: Tick,
        nic: &mut Nic,
        env: &mut impl DriverEnv,
        core: &mut CoreModel,
        lock: &mut SerialLock,
    ) -> Next {
        match ev {
            KernelEvent::Irq => {
                if self.busy {
                    self.irq_pending = true;
                    None
                } else {
                    self.busy = true;
                    Some((now, KernelEvent::Isr))
                }
            }
            KernelEvent::Isr => self.isr(now, nic, env, core),
            KernelEvent::PacketStart => self.packet_start(now, env, core),
            KernelEvent::LockRequest => {
                let hold = core.cycles(self.costs.serialized_per_packet);
                let (grant, release) = lock.acquire(now, hold);
                core.costs.spin += core.to_cycles(grant - now);
                core.costs.lock += self.costs.serialized_per_packet;
                let end = core.run(now, release - now);
                Some((end, KernelEvent::PacketFinish))
            }
            KernelEvent::PacketFinish => self.packet_finish(now, nic, env, core),
        }
    }

    fn isr(&mut self, now: Tick, nic: &mut Nic, env: &mut impl DriverEnv, core: &mut CoreModel) -> Next {
        self.busy = true;
        self.irq_pending = false;
        let cause = nic.mmio_read(regs::ICR, env).expect("ICR is modeled");
        let mut raw = Tick::ZERO;
        let mut got = Vec::new();
        let ring_size = nic.rx_ring().size() as usize;
        self.ring.rx_collect(nic, env, core.id, ring_size, &mut raw, &mut got);
        self.ring.write_rx_tail(nic, env);
        if cause == 0 && got.is_empty() {
            return self.batch_end(now, nic, env);
        }
        self.stats.interrupts_handled += 1;
        core.costs.irq += self.costs.irq_entry;
        core.costs.context_switch += self.costs.context_switch;
        let st = self.stall(core, raw);
        let end = core.run(now, core.cycles(self.costs.irq_entry + self.costs.context_switch) + st);
        if got.is_empty() {
            return self.batch_end(end, nic, env);
        }
        self.stats.batches += 1;
        self.batch.extend(got);
        Some((end, KernelEvent::PacketStart))
    }

    fn packet_start(&mut self, now: Tick, env: &mut impl DriverEnv, core: &mut CoreModel) -> Next {
        let p = self.batch.pop_front().expect("batch holds a packet");
        let c = &self.costs;
        let copy = c.copy_cycles(p.length as u64);
        let cycles = c.softirq_per_packet + copy + c.syscall + copy + c.socket_overhead_per_packet;
        core.costs.softirq += c.softirq_per_packet;
        core.costs.copy += 2 * copy;
        core.costs.syscall += c.syscall;
        core.costs.socket += c.socket_overhead_per_packet;
        self.stats.copies += 2;
        let mut raw = Tick::ZERO;
        let alive = self.ring.forward(env, core.id, p, &mut raw);
        let st = self.stall(core, raw);
        let end = core.run(now, core.cycles(cycles) + st);
        if !alive {
            self.current = None;
            return Some((end, KernelEvent::PacketFinish));
        }
        self.current = Some(p);
        if self.costs.serialized_per_packet > 0 {
            Some((end, KernelEvent::LockRequest))
        } else {
            Some((end, KernelEvent::PacketFinish))
        }
    }

    fn packet_finish(&mut self, now: Tick, nic: &mut Nic, env: &mut impl DriverEnv, core: &mut CoreModel) -> Next {
        let mut end = now;
        if let Some(p) = self.current.take() {
            let c = &self.costs;
            core.costs.syscall += c.syscall;
            core.costs.socket += c.socket_overhead_per_packet;
            core.costs.softirq += c.softirq_per_packet;
            let cycles = c.syscall + c.tx_path();
            self.stats.packets += 1;
            self.pending_tx.push_back(p);
            let mut raw = Tick::ZERO;
            self.ring.tx_reclaim(nic);
            self.flush_tx(nic, env, core.id, &mut raw);
            let st = self.stall(core, raw);
            end = core.run(now, core.cycles(cycles) + st);
        }
        if !self.batch.is_empty() {
            if self.ring.rx_refills_pending() >= 32 {
                self.ring.write_rx_tail(nic, env);
            }
            return Some((end, KernelEvent::PacketStart));
        }
        self.batch_end(end, nic, env)
    }

    fn flush_tx(&mut self, nic: &mut Nic, env: &mut impl DriverEnv, core: usize, raw: &mut Tick) {
        while let Some(&p) = self.pending_tx.front() {
            if !self.ring.tx_post(nic, env, core, p, raw) {
                break;
            }
            self.pending_tx.pop_front();
        }
        self.ring.write_tx_tail(nic, env);
    }

    fn batch_end(&mut self, end: Tick, nic: &mut Nic, env: &mut impl DriverEnv) -> Next {
        self.ring.tx_reclaim(nic);
        let mut raw = Tick::ZERO;
        self.flush_tx(nic, env, self.core, &mut raw);
        self.ring.write_rx_tail(nic, env);
        if self.irq_pending {
            Some((end, KernelEvent::Isr))
        } else if !self.pending_tx.is_empty() {
            // TX ring full: retry once completions had time to land
            Some((end + Tick::from_us(1), KernelEvent::Isr))
        } else {
            self.busy = false;
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::Bed;
    use super::super::{bind_device, StackKind};
    use super::*;
    use crate::frame::Frame;
    use crate::nic::NicConfig;

    fn drive(bed: &mut Bed, drv: &mut KernelDriver, core: &mut CoreModel, lock: &mut SerialLock, irqs_seen: &mut u64) {
        // runs NIC and driver events in time order until both are idle
        let mut next: Option<(Tick, KernelEvent)> = None;
        loop {
            if bed.irqs > *irqs_seen {
                *irqs_seen = bed.irqs;
                let now = bed.engine.now();
                let n = bed.with(|nic, env| drv.handle(KernelEvent::Irq, now, nic, env, core, lock));
                if n.is_some() {
                    next = n;
                }
            }
            let nic_next = bed.engine.peek_time();
            match (next, nic_next) {
                (Some((t, ev)), nt) if nt.is_none_or(|nt| t <= nt) => {
                    bed.engine.advance_to(t);
                    next = bed.with(|nic, env| drv.handle(ev, t, nic, env, core, lock));
                }
                (_, Some(nt)) => bed.run_nic_until(nt),
                (None, None) => break,
                _ => unreachable!(),
            }
        }
    }

    fn setup(costs: KernelPathCosts) -> (Bed, KernelDriver) {
        let mut bed = Bed::new(NicConfig::default());
        let drv = bed.with(|nic, env| {
            bind_device(nic, StackKind::Kernel, false, env).unwrap();
            let ring = RingDriver::attach(nic, env, Bed::pool(), 0x1000_0000, 0x1001_0000).unwrap();
            KernelDriver::new(ring, costs, 6, 0)
        });
        let t = bed.engine.now() + Tick::from_us(2);
        bed.run_nic_until(t);
        (bed, drv)
    }

    #[test]
    fn single_packet_hand_sum() {
        let costs = KernelPathCosts::default();
        let (mut bed, mut drv) = setup(costs.clone());
        let mut core = CoreModel::new(0, 2e9);
        let mut lock = SerialLock::default();
        let mut seen = 0;
        let f = Frame::ethernet([1; 6], [2; 6], 0x88B5, &[7; 1486]);
        assert_eq!(f.len(), 1500);
        bed.with(|nic, env| nic.wire_receive(f, env));
        drive(&mut bed, &mut drv, &mut core, &mut lock, &mut seen);
        assert_eq!(bed.nic.stats().interrupts_raised, 1);
        assert_eq!(bed.wire.len(), 1);
        let c = &costs;
        let expected = c.irq_entry
            + c.softirq_per_packet
            + 2 * (1500.0 * c.copy_per_byte).round() as u64
            + 2 * c.syscall
            + c.socket_overhead_per_packet
            + c.context_switch
            + (c.socket_overhead_per_packet + c.softirq_per_packet)
            + c.serialized_per_packet;
        assert_eq!(core.costs.table_cycles(), expected);
        assert_eq!(drv.stats.copies, 2);
    }

    #[test]
    fn no_packets_no_cost() {
        let (mut bed, mut drv) = setup(KernelPathCosts::default());
        let mut core = CoreModel::new(0, 2e9);
        let mut lock = SerialLock::default();
        let now = bed.engine.now();
        let n = bed.with(|nic, env| drv.handle(KernelEvent::Isr, now, nic, env, &mut core, &mut lock));
        assert_eq!(n, None);
        assert_eq!(core.costs.table_cycles(), 0);
    }

    #[test]
    fn batch_of_packets_one_interrupt_each_writeback() {
        let (mut bed, mut drv) = setup(KernelPathCosts::default());
        let mut core = CoreModel::new(0, 2e9);
        let mut lock = SerialLock::default();
        let mut seen = 0;
        bed.receive(32);
        drive(&mut bed, &mut drv, &mut core, &mut lock, &mut seen);
        assert_eq!(bed.wire.len(), 32);
        assert_eq!(bed.nic.stats().interrupts_raised, 1);
        assert_eq!(core.costs.irq, KernelPathCosts::default().irq_entry);
        assert_eq!(drv.stats.copies, 64);
    }

    #[test]
    fn lock_is_fifo() {
        let mut l = SerialLock::default();
        let h = Tick::from_ns(10);
        assert_eq!(l.acquire(Tick::from_ns(0), h), (Tick::from_ns(0), Tick::from_ns(10)));
        assert_eq!(l.acquire(Tick::from_ns(5), h), (Tick::from_ns(10), Tick::from_ns(20)));
        assert_eq!(l.acquire(Tick::from_ns(30), h), (Tick::from_ns(30), Tick::from_ns(40)));
        assert_eq!(l.contended, 1);
    }
}
