use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CoreModel, DriverEnv, Packet, RingDriver};
use crate::nic::Nic;
use crate::sim::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmdMode {
    RunToCompletion,
    Pipeline,
}

impl fmt::Display for PmdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PmdMode::RunToCompletion => "run_to_completion",
            PmdMode::Pipeline => "pipeline",
        })
    }
}

impl FromStr for PmdMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "run_to_completion" | "rtc" => Ok(PmdMode::RunToCompletion),
            "pipeline" => Ok(PmdMode::Pipeline),
            _ => Err(format!("expected run_to_completion or pipeline, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmdConfig {
    pub burst_size: u32,
    pub poll_iteration: u64,
    pub per_packet_process: u64,
    pub mode: PmdMode,
    pub pipeline_ring_capacity: u32,
    /// Hold received packets until a full burst is gathered.
    pub accumulate: bool,
    pub accumulate_timeout_ns: u64,
    pub mempool_buffers: u32,
    pub mempool_buffer_size: u32,
}

impl Default for PmdConfig {
    fn default() -> Self {
        PmdConfig {
            burst_size: 32,
            poll_iteration: 200,
            per_packet_process: 150,
            mode: PmdMode::RunToCompletion,
            pipeline_ring_capacity: 1024,
            accumulate: false,
            accumulate_timeout_ns: 100_000,
            mempool_buffers: 8192,
            mempool_buffer_size: 2048,
        }
    }
}

impl PmdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.burst_size == 0 {
            return Err("pmd.burst_size must be at least 1".into());
        }
        if self.mode == PmdMode::Pipeline && self.pipeline_ring_capacity < self.burst_size {
            return Err(format!(
                "pmd.pipeline_ring_capacity ({}) must be at least pmd.burst_size ({})",
                self.pipeline_ring_capacity, self.burst_size
            ));
        }
        if self.mempool_buffer_size < 64 {
            return Err("pmd.mempool_buffer_size must be at least 64".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmdStats {
    pub steps: u64,
    pub empty_polls: u64,
    pub processed: u64,
    pub max_step_batch: u64,
}

/// Userspace polling driver running L2Fwd.
#[derive(Clone, Debug)]
pub struct PmdDriver {
    pub ring: RingDriver,
    cfg: PmdConfig,
    mlp: u32,
    pub rx_core: usize,
    pub worker_core: usize,
    held: Vec<Packet>,
    held_since: Option<Tick>,
    pending: VecDeque<Packet>,
    pipe: VecDeque<(Tick, Packet)>,
    scratch: Vec<Packet>,
    pub stats: PmdStats,
}

impl PmdDriver {
    pub fn new(ring: RingDriver, cfg: PmdConfig, mlp: u32, rx_core: usize, worker_core: usize) -> Self {
        PmdDriver {
            ring,
            mlp: mlp.max(1),
            rx_core,
            worker_core,
            held: Vec::new(),
            held_since: None,
            pending: VecDeque::new(),
            pipe: VecDeque::new(),
            scratch: Vec::new(),
            stats: PmdStats::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &PmdConfig {
        &self.cfg
    }

    /// Packets held by software: accumulating, in the inter-core ring, or
    /// waiting for TX ring space.
    pub fn backlog(&self) -> usize {
        self.held.len() + self.pending.len() + self.pipe.len()
    }

    fn stall_time(&self, stall: Tick) -> Tick {
        Tick::from_ps(stall.as_ps() / self.mlp as u64)
    }

    /// Receives up to `max` packets; charges one poll iteration.
    pub fn rx_burst(
        &mut self,
        nic: &mut Nic,
        env: &mut impl DriverEnv,
        core: &mut CoreModel,
        max: usize,
        stall: &mut Tick,
    ) -> Vec<Packet> {
        core.costs.poll += self.cfg.poll_iteration;
        let mut out = Vec::new();
        self.ring.rx_collect(nic, env, core.id, max, stall, &mut out);
        if out.is_empty() {
            self.stats.empty_polls += 1;
        }
        out
    }

    /// Posts as many packets as the TX ring accepts; returns the rest.
    pub fn tx_burst(
        &mut self,
        nic: &mut Nic,
        env: &mut impl DriverEnv,
        core: usize,
        packets: impl IntoIterator<Item = Packet>,
        stall: &mut Tick,
    ) -> (usize, Vec<Packet>) {
        let mut sent = 0;
        let mut rest = Vec::new();
        for p in packets {
            if rest.is_empty() && self.ring.tx_post(nic, env, core, p, stall) {
                sent += 1;
            } else {
                rest.push(p);
            }
        }
        (sent, rest)
    }

    fn process(&mut self, env: &mut impl DriverEnv, core: &mut CoreModel, batch: &[Packet], stall: &mut Tick) {
        for &p in batch {
            core.costs.process += self.cfg.per_packet_process;
            if self.ring.forward(env, core.id, p, stall) {
                self.pending.push_back(p);
                self.stats.processed += 1;
            }
        }
    }

    fn drain_pending(&mut self, nic: &mut Nic, env: &mut impl DriverEnv, core: usize, stall: &mut Tick) {
        while let Some(&p) = self.pending.front() {
            if !self.ring.tx_post(nic, env, core, p, stall) {
                break;
            }
            self.pending.pop_front();
        }
    }

    fn finish(&self, core: &mut CoreModel, now: Tick, cycles: u64, stall: Tick) -> Tick {
        let st = self.stall_time(stall);
        core.costs.stall += core.to_cycles(st);
        core.run(now, core.cycles(cycles) + st)
    }

    /// One run-to-completion iteration starting at `now`; returns when the
    /// core is ready for the next one. Ring tails updated by the previous
    /// iteration are written first.
    pub fn run_to_completion_step(
        &mut self,
        now: Tick,
        nic: &mut Nic,
        env: &mut impl DriverEnv,
        core: &mut CoreModel,
    ) -> (usize, Tick) {
        self.ring.write_rx_tail(nic, env);
        self.ring.write_tx_tail(nic, env);
        self.stats.steps += 1;
        let before = core.costs;
        self.ring.tx_reclaim(nic);
        let mut stall = Tick::ZERO;
        let burst = self.cfg.burst_size as usize;
        let mut batch = std::mem::take(&mut self.scratch);
        batch.clear();
        if self.cfg.accumulate {
            let got = self.rx_burst(nic, env, core, burst - self.held.len(), &mut stall);
            if !got.is_empty() && self.held_since.is_none() {
                self.held_since = Some(now);
            }
            self.held.extend(got);
            let timed_out = self
                .held_since
                .is_some_and(|t| now.saturating_sub(t) >= Tick::from_ns(self.cfg.accumulate_timeout_ns));
            if self.held.len() >= burst || timed_out {
                batch.append(&mut self.held);
                self.held_since = None;
            }
        } else {
            batch = self.rx_burst(nic, env, core, burst, &mut stall);
        }
        self.process(env, core, &batch, &mut stall);
        self.drain_pending(nic, env, core.id, &mut stall);
        let n = batch.len();
        self.stats.max_step_batch = self.stats.max_step_batch.max(n as u64);
        self.scratch = batch;
        let cycles = core.costs.table_cycles() - before.table_cycles();
        (n, self.finish(core, now, cycles, stall))
    }

    /// Pipeline receive side: move packets from the NIC into the inter-core ring.
    pub fn pipeline_rx_step(&mut self, now: Tick, nic: &mut Nic, env: &mut impl DriverEnv, core: &mut CoreModel) -> Tick {
        self.ring.write_rx_tail(nic, env);
        let mut stall = Tick::ZERO;
        let got = self.rx_burst(nic, env, core, self.cfg.burst_size as usize, &mut stall);
        let end = self.finish(core, now, self.cfg.poll_iteration, stall);
        for p in got {
            if self.pipe.len() < self.cfg.pipeline_ring_capacity as usize {
                self.pipe.push_back((end, p));
            } else {
                self.ring.stats.ring_drops += 1;
                self.ring.drop_packet(p);
            }
        }
        end
    }

    /// Pipeline worker side: process and transmit from the inter-core ring.
    pub fn pipeline_worker_step(
        &mut self,
        now: Tick,
        nic: &mut Nic,
        env: &mut impl DriverEnv,
        core: &mut CoreModel,
    ) -> (usize, Tick) {
        self.ring.write_tx_tail(nic, env);
        self.stats.steps += 1;
        let before = core.costs;
        self.ring.tx_reclaim(nic);
        core.costs.poll += self.cfg.poll_iteration;
        let mut batch = std::mem::take(&mut self.scratch);
        batch.clear();
        while batch.len() < self.cfg.burst_size as usize {
            match self.pipe.front() {
                Some(&(ready, p)) if ready <= now => {
                    batch.push(p);
                    self.pipe.pop_front();
                }
                _ => break,
            }
        }
        let mut stall = Tick::ZERO;
        self.process(env, core, &batch, &mut stall);
        self.drain_pending(nic, env, core.id, &mut stall);
        let n = batch.len();
        self.scratch = batch;
        let cycles = core.costs.table_cycles() - before.table_cycles();
        (n, self.finish(core, now, cycles, stall))
    }
}
