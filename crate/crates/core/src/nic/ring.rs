use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Size of one legacy descriptor in host memory.
pub const DESCRIPTOR_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Descriptor {
    pub buffer_addr: u64,
    pub length: u16,
    pub status_dd: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Rx,
    Tx,
}

/// Circular descriptor array. `head` is advanced by the NIC, `tail` by the
/// driver. The descriptors themselves are host memory; both sides access
/// them directly.
#[derive(Clone, Debug)]
pub struct DescriptorRing {
    pub base: u64,
    descs: Vec<Descriptor>,
    head: u32,
    tail: u32,
    direction: Direction,
}

impl DescriptorRing {
    pub fn unconfigured(direction: Direction) -> Self {
        DescriptorRing { base: 0, descs: Vec::new(), head: 0, tail: 0, direction }
    }

    pub fn configure(&mut self, len_bytes: u32) -> bool {
        let entries = len_bytes as u64 / DESCRIPTOR_BYTES;
        if !(len_bytes as u64).is_multiple_of(DESCRIPTOR_BYTES) || !entries.is_power_of_two() {
            return false;
        }
        self.descs = vec![Descriptor::default(); entries as usize];
        self.head = 0;
        self.tail = 0;
        true
    }

    pub fn is_configured(&self) -> bool {
        !self.descs.is_empty()
    }

    pub fn size(&self) -> u32 {
        self.descs.len() as u32
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn head(&self) -> u32 {
        self.head
    }

    pub fn tail(&self) -> u32 {
        self.tail
    }

    pub(crate) fn set_head(&mut self, v: u32) {
        self.head = self.wrap(v);
    }

    pub(crate) fn set_tail(&mut self, v: u32) {
        self.tail = self.wrap(v);
    }

    pub fn wrap(&self, v: u32) -> u32 {
        if self.descs.is_empty() {
            0
        } else {
            v & (self.size() - 1)
        }
    }

    /// Entries between head and tail, i.e. owned by the NIC.
    pub fn available(&self) -> u32 {
        self.distance(self.head, self.tail)
    }

    pub fn distance(&self, from: u32, to: u32) -> u32 {
        if self.descs.is_empty() {
            0
        } else {
            to.wrapping_sub(from) & (self.size() - 1)
        }
    }

    pub fn desc(&self, idx: u32) -> &Descriptor {
        &self.descs[idx as usize]
    }

    pub fn desc_mut(&mut self, idx: u32) -> &mut Descriptor {
        &mut self.descs[idx as usize]
    }

    pub fn desc_addr(&self, idx: u32) -> u64 {
        self.base + idx as u64 * DESCRIPTOR_BYTES
    }
}

/// A received descriptor waiting for writeback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UsedDescriptor {
    pub index: u32,
    pub length: u16,
}

/// On-NIC cache of RX descriptors. Slots are shared between prefetched free
/// descriptors, descriptors whose payload DMA is in flight or landing in
/// host memory, and filled descriptors awaiting writeback.
#[derive(Clone, Debug)]
pub struct DescriptorCache {
    pub capacity: u32,
    pub prefetched: VecDeque<(u32, u64)>,
    pub fetching: u32,
    pub in_flight: u32,
    pub landing: u32,
    pub used: Vec<UsedDescriptor>,
}

impl DescriptorCache {
    pub fn new(capacity: u32) -> Self {
        DescriptorCache {
            capacity,
            prefetched: VecDeque::with_capacity(capacity as usize),
            fetching: 0,
            in_flight: 0,
            landing: 0,
            used: Vec::with_capacity(capacity as usize),
        }
    }

    pub fn occupancy(&self) -> u32 {
        self.prefetched.len() as u32 + self.fetching + self.in_flight + self.landing + self.used.len() as u32
    }

    pub fn free_slots(&self) -> u32 {
        self.capacity - self.occupancy()
    }
}
