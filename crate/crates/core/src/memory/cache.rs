use std::ops::Range;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Line {
    pub block: u64,
    pub valid: bool,
    pub dirty: bool,
    /// Allocated by a device write rather than a core fill.
    pub io: bool,
    stamp: u64,
}

/// A line pushed out of the cache to make room.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Victim {
    pub block: u64,
    pub dirty: bool,
    pub io: bool,
    pub way: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct LevelCounters {
    pub hits: u64,
    pub misses: u64,
    pub fills: u64,
    pub evictions: u64,
    pub invalidations: u64,
    pub writebacks: u64,
}

/// Set-associative cache with true LRU replacement, indexed by block number.
#[derive(Clone, Debug)]
pub struct SetAssocCache {
    sets: usize,
    ways: usize,
    lines: Vec<Line>,
    clock: u64,
    resident: u64,
    pub counters: LevelCounters,
}

impl SetAssocCache {
    pub fn new(sets: usize, ways: usize) -> Self {
        assert!(sets > 0 && ways > 0, "cache needs at least one set and one way");
        SetAssocCache {
            sets,
            ways,
            lines: vec![Line::default(); sets * ways],
            clock: 0,
            resident: 0,
            counters: LevelCounters::default(),
        }
    }

    pub fn sets(&self) -> usize {
        self.sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn resident(&self) -> u64 {
        self.resident
    }

    pub fn set_of(&self, block: u64) -> usize {
        (block % self.sets as u64) as usize
    }

    fn set_slice(&self, set: usize) -> &[Line] {
        &self.lines[set * self.ways..(set + 1) * self.ways]
    }

    fn set_slice_mut(&mut self, set: usize) -> &mut [Line] {
        let w = self.ways;
        &mut self.lines[set * w..(set + 1) * w]
    }

    /// Way index holding `block`, if resident.
    pub fn find(&self, block: u64) -> Option<usize> {
        let set = self.set_of(block);
        self.set_slice(set).iter().position(|l| l.valid && l.block == block)
    }

    pub fn line(&self, block: u64) -> Option<&Line> {
        let set = self.set_of(block);
        self.find(block).map(|w| &self.set_slice(set)[w])
    }

    pub fn contains(&self, block: u64) -> bool {
        self.find(block).is_some()
    }

    /// Marks `block` most recently used; optionally dirties it.
    pub fn touch(&mut self, block: u64, make_dirty: bool) -> bool {
        let set = self.set_of(block);
        self.clock += 1;
        let now = self.clock;
        match self.set_slice_mut(set).iter_mut().find(|l| l.valid && l.block == block) {
            Some(line) => {
                line.stamp = now;
                line.dirty |= make_dirty;
                true
            }
            None => false,
        }
    }

    /// Inserts `block` (must not be resident) choosing a victim among `ways`.
    pub fn insert_in(&mut self, block: u64, dirty: bool, io: bool, ways: Range<usize>) -> Option<Victim> {
        debug_assert!(!self.contains(block));
        debug_assert!(ways.start < ways.end && ways.end <= self.ways);
        let set = self.set_of(block);
        self.clock += 1;
        let now = self.clock;
        let lines = self.set_slice_mut(set);
        let slot = match lines[ways.clone()].iter().position(|l| !l.valid) {
            Some(i) => ways.start + i,
            None => {
                ways.clone()
                    .min_by_key(|&w| lines[w].stamp)
                    .expect("non-empty way range")
            }
        };
        let old = lines[slot];
        lines[slot] = Line { block, valid: true, dirty, io, stamp: now };
        self.counters.fills += 1;
        if old.valid {
            self.counters.evictions += 1;
            Some(Victim { block: old.block, dirty: old.dirty, io: old.io, way: slot })
        } else {
            self.resident += 1;
            None
        }
    }

    pub fn insert(&mut self, block: u64, dirty: bool, io: bool) -> Option<Victim> {
        self.insert_in(block, dirty, io, 0..self.ways)
    }

    /// Removes `block` if present, returning its final state.
    pub fn invalidate(&mut self, block: u64) -> Option<Line> {
        let set = self.set_of(block);
        let way = self.find(block)?;
        let line = std::mem::take(&mut self.set_slice_mut(set)[way]);
        self.resident -= 1;
        self.counters.invalidations += 1;
        Some(line)
    }

    /// Plain lookup-then-allocate access, used as a single-level cache.
    pub fn access(&mut self, block: u64, write: bool) -> bool {
        if self.touch(block, write) {
            self.counters.hits += 1;
            true
        } else {
            self.counters.misses += 1;
            if let Some(v) = self.insert(block, write, false) {
                if v.dirty {
                    self.counters.writebacks += 1;
                }
            }
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lru_evicts_oldest() {
        let mut c = SetAssocCache::new(1, 2);
        assert!(!c.access(1, false));
        assert!(!c.access(2, false));
        assert!(c.access(1, false));
        assert!(!c.access(3, false)); // evicts 2
        assert!(c.access(1, false));
        assert!(!c.access(2, false));
    }

    #[test]
    fn restricted_insert_stays_in_range() {
        let mut c = SetAssocCache::new(1, 4);
        for b in 0..10 {
            c.insert_in(b, true, true, 0..2);
        }
        assert_eq!(c.resident(), 2);
        assert!(c.contains(8) && c.contains(9));
    }

    #[test]
    fn dirty_victim_counts_writeback() {
        let mut c = SetAssocCache::new(1, 1);
        c.access(1, true);
        c.access(2, false);
        assert_eq!(c.counters.writebacks, 1);
    }
}
