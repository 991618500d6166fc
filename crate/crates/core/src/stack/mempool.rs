use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MempoolError {
    #[error("address {0:#x} is not a buffer of this pool")]
    Foreign(u64),
    #[error("buffer {0:#x} freed twice")]
    DoubleFree(u64),
}

/// Fixed pool of equally sized buffers carved from one contiguous range.
/// The free list is a stack, so a freed buffer is the next one handed out.
#[derive(Clone, Debug)]
pub struct Mempool {
    base: u64,
    buffer_size: u64,
    free: Vec<u64>,
    allocated: Vec<bool>,
    in_use: usize,
    high_water: usize,
    touched: Vec<bool>,
    distinct: usize,
}

impl Mempool {
    pub fn new(base: u64, buffer_count: usize, buffer_size: u64) -> Self {
        // reversed so the first allocation is the lowest address
        let free = (0..buffer_count as u64).rev().map(|i| base + i * buffer_size).collect();
        Mempool {
            base,
            buffer_size,
            free,
            allocated: vec![false; buffer_count],
            in_use: 0,
            high_water: 0,
            touched: vec![false; buffer_count],
            distinct: 0,
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn buffer_size(&self) -> u64 {
        self.buffer_size
    }

    pub fn buffer_count(&self) -> usize {
        self.allocated.len()
    }

    pub fn in_use(&self) -> usize {
        self.in_use
    }

    pub fn available(&self) -> usize {
        self.free.len()
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    /// Number of different buffers ever handed out.
    pub fn distinct_used(&self) -> usize {
        self.distinct
    }

    fn slot(&self, addr: u64) -> Option<usize> {
        let off = addr.checked_sub(self.base)?;
        let i = (off / self.buffer_size) as usize;
        (off % self.buffer_size == 0 && i < self.allocated.len()).then_some(i)
    }

    pub fn alloc(&mut self) -> Option<u64> {
        let addr = self.free.pop()?;
        let i = self.slot(addr).expect("free list holds pool addresses");
        self.allocated[i] = true;
        if !self.touched[i] {
            self.touched[i] = true;
            self.distinct += 1;
        }
        self.in_use += 1;
        self.high_water = self.high_water.max(self.in_use);
        Some(addr)
    }

    pub fn free(&mut self, addr: u64) -> Result<(), MempoolError> {
        let i = self.slot(addr).ok_or(MempoolError::Foreign(addr))?;
        if !self.allocated[i] {
            return Err(MempoolError::DoubleFree(addr));
        }
        self.allocated[i] = false;
        self.in_use -= 1;
        self.free.push(addr);
        Ok(())
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.slot(addr).is_some()
    }
}
