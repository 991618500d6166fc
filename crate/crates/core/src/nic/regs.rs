//! MMIO register offsets and bits.

pub const CTRL: u32 = 0x0000;
pub const ICR: u32 = 0x00C0;
pub const IMS: u32 = 0x00D0;
pub const IMC: u32 = 0x00D8;
pub const RDBA: u32 = 0x2800;
pub const RDLEN: u32 = 0x2808;
pub const RDH: u32 = 0x2810;
pub const RDT: u32 = 0x2818;
pub const TDBA: u32 = 0x3800;
pub const TDLEN: u32 = 0x3808;
pub const TDH: u32 = 0x3810;
pub const TDT: u32 = 0x3818;

/// Set link up.
pub const CTRL_SLU: u32 = 1 << 6;

pub const ICR_TXDW: u32 = 0x01;
pub const ICR_RXT0: u32 = 0x80;
