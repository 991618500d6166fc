//! Type-0 PCI configuration header (first 64 bytes) with width-flexible
//! access and the Command Register interrupt-disable bit.

use thiserror::Error;

pub const CONFIG_SPACE_SIZE: usize = 64;

pub const VENDOR_ID: u8 = 0x00;
pub const DEVICE_ID: u8 = 0x02;
pub const COMMAND: u8 = 0x04;
pub const STATUS: u8 = 0x06;

pub mod command {
    pub const IO_SPACE: u16 = 1 << 0;
    pub const MEM_SPACE: u16 = 1 << 1;
    pub const BUS_MASTER: u16 = 1 << 2;
    pub const INTX_DISABLE: u16 = 1 << 10;
    /// Bits software may modify. Everything else reads back as reset value.
    pub const WRITABLE: u16 = IO_SPACE | MEM_SPACE | BUS_MASTER | INTX_DISABLE;
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PciError {
    #[error("config access width {0} not in {{1,2,4}}")]
    BadWidth(u8),
    #[error("config access at {offset:#04x} width {width} is unaligned")]
    Unaligned { offset: u8, width: u8 },
    #[error("config access at {offset:#04x} width {width} is out of range")]
    OutOfRange { offset: u8, width: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PciConfigSpace {
    raw: [u8; CONFIG_SPACE_SIZE],
    writable_mask: [u8; CONFIG_SPACE_SIZE],
}

/// Decoded view of the Command Register at offset 0x04.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommandRegister(pub u16);

impl CommandRegister {
    pub fn io_space(self) -> bool {
        self.0 & command::IO_SPACE != 0
    }
    pub fn mem_space(self) -> bool {
        self.0 & command::MEM_SPACE != 0
    }
    pub fn bus_master(self) -> bool {
        self.0 & command::BUS_MASTER != 0
    }
    pub fn intx_disable(self) -> bool {
        self.0 & command::INTX_DISABLE != 0
    }
}

impl PciConfigSpace {
    pub fn new(vendor_id: u16, device_id: u16) -> Self {
        let mut raw = [0u8; CONFIG_SPACE_SIZE];
        raw[0..2].copy_from_slice(&vendor_id.to_le_bytes());
        raw[2..4].copy_from_slice(&device_id.to_le_bytes());
        let mut writable_mask = [0u8; CONFIG_SPACE_SIZE];
        writable_mask[4..6].copy_from_slice(&command::WRITABLE.to_le_bytes());
        PciConfigSpace { raw, writable_mask }
    }

    /// Replaces the writable mask for the command register; used by tests
    /// and alternative device profiles.
    pub fn with_command_mask(mut self, mask: u16) -> Self {
        self.writable_mask[4..6].copy_from_slice(&mask.to_le_bytes());
        self
    }

    fn check(offset: u8, width: u8) -> Result<(), PciError> {
        if !matches!(width, 1 | 2 | 4) {
            return Err(PciError::BadWidth(width));
        }
        if offset as usize + width as usize > CONFIG_SPACE_SIZE {
            return Err(PciError::OutOfRange { offset, width });
        }
        if !offset.is_multiple_of(width) {
            return Err(PciError::Unaligned { offset, width });
        }
        Ok(())
    }

    pub fn read_config(&self, offset: u8, width: u8) -> Result<u32, PciError> {
        Self::check(offset, width)?;
        let start = offset as usize;
        let value = self.raw[start..start + width as usize]
            .iter()
            .rev()
            .fold(0u32, |acc, b| (acc << 8) | *b as u32);
        Ok(value)
    }

    /// Writes under the writable mask. Returns the previous command value when
    /// the command register changed, so the owning device can react.
    pub fn write_config(&mut self, offset: u8, width: u8, value: u32) -> Result<Option<u16>, PciError> {
        Self::check(offset, width)?;
        let before = self.command().0;
        let start = offset as usize;
        for i in 0..width as usize {
            let byte = (value >> (8 * i)) as u8;
            let mask = self.writable_mask[start + i];
            let cur = self.raw[start + i];
            self.raw[start + i] = (cur & !mask) | (byte & mask);
        }
        let after = self.command().0;
        Ok((before != after).then_some(before))
    }

    pub fn vendor_id(&self) -> u16 {
        u16::from_le_bytes([self.raw[0], self.raw[1]])
    }

    pub fn device_id(&self) -> u16 {
        u16::from_le_bytes([self.raw[2], self.raw[3]])
    }

    pub fn command(&self) -> CommandRegister {
        CommandRegister(u16::from_le_bytes([self.raw[4], self.raw[5]]))
    }

    pub fn status(&self) -> u16 {
        u16::from_le_bytes([self.raw[6], self.raw[7]])
    }

    pub fn intx_disabled(&self) -> bool {
        self.command().intx_disable()
    }

    pub fn raw(&self) -> &[u8; CONFIG_SPACE_SIZE] {
        &self.raw
    }

    /// One line of space-separated hex bytes.
    pub fn hex_dump(&self) -> String {
        self.raw.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
    }

    #[cfg(test)]
    fn force_command(&mut self, value: u16) {
        self.raw[4..6].copy_from_slice(&value.to_le_bytes());
    }
}
