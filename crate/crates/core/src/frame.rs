//! Ethernet frames as they travel between load generator, link and NIC.

pub const ETH_HEADER_LEN: usize = 14;
pub const TIMESTAMP_LEN: usize = 8;
/// IEEE local experimental ethertype.
pub const ETHERTYPE_EXPERIMENTAL: u16 = 0x88B5;

pub type MacAddr = [u8; 6];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    bytes: Vec<u8>,
}

impl Frame {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Frame { bytes }
    }

    /// Builds a frame with an Ethernet header and `payload`.
    pub fn ethernet(dst: MacAddr, src: MacAddr, ethertype: u16, payload: &[u8]) -> Self {
        let mut bytes = Vec::with_capacity(ETH_HEADER_LEN + payload.len());
        bytes.extend_from_slice(&dst);
        bytes.extend_from_slice(&src);
        bytes.extend_from_slice(&ethertype.to_be_bytes());
        bytes.extend_from_slice(payload);
        Frame { bytes }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn dst(&self) -> Option<MacAddr> {
        self.bytes.get(0..6).map(|s| s.try_into().unwrap())
    }

    pub fn src(&self) -> Option<MacAddr> {
        self.bytes.get(6..12).map(|s| s.try_into().unwrap())
    }

    pub fn payload(&self) -> &[u8] {
        self.bytes.get(ETH_HEADER_LEN..).unwrap_or(&[])
    }

    /// Reads the 8-byte little-endian tick stamp at `offset` within the payload.
    pub fn timestamp(&self, offset: usize) -> Option<u64> {
        let start = ETH_HEADER_LEN + offset;
        self.bytes
            .get(start..start + TIMESTAMP_LEN)
            .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }

    pub fn set_timestamp(&mut self, offset: usize, value: u64) -> bool {
        let start = ETH_HEADER_LEN + offset;
        match self.bytes.get_mut(start..start + TIMESTAMP_LEN) {
            Some(slot) => {
                slot.copy_from_slice(&value.to_le_bytes());
                true
            }
            None => false,
        }
    }
}

/// Swaps destination and source MACs in place. Returns false for runts.
pub fn swap_macs(bytes: &mut [u8]) -> bool {
    if bytes.len() < ETH_HEADER_LEN {
        return false;
    }
    let (dst, rest) = bytes.split_at_mut(6);
    dst.swap_with_slice(&mut rest[..6]);
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = Frame::ethernet([0xAA; 6], [0xBB; 6], ETHERTYPE_EXPERIMENTAL, &[1, 2, 3]);
        assert_eq!(f.len(), 17);
        assert_eq!(f.dst(), Some([0xAA; 6]));
        assert_eq!(f.src(), Some([0xBB; 6]));
        assert_eq!(&f.bytes()[12..14], &[0x88, 0xB5]);
        assert_eq!(f.payload(), &[1, 2, 3]);
    }

    #[test]
    fn timestamp_roundtrip_and_bounds() {
        let mut f = Frame::ethernet([0; 6], [0; 6], 0, &[0u8; 16]);
        assert!(f.set_timestamp(8, 99));
        assert_eq!(f.timestamp(8), Some(99));
        assert!(!f.set_timestamp(9, 1));
        assert_eq!(f.timestamp(9), None);
    }
}
