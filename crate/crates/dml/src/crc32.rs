//! CRC-32 (IEEE 802.3, reflected) used by the checkpoint and wire formats.

/// CRC-32 of `bytes` with the standard IEEE polynomial.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}
