//! CRC-16/CCITT-FALSE: polynomial 0x1021, initial value 0xFFFF, MSB-first,
//! no reflection, no final xor.

pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= u16::from(byte) << 8;
        for _ in 0..8 {
            if crc & 0x8000 != 0 {
                crc = (crc << 1) ^ 0x1021;
            } else {
                crc <<= 1;
            }
        }
    }
    crc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_answer_check_string() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
    }

    #[test]
    fn empty_input_is_the_initial_value() {
        assert_eq!(crc16_ccitt_false(&[]), 0xFFFF);
    }

    #[test]
    fn single_bit_flips_change_the_crc() {
        let base = crc16_ccitt_false(b"hello bus");
        for i in 0..9 * 8 {
            let mut data = b"hello bus".to_vec();
            data[i / 8] ^= 1 << (i % 8);
            assert_ne!(crc16_ccitt_false(&data), base, "bit {i}");
        }
    }
}
