//! Length-extending seed expansion for the comparison tree.
//!
//! `G(s)` is fixed-key AES-128 in Matyas-Meyer-Oseas form over three
//! counter tweaks: block `i` is `AES_K(s ^ i) ^ (s ^ i)`. Seeds are read and
//! written as little-endian `u128`, so outputs are byte-stable across
//! platforms.

use std::sync::OnceLock;

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;

const FIXED_KEY: [u8; 16] = *b"splitfss-dcf-prg";

fn cipher() -> &'static Aes128 {
    static CIPHER: OnceLock<Aes128> = OnceLock::new();
    CIPHER.get_or_init(|| Aes128::new(GenericArray::from_slice(&FIXED_KEY)))
}

/// Output of one node expansion; index 0 is the left child.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expansion {
    /// Child seeds with the low bit cleared.
    pub seeds: [u128; 2],
    /// Child control bits (the low bit before clearing).
    pub bits: [bool; 2],
    /// Pseudorandom words converted into ring values by the caller.
    pub values: [u64; 2],
}

pub fn expand(seed: u128) -> Expansion {
    let inputs = [seed, seed ^ 1, seed ^ 2];
    let mut blocks = inputs.map(|v| GenericArray::clone_from_slice(&v.to_le_bytes()));
    cipher().encrypt_blocks(&mut blocks);
    let out: Vec<u128> = blocks
        .iter()
        .zip(inputs)
        .map(|(b, x)| u128::from_le_bytes(b.as_slice().try_into().unwrap()) ^ x)
        .collect();
    Expansion {
        seeds: [out[0] & !1, out[1] & !1],
        bits: [out[0] & 1 == 1, out[1] & 1 == 1],
        values: [out[2] as u64, (out[2] >> 64) as u64],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_sensitive() {
        assert_eq!(expand(12345), expand(12345));
        assert_ne!(expand(12345), expand(12346));
        let e = expand(0);
        assert_eq!(e.seeds[0] & 1, 0);
        assert_eq!(e.seeds[1] & 1, 0);
        assert_ne!(e.seeds[0], e.seeds[1]);
    }

    #[test]
    fn matches_raw_aes_definition() {
        let seed: u128 = 0x0123_4567_89ab_cdef_fedc_ba98_7654_3210;
        let mut block = GenericArray::clone_from_slice(&(seed ^ 2).to_le_bytes());
        cipher().encrypt_block(&mut block);
        let raw = u128::from_le_bytes(block.as_slice().try_into().unwrap()) ^ (seed ^ 2);
        let e = expand(seed);
        assert_eq!(e.values[0], raw as u64);
        assert_eq!(e.values[1], (raw >> 64) as u64);
    }

    #[test]
    fn output_bits_are_balanced() {
        let mut ones = 0u32;
        for s in 0..2000u128 {
            let e = expand(s << 1);
            ones += e.values[0].count_ones() + e.bits[0] as u32 + e.bits[1] as u32;
        }
        let total = 2000.0 * 66.0;
        let frac = ones as f64 / total;
        assert!((frac - 0.5).abs() < 0.01, "{}", frac);
    }
}
