//! Named sub-seeds fanned out from one run seed.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for stream `label` at coordinates `parts`.
pub fn derive(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in label.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_eq!(derive(1, "dropout", &[3, 4]), derive(1, "dropout", &[3, 4]));
        assert_ne!(derive(1, "dropout", &[3, 4]), derive(1, "pairs", &[3, 4]));
        assert_ne!(derive(1, "dropout", &[3, 4]), derive(1, "dropout", &[4, 3]));
        assert_ne!(derive(1, "dropout", &[3]), derive(2, "dropout", &[3]));
    }
}
