use super::EmbeddingError;

pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// Base-32 GeoHash; even bits refine longitude, odd bits latitude.
pub fn geohash_encode(lat: f64, lon: f64, length: usize) -> Result<String, EmbeddingError> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(EmbeddingError::OutOfRangeCoordinate { lat, lon });
    }
    if !(1..=12).contains(&length) {
        return Err(EmbeddingError::BadLength(length));
    }
    let (mut lat_lo, mut lat_hi) = (-90.0, 90.0);
    let (mut lon_lo, mut lon_hi) = (-180.0, 180.0);
    let mut out = String::with_capacity(length);
    let mut bit = 0usize;
    for _ in 0..length {
        let mut code = 0usize;
        for _ in 0..5 {
            let (v, lo, hi) = if bit % 2 == 0 {
                (lon, &mut lon_lo, &mut lon_hi)
            } else {
                (lat, &mut lat_lo, &mut lat_hi)
            };
            let mid = (*lo + *hi) / 2.0;
            code <<= 1;
            if v >= mid {
                code |= 1;
                *lo = mid;
            } else {
                *hi = mid;
            }
            bit += 1;
        }
        out.push(GEOHASH_ALPHABET[code] as char);
    }
    Ok(out)
}

/// Index of a GeoHash character in the base-32 alphabet.
pub fn geohash_symbol(c: char) -> Option<usize> {
    GEOHASH_ALPHABET.iter().position(|&a| a as char == c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Quantise each axis to its bit budget, then interleave.
    fn oracle(lat: f64, lon: f64, length: usize) -> String {
        let total = 5 * length;
        let lon_bits = total.div_ceil(2);
        let lat_bits = total / 2;
        let q = |v: f64, lo: f64, span: f64, bits: usize| -> u64 {
            let cells = (1u64 << bits) as f64;
            (((v - lo) / span * cells).floor() as u64).min((1u64 << bits) - 1)
        };
        let qlon = q(lon, -180.0, 360.0, lon_bits);
        let qlat = q(lat, -90.0, 180.0, lat_bits);
        let mut bits = Vec::with_capacity(total);
        for i in 0..total {
            let b = if i % 2 == 0 {
                (qlon >> (lon_bits - 1 - i / 2)) & 1
            } else {
                (qlat >> (lat_bits - 1 - i / 2)) & 1
            };
            bits.push(b as usize);
        }
        bits.chunks(5)
            .map(|c| GEOHASH_ALPHABET[c.iter().fold(0, |a, b| a * 2 + b)] as char)
            .collect()
    }

    #[test]
    fn known_hashes() {
        assert_eq!(geohash_encode(57.64911, 10.40744, 11).unwrap(), "u4pruydqqvj");
        assert_eq!(oracle(57.64911, 10.40744, 11), "u4pruydqqvj");
        assert_eq!(geohash_encode(0.0, 0.0, 1).unwrap(), "s");
        assert_eq!(oracle(0.0, 0.0, 1), "s");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            geohash_encode(90.1, 0.0, 5),
            Err(EmbeddingError::OutOfRangeCoordinate { .. })
        ));
        assert!(geohash_encode(0.0, 180.5, 5).is_err());
        assert!(matches!(geohash_encode(0.0, 0.0, 0), Err(EmbeddingError::BadLength(0))));
        assert!(geohash_encode(0.0, 0.0, 13).is_err());
    }

    #[test]
    fn symbols_round_trip() {
        for (i, &c) in GEOHASH_ALPHABET.iter().enumerate() {
            assert_eq!(geohash_symbol(c as char), Some(i));
        }
        assert_eq!(geohash_symbol('a'), None);
    }

    proptest! {
        #[test]
        fn matches_oracle(lat in -89.999f64..89.999, lon in -179.999f64..179.999, len in 1usize..=12) {
            prop_assert_eq!(geohash_encode(lat, lon, len).unwrap(), oracle(lat, lon, len));
        }

        #[test]
        fn prefix_property(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0, len in 2usize..=12) {
            let long = geohash_encode(lat, lon, len).unwrap();
            let short = geohash_encode(lat, lon, len - 1).unwrap();
            prop_assert_eq!(&long[..len - 1], short.as_str());
        }
    }
}
