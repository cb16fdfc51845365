use std::sync::Arc;

use rand::Rng;

use super::{geohash_symbol, EmbeddingError};
use crate::diffcore::{Tape, Tensor, Var};
use crate::params::{glorot, Bound, Linear, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashEncoderConfig {
    pub length: usize,
    pub width: usize,
    pub layers: usize,
}

impl Default for HashEncoderConfig {
    fn default() -> Self {
        Self {
            length: 8,
            width: 32,
            layers: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
}

/// Character table, positional offsets and single-head self-attention
/// blocks over GeoHash symbols, mean-pooled to one vector per node.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    pub chars: ParamId,
    pub positions: ParamId,
    layers: Vec<EncoderLayer>,
    config: HashEncoderConfig,
}

impl HashEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: HashEncoderConfig) -> Self {
        let d = config.width;
        let chars = store.add("geohash.chars", glorot(rng, &[32, d], 32, d), true);
        let positions = store.add(
            "geohash.positions",
            glorot(rng, &[config.length, d], config.length, d),
            true,
        );
        let layers = (0..config.layers)
            .map(|i| {
                let name = |s: &str| format!("geohash.layer{i}.{s}");
                EncoderLayer {
                    q: Linear::new(store, rng, &name("q"), d, d, false),
                    k: Linear::new(store, rng, &name("k"), d, d, false),
                    v: Linear::new(store, rng, &name("v"), d, d, false),
                    o: Linear::new(store, rng, &name("o"), d, d, true),
                    ff1: Linear::new(store, rng, &name("ff1"), d, 2 * d, true),
                    ff2: Linear::new(store, rng, &name("ff2"), 2 * d, d, true),
                }
            })
            .collect();
        Self {
            chars,
            positions,
            layers,
            config,
        }
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn config(&self) -> HashEncoderConfig {
        self.config
    }

    /// Zeroes every residual branch so each block passes its input through.
    pub fn make_identity(&self, store: &mut ParamStore) {
        for l in &self.layers {
            l.o.zero(store);
            l.ff2.zero(store);
        }
    }

    /// `[N, width]` embeddings for GeoHash strings of equal length.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, strings: &[String]) -> Result<Var, EmbeddingError> {
        let s = self.config.length;
        let d = self.config.width;
        let mut symbols = Vec::with_capacity(strings.len() * s);
        for st in strings {
            let len = st.chars().count();
            if len != s {
                return Err(EmbeddingError::LengthMismatch { expected: s, found: len });
            }
            for c in st.chars() {
                symbols.push(Some(geohash_symbol(c).ok_or(EmbeddingError::BadSymbol(c))?));
            }
        }
        let n = strings.len();
        let pos_idx: Vec<Option<usize>> = (0..n * s).map(|r| Some(r % s)).collect();
        let chars = tape.gather_rows(p.var(self.chars), Arc::new(symbols));
        let pos = tape.gather_rows(p.var(self.positions), Arc::new(pos_idx));
        let mut x = tape.add(chars, pos);
        let scale = 1.0 / (d as f64).sqrt();
        for l in &self.layers {
            let q = l.q.forward(tape, p, x);
            let k = l.k.forward(tape, p, x);
            let v = l.v.forward(tape, p, x);
            let q = tape.reshape(q, &[n, s, d]);
            let k = tape.reshape(k, &[n, s, d]);
            let v = tape.reshape(v, &[n, s, d]);
            let scores = tape.batch_matmul(q, k, true);
            let scores = tape.scale(scores, scale);
            let alpha = tape.softmax_rows(scores);
            let ctx = tape.batch_matmul(alpha, v, false);
            let ctx = tape.reshape(ctx, &[n * s, d]);
            let att = l.o.forward(tape, p, ctx);
            x = tape.add(x, att);
            let h = l.ff1.forward(tape, p, x);
            let h = tape.relu(h);
            let h = l.ff2.forward(tape, p, h);
            x = tape.add(x, h);
        }
        let pool = Tensor::full(&[1, s], 1.0 / s as f64);
        Ok(tape.block_left_mul(Arc::new(pool), x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore, HashEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = HashEncoderConfig { length: 5, width: 6, layers: 2 };
        let enc = HashEncoder::new(&mut store, &mut rng, cfg);
        (store, enc)
    }

    #[test]
    fn shape_and_determinism() {
        let (store, enc) = encoder();
        let strings: Vec<String> = ["9q8yy", "9q8yz", "9q8yy"].iter().map(|s| s.to_string()).collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = enc.forward(&mut tape, &p, &strings).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[3, 6]);
        assert_eq!(v.row(0), v.row(2));
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn identity_encoder_with_unit_table_pools_to_ones() {
        let (mut store, enc) = encoder();
        enc.make_identity(&mut store);
        store.get_mut(enc.chars).data_mut().fill(1.0);
        store.get_mut(enc.positions).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = enc.forward(&mut tape, &p, &["u4pru".into(), "s0000".into()]).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn length_mismatch() {
        let (store, enc) = encoder();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        assert_eq!(
            enc.forward(&mut tape, &p, &["u4pru".into(), "u4pr".into()]).unwrap_err(),
            EmbeddingError::LengthMismatch { expected: 5, found: 4 }
        );
    }

    #[test]
    fn gradients_reach_table_and_encoder() {
        let (store, enc) = encoder();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = enc.forward(&mut tape, &p, &["u4pru".into()]).unwrap();
        let loss = tape.sum(out);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p.var(enc.chars)).unwrap().max_abs() > 0.0);
        let q = enc.layers[0].q.w;
        assert!(g.get(p.var(q)).unwrap().max_abs() > 0.0);
    }
}
