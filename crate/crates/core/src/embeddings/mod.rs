//! Temporal and spatial embeddings and the initial feature lift.
//!
//! Time enters the tape as a per-(step, node) coordinate so that forecasts
//! can be differentiated with respect to it; the spatial embedding is a
//! tape leaf as well, whether it comes from the trainable GeoHash encoder
//! or from a frozen precomputed table.

mod geohash;
mod hash_encoder;

pub use geohash::{geohash_encode, geohash_symbol, GEOHASH_ALPHABET};
pub use hash_encoder::{HashEncoder, HashEncoderConfig};

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    OutOfRangeCoordinate { lat: f64, lon: f64 },
    #[error("geohash length must be in 1..=12, got {0}")]
    BadLength(usize),
    #[error("geohash strings differ in length ({expected} vs {found})")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid geohash symbol {0:?}")]
    BadSymbol(char),
    #[error("node {0} is missing from the embedding file")]
    MissingNode(String),
    #[error("embedding rows differ in width: expected {expected}, node {node} has {found}")]
    DimensionMismatch { expected: usize, found: usize, node: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Io(String),
}

/// `(sin, cos)` of the step's phase within the day.
pub fn temporal_embedding(step_indices: &[usize], t_d: usize) -> Tensor {
    assert!(t_d >= 1, "T_d must be positive");
    let mut data = Vec::with_capacity(2 * step_indices.len());
    for &s in step_indices {
        let phase = 2.0 * PI * (s % t_d) as f64 / t_d as f64;
        data.push(phase.sin());
        data.push(phase.cos());
    }
    Tensor::new(vec![step_indices.len(), 2], data).expect("shape")
}

/// Time coordinate leaf, one row per `(t, n)` in time-major order.
///
/// Values are the step index within the day; the leaf requires a gradient
/// so forecasts can be differentiated with respect to time.
pub fn time_coordinate(tape: &mut Tape, step_of_day: &[usize], nodes: usize, t_d: usize) -> Var {
    let mut data = Vec::with_capacity(step_of_day.len() * nodes);
    for &s in step_of_day {
        data.extend(std::iter::repeat((s % t_d) as f64).take(nodes));
    }
    let rows = data.len();
    tape.leaf(Tensor::new(vec![rows, 1], data).expect("shape"), true)
}

/// Sinusoidal encoding of a `[R, 1]` time coordinate, giving `[R, 2]`.
pub fn encode_time(tape: &mut Tape, coord: Var, t_d: usize) -> Var {
    let phase = tape.scale(coord, 2.0 * PI / t_d as f64);
    let s = tape.sin(phase);
    let c = tape.cos(phase);
    tape.concat_cols(s, c)
}

/// Reads `node_id,e0,e1,...` and aligns rows to `expected_nodes`.
pub fn load_precomputed_spatial_embeddings(
    path: &Path,
    expected_nodes: &[String],
) -> Result<Tensor, EmbeddingError> {
    let io = |e: &dyn std::fmt::Display| EmbeddingError::Io(format!("{}: {e}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| io(&e))?;
    let header = rdr.headers().map_err(|e| io(&e))?.clone();
    if header.get(0).map(str::trim) != Some("node_id") {
        return Err(io(&"first column must be node_id"));
    }
    let mut width: Option<usize> = None;
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io(&e))?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| io(&format!("row {}: bad value `{v}`", line + 2)))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: w,
                    found: vals.len(),
                    node: id,
                })
            }
            _ => {}
        }
        rows.entry(id).or_insert(vals);
    }
    let d = width.unwrap_or(0);
    let mut data = Vec::with_capacity(expected_nodes.len() * d);
    for id in expected_nodes {
        let row = rows
            .get(id)
            .ok_or_else(|| EmbeddingError::MissingNode(id.clone()))?;
        data.extend_from_slice(row);
    }
    Tensor::new(vec![expected_nodes.len(), d], data).map_err(|e| EmbeddingError::ShapeMismatch(e.to_string()))
}

/// Where the per-node location embedding comes from.
#[derive(Clone, Debug)]
pub enum SpatialEmbedding {
    /// Trainable GeoHash encoder over per-node strings.
    Hash {
        encoder: HashEncoder,
        strings: Vec<String>,
    },
    /// Frozen precomputed table, `[N, d]`.
    Llm { table: Tensor },
}

impl SpatialEmbedding {
    pub fn is_trainable(&self) -> bool {
        matches!(self, SpatialEmbedding::Hash { .. })
    }

    pub fn width(&self) -> usize {
        match self {
            SpatialEmbedding::Hash { encoder, .. } => encoder.width(),
            SpatialEmbedding::Llm { table } => table.cols(),
        }
    }

    /// `L_enc` for the nodes at `rows` (indices into the region's node list).
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        rows: &[usize],
    ) -> Result<Var, EmbeddingError> {
        match self {
            SpatialEmbedding::Hash { encoder, strings } => {
                let sub: Vec<String> = rows.iter().map(|&r| strings[r].clone()).collect();
                encoder.forward(tape, p, &sub)
            }
            SpatialEmbedding::Llm { table } => {
                let d = table.cols();
                let mut data = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    data.extend_from_slice(table.row(r));
                }
                let t = Tensor::new(vec![rows.len(), d], data).expect("shape");
                Ok(tape.leaf(t, true))
            }
        }
    }
}

/// Projections that build `STE` and lift `[X, STE]` to the hidden width.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLift {
    pub proj_t: Linear,
    pub proj_s: Linear,
    pub lift: Linear,
    pub channels: usize,
    pub d_ste: usize,
    pub hidden: usize,
}

impl FeatureLift {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        spatial_width: usize,
        d_ste: usize,
        hidden: usize,
    ) -> Self {
        Self {
            proj_t: Linear::new(store, rng, "ste.time", 2, d_ste, true),
            proj_s: Linear::new(store, rng, "ste.space", spatial_width, d_ste, true),
            lift: Linear::new(store, rng, "lift", channels + d_ste, hidden, true),
            channels,
            d_ste,
            hidden,
        }
    }

    /// `STE` rows in time-major `(t, n)` order, `[T·N, D_ste]`.
    ///
    /// `te_enc` is either `[T, 2]` (shared across nodes) or `[T·N, 2]`.
    pub fn ste(
        &self,
        tape: &mut Tape,
        p: &Bound,
        steps: usize,
        te_enc: Var,
        l_enc: Var,
    ) -> Result<Var, EmbeddingError> {
        let nodes = tape.shape(l_enc)[0];
        let te_rows = tape.value(te_enc).rows();
        if tape.value(te_enc).cols() != 2 || (te_rows != steps && te_rows != steps * nodes) {
            return Err(EmbeddingError::ShapeMismatch(format!(
                "time encoding {:?} for {steps} steps and {nodes} nodes",
                tape.shape(te_enc)
            )));
        }
        if tape.value(l_enc).cols() != self.proj_s.fan_in {
            return Err(EmbeddingError::ShapeMismatch(format!(
                "spatial encoding width {} vs {}",
                tape.value(l_enc).cols(),
                self.proj_s.fan_in
            )));
        }
        let mut te = self.proj_t.forward(tape, p, te_enc);
        if te_rows == steps && nodes != 1 {
            let idx: Vec<Option<usize>> = (0..steps * nodes).map(|r| Some(r / nodes)).collect();
            te = tape.gather_rows(te, Arc::new(idx));
        }
        let se = self.proj_s.forward(tape, p, l_enc);
        let idx: Vec<Option<usize>> = (0..steps * nodes).map(|r| Some(r % nodes)).collect();
        let se = tape.gather_rows(se, Arc::new(idx));
        Ok(tape.add(te, se))
    }

    /// `H0 = lift([X, STE])`, shaped `[T, N, D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        te_enc: Var,
        l_enc: Var,
    ) -> Result<Var, EmbeddingError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels || shape[1] != tape.shape(l_enc)[0] {
            return Err(EmbeddingError::ShapeMismatch(format!(
                "inputs {shape:?} with spatial encoding {:?}",
                tape.shape(l_enc)
            )));
        }
        let (t, n) = (shape[0], shape[1]);
        let ste = self.ste(tape, p, t, te_enc, l_enc)?;
        let flat = tape.reshape(x, &[t * n, self.channels]);
        let cat = tape.concat_cols(flat, ste);
        let h = self.lift.forward(tape, p, cat);
        Ok(tape.reshape(h, &[t, n, self.hidden]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn temporal_examples() {
        let te = temporal_embedding(&[0, 72, 288, 100], 288);
        assert_eq!(te.row(0), &[0.0, 1.0]);
        assert!((te.at2(1, 0) - 1.0).abs() < 1e-15 && te.at2(1, 1).abs() < 1e-15);
        assert_eq!(te.row(2), te.row(0));
        for r in 0..4 {
            let n = te.at2(r, 0).powi(2) + te.at2(r, 1).powi(2);
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_encoding_matches_plain() {
        let mut tape = Tape::new();
        let c = time_coordinate(&mut tape, &[5, 6, 7], 2, 96);
        let e = encode_time(&mut tape, c, 96);
        let plain = temporal_embedding(&[5, 5, 6, 6, 7, 7], 96);
        for (a, b) in tape.value(e).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("emb.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loader_aligns_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = vec!["b".into(), "a".into()];
        let p = write(dir.path(), "node_id,e0,e1\na,1,2\nb,3,4\n");
        let t = load_precomputed_spatial_embeddings(&p, &ids).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[3.0, 4.0, 1.0, 2.0]);

        let p = write(dir.path(), "node_id,e0,e1\na,1,2\n");
        assert_eq!(
            load_precomputed_spatial_embeddings(&p, &ids),
            Err(EmbeddingError::MissingNode("b".into()))
        );

        let p = write(dir.path(), "node_id,e0,e1\na,1,2\nb,3,4,5\n");
        assert!(matches!(
            load_precomputed_spatial_embeddings(&p, &ids),
            Err(EmbeddingError::DimensionMismatch { expected: 2, found: 3, .. })
        ));
    }

    fn lift_fixture(zero_proj: bool) -> (ParamStore, FeatureLift) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lift = FeatureLift::new(&mut store, &mut rng, 1, 4, 3, 5);
        if zero_proj {
            lift.proj_t.zero(&mut store);
            lift.proj_s.zero(&mut store);
            store.get_mut(lift.lift.b.unwrap()).data_mut().fill(0.0);
        }
        (store, lift)
    }

    fn run(store: &ParamStore, lift: &FeatureLift, x: &Tensor, steps: &[usize], l: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let te = tape.constant(temporal_embedding(steps, 96));
        let lv = tape.constant(l.clone());
        let h = lift.forward(&mut tape, &p, xv, te, lv).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn zero_projections_leave_only_x() {
        let (store, lift) = lift_fixture(true);
        let x = Tensor::from_fn(&[2, 3, 1], |i| i as f64 - 2.0);
        let l = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let h = run(&store, &lift, &x, &[1, 2], &l);
        let w = store.get(lift.lift.w);
        for r in 0..6 {
            for d in 0..5 {
                assert!((h.data()[r * 5 + d] - x.data()[r] * w.at2(0, d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_and_permutation() {
        let (store, lift) = lift_fixture(false);
        let l = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
        let zero = Tensor::zeros(&[2, 3, 1]);
        let h = run(&store, &lift, &zero, &[4, 9], &l);
        // with X = 0, each (t, n) row depends only on the step and the node
        let h2 = run(&store, &lift, &zero, &[4, 4], &l);
        assert_eq!(&h2.data()[0..15], &h.data()[0..15]);
        assert_eq!(&h2.data()[15..30], &h.data()[0..15]);

        let x = Tensor::from_fn(&[2, 3, 1], |i| i as f64);
        let perm = [2usize, 0, 1];
        let xp = Tensor::from_fn(&[2, 3, 1], |i| x.data()[(i / 3) * 3 + perm[i % 3]]);
        let lp = Tensor::from_fn(&[3, 4], |i| l.data()[perm[i / 4] * 4 + i % 4]);
        let a = run(&store, &lift, &x, &[4, 9], &l);
        let b = run(&store, &lift, &xp, &[4, 9], &lp);
        for t in 0..2 {
            for n in 0..3 {
                for d in 0..5 {
                    let lhs = b.data()[(t * 3 + n) * 5 + d];
                    let rhs = a.data()[(t * 3 + perm[n]) * 5 + d];
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let (store, lift) = lift_fixture(false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 3, 1]));
        let te = tape.constant(temporal_embedding(&[0, 1, 2], 96));
        let l = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            lift.forward(&mut tape, &p, x, te, l),
            Err(EmbeddingError::ShapeMismatch(_))
        ));
    }
}
