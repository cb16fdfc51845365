use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{Batch, Normaliser};
use super::{PipelineError, TrainConfig};
use crate::diffcore::{Tape, Tensor, Var};
use crate::embeddings::{encode_time, time_coordinate, FeatureLift, HashEncoder, HashEncoderConfig, SpatialEmbedding};
use crate::external_signals::{CrossAttention, GatedFusion, WeatherStats, WEATHER_FIELDS};
use crate::losses::PhysicsConfig;
use crate::params::{Bound, ParamStore};
use crate::st_model::{GraphOperators, StConfig, StModel};

pub(crate) const LLM_TABLE: &str = "spatial.table";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKind {
    /// Trainable GeoHash encoder.
    Hash,
    /// Frozen precomputed table.
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input steps `T`.
    pub steps: usize,
    /// Forecast steps `T'`.
    pub horizon: usize,
    pub channels: usize,
    pub steps_per_day: usize,
    pub d_ste: usize,
    pub spatial: SpatialKind,
    pub hash: HashEncoderConfig,
    pub st: StConfig,
    /// Weather hours attended to.
    pub t_w: usize,
    pub use_weather: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            horizon: 8,
            channels: 1,
            steps_per_day: 96,
            d_ste: 16,
            spatial: SpatialKind::Hash,
            hash: HashEncoderConfig::default(),
            st: StConfig::default(),
            t_w: 12,
            use_weather: true,
        }
    }
}

/// The full network: embeddings, lift, weather fusion and the ST stack.
#[derive(Clone, Debug)]
pub struct GenCast {
    pub config: ModelConfig,
    pub spatial: SpatialEmbedding,
    pub lift: FeatureLift,
    pub weather: Option<(CrossAttention, GatedFusion)>,
    pub st: StModel,
}

/// Handles produced by one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub x_hat: Var,
    pub z: Var,
    pub assignments: Vec<Var>,
    /// `[T·B·n, 1]` time coordinate leaf.
    pub time_coord: Var,
    /// Spatial embedding per stacked node, `[B·n, d]`.
    pub l_enc: Var,
    /// Weather attention, `[B·n, T, T_w]`.
    pub alpha: Option<Var>,
}

impl GenCast {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &ModelConfig,
        geohashes: Vec<String>,
        table: Option<Tensor>,
    ) -> Result<Self, PipelineError> {
        let spatial = match config.spatial {
            SpatialKind::Hash => SpatialEmbedding::Hash {
                encoder: HashEncoder::new(store, rng, config.hash),
                strings: geohashes,
            },
            SpatialKind::Llm => {
                let table = table.ok_or_else(|| PipelineError::MissingEmbedding("all nodes".into()))?;
                store.add(LLM_TABLE, table.clone(), false);
                SpatialEmbedding::Llm { table }
            }
        };
        let hidden = config.st.hidden;
        let lift = FeatureLift::new(store, rng, config.channels, spatial.width(), config.d_ste, hidden);
        let weather = config.use_weather.then(|| {
            (
                CrossAttention::new(store, rng, hidden, WEATHER_FIELDS.len()),
                GatedFusion::new(store, rng, hidden),
            )
        });
        let st = StModel::new(store, rng, config.st.clone(), config.steps, config.horizon, config.channels)?;
        Ok(Self {
            config: config.clone(),
            spatial,
            lift,
            weather,
            st,
        })
    }

    /// Re-reads the frozen embedding table after the store was replaced.
    pub(crate) fn sync(&mut self, store: &ParamStore) {
        if let SpatialEmbedding::Llm { table } = &mut self.spatial {
            if let Some(id) = store.find(LLM_TABLE) {
                *table = store.get(id).clone();
            }
        }
    }

    /// Runs the stacked windows of `batch` on the graph of `nodes`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        nodes: &[usize],
        batch: &Batch,
        ops: &GraphOperators,
    ) -> Result<ForwardOutput, PipelineError> {
        let c = &self.config;
        let n = batch.nodes;
        let rows = batch.windows() * n;
        if nodes.len() != n || ops.nodes() != n {
            return Err(PipelineError::Data(format!(
                "batch of {n}-node windows on a {}-node view",
                nodes.len()
            )));
        }
        let time_coord = time_coordinate(tape, &batch.step_of_day, n, c.steps_per_day);
        let te = encode_time(tape, time_coord, c.steps_per_day);
        let base = self.spatial.encode(tape, p, nodes)?;
        let stack: Vec<Option<usize>> = (0..rows).map(|r| Some(r % n)).collect();
        let l_enc = tape.gather_rows(base, Arc::new(stack));
        let x = tape.constant(batch.x.clone());
        let mut h = self.lift.forward(tape, p, x, te, l_enc)?;
        let mut alpha = None;
        if let Some((cross, fusion)) = &self.weather {
            let wx = batch
                .weather
                .as_ref()
                .ok_or_else(|| PipelineError::Data("weather fusion needs weather windows".into()))?;
            let wx = tape.constant(wx.clone());
            let (h_wx, a) = cross.forward(tape, p, h, wx)?;
            h = fusion.forward(tape, p, h, h_wx)?;
            alpha = Some(a);
        }
        let out = self.st.forward(tape, p, h, ops)?;
        Ok(ForwardOutput {
            x_hat: out.x_hat,
            z: out.z,
            assignments: out.assignments,
            time_coord,
            l_enc,
            alpha,
        })
    }
}

/// A trained (or freshly initialised) model with everything needed to
/// resume or reproduce it.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: TrainConfig,
    pub net: GenCast,
    pub store: ParamStore,
    pub physics: PhysicsConfig,
    pub norm: Normaliser,
    pub weather_stats: Option<WeatherStats>,
    pub node_ids: Vec<String>,
    pub geohashes: Vec<String>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl ModelState {
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &[usize],
        batch: &Batch,
        ops: &GraphOperators,
    ) -> Result<ForwardOutput, PipelineError> {
        let p = self.store.bind(tape);
        self.net.forward(tape, &p, nodes, batch, ops)
    }
}
