use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{build_view, make_batch, prepare, window_starts, Dataset, Prepared, View};
use super::infer::forecast_view;
use super::model::{GenCast, ModelState};
use super::optim::Adam;
use super::{PipelineError, TrainConfig};
use crate::diffcore::Tape;
use crate::losses::{
    calibrate_delta, combine, contrastive_loss, grouping_entropy_loss, physics_loss, physics_residual, pool_nodes,
    pred_loss, PhysicsConfig, PhysicsPenalty,
};
use crate::params::ParamStore;
use crate::region_graph::{random_subgraph_mask, Adjacency};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// Batch-averaged loss terms of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub pred: f64,
    pub cl: f64,
    pub spg: f64,
    pub phy: f64,
    pub total: f64,
    pub val_rmse: Option<f64>,
    pub delta: Option<f64>,
    pub masked: usize,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub delta: Option<f64>,
    /// Main-phase epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    /// Residuals pooled during warm-up, observation units.
    pub warmup_residuals: Vec<f64>,
}

impl TrainingLog {
    pub fn main_epochs(&self) -> impl Iterator<Item = &EpochLog> {
        self.epochs.iter().filter(|e| e.phase == Phase::Main)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,l_pred,l_cl,l_spg,l_phy,total,val_rmse,delta,masked,batches\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{},{}",
                e.phase.name(),
                e.epoch,
                e.pred,
                e.cl,
                e.spg,
                e.phy,
                e.total,
                opt(e.val_rmse),
                opt(e.delta),
                e.masked,
                e.batches
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_csv()).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
    }
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelState, TrainingLog), PipelineError> {
    let prep = prepare(ds, cfg)?;
    train_prepared(&prep, cfg)
}

struct Context<'a> {
    net: &'a GenCast,
    prep: &'a Prepared,
    cfg: &'a TrainConfig,
    orig: &'a View,
    a_sg: &'a Adjacency,
    starts: &'a [usize],
}

/// Warm-up with the quadratic penalty, δ calibration, re-initialisation
/// and Huber-phase training with early stopping on validation nodes.
pub fn train_prepared(prep: &Prepared, cfg: &TrainConfig) -> Result<(ModelState, TrainingLog), PipelineError> {
    cfg.validate()?;
    let m = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let net = GenCast::new(&mut store, &mut rng, m, prep.geohashes.clone(), prep.embeddings.clone())?;
    let init = store.clone();

    let starts = window_starts(0, prep.train_end, m.steps + m.horizon);
    let a_sg = prep.a_sg.restrict(&prep.train_nodes);
    let orig = build_view(prep, prep.train_nodes.clone(), Vec::new(), Some(&a_sg))?;
    let val = if prep.val_nodes.is_empty() {
        None
    } else {
        let nodes = prep.observed_nodes();
        let hidden = (0..nodes.len()).filter(|&i| prep.val_nodes.contains(&nodes[i])).collect();
        Some(build_view(prep, nodes, hidden, None)?)
    };
    let val_starts = spread(&starts, cfg.val_windows);
    let ctx = Context {
        net: &net,
        prep,
        cfg,
        orig: &orig,
        a_sg: &a_sg,
        starts: &starts,
    };

    let mut physics = PhysicsConfig::new(prep.x_fspd.clone());
    physics.tau = cfg.tau;
    let mut log = TrainingLog::default();
    if cfg.use_physics && cfg.weights.theta != 0.0 {
        let mut opt = Adam::new(&store, cfg.learning_rate);
        let mut residuals = Vec::new();
        let mut e = run_epoch(
            &ctx,
            &mut store,
            &mut opt,
            &mut rng,
            Some(PhysicsPenalty::Quadratic),
            Some(&mut residuals),
            Phase::Warmup,
            1,
        )?;
        let delta = calibrate_delta(&residuals, cfg.tau)?;
        physics.delta = Some(delta);
        e.delta = Some(delta);
        log.epochs.push(e);
        log.warmup_residuals = residuals;
        store = init;
    }
    log.delta = physics.delta;
    let penalty = physics.delta.map(PhysicsPenalty::Huber);

    let mut opt = Adam::new(&store, cfg.learning_rate);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let mut e = run_epoch(&ctx, &mut store, &mut opt, &mut rng, penalty, None, Phase::Main, epoch)?;
        e.delta = physics.delta;
        if let Some(v) = &val {
            let r = view_rmse(&net, &store, prep, v, &val_starts, cfg)?;
            e.val_rmse = Some(r);
            if best.as_ref().map_or(true, |b| r < b.0) {
                best = Some((r, store.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log.epochs.push(e);
        if val.is_some() && since_best >= cfg.patience {
            break;
        }
    }
    if let Some((_, s, epoch)) = best {
        store = s;
        log.best_epoch = Some(epoch);
    }

    let state = ModelState {
        config: cfg.clone(),
        net,
        store,
        physics,
        norm: prep.norm,
        weather_stats: prep.weather.as_ref().map(|w| w.stats),
        node_ids: prep.node_ids.clone(),
        geohashes: prep.geohashes.clone(),
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    };
    Ok((state, log))
}

/// Up to `count` evenly spaced entries of `v`.
fn spread(v: &[usize], count: usize) -> Vec<usize> {
    if v.len() <= count {
        return v.to_vec();
    }
    (0..count).map(|i| v[i * v.len() / count]).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    ctx: &Context,
    store: &mut ParamStore,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    penalty: Option<PhysicsPenalty>,
    mut residuals: Option<&mut Vec<f64>>,
    phase: Phase,
    epoch: usize,
) -> Result<EpochLog, PipelineError> {
    let cfg = ctx.cfg;
    let n = ctx.prep.train_nodes.len();
    let local: Vec<usize> = (0..n).collect();
    let mut mask: Vec<usize> = random_subgraph_mask(ctx.a_sg, &local, cfg.mask_ratio, rng)
        .into_iter()
        .collect();
    mask.truncate(n - 2);
    let masked = build_view(ctx.prep, ctx.prep.train_nodes.clone(), mask, Some(ctx.a_sg))?;

    let mut order = ctx.starts.to_vec();
    order.shuffle(rng);
    let limit = cfg.max_batches.unwrap_or(usize::MAX);
    let mut sums = [0.0; 5];
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).take(limit) {
        let terms = step(ctx, store, opt, &masked, chunk, penalty, residuals.as_deref_mut())
            .map_err(|e| match e {
                PipelineError::DivergenceDetected { detail, .. } => PipelineError::DivergenceDetected {
                    phase: phase.name(),
                    epoch,
                    detail,
                },
                other => other,
            })?;
        for (s, t) in sums.iter_mut().zip(terms) {
            *s += t;
        }
        batches += 1;
    }
    let k = batches.max(1) as f64;
    Ok(EpochLog {
        phase,
        epoch,
        pred: sums[0] / k,
        cl: sums[1] / k,
        spg: sums[2] / k,
        phy: sums[3] / k,
        total: sums[4] / k,
        val_rmse: None,
        delta: None,
        masked: masked.hidden.len(),
        batches,
    })
}

/// One optimiser step on a batch; returns `[pred, cl, spg, phy, total]`.
fn step(
    ctx: &Context,
    store: &mut ParamStore,
    opt: &mut Adam,
    masked: &View,
    starts: &[usize],
    penalty: Option<PhysicsPenalty>,
    residuals: Option<&mut Vec<f64>>,
) -> Result<[f64; 5], PipelineError> {
    let (cfg, prep, m) = (ctx.cfg, ctx.prep, &ctx.cfg.model);
    let bo = make_batch(prep, ctx.orig, starts, m.steps, m.horizon, m.t_w);
    let bm = make_batch(prep, masked, starts, m.steps, m.horizon, m.t_w);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let fo = ctx.net.forward(&mut tape, &p, &ctx.orig.nodes, &bo, &ctx.orig.ops)?;
    let fm = ctx.net.forward(&mut tape, &p, &masked.nodes, &bm, &masked.ops)?;

    let l_pred = pred_loss(&mut tape, fm.x_hat, &bm.truth, &bm.hidden_rows)?;
    let zo = pool_nodes(&mut tape, fo.z, starts.len());
    let zm = pool_nodes(&mut tape, fm.z, starts.len());
    let l_cl = contrastive_loss(&mut tape, zo, zm, cfg.weights.omega)?;
    let groups: Vec<_> = fo.assignments.iter().chain(&fm.assignments).copied().collect();
    let l_spg = grouping_entropy_loss(&mut tape, &groups);
    let l_phy = match penalty {
        Some(pen) => {
            let (r, grads) = physics_residual(
                &tape,
                fm.x_hat,
                fm.time_coord,
                fm.l_enc,
                0,
                &bm.x_fspd,
                prep.norm.std,
                prep.norm.mean,
            )?;
            if let Some(out) = residuals {
                out.extend_from_slice(r.data());
            }
            Some(physics_loss(&mut tape, fm.x_hat, &grads, &bm.x_fspd, prep.norm.std, prep.norm.mean, pen)?)
        }
        None => None,
    };
    let total = combine(&mut tape, l_pred, Some(l_cl), Some(l_spg), l_phy, &cfg.weights);
    let scalar = |tape: &Tape, v| tape.value(v).data()[0];
    let terms = [
        scalar(&tape, l_pred),
        scalar(&tape, l_cl),
        scalar(&tape, l_spg),
        l_phy.map_or(0.0, |v| scalar(&tape, v)),
        scalar(&tape, total),
    ];
    if terms.iter().any(|t| !t.is_finite()) {
        return Err(divergence(format!("non-finite loss terms {terms:?}")));
    }
    let grads = tape.backward(total)?;
    let norm = opt.update(store, &p, &grads, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(divergence("non-finite gradient".into()));
    }
    Ok(terms)
}

fn divergence(detail: String) -> PipelineError {
    PipelineError::DivergenceDetected {
        phase: "",
        epoch: 0,
        detail,
    }
}

/// De-normalised RMSE over the hidden nodes of `view`.
pub(crate) fn view_rmse(
    net: &GenCast,
    store: &ParamStore,
    prep: &Prepared,
    view: &View,
    starts: &[usize],
    cfg: &TrainConfig,
) -> Result<f64, PipelineError> {
    let preds = forecast_view(net, store, prep, view, starts, cfg.batch_size)?;
    let m = &cfg.model;
    let (n, c, total) = (view.nodes.len(), prep.channels(), prep.nodes());
    let mut se = 0.0;
    let mut count = 0usize;
    for (pred, &s) in preds.iter().zip(starts) {
        for h in 0..m.horizon {
            let t = s + m.steps + h;
            for &li in &view.hidden {
                let g = view.nodes[li];
                for ch in 0..c {
                    let d = pred.data()[(h * n + li) * c + ch] - prep.values.data()[(t * total + g) * c + ch];
                    se += d * d;
                    count += 1;
                }
            }
        }
    }
    Ok(prep.norm.std * (se / count.max(1) as f64).sqrt())
}
