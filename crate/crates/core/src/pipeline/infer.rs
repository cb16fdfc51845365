use super::data::{make_batch, Prepared, View};
use super::model::{GenCast, ModelState};
use super::PipelineError;
use crate::diffcore::{Tape, Tensor};
use crate::params::ParamStore;

/// Normalised forecasts `[T', n, C]` for every window start, computed on
/// `view` with the same forward pass used in training.
pub fn forecast_view(
    net: &GenCast,
    store: &ParamStore,
    prep: &Prepared,
    view: &View,
    starts: &[usize],
    batch_size: usize,
) -> Result<Vec<Tensor>, PipelineError> {
    let m = &net.config;
    let (n, c) = (view.nodes.len(), prep.channels());
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = make_batch(prep, view, chunk, m.steps, m.horizon, m.t_w);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = net.forward(&mut tape, &p, &view.nodes, &batch, &view.ops)?;
        let x = tape.value(f.x_hat);
        let b = chunk.len();
        for w in 0..b {
            let mut data = Vec::with_capacity(m.horizon * n * c);
            for h in 0..m.horizon {
                let row = (h * b + w) * n * c;
                data.extend_from_slice(&x.data()[row..row + n * c]);
            }
            out.push(Tensor::new(vec![m.horizon, n, c], data).expect("shape"));
        }
    }
    Ok(out)
}

/// De-normalised forecasts `[T', N_u, C]` for the unobserved nodes, one
/// per window start, from the full graph with pseudo-observed inputs.
pub fn forecast_unobserved(state: &ModelState, prep: &Prepared, starts: &[usize]) -> Result<Vec<Tensor>, PipelineError> {
    let view = &prep.inference;
    check_window(prep, state, starts)?;
    let preds = forecast_view(&state.net, &state.store, prep, view, starts, state.config.batch_size)?;
    let (n, c) = (view.nodes.len(), prep.channels());
    let h_len = state.config.model.horizon;
    Ok(preds
        .into_iter()
        .map(|p| {
            let mut data = Vec::with_capacity(h_len * view.hidden.len() * c);
            for h in 0..h_len {
                for &li in &view.hidden {
                    for ch in 0..c {
                        data.push(state.norm.invert(p.data()[(h * n + li) * c + ch]));
                    }
                }
            }
            Tensor::new(vec![h_len, view.hidden.len(), c], data).expect("shape")
        })
        .collect())
}

/// Forecast for the unobserved nodes from the window starting at `start`.
pub fn infer_unobserved(state: &ModelState, prep: &Prepared, start: usize) -> Result<Tensor, PipelineError> {
    Ok(forecast_unobserved(state, prep, &[start])?.remove(0))
}

/// Weather attention averaged over nodes and windows, `[T, T_w]`.
pub fn attention_map(state: &ModelState, prep: &Prepared, starts: &[usize]) -> Result<Option<Tensor>, PipelineError> {
    if state.net.weather.is_none() || starts.is_empty() {
        return Ok(None);
    }
    check_window(prep, state, starts)?;
    let m = &state.config.model;
    let view = &prep.inference;
    let mut acc = Tensor::zeros(&[m.steps, m.t_w]);
    let mut rows = 0usize;
    for chunk in starts.chunks(state.config.batch_size.max(1)) {
        let batch = make_batch(prep, view, chunk, m.steps, m.horizon, m.t_w);
        let mut tape = Tape::new();
        let f = state.forward(&mut tape, &view.nodes, &batch, &view.ops)?;
        let alpha = tape.value(f.alpha.expect("weather branch"));
        let k = m.steps * m.t_w;
        for block in alpha.data().chunks(k) {
            for (a, v) in acc.data_mut().iter_mut().zip(block) {
                *a += v;
            }
            rows += 1;
        }
    }
    Ok(Some(acc.map(|v| v / rows as f64)))
}

fn check_window(prep: &Prepared, state: &ModelState, starts: &[usize]) -> Result<(), PipelineError> {
    let span = state.config.model.steps + state.config.model.horizon;
    match starts.iter().find(|&&s| s + span > prep.steps()) {
        Some(s) => Err(PipelineError::Data(format!(
            "window at {s} runs past the {} available steps",
            prep.steps()
        ))),
        None => Ok(()),
    }
}
