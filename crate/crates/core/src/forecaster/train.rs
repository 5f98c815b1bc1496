//! Sample construction, Adam training and horizon prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{accumulate_batch, forward_cached, Transposed, Workspace};
use super::{positional_embedding, TrainingSample, TransformerConfig, TransformerWeights};
use crate::error::{Error, Result};
use crate::timeseries::{running_envelopes, DenseSeries, Envelope, METEO_DIMS};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub weights: TransformerWeights,
    /// Mean per-sample training loss of each epoch, measured before each
    /// mini-batch update.
    pub loss_trace: Vec<f64>,
    pub optimizer: AdamState,
}

/// Per-column envelopes as of every day.
struct Envelopes {
    deaths: Vec<Envelope>,
    meteo: [Vec<Envelope>; METEO_DIMS],
}

impl Envelopes {
    fn new(data: &DenseSeries, len: usize) -> Self {
        let column = |k: usize| -> Vec<f64> { data.meteo[..len].iter().map(|r| r[k]).collect() };
        Self {
            deaths: running_envelopes(&data.deaths[..len]),
            meteo: std::array::from_fn(|k| running_envelopes(&column(k))),
        }
    }
}

fn check_origin(data: &DenseSeries, t: usize, config: &TransformerConfig) -> Result<()> {
    if t < config.window {
        return Err(Error::InsufficientData(format!(
            "origin {t} has fewer than {} days of history",
            config.window
        )));
    }
    if t >= data.len() {
        return Err(Error::IndexOutOfRange { index: t, len: data.len() });
    }
    Ok(())
}

fn assemble(
    data: &DenseSeries,
    t: usize,
    config: &TransformerConfig,
    deaths_env: Envelope,
    meteo_env: [Envelope; METEO_DIMS],
    with_target: bool,
) -> TrainingSample {
    let w = config.window;
    let first = t + 1 - w;
    let mut input = Vec::with_capacity(config.input_channels() * w);
    input.extend(data.deaths[first..=t].iter().map(|&x| deaths_env.normalize(x)));
    for (k, env) in meteo_env.iter().enumerate() {
        input.extend(data.meteo[first..=t].iter().map(|r| env.normalize(r[k])));
    }
    let [sin, cos] = positional_embedding(w);
    input.extend(sin);
    input.extend(cos);
    let target = if with_target {
        data.deaths[t + 1..=t + config.horizon].iter().map(|&x| deaths_env.normalize(x)).collect()
    } else {
        Vec::new()
    };
    TrainingSample { input, target }
}

/// Builds the sample whose window ends at origin `t`.
///
/// Inputs use days `t - T + 1 ..= t`, all normalized with the envelopes as of
/// day `t`. Targets (days `t + 1 ..= t + h`) use the same deaths envelope.
pub fn build_sample(data: &DenseSeries, t: usize, config: &TransformerConfig, with_target: bool) -> Result<TrainingSample> {
    check_origin(data, t, config)?;
    if with_target && t + config.horizon >= data.len() {
        return Err(Error::InsufficientData(format!("no {}-day target after origin {t}", config.horizon)));
    }
    let deaths_env = Envelope::as_of(&data.deaths, t)?;
    let mut meteo_env = [deaths_env; METEO_DIMS];
    for (k, env) in meteo_env.iter_mut().enumerate() {
        let column: Vec<f64> = data.meteo[..=t].iter().map(|r| r[k]).collect();
        *env = Envelope::as_of(&column, t)?;
    }
    Ok(assemble(data, t, config, deaths_env, meteo_env, with_target))
}

/// All samples whose target span lies in `first_target..data.len()`.
pub fn training_samples(data: &DenseSeries, first_target: usize, config: &TransformerConfig) -> Vec<TrainingSample> {
    let (w, h) = (config.window, config.horizon);
    let n = data.len();
    if n < w + h + 1 {
        return Vec::new();
    }
    let env = Envelopes::new(data, n);
    let first_origin = w.max(first_target.saturating_sub(1));
    (first_origin..n - h)
        .map(|t| {
            let meteo = std::array::from_fn(|k| env.meteo[k][t]);
            assemble(data, t, config, env.deaths[t], meteo, true)
        })
        .collect()
}

/// Trains on every sample of `data`.
pub fn train(data: &DenseSeries, prior: Option<&TransformerWeights>, config: &TransformerConfig) -> Result<TrainOutcome> {
    let samples = training_samples(data, 0, config);
    train_on_samples(&samples, prior, config)
}

/// Runs `config.epochs` epochs of mini-batch Adam over `samples`.
///
/// Starts from `prior` when given, else from the seeded initialization.
/// Optimizer moments always start at zero.
pub fn train_on_samples(
    samples: &[TrainingSample],
    prior: Option<&TransformerWeights>,
    config: &TransformerConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    let mut weights = match prior {
        Some(w) => {
            if w.config().window != config.window
                || w.config().horizon != config.horizon
                || w.len() != TransformerWeights::zeros(config)?.len()
            {
                return Err(Error::ShapeMismatch("prior weights do not match the configuration".into()));
            }
            TransformerWeights::from_values(config, w.values().to_vec())?
        }
        None => TransformerWeights::init(config, config.seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut adam = AdamState::new(weights.len());
    let mut ws = Workspace::new(config);
    let mut grad = vec![0.0; weights.len()];
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let tr = Transposed::new(&weights);
            grad.fill(0.0);
            let loss = accumulate_batch(&weights, &tr, &batch, &mut ws, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::Diverged("training loss"));
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.update(weights.values_mut(), &grad, config.lr);
        }
        loss_trace.push(epoch_loss / samples.len() as f64);
    }
    if weights.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("weights"));
    }
    Ok(TrainOutcome {
        weights,
        loss_trace,
        optimizer: adam,
    })
}

/// De-normalized `h`-day forecast from origin `t` (days `t+1..=t+h`).
///
/// Reads only `data[..=t]`.
pub fn predict_horizon(weights: &TransformerWeights, data: &DenseSeries, t: usize) -> Result<Vec<f64>> {
    let config = weights.config();
    let sample = build_sample(data, t, config, false)?;
    let env = Envelope::as_of(&data.deaths, t)?;
    let mut ws = Workspace::new(config);
    let out = forward_cached(weights, &sample, &mut ws)?;
    Ok(out.iter().map(|&y| env.denormalize(y)).collect())
}
