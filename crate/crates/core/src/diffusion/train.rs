//! Minibatch Adam training with an exponential moving average of weights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::objective::{loss_at_draws, Objective, TrainingDraws};
use super::schedule::NoiseSchedule;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{AdamConfig, AdamState, Mlp, MlpConfig};
use crate::rng::{streams, RngState};

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;
/// Rows of the fixed batch used for the initial and final evaluation losses.
const EVAL_ROWS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Anneal the learning rate to zero along a half cosine.
    #[serde(default)]
    pub cosine_lr: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            ema_decay: 0.999,
            cosine_lr: false,
            objective: Objective::EpsilonPrediction,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the dataset size {dataset_len}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(epoch, loss)`: epoch 0 is the evaluation loss at initialization,
    /// later epochs the mean minibatch loss of that epoch.
    pub losses: Vec<(usize, f64)>,
    /// Loss of the final raw weights on the same evaluation batch as epoch 0.
    pub final_eval_loss: f64,
}

impl TrainOutcome {
    pub fn write_loss_trace<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss"])?;
        for (e, l) in &self.losses {
            w.write_record([e.to_string(), format!("{l:?}")])?;
        }
        w.flush().map_err(|e| Error::io("loss trace", e))?;
        Ok(())
    }
}

/// Loss at fixed draws seeded by `seed`, on at most `EVAL_ROWS` rows.
pub fn eval_loss(
    mlp: &Mlp,
    params: &crate::numeric::ParamVector,
    objective: Objective,
    schedule: &NoiseSchedule,
    data: &Dataset,
    seed: u64,
) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len().min(EVAL_ROWS)).collect();
    let subset = data.select(&rows);
    let cond = conditions(mlp, &subset)?;
    let mut rng = RngState::with_stream(seed, streams::TRAIN).fork(0xe7a1);
    let draws = TrainingDraws::draw(objective, schedule, subset.len(), subset.dim(), &mut rng);
    Ok(loss_at_draws(
        mlp,
        params,
        objective,
        schedule,
        &subset.points,
        cond.as_deref(),
        &draws,
    )?
    .loss)
}

fn conditions(mlp: &Mlp, data: &Dataset) -> Result<Option<Vec<usize>>> {
    let k = mlp.config().condition_count;
    if k == 0 {
        return Ok(None);
    }
    let labels = data
        .dense_labels()
        .ok_or_else(|| Error::Config("a conditional model needs a label on every row".into()))?;
    if let Some(bad) = labels.iter().find(|&&c| c >= k) {
        return Err(Error::Config(format!("label {bad} outside 0..{k}")));
    }
    Ok(Some(labels))
}

/// Trains a denoiser from scratch. Bit-identical for identical inputs.
pub fn train(cfg: &TrainConfig, model: &MlpConfig, schedule: &NoiseSchedule, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate(data.len())?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if model.input_dim != data.dim() || model.output_dim != data.dim() {
        return Err(Error::Dimension {
            layer: "model input".into(),
            expected: data.dim(),
            got: model.input_dim,
        });
    }
    let mlp = Mlp::new(model.clone())?;
    let labels = conditions(&mlp, data)?;
    let mut params = mlp.init(&mut RngState::with_stream(cfg.seed, streams::INIT));
    let mut ema = params.clone();
    let mut adam = AdamState::new(
        params.len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )?;
    let initial = eval_loss(&mlp, &params, cfg.objective, schedule, data, cfg.seed)?;
    let mut losses = vec![(0, initial)];
    let mut rng = RngState::with_stream(cfg.seed, streams::TRAIN);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len() / cfg.batch_size.max(1);
    let total_steps = (batches * cfg.epochs) as f64;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = data.points.select_rows(idx);
            let cond: Option<Vec<usize>> = labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
            let draws = TrainingDraws::draw(cfg.objective, schedule, idx.len(), data.dim(), &mut rng);
            let out = loss_at_draws(&mlp, &params, cfg.objective, schedule, &batch, cond.as_deref(), &draws).map_err(
                |e| match e {
                    Error::Numeric(_) => Error::Diverged { epoch, loss: f64::NAN },
                    other => other,
                },
            )?;
            if !(out.loss <= DIVERGENCE_LOSS) {
                return Err(Error::Diverged { epoch, loss: out.loss });
            }
            total += out.loss;
            if cfg.cosine_lr {
                let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
                adam.set_lr(lr);
            }
            adam.step(&mut params, &out.grad)?;
            step += 1;
            // Warm-up keeps early EMA weights from being dominated by the initialization.
            let decay = cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
            for (e, p) in ema.values_mut().iter_mut().zip(params.values()) {
                *e = decay * *e + (1.0 - decay) * p;
            }
        }
        losses.push((epoch, total / batches as f64));
    }
    let final_eval_loss = eval_loss(&mlp, &params, cfg.objective, schedule, data, cfg.seed)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: model.clone(),
            params,
            ema,
            schedule: schedule.clone(),
            objective: cfg.objective,
            seed: cfg.seed,
            epochs: cfg.epochs,
        },
        losses,
        final_eval_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ModeSpec;

    fn small() -> (TrainConfig, MlpConfig, NoiseSchedule, Dataset) {
        let data = ModeSpec::grid(2, 1.0, 0.1).unwrap().sample(256, &mut RngState::new(0));
        let mut model = MlpConfig::denoiser(2);
        model.hidden_dims = vec![16, 16];
        model.time_embed_dim = 8;
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 64,
            seed: 5,
            ..TrainConfig::default()
        };
        (cfg, model, NoiseSchedule::linear(100).unwrap(), data)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (mut cfg, model, s, data) = small();
        cfg.epochs = 0;
        let out = train(&cfg, &model, &s, &data).unwrap();
        let init = Mlp::new(model)
            .unwrap()
            .init(&mut RngState::with_stream(5, streams::INIT));
        assert_eq!(out.checkpoint.params, init);
        assert_eq!(out.checkpoint.ema, init);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (cfg, model, s, data) = small();
        let a = train(&cfg, &model, &s, &data).unwrap();
        let b = train(&cfg, &model, &s, &data).unwrap();
        assert_eq!(a.checkpoint.hash(), b.checkpoint.hash());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn different_seeds_differ() {
        let (mut cfg, model, s, data) = small();
        let a = train(&cfg, &model, &s, &data).unwrap();
        cfg.seed = 6;
        let b = train(&cfg, &model, &s, &data).unwrap();
        assert_ne!(a.checkpoint.hash(), b.checkpoint.hash());
    }

    #[test]
    fn huge_learning_rate_diverges_or_reports() {
        let (mut cfg, mut model, s, data) = small();
        cfg.lr = 1e6;
        cfg.epochs = 20;
        model.activation = crate::numeric::Activation::Relu;
        match train(&cfg, &model, &s, &data) {
            Err(Error::Diverged { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(o) => assert!(o.losses.iter().all(|(_, l)| *l <= DIVERGENCE_LOSS)),
        }
    }

    #[test]
    fn config_validation() {
        let (mut cfg, model, s, data) = small();
        cfg.batch_size = 10_000;
        assert!(matches!(train(&cfg, &model, &s, &data), Err(Error::Config(_))));
        cfg.batch_size = 8;
        cfg.ema_decay = 1.0;
        assert!(matches!(train(&cfg, &model, &s, &data), Err(Error::Config(_))));
    }

    #[test]
    fn loss_trace_csv() {
        let (cfg, model, s, data) = small();
        let out = train(&cfg, &model, &s, &data).unwrap();
        let mut buf = Vec::new();
        out.write_loss_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,loss\n0,"));
        assert_eq!(text.lines().count(), cfg.epochs + 2);
    }
}
