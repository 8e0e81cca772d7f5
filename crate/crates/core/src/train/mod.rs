//! Training loop, evaluation harness and ablation runner.
//!
//! Runs are deterministic: the shuffle order comes from the configured
//! seed and every reduction is sequential, so the same seeds reproduce the
//! loss history and the final parameters bit for bit within one build.

pub mod ablate;
pub mod eval;
pub mod optim;

pub use ablate::{ablate, AblationRow, AblationTable, VariantId};
pub use eval::{evaluate, evaluate_checkpoint, MaskOracle, Predictor};
pub use optim::{Optimizer, OptimizerKind};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::metrics::{self, MetricsReport};
use crate::model::{checkpoint, init_params, ClawParams, ModelConfig, Session};
use crate::nn::ops::BN_MOMENTUM;
use crate::nn::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Evaluate on the held-out set every this many epochs (0 disables).
    pub eval_every: usize,
    /// Where the final checkpoint is written, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 0,
            checkpoint_path: None,
        }
    }
}

const TRAIN_KEYS: &[&str] =
    &["epochs", "batch_size", "learning_rate", "optimizer", "train_seed", "eval_every", "checkpoint_path"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        TRAIN_KEYS
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("epochs", self.epochs);
        kv.insert("batch_size", self.batch_size);
        kv.insert("learning_rate", self.learning_rate);
        kv.insert("optimizer", self.optimizer);
        kv.insert("train_seed", self.seed);
        kv.insert("eval_every", self.eval_every);
        kv.insert("checkpoint_path", self.checkpoint_path.as_ref().map_or(String::new(), |p| p.display().to_string()));
        kv
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parse_value("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = kv.parse_value("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.parse_value("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = kv.parse_value("optimizer")? {
            self.optimizer = v;
        }
        if let Some(v) = kv.parse_value("train_seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.parse_value("eval_every")? {
            self.eval_every = v;
        }
        if let Some(v) = kv.get("checkpoint_path") {
            self.checkpoint_path = (!v.is_empty()).then(|| PathBuf::from(v));
        }
        Ok(())
    }
}

/// Loss of every optimizer step and the periodic held-out evaluations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    /// `(epoch, report)` pairs.
    pub evals: Vec<(usize, MetricsReport)>,
}

impl TrainHistory {
    /// `step,loss` with 1-based steps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
        out
    }
}

/// Parameters plus optimizer state; one [`Trainer::step`] per batch.
pub struct Trainer {
    pub params: ClawParams<f32>,
    optimizer: Optimizer,
    lr: f64,
    steps: usize,
}

impl Trainer {
    pub fn new(params: ClawParams<f32>, config: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate as f32, &params.store);
        Self { params, optimizer, lr: config.learning_rate, steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward, BCE, backward and update on one batch; returns the loss.
    ///
    /// A zero learning rate freezes the model completely: neither the
    /// weights nor the running batch-norm statistics change.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let (image, target) = data::batch(batch)?;
        let (loss, grads, updates) = {
            let mut s = Session::new(&self.params, Mode::Train, true);
            let x = s.input(image);
            let out = s.forward(x)?;
            let loss = s.tape.bce(out.prob, target)?;
            let value = s.tape.value(loss).data()[0] as f64;
            let mut g = s.tape.backward(loss);
            let grads = s.param_grads(&mut g);
            (value, grads, s.into_stat_updates())
        };
        self.steps += 1;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.steps, loss });
        }
        if self.lr > 0.0 {
            self.optimizer.apply(&mut self.params.store, &grads);
            let m = BN_MOMENTUM as f32;
            for u in updates {
                let mut stats = self.params.store.running_stats(u.mean, u.var);
                stats.update(&u.batch.mean, &u.batch.var_unbiased, m);
                self.params.store.get_mut(u.mean).data_mut().copy_from_slice(&stats.mean);
                self.params.store.get_mut(u.var).data_mut().copy_from_slice(&stats.var);
            }
            if self.params.check_finite().is_err() {
                return Err(Error::Diverged { step: self.steps, loss: f64::NAN });
            }
        }
        Ok(loss)
    }
}

/// Brings samples to the model's channel count and checks their extent.
pub fn prepare(samples: &[Sample], config: &ModelConfig) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            if s.height() != config.input_size || s.width() != config.input_size {
                return Err(Error::Shape(format!(
                    "sample {} is {}x{}, model expects {}x{} (resize first)",
                    s.id,
                    s.height(),
                    s.width(),
                    config.input_size,
                    config.input_size
                )));
            }
            s.with_channels(config.input_channels)
        })
        .collect()
}

/// Trains a freshly initialized model; see [`train_with_eval`].
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
) -> Result<(ClawParams<f32>, TrainHistory)> {
    train_with_eval(model_config, train_config, train_set, None)
}

/// Epochs of shuffled mini-batches (the last batch of an epoch may be
/// short). Evaluates on `eval_set` every `eval_every` epochs and writes the
/// final checkpoint when a path is configured.
pub fn train_with_eval(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
    eval_set: Option<&[Sample]>,
) -> Result<(ClawParams<f32>, TrainHistory)> {
    train_observed(model_config, train_config, train_set, eval_set, |_| {})
}

/// Progress passed to the observer of [`train_observed`] after each epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochSummary<'a> {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub eval: Option<&'a MetricsReport>,
}

/// [`train_with_eval`] with a callback after every epoch.
pub fn train_observed(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
    eval_set: Option<&[Sample]>,
    mut observe: impl FnMut(EpochSummary<'_>),
) -> Result<(ClawParams<f32>, TrainHistory)> {
    train_config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let samples = prepare(train_set, model_config)?;
    let params = init_params::<f32>(model_config)?;
    let mut trainer = Trainer::new(params, train_config);
    let mut history = TrainHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut rng);
        let first = history.losses.len();
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            history.losses.push(trainer.step(&batch)?);
        }
        let epoch_losses = &history.losses[first..];
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        let mut evaluated = false;
        if let Some(set) = eval_set {
            if train_config.eval_every > 0 && epoch % train_config.eval_every == 0 {
                let report = evaluate(&trainer.params, set, trainer.params.config.threshold)?;
                history.evals.push((epoch, report));
                evaluated = true;
            }
        }
        let eval = evaluated.then(|| &history.evals.last().expect("just pushed").1);
        observe(EpochSummary { epoch, mean_loss, steps: trainer.steps(), eval });
    }
    if let Some(path) = &train_config.checkpoint_path {
        checkpoint::save(&trainer.params, path)?;
    }
    Ok((trainer.params, history))
}

/// Outcome of [`overfit_sanity`].
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    /// Dice before the first step.
    pub initial_dice: f64,
    pub final_dice: f64,
    pub steps: usize,
    pub losses: Vec<f64>,
}

/// Trains on a single sample for `steps` Adam steps at `learning_rate` and
/// scores the eval-mode prediction against the sample's own mask. With
/// `stop_at`, training ends early once a periodic check (every 25 steps)
/// reaches that Dice.
pub fn overfit_sanity(
    sample: &Sample,
    steps: usize,
    model_config: &ModelConfig,
    learning_rate: f64,
    stop_at: Option<f64>,
) -> Result<OverfitReport> {
    let sample = &prepare(std::slice::from_ref(sample), model_config)?[0];
    let config = TrainConfig { learning_rate, batch_size: 1, ..TrainConfig::default() };
    config.validate()?;
    let mut trainer = Trainer::new(init_params(model_config)?, &config);
    let dice = |t: &Trainer| -> Result<f64> {
        let pred = t.params.predict(sample)?;
        Ok(metrics::dice(&metrics::confusion(&pred, &sample.mask)?))
    };
    let initial_dice = dice(&trainer)?;
    let mut losses = Vec::with_capacity(steps);
    let mut final_dice = initial_dice;
    for i in 1..=steps {
        losses.push(trainer.step(&[sample])?);
        if i == steps || (stop_at.is_some() && i % 25 == 0) {
            final_dice = dice(&trainer)?;
            if stop_at.is_some_and(|t| final_dice >= t) {
                break;
            }
        }
    }
    Ok(OverfitReport { initial_dice, final_dice, steps: losses.len(), losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn tiny() -> (ModelConfig, Vec<Sample>) {
        let cfg = ModelConfig { input_size: 32, ..ModelConfig::toy() };
        let spec = SynthSpec { size: 32, width: (1.0, 3.0), ..SynthSpec::default() };
        (cfg, synth_generate(&spec, 3).unwrap())
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (cfg, set) = tiny();
        let tc = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 0.0, ..TrainConfig::default() };
        let (p, h) = train(&cfg, &tc, &set).unwrap();
        assert_eq!(p.store, init_params::<f32>(&cfg).unwrap().store);
        assert_eq!(h.losses.len(), 4);
    }

    #[test]
    fn same_seeds_same_history() {
        let (cfg, set) = tiny();
        let tc = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let (p1, h1) = train(&cfg, &tc, &set).unwrap();
        let (p2, h2) = train(&cfg, &tc, &set).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(checkpoint::encode(&p1), checkpoint::encode(&p2));
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory { losses: vec![0.5, 0.25], evals: vec![] };
        assert_eq!(h.to_csv(), "step,loss\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn rejects_wrong_extent() {
        let (cfg, set) = tiny();
        let big = ModelConfig { input_size: 64, ..cfg };
        assert!(matches!(train(&big, &TrainConfig::default(), &set), Err(Error::Shape(_))));
    }

    #[test]
    fn config_round_trips_through_kv() {
        let tc = TrainConfig {
            epochs: 3,
            optimizer: OptimizerKind::Sgd,
            checkpoint_path: Some("a/b.ckpt".into()),
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        back.apply_kv(&tc.to_kv()).unwrap();
        assert_eq!(back, tc);
    }
}
