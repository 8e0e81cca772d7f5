//! Finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{init_params, ClawParams, ModelConfig, ParamId, Session};
use crate::nn::ops::Mode;
use crate::nn::tape::{BranchLog, Tape};
use crate::tensor::{Real, Tensor};

/// Both gradients below this magnitude count as agreeing exactly.
pub const DEAD_GRADIENT: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Minimum number of coordinates compared (spread over every tensor).
    pub samples: usize,
    pub mode: Mode,
    pub batch: usize,
    /// Seeds the input image, target and coordinate choice.
    pub seed: u64,
    /// Negative control: corrupts one analytic gradient before comparing.
    pub break_gradients: bool,
    /// Hold ReLU masks and pooling argmaxes at their values for the
    /// unperturbed parameters, so both difference points lie on the same
    /// linear piece of the network. Without this, a step of `1e-3` moves
    /// some of the thousands of pre-activations across zero and the
    /// difference quotient picks up the jump in slope.
    pub freeze_branches: bool,
    /// In eval mode, first set every running mean/variance to the batch
    /// statistics of the check input. Fresh running stats (0 and 1) leave
    /// the activations, and therefore the gradients, vanishingly small.
    pub calibrate_running_stats: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            samples: 200,
            mode: Mode::Train,
            batch: 2,
            seed: 7,
            break_gradients: false,
            freeze_branches: true,
            calibrate_running_stats: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// One compared coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub per_param: Vec<ParamError>,
    /// Coordinate with the largest relative error.
    pub worst: Option<Coordinate>,
    pub global_max_rel_error: f64,
    pub step: f64,
    pub coordinates: usize,
}

impl GradientReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.global_max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|)`, or 0 when both are below [`DEAD_GRADIENT`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < DEAD_GRADIENT {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Mean BCE of the network output against `target`, plus gradients of every
/// trainable parameter when `with_grads` is set.
pub fn loss_and_grads<T: Real>(
    params: &ClawParams<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    mode: Mode,
    with_grads: bool,
) -> Result<(T, Vec<Option<Tensor<T>>>)> {
    let (loss, grads, _) = evaluate(params, image, target, mode, with_grads, Tape::new())?;
    Ok((loss, grads))
}

type Evaluation<T> = (T, Vec<Option<Tensor<T>>>, Option<BranchLog>);

fn evaluate<T: Real>(
    params: &ClawParams<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    mode: Mode,
    with_grads: bool,
    tape: Tape<T>,
) -> Result<Evaluation<T>> {
    let mut s = Session::with_tape(params, mode, with_grads, tape);
    let x = s.input(image.clone());
    let out = s.forward(x)?;
    let loss = s.tape.bce(out.prob, target.clone())?;
    let value = s.tape.value(loss).data()[0];
    let log = s.tape.branch_log().cloned();
    if !with_grads {
        return Ok((value, Vec::new(), log));
    }
    let mut grads = s.tape.backward(loss);
    Ok((value, s.param_grads(&mut grads), log))
}

/// Copies the batch statistics of a training-mode pass over `image` into
/// the running statistics.
pub fn calibrate_running_stats<T: Real>(params: &mut ClawParams<T>, image: &Tensor<T>) -> Result<()> {
    let updates = {
        let mut s = Session::new(params, Mode::Train, false);
        let x = s.input(image.clone());
        s.forward(x)?;
        s.into_stat_updates()
    };
    for u in updates {
        params.store.get_mut(u.mean).data_mut().copy_from_slice(&u.batch.mean);
        params.store.get_mut(u.var).data_mut().copy_from_slice(&u.batch.var_unbiased);
    }
    Ok(())
}

/// Random input in `[0, 1)` and random binary target for `config`.
pub fn random_problem<T: Real>(config: &ModelConfig, batch: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.input_size;
    let image = Tensor::from_fn4([batch, config.input_channels, s, s], |_, _, _, _| {
        T::from_f64(rng.random::<f64>())
    });
    let target = Tensor::from_fn4([batch, 1, s, s], |_, _, _, _| {
        if rng.random_bool(0.3) {
            T::one()
        } else {
            T::zero()
        }
    });
    (image, target)
}

fn pick_coordinates(params: &ClawParams<f64>, samples: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = params.store.trainable_ids().collect();
    let per = samples.div_ceil(ids.len().max(1)).max(2);
    let mut coords = Vec::new();
    for &id in &ids {
        let n = params.store.get(id).numel();
        if n <= per {
            coords.extend((0..n).map(|i| (id, i)));
        } else {
            let mut chosen: Vec<usize> = rand::seq::index::sample(rng, n, per).into_vec();
            chosen.sort_unstable();
            coords.extend(chosen.into_iter().map(|i| (id, i)));
        }
    }
    // top up from the largest tensors when small ones could not contribute their share
    let mut by_size = ids.clone();
    by_size.sort_by_key(|&id| std::cmp::Reverse(params.store.get(id).numel()));
    let mut k = 0;
    while coords.len() < samples && !by_size.is_empty() {
        let id = by_size[k % by_size.len()];
        let i = rng.random_range(0..params.store.get(id).numel());
        if !coords.contains(&(id, i)) {
            coords.push((id, i));
        }
        k += 1;
        if k > samples * 100 {
            break;
        }
    }
    coords
}

/// Compares analytic gradients with central differences
/// `(L(θ+h) - L(θ-h)) / 2h` in double precision on a freshly initialized model.
pub fn gradcheck(config: &ModelConfig, opts: &GradcheckOptions) -> Result<GradientReport> {
    let params = init_params::<f64>(config)?;
    gradcheck_params(&params, opts)
}

/// Same as [`gradcheck`] for an explicit parameter set.
pub fn gradcheck_params(params: &ClawParams<f64>, opts: &GradcheckOptions) -> Result<GradientReport> {
    let (image, target) = random_problem::<f64>(&params.config, opts.batch, opts.seed);
    let calibrated = if opts.mode == Mode::Eval && opts.calibrate_running_stats {
        let mut p = params.clone();
        calibrate_running_stats(&mut p, &image)?;
        Some(p)
    } else {
        None
    };
    let params = calibrated.as_ref().unwrap_or(params);
    let tape = if opts.freeze_branches { Tape::recording() } else { Tape::new() };
    let (_, mut grads, log) = evaluate(params, &image, &target, opts.mode, true, tape)?;
    let fresh_tape = || match &log {
        Some(log) => Tape::replaying(log.clone()),
        None => Tape::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let coords = pick_coordinates(params, opts.samples, &mut rng);
    if opts.break_gradients {
        if let Some(&(id, i)) = coords.first() {
            if let Some(g) = grads[id.index()].as_mut() {
                g.data_mut()[i] = g.data()[i] * 1.5 + 1.0;
            }
        }
    }

    let mut probe = params.clone();
    let h = opts.step;
    let mut per_param: Vec<ParamError> = Vec::new();
    let mut global = 0.0f64;
    let mut worst: Option<Coordinate> = None;
    for &(id, i) in &coords {
        let orig = probe.store.get(id).data()[i];
        probe.store.get_mut(id).data_mut()[i] = orig + h;
        let (plus, ..) = evaluate(&probe, &image, &target, opts.mode, false, fresh_tape())?;
        probe.store.get_mut(id).data_mut()[i] = orig - h;
        let (minus, ..) = evaluate(&probe, &image, &target, opts.mode, false, fresh_tape())?;
        probe.store.get_mut(id).data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
        let err = relative_error(analytic, numeric);
        global = global.max(err);
        let name = &params.store.entry(id).name;
        if worst.as_ref().is_none_or(|w| err > w.rel_error) {
            worst = Some(Coordinate { name: name.clone(), index: i, analytic, numeric, rel_error: err });
        }
        match per_param.last_mut() {
            Some(p) if &p.name == name => {
                p.coordinates += 1;
                p.max_rel_error = p.max_rel_error.max(err);
            }
            _ => per_param.push(ParamError { name: name.clone(), coordinates: 1, max_rel_error: err }),
        }
    }
    Ok(GradientReport { per_param, worst, global_max_rel_error: global, step: h, coordinates: coords.len() })
}
