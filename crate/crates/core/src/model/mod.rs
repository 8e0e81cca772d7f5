//! Claw UNet: residual encoder, bottom upsampling branch, three-input
//! attention gates and decoder fusion.
//!
//! The functions here evaluate one piece of the network on plain tensors
//! (no gradients). Training goes through [`Session`] directly.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod net;
pub mod params;

pub use config::{ModelConfig, ShortcutMode};
pub use net::{ForwardVars, GateParamVars, Session};
pub use params::{init_params, ClawParams, ParamEntry, ParamId, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::ops::Mode;
use crate::nn::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Encoder outputs `E_0` (stem) through `E_N` (bottom).
#[derive(Debug, Clone)]
pub struct EncoderStack<T> {
    pub stem: Tensor<T>,
    pub stages: Vec<Tensor<T>>,
}

impl<T: Real> EncoderStack<T> {
    /// `E_i`, `i = 0..=N`.
    pub fn level(&self, i: usize) -> &Tensor<T> {
        if i == 0 {
            &self.stem
        } else {
            &self.stages[i - 1]
        }
    }

    pub fn bottom(&self) -> &Tensor<T> {
        self.stages.last().unwrap_or(&self.stem)
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }
}

/// Bottom-branch maps `B_i` for `i = 0..N`; `B_i` matches the extent of `E_i`.
#[derive(Debug, Clone)]
pub struct BottomBranch<T> {
    pub maps: Vec<Tensor<T>>,
}

/// Decoder maps `D_0..D_N`, with `D_N = E_N`.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    pub maps: Vec<Tensor<T>>,
}

/// Explicit attention-gate tensors (1×1 kernels as `(F_int, C, 1, 1)`).
#[derive(Debug, Clone)]
pub struct AttentionGateParams<T> {
    pub w_g: Tensor<T>,
    pub b_g: Tensor<T>,
    pub w_x: Tensor<T>,
    pub w_y: Option<Tensor<T>>,
    pub psi: Tensor<T>,
    pub b_psi: Tensor<T>,
}

impl<T: Real> AttentionGateParams<T> {
    /// All-zero gate for the given channel counts; `F_int = max(1, x_ch / 2)`.
    pub fn zeros(g_ch: usize, x_ch: usize, y_ch: Option<usize>) -> Self {
        let f = (x_ch / 2).max(1);
        Self {
            w_g: Tensor::zeros(&[f, g_ch, 1, 1]),
            b_g: Tensor::zeros(&[f]),
            w_x: Tensor::zeros(&[f, x_ch, 1, 1]),
            w_y: y_ch.map(|c| Tensor::zeros(&[f, c, 1, 1])),
            psi: Tensor::zeros(&[1, f, 1, 1]),
            b_psi: Tensor::zeros(&[1]),
        }
    }

    /// Copies gate `level` out of a model.
    pub fn from_model(params: &ClawParams<T>, level: usize) -> Option<Self> {
        let gate = params.arch.decoder.get(level)?.gate.as_ref()?;
        let s = &params.store;
        Some(Self {
            w_g: s.get(gate.w_g).clone(),
            b_g: s.get(gate.b_g).clone(),
            w_x: s.get(gate.w_x).clone(),
            w_y: gate.w_y.map(|w| s.get(w).clone()),
            psi: s.get(gate.psi).clone(),
            b_psi: s.get(gate.b_psi).clone(),
        })
    }
}

/// Output of [`attention_gate`].
#[derive(Debug, Clone)]
pub struct GateOutput<T> {
    pub gated_x: Tensor<T>,
    pub gated_y: Option<Tensor<T>>,
    /// Single-channel coefficient map in `(0, 1)`.
    pub alpha: Tensor<T>,
}

/// Attention gate on explicit tensors. `g` may be coarser than `x_l`; it is
/// upsampled ×2 until the extents agree.
pub fn attention_gate<T: Real>(
    g: &Tensor<T>,
    x_l: &Tensor<T>,
    y_l: Option<&Tensor<T>>,
    params: &AttentionGateParams<T>,
) -> Result<GateOutput<T>> {
    let mut tape = Tape::new();
    let mut gv = tape.leaf(g.clone(), false);
    let xv = tape.leaf(x_l.clone(), false);
    let yv = y_l.map(|y| tape.leaf(y.clone(), false));
    x_l.dims4()?;
    let target = x_l.shape()[2..].to_vec();
    while tape.value(gv).shape()[2..] != target[..] {
        let cur = tape.value(gv).shape()[2..].to_vec();
        if cur[0] >= target[0] || cur[1] >= target[1] {
            return Err(Error::Shape(format!("gating signal extent {cur:?} cannot reach {target:?}")));
        }
        gv = tape.upsample2x(gv)?;
    }
    let vars = GateParamVars {
        w_g: tape.leaf(params.w_g.clone(), false),
        b_g: tape.leaf(params.b_g.clone(), false),
        w_x: tape.leaf(params.w_x.clone(), false),
        w_y: params.w_y.as_ref().map(|w| tape.leaf(w.clone(), false)),
        psi: tape.leaf(params.psi.clone(), false),
        b_psi: tape.leaf(params.b_psi.clone(), false),
    };
    let out = net::gate_on_tape(&mut tape, gv, xv, yv, &vars)?;
    Ok(GateOutput {
        gated_x: tape.value(out.gated_x).clone(),
        gated_y: out.gated_y.map(|v| tape.value(v).clone()),
        alpha: tape.value(out.alpha).clone(),
    })
}

/// Runs encoder stage `stage` (1-based) block `block` of a residual model on `x`.
pub fn residual_block<T: Real>(
    x: &Tensor<T>,
    params: &ClawParams<T>,
    stage: usize,
    block: usize,
    mode: Mode,
) -> Result<Tensor<T>> {
    let blocks = match params.arch.stages.get(stage.wrapping_sub(1)).map(|s| &s.body) {
        Some(arch::StageBody::Residual(b)) => b,
        _ => return Err(Error::Config(format!("stage {stage} has no residual blocks"))),
    };
    let b = blocks
        .get(block)
        .ok_or_else(|| Error::Config(format!("stage {stage} has no block {block}")))?;
    let mut s = Session::new(params, mode, false);
    let xv = s.input(x.clone());
    let out = s.residual_block(xv, b)?;
    Ok(s.value(out).clone())
}

pub fn encode<T: Real>(image: &Tensor<T>, params: &ClawParams<T>, mode: Mode) -> Result<EncoderStack<T>> {
    let mut s = Session::new(params, mode, false);
    let x = s.input(image.clone());
    let vars = s.encode(x)?;
    let mut maps: Vec<Tensor<T>> = vars.iter().map(|&v| s.value(v).clone()).collect();
    let stem = maps.remove(0);
    Ok(EncoderStack { stem, stages: maps })
}

pub fn bottom_branch<T: Real>(bottom: &Tensor<T>, params: &ClawParams<T>, mode: Mode) -> Result<BottomBranch<T>> {
    if !params.config.enable_bottom_branch {
        return Err(Error::Config("bottom branch is disabled in this model".into()));
    }
    let mut s = Session::new(params, mode, false);
    let x = s.input(bottom.clone());
    let vars = s.bottom_branch(x)?;
    Ok(BottomBranch { maps: vars.into_iter().flatten().map(|v| s.value(v).clone()).collect() })
}

/// One decoder fusion step producing `D_level`.
pub fn decoder_stage<T: Real>(
    level: usize,
    deeper: &Tensor<T>,
    skip: &Tensor<T>,
    branch: Option<&Tensor<T>>,
    params: &ClawParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    if branch.is_some() != params.config.enable_bottom_branch {
        return Err(Error::Config("bottom-branch input must be given iff the branch is enabled".into()));
    }
    let mut s = Session::new(params, mode, false);
    let d = s.input(deeper.clone());
    let e = s.input(skip.clone());
    let b = branch.map(|b| s.input(b.clone()));
    let out = s.decoder_stage(level, d, e, b)?;
    Ok(s.value(out.out).clone())
}

/// Every intermediate map of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub encoder: EncoderStack<T>,
    pub branch: Option<BottomBranch<T>>,
    pub decoder: DecoderState<T>,
    pub alphas: Vec<Tensor<T>>,
    pub prob: Tensor<T>,
}

pub fn forward_trace<T: Real>(image: &Tensor<T>, params: &ClawParams<T>, mode: Mode) -> Result<ForwardTrace<T>> {
    let mut s = Session::new(params, mode, false);
    let x = s.input(image.clone());
    let f = s.forward(x)?;
    let get = |v| s.value(v).clone();
    let mut enc: Vec<Tensor<T>> = f.encoder.iter().map(|&v| get(v)).collect();
    let stem = enc.remove(0);
    let branch = params
        .config
        .enable_bottom_branch
        .then(|| BottomBranch { maps: f.branch.iter().flatten().map(|&v| get(v)).collect() });
    Ok(ForwardTrace {
        encoder: EncoderStack { stem, stages: enc },
        branch,
        decoder: DecoderState { maps: f.decoder.iter().map(|&v| get(v)).collect() },
        alphas: f.alphas.iter().flatten().map(|&v| get(v)).collect(),
        prob: get(f.prob),
    })
}

/// Probability map `(batch, 1, size, size)` with values in `(0, 1)`.
pub fn forward<T: Real>(image: &Tensor<T>, params: &ClawParams<T>, mode: Mode) -> Result<Tensor<T>> {
    let mut s = Session::new(params, mode, false);
    let x = s.input(image.clone());
    let f = s.forward(x)?;
    Ok(s.tape.value(f.prob).clone())
}

/// Thresholds sample 0 of a one-channel probability map: a pixel is
/// foreground iff `prob >= threshold`. Sigmoid outputs lie strictly inside
/// `(0, 1)` even where single precision rounds them to an endpoint, so a
/// threshold of 1 or more selects nothing and 0 or less selects everything.
pub fn predict_mask<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    predict_masks(prob, threshold)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Shape("empty batch".into()))
}

/// Thresholds every sample of a one-channel probability map.
pub fn predict_masks<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<Vec<BinaryMask>> {
    let [n, c, h, w] = prob.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("probability map must have one channel, got {c}")));
    }
    (0..n)
        .map(|b| {
            let fg = |p: T| threshold <= 0.0 || (threshold < 1.0 && p.as_f64() >= threshold);
            BinaryMask::new(h, w, prob.sample(b).iter().map(|&p| fg(p)).collect())
        })
        .collect()
}
