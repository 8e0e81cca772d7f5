//! Claw UNet forward pass recorded on a [`Tape`].
//!
//! Encoder: 7×7 stride-2 stem (`E_0`), 2×2 max-pool, then `N` stages of
//! residual blocks (`E_1..E_N`). Bottom branch: `B_i` is `E_N` bilinearly
//! upsampled `N - i` times, then conv-bn-relu down to `channels(E_i)`.
//! Decoder: starting from `D_N = E_N`, level `i` upsamples `D_{i+1}` to
//! `g`, gates `E_i` and `B_i` with one attention coefficient computed from
//! all three, and fuses `[alpha*E_i, alpha*B_i, up_conv(g)]` with a 3×3
//! conv-bn-relu. Head: 2×2 stride-2 transposed convolution, 1×1 conv to one
//! channel, sigmoid.

use crate::error::{Error, Result};
use crate::model::arch::{ConvBn, ConvLayer, GateLayer, NormLayer, ResidualBlock, Shortcut, StageBody};
use crate::model::params::{ClawParams, ParamId};
use crate::nn::ops::Mode;
use crate::nn::tape::{BatchStats, Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch: BatchStats<T>,
}

/// One forward evaluation: a tape plus the parameter leaves bound on it.
pub struct Session<'p, T> {
    pub tape: Tape<T>,
    params: &'p ClawParams<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    differentiable: bool,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<'p, T: Real> Session<'p, T> {
    /// `differentiable` marks trainable parameters as requiring gradients.
    pub fn new(params: &'p ClawParams<T>, mode: Mode, differentiable: bool) -> Self {
        Self::with_tape(params, mode, differentiable, Tape::new())
    }

    /// Session recording onto a caller-supplied (for example branch-replaying) tape.
    pub fn with_tape(params: &'p ClawParams<T>, mode: Mode, differentiable: bool, tape: Tape<T>) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.store.len()],
            mode,
            differentiable,
            stat_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ClawParams<T> {
        self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Leaf for a stored parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.params.store.entry(id);
        let v = self.tape.leaf(entry.tensor.clone(), self.differentiable && entry.kind.trainable());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    pub fn into_stat_updates(self) -> Vec<StatUpdate<T>> {
        self.stat_updates
    }

    /// Gradient per parameter id (`None` for unbound or non-trainable ones).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = (*v)?;
                if !self.params.store.entries()[i].kind.trainable() {
                    return None;
                }
                Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape())))
            })
            .collect()
    }

    pub fn conv(&mut self, x: Var, layer: &ConvLayer) -> Result<Var> {
        let w = self.param(layer.weight);
        let b = layer.bias.map(|b| self.param(b));
        self.tape.conv2d(x, w, b, layer.stride, layer.pad)
    }

    pub fn norm(&mut self, x: Var, layer: &NormLayer) -> Result<Var> {
        let gamma = self.param(layer.gamma);
        let beta = self.param(layer.beta);
        match self.mode {
            Mode::Train => {
                let (y, batch) = self.tape.batchnorm_train(x, gamma, beta)?;
                self.stat_updates.push(StatUpdate { mean: layer.mean, var: layer.var, batch });
                Ok(y)
            }
            Mode::Eval => {
                let stats = self.params.store.running_stats(layer.mean, layer.var);
                self.tape.batchnorm_eval(x, gamma, beta, stats)
            }
        }
    }

    pub fn conv_bn(&mut self, x: Var, layer: &ConvBn) -> Result<Var> {
        let y = self.conv(x, &layer.conv)?;
        self.norm(y, &layer.bn)
    }

    pub fn conv_bn_relu(&mut self, x: Var, layer: &ConvBn) -> Result<Var> {
        let y = self.conv_bn(x, layer)?;
        Ok(self.tape.relu(y))
    }

    pub fn residual_block(&mut self, x: Var, block: &ResidualBlock) -> Result<Var> {
        let h = self.conv_bn_relu(x, &block.conv1)?;
        let h = self.conv_bn(h, &block.conv2)?;
        let skip = match &block.shortcut {
            Shortcut::Identity => x,
            Shortcut::ZeroPad { out_channels, stride } => self.tape.pad_channels(x, *out_channels, *stride)?,
            Shortcut::Projection(p) => self.conv_bn(x, p)?,
        };
        let sum = self.tape.add(h, skip)?;
        Ok(self.tape.relu(sum))
    }

    /// Attention gate. `g` is resampled by repeated ×2 upsampling until it
    /// matches the extent of `x`.
    pub fn attention_gate(
        &mut self,
        g: Var,
        x: Var,
        y: Option<Var>,
        gate: &GateLayer,
    ) -> Result<GateVars> {
        let g = self.resample_to(g, x)?;
        let vars = GateParamVars {
            w_g: self.param(gate.w_g),
            b_g: self.param(gate.b_g),
            w_x: self.param(gate.w_x),
            w_y: gate.w_y.map(|w| self.param(w)),
            psi: self.param(gate.psi),
            b_psi: self.param(gate.b_psi),
        };
        gate_on_tape(&mut self.tape, g, x, y, &vars)
    }

    fn resample_to(&mut self, mut g: Var, x: Var) -> Result<Var> {
        let target = self.value(x).shape()[2..].to_vec();
        loop {
            let cur = self.value(g).shape()[2..].to_vec();
            if cur == target {
                return Ok(g);
            }
            if cur[0] >= target[0] || cur[1] >= target[1] {
                return Err(Error::Shape(format!(
                    "gating signal extent {cur:?} cannot be resampled to {target:?}"
                )));
            }
            g = self.tape.upsample2x(g)?;
        }
    }

    /// Encoder: returns `[E_0, E_1, .., E_N]`.
    pub fn encode(&mut self, image: Var) -> Result<Vec<Var>> {
        let params = self.params;
        let cfg = &params.config;
        let [_, c, h, w] = self.value(image).dims4()?;
        if c != cfg.input_channels || h != cfg.input_size || w != cfg.input_size {
            return Err(Error::Shape(format!(
                "input is {c}x{h}x{w}, model expects {}x{}x{}",
                cfg.input_channels, cfg.input_size, cfg.input_size
            )));
        }
        let arch = &params.arch;
        let mut out = Vec::with_capacity(arch.stages.len() + 1);
        let mut cur = self.conv_bn_relu(image, &arch.stem)?;
        out.push(cur);
        for stage in &arch.stages {
            if stage.pool {
                cur = self.tape.max_pool2d(cur, 2)?;
            }
            cur = match &stage.body {
                StageBody::Residual(blocks) => {
                    for b in blocks {
                        cur = self.residual_block(cur, b)?;
                    }
                    cur
                }
                StageBody::Plain { conv1, conv2 } => {
                    let h = self.conv_bn_relu(cur, conv1)?;
                    self.conv_bn_relu(h, conv2)?
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Bottom branch: `B_i` for `i = 0..N` (empty when disabled).
    pub fn bottom_branch(&mut self, bottom: Var) -> Result<Vec<Option<Var>>> {
        let params = self.params;
        let arch = &params.arch;
        let n = arch.bottom.len();
        if arch.bottom.iter().all(Option::is_none) {
            return Ok(vec![None; n]);
        }
        // ups[k] = bottom upsampled k+1 times
        let mut ups = Vec::with_capacity(n);
        let mut cur = bottom;
        for _ in 0..n {
            cur = self.tape.upsample2x(cur)?;
            ups.push(cur);
        }
        arch.bottom
            .iter()
            .enumerate()
            .map(|(i, layer)| match layer {
                Some(layer) => self.conv_bn_relu(ups[n - i - 1], layer).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    /// Decoder level `i`: `D_i` from `D_{i+1}`, `E_i` and optionally `B_i`.
    pub fn decoder_stage(&mut self, level: usize, deeper: Var, skip: Var, branch: Option<Var>) -> Result<DecoderVars> {
        let params = self.params;
        let layer = params
            .arch
            .decoder
            .get(level)
            .ok_or_else(|| Error::Shape(format!("no decoder level {level}")))?;
        let g = self.tape.upsample2x(deeper)?;
        let (gs, ss) = (self.value(g).shape(), self.value(skip).shape());
        if gs[2..] != ss[2..] {
            return Err(Error::Shape(format!(
                "decoder level {level}: upsampled map {gs:?} does not match skip {ss:?}"
            )));
        }
        let (x, y, alpha) = match &layer.gate {
            Some(gate) => {
                let out = self.attention_gate(g, skip, branch, gate)?;
                (out.gated_x, out.gated_y, Some(out.alpha))
            }
            None => (skip, branch, None),
        };
        let up = self.conv_bn_relu(g, &layer.up_conv)?;
        let mut parts = vec![x];
        parts.extend(y);
        parts.push(up);
        let cat = self.tape.concat(&parts)?;
        let out = self.conv_bn_relu(cat, &layer.fuse)?;
        Ok(DecoderVars { out, alpha })
    }

    /// Full network; probabilities in `(0, 1)` at input resolution.
    pub fn forward(&mut self, image: Var) -> Result<ForwardVars> {
        let encoder = self.encode(image)?;
        let n = encoder.len() - 1;
        let branch = self.bottom_branch(encoder[n])?;
        let mut decoder = vec![encoder[n]; n + 1];
        let mut alphas = vec![None; n];
        for i in (0..n).rev() {
            let d = self.decoder_stage(i, decoder[i + 1], encoder[i], branch[i])?;
            decoder[i] = d.out;
            alphas[i] = d.alpha;
        }
        let params = self.params;
        let arch = &params.arch;
        let hw = self.param(arch.head_deconv.weight);
        let hb = arch.head_deconv.bias.map(|b| self.param(b));
        let up = self.tape.deconv2d(decoder[0], hw, hb, arch.head_deconv.stride, arch.head_deconv.pad)?;
        let logits = self.conv(up, &arch.head_out)?;
        let prob = self.tape.sigmoid(logits);
        Ok(ForwardVars { encoder, branch, decoder, alphas, logits, prob })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub gated_x: Var,
    pub gated_y: Option<Var>,
    pub alpha: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub out: Var,
    pub alpha: Option<Var>,
}

/// Every intermediate of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `E_0..E_N`
    pub encoder: Vec<Var>,
    /// `B_0..B_{N-1}`
    pub branch: Vec<Option<Var>>,
    /// `D_0..D_N` with `D_N = E_N`
    pub decoder: Vec<Var>,
    /// Attention coefficients per level.
    pub alphas: Vec<Option<Var>>,
    pub logits: Var,
    pub prob: Var,
}

/// Gate parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GateParamVars {
    pub w_g: Var,
    pub b_g: Var,
    pub w_x: Var,
    pub w_y: Option<Var>,
    pub psi: Var,
    pub b_psi: Var,
}

/// `alpha = sigmoid(psi * relu(w_x*x + w_y*y + w_g*g + b_g) + b_psi)`, then
/// `alpha` scales `x` and `y`. `g` must already match the extent of `x`.
pub fn gate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    g: Var,
    x: Var,
    y: Option<Var>,
    p: &GateParamVars,
) -> Result<GateVars> {
    let (xs, gs) = (tape.value(x).shape(), tape.value(g).shape());
    if xs[0] != gs[0] || xs[2..] != gs[2..] {
        return Err(Error::Shape(format!("gating signal {gs:?} does not match {xs:?}")));
    }
    if let Some(y) = y {
        let ys = tape.value(y).shape();
        if xs[0] != ys[0] || xs[2..] != ys[2..] {
            return Err(Error::Shape(format!("gate inputs differ in extent: {xs:?} vs {ys:?}")));
        }
    }
    let mut pre = tape.conv2d(g, p.w_g, Some(p.b_g), 1, 0)?;
    let tx = tape.conv2d(x, p.w_x, None, 1, 0)?;
    pre = tape.add(pre, tx)?;
    match (y, p.w_y) {
        (Some(y), Some(w_y)) => {
            let ty = tape.conv2d(y, w_y, None, 1, 0)?;
            pre = tape.add(pre, ty)?;
        }
        (None, None) => {}
        _ => return Err(Error::Shape("bottom-branch input and w_y must be given together".into())),
    }
    let act = tape.relu(pre);
    let q = tape.conv2d(act, p.psi, Some(p.b_psi), 1, 0)?;
    let alpha = tape.sigmoid(q);
    let gated_x = tape.mul_broadcast(x, alpha)?;
    let gated_y = y.map(|y| tape.mul_broadcast(y, alpha)).transpose()?;
    Ok(GateVars { gated_x, gated_y, alpha })
}
