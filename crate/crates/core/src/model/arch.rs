//! Layer layout: which parameters exist, their shapes, names and order.

use crate::model::config::{ModelConfig, ShortcutMode};
use crate::model::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Convolution followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: NormLayer,
}

#[derive(Debug, Clone)]
pub enum Shortcut {
    Identity,
    ZeroPad { out_channels: usize, stride: usize },
    Projection(ConvBn),
}

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Shortcut,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub enum StageBody {
    Residual(Vec<ResidualBlock>),
    /// Two conv-bn-relu layers (the plain UNet encoder block).
    Plain { conv1: ConvBn, conv2: ConvBn },
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// Max-pool 2×2 before the body.
    pub pool: bool,
    pub body: StageBody,
}

/// Parameters of the three-input attention gate.
///
/// `q = psi(relu(w_x x + w_y y + w_g g + b_g)) + b_psi`, `alpha = sigmoid(q)`.
/// All transforms are 1×1 convolutions; `w_y` is absent without a bottom branch.
#[derive(Debug, Clone)]
pub struct GateLayer {
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_x: ParamId,
    pub w_y: Option<ParamId>,
    pub psi: ParamId,
    pub b_psi: ParamId,
    pub inter_channels: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub gate: Option<GateLayer>,
    /// Transform of the upsampled deeper decoder map before fusion.
    pub up_conv: ConvBn,
    /// Fusion of the concatenated streams down to `channels(E_i)`.
    pub fuse: ConvBn,
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub stem: ConvBn,
    /// Encoder stages 1..=N.
    pub stages: Vec<Stage>,
    /// Bottom-branch convolution per decoder level `i = 0..N`, `None` when disabled.
    pub bottom: Vec<Option<ConvBn>>,
    /// Decoder level `i = 0..N` producing `D_i`.
    pub decoder: Vec<DecoderLevel>,
    pub head_deconv: ConvLayer,
    pub head_out: ConvLayer,
    pub head_channels: usize,
}

struct Decl<'a, T> {
    store: &'a mut ParamStore<T>,
}

impl<T: Real> Decl<'_, T> {
    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, stride: usize, bias: bool) -> ConvLayer {
        let weight = self.store.declare(
            format!("{name}.weight"),
            ParamKind::Weight { fan_in: in_c * k * k },
            &[out_c, in_c, k, k],
        );
        let bias = bias.then(|| self.store.declare(format!("{name}.bias"), ParamKind::Bias, &[out_c]));
        ConvLayer { weight, bias, stride, pad: k / 2 }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormLayer {
        NormLayer {
            gamma: self.store.declare(format!("{name}.gamma"), ParamKind::Gamma, &[c]),
            beta: self.store.declare(format!("{name}.beta"), ParamKind::Beta, &[c]),
            mean: self.store.declare(format!("{name}.running_mean"), ParamKind::RunningMean, &[c]),
            var: self.store.declare(format!("{name}.running_var"), ParamKind::RunningVar, &[c]),
        }
    }

    fn conv_bn(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, stride: usize) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), out_c, in_c, k, stride, false),
            bn: self.norm(&format!("{name}.bn"), out_c),
        }
    }

    fn residual(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        mode: ShortcutMode,
    ) -> ResidualBlock {
        let conv1 = self.conv_bn(&format!("{name}.conv1"), out_c, in_c, 3, stride);
        let conv2 = self.conv_bn(&format!("{name}.conv2"), out_c, out_c, 3, 1);
        let shortcut = if in_c == out_c && stride == 1 {
            Shortcut::Identity
        } else {
            match mode {
                ShortcutMode::ZeroPad => Shortcut::ZeroPad { out_channels: out_c, stride },
                ShortcutMode::Projection => {
                    Shortcut::Projection(self.conv_bn(&format!("{name}.shortcut"), out_c, in_c, 1, stride))
                }
            }
        };
        ResidualBlock { conv1, conv2, shortcut, stride, in_channels: in_c, out_channels: out_c }
    }

    fn gate(&mut self, name: &str, g_c: usize, x_c: usize, y_c: Option<usize>) -> GateLayer {
        let f = (x_c / 2).max(1);
        let w_g = self.store.declare(format!("{name}.w_g"), ParamKind::Weight { fan_in: g_c }, &[f, g_c, 1, 1]);
        let b_g = self.store.declare(format!("{name}.b_g"), ParamKind::Bias, &[f]);
        let w_x = self.store.declare(format!("{name}.w_x"), ParamKind::Weight { fan_in: x_c }, &[f, x_c, 1, 1]);
        let w_y = y_c.map(|c| self.store.declare(format!("{name}.w_y"), ParamKind::Weight { fan_in: c }, &[f, c, 1, 1]));
        let psi = self.store.declare(format!("{name}.psi"), ParamKind::Weight { fan_in: f }, &[1, f, 1, 1]);
        let b_psi = self.store.declare(format!("{name}.b_psi"), ParamKind::Bias, &[1]);
        GateLayer { w_g, b_g, w_x, w_y, psi, b_psi, inter_channels: f }
    }
}

impl Architecture {
    /// Declares every parameter of `config` into `store` in forward order.
    pub(crate) fn declare<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>) -> Self {
        let mut d = Decl { store };
        let ch = &config.channels;
        let n = config.depth;

        let stem = d.conv_bn("stem", ch[0], config.input_channels, 7, 2);

        let mut stages = Vec::with_capacity(n);
        for s in 1..=n {
            let (in_c, out_c) = (ch[s - 1], ch[s]);
            let name = format!("encoder.stage{s}");
            // stage 1 always follows the stem max-pool
            let pool = s == 1 || config.pool_everywhere || !config.enable_residual;
            let stage = if config.enable_residual {
                let first_stride = if pool { 1 } else { 2 };
                let blocks = (0..config.blocks[s - 1])
                    .map(|b| {
                        let (ic, st) = if b == 0 { (in_c, first_stride) } else { (out_c, 1) };
                        d.residual(&format!("{name}.block{b}"), ic, out_c, st, config.shortcut_mode)
                    })
                    .collect();
                Stage { pool, body: StageBody::Residual(blocks) }
            } else {
                Stage {
                    pool,
                    body: StageBody::Plain {
                        conv1: d.conv_bn(&format!("{name}.conv1"), out_c, in_c, 3, 1),
                        conv2: d.conv_bn(&format!("{name}.conv2"), out_c, out_c, 3, 1),
                    },
                }
            };
            stages.push(stage);
        }

        let bottom = (0..n)
            .map(|i| {
                config
                    .enable_bottom_branch
                    .then(|| d.conv_bn(&format!("bottom.level{i}"), ch[i], ch[n], 3, 1))
            })
            .collect();

        let mut decoder: Vec<DecoderLevel> = (0..n)
            .rev()
            .map(|i| {
                let name = format!("decoder.level{i}");
                let g_c = ch[i + 1];
                let x_c = ch[i];
                let y_c = config.enable_bottom_branch.then_some(x_c);
                let gate = config.enable_attention.then(|| d.gate(&format!("{name}.gate"), g_c, x_c, y_c));
                let up_conv = d.conv_bn(&format!("{name}.up"), x_c, g_c, 3, 1);
                let streams = if config.enable_bottom_branch { 3 } else { 2 };
                let fuse = d.conv_bn(&format!("{name}.fuse"), x_c, streams * x_c, 3, 1);
                DecoderLevel { gate, up_conv, fuse }
            })
            .collect();
        decoder.reverse();

        let head_channels = (ch[0] / 2).max(1);
        let head_deconv = {
            let weight = d.store.declare(
                "head.deconv.weight".into(),
                ParamKind::Weight { fan_in: ch[0] * 4 },
                &[ch[0], head_channels, 2, 2],
            );
            let bias = d.store.declare("head.deconv.bias".into(), ParamKind::Bias, &[head_channels]);
            ConvLayer { weight, bias: Some(bias), stride: 2, pad: 0 }
        };
        let head_out = d.conv("head.out", 1, head_channels, 1, 1, true);

        Architecture { stem, stages, bottom, decoder, head_deconv, head_out, head_channels }
    }
}
