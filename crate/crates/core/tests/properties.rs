//! Property tests: operator oracles, metric identities, data invariants and
//! model-level structure.

use proptest::prelude::*;

use claw_unet::data::{self, synth_sample, SynthSpec};
use claw_unet::metrics::{self, average_hausdorff, boundary, confusion};
use claw_unet::model::{forward, init_params};
use claw_unet::nn::gradcheck::{loss_and_grads, random_problem};
use claw_unet::nn::{bce_loss, conv2d, deconv2d, max_pool2d, relu, sigmoid, upsample2x, ConvParams};
use claw_unet::train::VariantId;
use claw_unet::{BinaryMask, Mode, ModelConfig, Tensor};

fn tensor(dims: [usize; 4], values: &[f64]) -> Tensor<f64> {
    let mut i = 0;
    Tensor::from_fn4(dims, |_, _, _, _| {
        i += 1;
        values[(i - 1) % values.len()]
    })
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 1..64)
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let [o, _, kh, kw] = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Tensor::from_fn4([n, o, oh, ow], |b, oc, r, col| {
        let mut s = bias[oc];
        for ic in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let (y, xx) = ((r * stride + i) as isize - pad as isize, (col * stride + j) as isize - pad as isize);
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                        s += k.at4(oc, ic, i, j) * x.at4(b, ic, y as usize, xx as usize);
                    }
                }
            }
        }
        s
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn mask_strategy(side: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), side * side).prop_map(move |v| BinaryMask::new(side, side, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_sum(
        (n, c, o, h, w) in (1usize..3, 1usize..4, 1usize..4, 3usize..8, 3usize..8),
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        pad in 0usize..2,
        vals in values(),
    ) {
        let x = tensor([n, c, h, w], &vals);
        let kern = tensor([o, c, k, k], &vals[vals.len() / 2..]);
        let bias: Vec<f64> = (0..o).map(|i| i as f64 * 0.25 - 0.3).collect();
        let got = conv2d(&x, &ConvParams::new(kern.clone(), Some(Tensor::from_vec(&[o], bias.clone()).unwrap()), stride, pad)).unwrap();
        let want = naive_conv(&x, &kern, &bias, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv(
        (n, c, o, oh, ow) in (1usize..3, 1usize..4, 1usize..4, 2usize..5, 2usize..5),
        k in prop::sample::select(vec![2usize, 3]),
        stride in 1usize..3,
        pad in 0usize..2,
        vals in values(),
    ) {
        // <conv(x), y> == <x, deconv(y)> with the same kernel and no bias, on
        // input extents that the transposed convolution maps back exactly
        let (h, w) = ((oh - 1) * stride + k - 2 * pad, (ow - 1) * stride + k - 2 * pad);
        let x = tensor([n, c, h, w], &vals);
        let kern = tensor([o, c, k, k], &vals[vals.len() / 3..]);
        let p = ConvParams::new(kern, None, stride, pad);
        let cx = conv2d(&x, &p).unwrap();
        prop_assert_eq!(cx.shape(), &[n, o, oh, ow][..]);
        let y = tensor([n, o, oh, ow], &vals.iter().rev().copied().collect::<Vec<_>>());
        let dy = deconv2d(&y, &p).unwrap();
        prop_assert_eq!(dy.shape(), x.shape());
        let (l, r) = (dot(&cx, &y), dot(&x, &dy));
        prop_assert!((l - r).abs() <= 1e-9 * (1.0 + l.abs()));
    }

    #[test]
    fn max_pool_takes_window_maxima((n, c, h, w) in (1usize..3, 1usize..3, 1usize..5, 1usize..5), vals in values()) {
        let x = tensor([n, c, 2 * h, 2 * w], &vals);
        let y = max_pool2d(&x, 2, 2).unwrap();
        let want = Tensor::from_fn4([n, c, h, w], |b, ch, r, col| {
            let v = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(i, j)| x.at4(b, ch, 2 * r + i, 2 * col + j));
            v.into_iter().fold(f64::NEG_INFINITY, f64::max)
        });
        prop_assert_eq!(y.data(), want.data());
    }

    #[test]
    fn upsample_matches_half_pixel_bilinear((n, c, h, w) in (1usize..3, 1usize..3, 1usize..6, 1usize..6), vals in values()) {
        let x = tensor([n, c, h, w], &vals);
        let y = upsample2x(&x).unwrap();
        let tap = |o: usize, len: usize| {
            let src = ((o as f64 + 0.5) * len as f64 / (2 * len) as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            (lo, (lo + 1).min(len - 1), src - lo as f64)
        };
        for b in 0..n {
            for ch in 0..c {
                for r in 0..2 * h {
                    for col in 0..2 * w {
                        let (r0, r1, fr) = tap(r, h);
                        let (c0, c1, fc) = tap(col, w);
                        let top = x.at4(b, ch, r0, c0) * (1.0 - fc) + x.at4(b, ch, r0, c1) * fc;
                        let bot = x.at4(b, ch, r1, c0) * (1.0 - fc) + x.at4(b, ch, r1, c1) * fc;
                        let want = top * (1.0 - fr) + bot * fr;
                        prop_assert!((y.at4(b, ch, r, col) - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn activations_and_loss_are_well_behaved(vals in prop::collection::vec(-30.0f64..30.0, 1..64)) {
        let x = Tensor::from_vec(&[vals.len()], vals.clone()).unwrap();
        let s = sigmoid(&x);
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let r = relu(&x);
        let rr = relu(&r);
        prop_assert_eq!(rr.data(), r.data());
        prop_assert!(r.data().iter().all(|&v| v >= 0.0));
        let target = Tensor::from_vec(&[vals.len()], vals.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()).unwrap();
        prop_assert!(bce_loss(&s, &target).unwrap() >= 0.0);
    }

    #[test]
    fn metric_identities(a in mask_strategy(8), b in mask_strategy(8)) {
        let c = confusion(&a, &b).unwrap();
        let cc = confusion(&a.complement(), &b.complement()).unwrap();
        prop_assert_eq!(metrics::miou(&c), metrics::miou(&cc));
        prop_assert!(metrics::dice(&c) >= metrics::iou_foreground(&c));
        prop_assert_eq!(c.total(), 64);
        let (ba, bb) = (boundary(&a), boundary(&b));
        prop_assert_eq!(average_hausdorff(&ba, &bb), average_hausdorff(&bb, &ba));
        if !ba.is_empty() {
            prop_assert_eq!(average_hausdorff(&ba, &ba), Some(0.0));
        }
    }

    #[test]
    fn split_partitions_items(n in 2usize..80, seed in any::<u64>()) {
        let (train, test) = data::split((0..n).collect::<Vec<_>>(), (4, 1), seed).unwrap();
        prop_assert_eq!(test.len(), n / 5);
        prop_assert_eq!(train.len() + test.len(), n);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn mask_png_round_trips(m in mask_strategy(12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        data::save_mask(&m, &path).unwrap();
        prop_assert_eq!(data::load_mask(&path).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_samples_are_deterministic_and_sparse(seed in any::<u64>(), index in 0u64..1000) {
        let spec = SynthSpec { size: 64, width: (1.0, 4.0), seed, ..SynthSpec::default() };
        let a = synth_sample(&spec, index).unwrap();
        let b = synth_sample(&spec, index).unwrap();
        prop_assert_eq!(&a.mask, &b.mask);
        prop_assert_eq!(a.image.data(), b.image.data());
        let f = a.mask.foreground_fraction();
        prop_assert!(f > 0.0 && f < 0.5, "foreground fraction {}", f);
        prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn disabling_every_mechanism_is_the_unet_variant() {
    let base = ModelConfig::toy();
    let manual = ModelConfig {
        enable_attention: false,
        enable_residual: false,
        enable_bottom_branch: false,
        ..base.clone()
    };
    assert_eq!(manual, VariantId::Unet.apply(&base));
    let (image, _) = random_problem::<f32>(&base, 1, 3);
    let a = forward(&image, &init_params::<f32>(&manual).unwrap(), Mode::Eval).unwrap();
    let b = forward(&image, &init_params::<f32>(&VariantId::Unet.apply(&base)).unwrap(), Mode::Eval).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn gradients_reach_every_parameter() {
    for variant in VariantId::ALL {
        let cfg = variant.apply(&ModelConfig::toy());
        let params = init_params::<f64>(&cfg).unwrap();
        let (image, target) = random_problem::<f64>(&cfg, 2, 11);
        let (_, grads) = loss_and_grads(&params, &image, &target, Mode::Train, true).unwrap();
        for (entry, g) in params.store.entries().iter().zip(&grads) {
            if !entry.kind.trainable() {
                continue;
            }
            let name = &entry.name;
            let g = g.as_ref().unwrap_or_else(|| panic!("{variant}: no gradient for {name}"));
            assert!(g.max_abs() > 0.0, "{variant}: zero gradient for {name}");
        }
    }
}
