//! Built-in verification suites: COLA reconstruction and finite-difference
//! gradient checks for every differentiable stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attractor::{compute_masks, compute_masks_backward};
use crate::config::ModelConfig;
use crate::decoder::{si_snr, si_snr_grad, synthesize, synthesize_backward, DECODER_BASIS};
use crate::dsp::{frame, num_frames, overlap_add, synthesis_len, Waveform, EDGE, WINDOW_LEN};
use crate::embedder::{head_to_embeddings, ResidualBlock, SeparatorStack};
use crate::encoder::{SeGate, SE_W1, SE_W2};
use crate::error::Result;
use crate::model::Separator;
use crate::numcore::gradcheck::{check_layer, numeric_gradient, relative_error};
use crate::numcore::{
    Conv1d, ConvGeometry, DepthwiseConv1d, DiffLayer, GlobalLayerNorm, Linear, MeanAxis, ParamSet, Relu,
    Sigmoid, Softmax, Tensor,
};

pub const COLA_TOLERANCE: f64 = 1e-6;
/// Unit layers are checked in 64-bit arithmetic.
pub const UNIT_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    /// Largest error seen over all trials.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} trials={:<4} worst={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.worst,
            self.tolerance
        )
    }
}

/// Analysis then synthesis of `count` random waveforms with lengths in
/// `160..=8000`; error on samples `[EDGE, len − EDGE)`.
pub fn cola_suite(count: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let len = rng.random_range(160..=8000);
        let x = Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let y = overlap_add(&frame(&x)?.frames)?;
        let covered = synthesis_len(num_frames(len)?);
        for i in EDGE..covered - EDGE {
            worst = worst.max((y.samples()[i] - x.samples()[i]).abs());
        }
    }
    Ok(CheckOutcome {
        name: "cola_round_trip".into(),
        trials: count,
        worst,
        tolerance: COLA_TOLERANCE,
    })
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values in `±[0.1, 1)` so kinks at zero stay out of the stencil.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn layer_error<L: DiffLayer>(layer: &L, params: &ParamSet, x: &Tensor, seed: u64) -> Result<f64> {
    Ok(check_layer(layer, params, x, seed, STEP)?.max_error())
}

type Trial = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn unit_cases() -> Vec<(&'static str, Trial)> {
    vec![
        ("conv1d_strided", |rng, seed| {
            let layer = Conv1d {
                weight: "w".into(),
                bias: None,
                geometry: ConvGeometry {
                    stride: 10,
                    dilation: 1,
                    padding: 0,
                },
            };
            let mut p = ParamSet::new();
            p.insert("w", rand_tensor(&[4, 1, WINDOW_LEN], rng));
            layer_error(&layer, &p, &rand_tensor(&[1, 90], rng), seed)
        }),
        ("conv1d_dilated_bias", |rng, seed| {
            let layer = Conv1d {
                weight: "w".into(),
                bias: Some("b".into()),
                geometry: ConvGeometry {
                    stride: 1,
                    dilation: 2,
                    padding: 2,
                },
            };
            let mut p = ParamSet::new();
            p.insert("w", rand_tensor(&[3, 2, 3], rng));
            p.insert("b", rand_tensor(&[3], rng));
            layer_error(&layer, &p, &rand_tensor(&[2, 15], rng), seed)
        }),
        ("depthwise_conv1d", |rng, seed| {
            let layer = DepthwiseConv1d::new("dw", 2);
            let mut p = ParamSet::new();
            p.insert("dw.weight", rand_tensor(&[3, 3], rng));
            p.insert("dw.bias", rand_tensor(&[3], rng));
            layer_error(&layer, &p, &rand_tensor(&[3, 12], rng), seed)
        }),
        ("global_layer_norm", |rng, seed| {
            let layer = GlobalLayerNorm::new("n");
            let mut p = ParamSet::new();
            p.insert("n.gain", rand_tensor(&[4], rng));
            p.insert("n.offset", rand_tensor(&[4], rng));
            layer_error(&layer, &p, &rand_tensor(&[4, 7], rng), seed)
        }),
        ("relu", |rng, seed| layer_error(&Relu, &ParamSet::new(), &off_zero(&[5, 6], rng), seed)),
        ("sigmoid", |rng, seed| {
            layer_error(&Sigmoid, &ParamSet::new(), &rand_tensor(&[5, 6], rng), seed)
        }),
        ("softmax", |rng, seed| {
            let x = rand_tensor(&[4, 5], rng);
            let a = layer_error(&Softmax { axis: 0 }, &ParamSet::new(), &x, seed)?;
            let b = layer_error(&Softmax { axis: 1 }, &ParamSet::new(), &x, seed)?;
            Ok(a.max(b))
        }),
        ("mean_axis", |rng, seed| {
            layer_error(&MeanAxis { axis: 1 }, &ParamSet::new(), &rand_tensor(&[4, 6], rng), seed)
        }),
        ("linear", |rng, seed| {
            let mut p = ParamSet::new();
            p.insert("w", rand_tensor(&[3, 4], rng));
            layer_error(&Linear { weight: "w".into() }, &p, &rand_tensor(&[4], rng), seed)
        }),
        ("se_gate", |rng, seed| {
            let mut p = ParamSet::new();
            p.insert(SE_W1, rand_tensor(&[3, 8], rng));
            p.insert(SE_W2, rand_tensor(&[8, 3], rng));
            layer_error(&SeGate::default(), &p, &rand_tensor(&[8, 6], rng), seed)
        }),
        ("residual_block", |rng, seed| {
            let (stack, p) = small_stack(rng);
            let blk: &ResidualBlock = &stack.blocks[1];
            layer_error(blk, &p, &rand_tensor(&[5, 9], rng), seed)
        }),
        ("separator_stack", |rng, seed| {
            let (stack, p) = small_stack(rng);
            layer_error(&stack, &p, &rand_tensor(&[8 + crate::dsp::SPEC_BINS, 9], rng), seed)
        }),
        ("masks", |rng, _| {
            let (t, f, l, c) = (3, 4, 5, 3);
            let v = rand_tensor(&[t * f * l / l, l], rng);
            let a = rand_tensor(&[c, l], rng);
            let w: Vec<Tensor> = (0..c).map(|_| rand_tensor(&[f, t], rng)).collect();
            let head = crate::embedder::embeddings_to_head(&v, f)?;
            let emb = head_to_embeddings(&head, f, l)?;
            let (_, cache) = compute_masks(&emb, &a)?;
            let (dv, da) = compute_masks_backward(&emb, &a, &cache, &w)?;
            let probe = |emb: &crate::embedder::EmbeddingMatrix, a: &Tensor| -> Result<f64> {
                let (m, _) = compute_masks(emb, a)?;
                Ok(m.masks.iter().zip(&w).map(|(m, w)| m.dot(w)).sum())
            };
            let nv = numeric_gradient(&mut v.data().to_vec(), STEP, |x| {
                let h = crate::embedder::embeddings_to_head(&Tensor::new(vec![t * f, l], x.to_vec())?, f)?;
                probe(&head_to_embeddings(&h, f, l)?, &a)
            })?;
            let na = numeric_gradient(&mut a.data().to_vec(), STEP, |x| {
                probe(&emb, &Tensor::new(vec![c, l], x.to_vec())?)
            })?;
            Ok(relative_error(dv.data(), &nv).max(relative_error(da.data(), &na)))
        }),
        ("decoder_synthesis", |rng, _| {
            let mut p = ParamSet::new();
            p.insert(DECODER_BASIS, rand_tensor(&[4, WINDOW_LEN], rng));
            let m = rand_tensor(&[4, 6], rng);
            let out_len = synthesis_len(6);
            let w: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut grads = p.zeros_like();
            let dm = synthesize_backward(&p, &m, &w, &mut grads)?;
            let dot = |y: Waveform| y.samples().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let nm = numeric_gradient(&mut m.data().to_vec(), STEP, |x| {
                Ok(dot(synthesize(&p, &Tensor::new(vec![4, 6], x.to_vec())?)?))
            })?;
            let mut q = p.clone();
            let nw = numeric_gradient(&mut p.get(DECODER_BASIS)?.data().to_vec(), STEP, |x| {
                *q.get_mut(DECODER_BASIS)? = Tensor::new(vec![4, WINDOW_LEN], x.to_vec())?;
                Ok(dot(synthesize(&q, &m)?))
            })?;
            Ok(relative_error(dm.data(), &nm).max(relative_error(grads.get(DECODER_BASIS)?.data(), &nw)))
        }),
        ("si_snr", |rng, _| {
            let s: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = s.iter().map(|v| 0.7 * v + rng.random_range(-0.5..0.5)).collect();
            let (_, g) = si_snr_grad(&s, &e)?;
            let n = numeric_gradient(&mut e.clone(), 1e-6, |x| si_snr(&s, x))?;
            Ok(relative_error(&g, &n))
        }),
    ]
}

fn small_stack(rng: &mut ChaCha8Rng) -> (SeparatorStack, ParamSet) {
    let cfg = ModelConfig {
        conv_channels: 8,
        se_reduction: 4,
        bottleneck: 5,
        blocks_per_repeat: 2,
        repeats: 1,
        depthwise_kernel: 3,
        embed_dim: 3,
        num_centers: 4,
        kmeans_iters: 1,
    };
    let stack = SeparatorStack::new(&cfg);
    let mut p = ParamSet::new();
    stack.init_params(&cfg, rng, &mut p);
    // Non-trivial norm parameters.
    for blk in &stack.blocks {
        for name in [&blk.norm.gain, &blk.norm.offset] {
            let t = p.get_mut(name).expect("norm params");
            *t = Tensor::from_fn(t.shape(), |_| rng.random_range(0.5..1.5));
        }
    }
    (stack, p)
}

/// PIT loss through the whole separator on a tiny model, spot-checking
/// several coordinates of every parameter tensor.
fn end_to_end(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        conv_channels: 6,
        se_reduction: 4,
        bottleneck: 5,
        blocks_per_repeat: 2,
        repeats: 1,
        depthwise_kernel: 3,
        embed_dim: 4,
        num_centers: 3,
        kmeans_iters: 1,
    };
    let m = Separator::new(cfg, seed)?;
    let mut sig = || Waveform::new((0..200).map(|_| rng.random_range(-0.5..0.5)).collect());
    let x = sig()?;
    let s = [sig()?, sig()?];
    let (_, g) = m.loss_and_grad(&x, &s)?;
    let mut worst = 0.0f64;
    for name in m.params.names().map(str::to_string).collect::<Vec<_>>() {
        let len = m.params.get(&name)?.len();
        let mut ana = Vec::new();
        let mut num = Vec::new();
        for i in (0..len).step_by((len / 3).max(1)) {
            let loss_at = |delta: f64| -> Result<f64> {
                let mut q = m.clone();
                q.params.get_mut(&name)?.data_mut()[i] += delta;
                Ok(q.loss(&x, &s)?.loss)
            };
            num.push((loss_at(STEP)? - loss_at(-STEP)?) / (2.0 * STEP));
            ana.push(g.get(&name)?.data()[i]);
        }
        worst = worst.max(relative_error(&ana, &num));
    }
    Ok(worst)
}

/// Every unit check plus the end-to-end check, each over `seeds` seeds.
pub fn gradient_suite(seeds: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut cases = unit_cases();
    cases.push(("end_to_end_pit_loss", end_to_end));
    for (name, trial) in cases {
        let mut worst = 0.0f64;
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name.len() as u64);
            worst = worst.max(trial(&mut rng, seed)?);
        }
        out.push(CheckOutcome {
            name: name.to_string(),
            trials: seeds,
            worst,
            tolerance: if name == "end_to_end_pit_loss" {
                END_TO_END_TOLERANCE
            } else {
                UNIT_TOLERANCE
            },
        });
    }
    Ok(out)
}

/// COLA on 100 waveforms and the gradient suite on 10 seeds.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let mut out = vec![cola_suite(100, 0)?];
    out.extend(gradient_suite(10)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cola_passes() {
        let c = cola_suite(10, 1).unwrap();
        assert!(c.passed(), "{}", c.line());
    }

    #[test]
    fn gradient_suite_passes_on_two_seeds() {
        for c in gradient_suite(2).unwrap() {
            assert!(c.passed(), "{}", c.line());
        }
    }

    #[test]
    fn outcome_formatting() {
        let c = CheckOutcome {
            name: "x".into(),
            trials: 1,
            worst: f64::NAN,
            tolerance: 1.0,
        };
        assert!(!c.passed());
        assert!(c.line().starts_with("FAIL"));
    }
}
