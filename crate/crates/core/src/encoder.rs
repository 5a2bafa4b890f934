//! Attention-fused encoder.
//!
//! A learned 1-D conv basis (kernel 20, stride 10, ReLU) produces `H_conv`;
//! the log-magnitude spectrogram provides `H_spec`. The two are stacked into
//! `H` (`F_conv + 11` rows) and rescaled channel-wise by a squeeze-excitation
//! gate `u = σ(W₂ δ(W₁ z))`, where `z` is the time-average of `H`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::dsp::{self, SpecFeature, Waveform, HOP, SPEC_BINS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::numcore::{
    sigmoid, Conv1d, ConvCache, ConvGeometry, DiffLayer, Linear, MeanAxis, ParamSet, Relu, Tensor,
};

pub const BASIS: &str = "encoder.basis";
pub const SE_W1: &str = "encoder.se.w1";
pub const SE_W2: &str = "encoder.se.w2";

fn basis_layer() -> Conv1d {
    Conv1d {
        weight: BASIS.to_string(),
        bias: None,
        geometry: ConvGeometry {
            stride: HOP,
            dilation: 1,
            padding: 0,
        },
    }
}

/// Adds encoder parameters with uniform(±1/√fan_in) initialization.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng, params: &mut ParamSet) {
    let f = cfg.feature_dim();
    let hidden = cfg.se_hidden();
    params.insert(BASIS, uniform(&[cfg.conv_channels, 1, WINDOW_LEN], WINDOW_LEN, rng));
    params.insert(SE_W1, uniform(&[hidden, f], f, rng));
    params.insert(SE_W2, uniform(&[f, hidden], hidden, rng));
}

pub(crate) fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// `H_conv = ReLU(conv(x))`, `F_conv × T`.
pub fn conv_encode(params: &ParamSet, x: &Waveform) -> Result<(Tensor, (ConvCache, Tensor))> {
    dsp::num_frames(x.len())?;
    let input = Tensor::new(vec![1, x.len()], x.samples().to_vec())?;
    let (pre, conv_cache) = basis_layer().forward(params, &input)?;
    let (h, relu_cache) = Relu.forward(params, &pre)?;
    Ok((h, (conv_cache, relu_cache)))
}

/// Stacks `H_conv` (rows `0..F_conv`) over the transposed spectrogram.
pub fn fuse(h_conv: &Tensor, h_spec: &SpecFeature) -> Result<Tensor> {
    let spec = &h_spec.0;
    if h_conv.cols() != spec.rows() {
        return Err(Error::Shape {
            context: "fuse",
            detail: format!(
                "conv branch has {} frames, spectrogram has {}",
                h_conv.cols(),
                spec.rows()
            ),
        });
    }
    if spec.cols() != SPEC_BINS {
        return Err(Error::Dimension {
            context: "fuse",
            axis: 1,
            expected: SPEC_BINS,
            got: spec.cols(),
        });
    }
    let (fc, t) = (h_conv.rows(), h_conv.cols());
    let mut data = Vec::with_capacity((fc + SPEC_BINS) * t);
    data.extend_from_slice(h_conv.data());
    data.extend_from_slice(spec.transpose().data());
    Tensor::new(vec![fc + SPEC_BINS, t], data)
}

/// Inverse of [`fuse`].
pub fn split(h: &Tensor, conv_channels: usize) -> Result<(Tensor, SpecFeature)> {
    if h.rows() != conv_channels + SPEC_BINS {
        return Err(Error::Dimension {
            context: "split",
            axis: 0,
            expected: conv_channels + SPEC_BINS,
            got: h.rows(),
        });
    }
    let t = h.cols();
    let cut = conv_channels * t;
    let conv = Tensor::new(vec![conv_channels, t], h.data()[..cut].to_vec())?;
    let spec = Tensor::new(vec![SPEC_BINS, t], h.data()[cut..].to_vec())?.transpose();
    Ok((conv, SpecFeature(spec)))
}

/// Time-average of each row.
pub fn squeeze(h: &Tensor) -> Result<Tensor> {
    Ok(MeanAxis { axis: 1 }.forward(&ParamSet::new(), h)?.0)
}

/// `u = σ(W₂ · ReLU(W₁ · z))` using the gate weights in `params`.
pub fn excite(params: &ParamSet, z: &Tensor) -> Result<Tensor> {
    Ok(SeGate::default().excite(params, z)?.0)
}

/// Row-wise rescaling `H̃_f = u_f · H_f`.
pub fn scale(h: &Tensor, u: &Tensor) -> Result<Tensor> {
    if u.len() != h.rows() {
        return Err(Error::Dimension {
            context: "scale",
            axis: 0,
            expected: h.rows(),
            got: u.len(),
        });
    }
    let mut out = h.clone();
    for (f, &uf) in u.data().iter().enumerate() {
        for v in out.row_mut(f) {
            *v *= uf;
        }
    }
    Ok(out)
}

/// Squeeze-excitation gate as a single differentiable map `H ↦ H̃`.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub w1: Linear,
    pub w2: Linear,
}

impl Default for SeGate {
    fn default() -> Self {
        Self {
            w1: Linear { weight: SE_W1.into() },
            w2: Linear { weight: SE_W2.into() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeCache {
    input: Tensor,
    z: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    /// Gate activations `u`.
    pub gate: Tensor,
}

impl SeGate {
    fn excite(&self, params: &ParamSet, z: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (hidden_pre, _) = self.w1.forward(params, z)?;
        let hidden = hidden_pre.map(|v| v.max(0.0));
        let (logits, _) = self.w2.forward(params, &hidden)?;
        Ok((logits.map(sigmoid), hidden_pre, hidden))
    }
}

impl DiffLayer for SeGate {
    type Cache = SeCache;

    fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, SeCache)> {
        let z = squeeze(input)?;
        let (u, hidden_pre, hidden) = self.excite(params, &z)?;
        let out = scale(input, &u)?;
        Ok((
            out,
            SeCache {
                input: input.clone(),
                z,
                hidden_pre,
                hidden,
                gate: u,
            },
        ))
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &SeCache,
        upstream: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor> {
        let h = &cache.input;
        upstream.expect_shape(h.shape(), "SeGate upstream")?;
        let (f, t) = (h.rows(), h.cols());
        let u = cache.gate.data();
        let mut dh = upstream.clone();
        let mut du = vec![0.0; f];
        for row in 0..f {
            du[row] = upstream.row(row).iter().zip(h.row(row)).map(|(a, b)| a * b).sum();
            for v in dh.row_mut(row) {
                *v *= u[row];
            }
        }
        let dlogits = Tensor::from_fn(&[f], |i| du[i] * u[i] * (1.0 - u[i]));
        let dhidden = self.w2.backward(params, &cache.hidden, &dlogits, grads)?;
        let dpre = Tensor::from_fn(&[dhidden.len()], |i| {
            if cache.hidden_pre.data()[i] > 0.0 {
                dhidden.data()[i]
            } else {
                0.0
            }
        });
        let dz = self.w1.backward(params, &cache.z, &dpre, grads)?;
        for row in 0..f {
            let g = dz.data()[row] / t as f64;
            for v in dh.row_mut(row) {
                *v += g;
            }
        }
        Ok(dh)
    }

    fn param_names(&self) -> Vec<String> {
        vec![SE_W1.into(), SE_W2.into()]
    }
}

/// Output of the encoder for one utterance.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Ungated fused features `H`.
    pub fused: Tensor,
    /// Gated features `H̃`.
    pub gated: Tensor,
    /// Gate activations `u`, one per row of `H`.
    pub gate: Tensor,
    pub conv_channels: usize,
}

impl Encoded {
    pub fn num_frames(&self) -> usize {
        self.gated.cols()
    }

    /// First `F_conv` rows of `H̃`.
    pub fn gated_conv(&self) -> Tensor {
        let t = self.gated.cols();
        Tensor::new(
            vec![self.conv_channels, t],
            self.gated.data()[..self.conv_channels * t].to_vec(),
        )
        .expect("gated conv rows")
    }
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    conv: ConvCache,
    relu: Tensor,
    gate: SeCache,
}

/// Full encoder forward pass `x ↦ (H, H̃)`.
pub fn encode(cfg: &ModelConfig, params: &ParamSet, x: &Waveform) -> Result<(Encoded, EncoderCache)> {
    let (h_conv, (conv, relu)) = conv_encode(params, x)?;
    let spec = dsp::logmag_spectrogram(&dsp::frame(x)?)?;
    let fused = fuse(&h_conv, &spec)?;
    let (gated, gate) = SeGate::default().forward(params, &fused)?;
    Ok((
        Encoded {
            fused,
            gated,
            gate: gate.gate.clone(),
            conv_channels: cfg.conv_channels,
        },
        EncoderCache { conv, relu, gate },
    ))
}

/// Backpropagates `∂L/∂H̃` into the encoder parameters.
pub fn encode_backward(
    cfg: &ModelConfig,
    params: &ParamSet,
    cache: &EncoderCache,
    d_gated: &Tensor,
    grads: &mut ParamSet,
) -> Result<()> {
    let dh = SeGate::default().backward(params, &cache.gate, d_gated, grads)?;
    let t = dh.cols();
    let d_conv = Tensor::new(
        vec![cfg.conv_channels, t],
        dh.data()[..cfg.conv_channels * t].to_vec(),
    )?;
    let d_pre = Relu.backward(params, &cache.relu, &d_conv, grads)?;
    basis_layer().backward(params, &cache.conv, &d_pre, grads)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::sqrt_hann;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gate_params(f: usize, hidden: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(SE_W1, uniform(&[hidden, f], f, &mut rng));
        p.insert(SE_W2, uniform(&[f, hidden], hidden, &mut rng));
        p
    }

    #[test]
    fn zero_signal_gives_zero_map() {
        let cfg = ModelConfig::toy();
        let mut p = ParamSet::new();
        init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut p);
        let (h, _) = conv_encode(&p, &Waveform::zeros(200)).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert_eq!(h.cols(), dsp::num_frames(200).unwrap());
    }

    #[test]
    fn window_kernel_gives_windowed_inner_products() {
        let w = sqrt_hann(WINDOW_LEN).unwrap();
        let mut p = ParamSet::new();
        p.insert(BASIS, Tensor::new(vec![1, 1, WINDOW_LEN], w.clone()).unwrap());
        // Strictly positive signal keeps every inner product in the ReLU's
        // identity region.
        let x = Waveform::new((0..60).map(|i| 0.1 + (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let (h, _) = conv_encode(&p, &x).unwrap();
        let frames = dsp::frame(&x).unwrap();
        for t in 0..h.cols() {
            let want: f64 = frames.frames.row(t).iter().sum();
            assert!((h.at(0, t) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_and_split() {
        let hc = Tensor::from_fn(&[256, 50], |i| i as f64);
        let hs = SpecFeature(Tensor::from_fn(&[50, 11], |i| -(i as f64)));
        let h = fuse(&hc, &hs).unwrap();
        assert_eq!(h.shape(), &[267, 50]);
        let (c2, s2) = split(&h, 256).unwrap();
        assert_eq!(c2, hc);
        assert_eq!(s2, hs);
        let h0 = fuse(&hc, &SpecFeature(Tensor::zeros(&[50, 11]))).unwrap();
        assert!((256..267).all(|r| h0.row(r).iter().all(|&v| v == 0.0)));
        assert!(fuse(&hc, &SpecFeature(Tensor::zeros(&[49, 11]))).is_err());
    }

    #[test]
    fn squeeze_cases() {
        assert_eq!(squeeze(&Tensor::filled(&[3, 4], 1.0)).unwrap().data(), &[1.0; 3]);
        let row = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(squeeze(&row).unwrap().data(), &[2.0]);
        let col = Tensor::new(vec![3, 1], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(squeeze(&col).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn excite_cases() {
        let p = gate_params(267, 16, 1);
        let u = excite(&p, &Tensor::zeros(&[267])).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.5));
        let mut p0 = p.clone();
        *p0.get_mut(SE_W2).unwrap() = Tensor::zeros(&[267, 16]);
        let z = Tensor::from_fn(&[267], |i| i as f64);
        assert!(excite(&p0, &z).unwrap().data().iter().all(|&v| v == 0.5));
        let mut toy = ParamSet::new();
        toy.insert(SE_W1, Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        toy.insert(SE_W2, Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let u = excite(&toy, &Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        assert!((u.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn scale_cases() {
        let h = Tensor::from_fn(&[3, 4], |i| i as f64 + 1.0);
        assert_eq!(scale(&h, &Tensor::filled(&[3], 1.0)).unwrap(), h);
        assert!(scale(&h, &Tensor::zeros(&[3])).unwrap().data().iter().all(|&v| v == 0.0));
        let u = Tensor::new(vec![3], vec![1.0, 0.5, 1.0]).unwrap();
        let s = scale(&h, &u).unwrap();
        for t in 0..4 {
            assert_eq!(s.at(1, t), h.at(1, t) * 0.5);
            assert_eq!(s.at(0, t), h.at(0, t));
        }
        assert!(scale(&h, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gate_range_and_commutation() {
        let p = gate_params(75, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::from_fn(&[75, 30], |_| rng.random_range(-2.0..2.0));
        let (ht, cache) = SeGate::default().forward(&p, &h).unwrap();
        let u = &cache.gate;
        assert!(u.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let lhs = squeeze(&ht).unwrap();
        let rhs = squeeze(&h).unwrap();
        for f in 0..75 {
            assert!((lhs.data()[f] - u.data()[f] * rhs.data()[f]).abs() < 1e-12);
            let n0: f64 = h.row(f).iter().map(|v| v * v).sum();
            let n1: f64 = ht.row(f).iter().map(|v| v * v).sum();
            assert!(n1 <= n0);
        }
    }
}
