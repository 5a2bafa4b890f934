//! Masking, transposed-conv synthesis with overlap-add, SI-SNR and the
//! permutation-invariant training loss.

use rand::Rng;

use crate::config::ModelConfig;
use crate::dsp::{synthesis_len, Waveform, HOP, WINDOW_LEN};
use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::numcore::{gemm, MatRef, ParamSet, Tensor};

pub const DECODER_BASIS: &str = "decoder.basis";
/// Stabilizer inside the SI-SNR ratio.
pub const SI_SNR_EPS: f64 = 1e-8;
/// Largest source count for factorial PIT enumeration.
pub const MAX_PIT_SOURCES: usize = 4;

/// Synthesis kernels `F_conv × 20`, independent of the encoder basis.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng, params: &mut ParamSet) {
    params.insert(
        DECODER_BASIS,
        uniform(&[cfg.conv_channels, WINDOW_LEN], cfg.conv_channels, rng),
    );
}

/// Per-source masks, each `F_conv × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    pub masks: Vec<Tensor>,
}

impl MaskTensor {
    pub fn num_sources(&self) -> usize {
        self.masks.len()
    }
}

/// `masked_i = M_i ⊙ H̃_conv`.
pub fn apply_masks(h_conv: &Tensor, masks: &MaskTensor) -> Result<Vec<Tensor>> {
    masks
        .masks
        .iter()
        .map(|m| {
            if m.shape() != h_conv.shape() {
                return Err(Error::Shape {
                    context: "apply_masks",
                    detail: format!("mask {:?} vs features {:?}", m.shape(), h_conv.shape()),
                });
            }
            Ok(Tensor::from_fn(h_conv.shape(), |i| m.data()[i] * h_conv.data()[i]))
        })
        .collect()
}

/// Feature map `F_conv × T` → waveform of length `(T−1)·10 + 20`.
pub fn synthesize(params: &ParamSet, masked: &Tensor) -> Result<Waveform> {
    let w = params.get(DECODER_BASIS)?;
    let (f, t) = check_masked(w, masked)?;
    // frames (T×20) = maskedᵀ (T×F) · W (F×20)
    let mut frames = vec![0.0; t * WINDOW_LEN];
    gemm(
        MatRef::new(masked.data(), f, t).t(),
        MatRef::new(w.data(), f, WINDOW_LEN),
        &mut frames,
        false,
    );
    let mut out = vec![0.0; synthesis_len(t)];
    for (row, seg) in frames.chunks_exact(WINDOW_LEN).enumerate() {
        for (k, v) in seg.iter().enumerate() {
            out[row * HOP + k] += v;
        }
    }
    Waveform::new(out)
}

/// Gradient of [`synthesize`]; `d_out` has the synthesis length. Returns
/// the gradient w.r.t. `masked` and accumulates into `decoder.basis`.
pub fn synthesize_backward(params: &ParamSet, masked: &Tensor, d_out: &[f64], grads: &mut ParamSet) -> Result<Tensor> {
    let w = params.get(DECODER_BASIS)?;
    let (f, t) = check_masked(w, masked)?;
    if d_out.len() != synthesis_len(t) {
        return Err(Error::Dimension {
            context: "synthesize_backward",
            axis: 0,
            expected: synthesis_len(t),
            got: d_out.len(),
        });
    }
    let d_frames: Vec<f64> = (0..t * WINDOW_LEN)
        .map(|i| d_out[(i / WINDOW_LEN) * HOP + i % WINDOW_LEN])
        .collect();
    let mut d_masked = Tensor::zeros(&[f, t]);
    gemm(
        MatRef::new(w.data(), f, WINDOW_LEN),
        MatRef::new(&d_frames, t, WINDOW_LEN).t(),
        d_masked.data_mut(),
        false,
    );
    let mut dw = vec![0.0; f * WINDOW_LEN];
    gemm(
        MatRef::new(masked.data(), f, t),
        MatRef::new(&d_frames, t, WINDOW_LEN),
        &mut dw,
        false,
    );
    grads.add_to(DECODER_BASIS, &dw)?;
    Ok(d_masked)
}

fn check_masked(w: &Tensor, masked: &Tensor) -> Result<(usize, usize)> {
    if masked.ndim() != 2 {
        return Err(Error::Shape {
            context: "synthesize",
            detail: format!("expected F×T features, got {:?}", masked.shape()),
        });
    }
    if masked.rows() != w.rows() {
        return Err(Error::Dimension {
            context: "synthesize",
            axis: 0,
            expected: w.rows(),
            got: masked.rows(),
        });
    }
    Ok((masked.rows(), masked.cols()))
}

fn check_pair(s: &[f64], e: &[f64]) -> Result<()> {
    if s.len() != e.len() || s.is_empty() {
        return Err(Error::Shape {
            context: "si_snr",
            detail: format!("reference has {} samples, estimate {}", s.len(), e.len()),
        });
    }
    if s.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroReference);
    }
    Ok(())
}

/// `10·log₁₀(⟨s,ŝ⟩² / (‖s‖²‖ŝ‖² − ⟨s,ŝ⟩² + ε) + ε)`.
pub fn si_snr(s: &[f64], e: &[f64]) -> Result<f64> {
    check_pair(s, e)?;
    let (a, p, q) = moments(s, e);
    let ratio = a * a / (p * q - a * a + SI_SNR_EPS);
    Ok(10.0 * (ratio + SI_SNR_EPS).log10())
}

/// [`si_snr`] and its gradient w.r.t. the estimate.
pub fn si_snr_grad(s: &[f64], e: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(s, e)?;
    let (a, p, q) = moments(s, e);
    let d = p * q - a * a + SI_SNR_EPS;
    let ratio = a * a / d;
    let value = 10.0 * (ratio + SI_SNR_EPS).log10();
    // dR/dê = 2a·s/D − a²·(2p·ê − 2a·s)/D²
    let outer = 10.0 / std::f64::consts::LN_10 / (ratio + SI_SNR_EPS);
    let cs = outer * (2.0 * a / d + 2.0 * a * a * a / (d * d));
    let ce = -outer * 2.0 * p * a * a / (d * d);
    let grad = s.iter().zip(e).map(|(si, ei)| cs * si + ce * ei).collect();
    Ok((value, grad))
}

fn moments(s: &[f64], e: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut p = 0.0;
    let mut q = 0.0;
    for (x, y) in s.iter().zip(e) {
        a += x * y;
        p += x * x;
        q += y * y;
    }
    (a, p, q)
}

/// All ordered selections of `k` distinct indices from `0..n`, in
/// lexicographic order (for `k == n`, every permutation).
pub fn arrangements(k: usize, n: usize) -> Vec<Vec<usize>> {
    fn go(k: usize, n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(k, n, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    if k <= n {
        go(k, n, &mut Vec::with_capacity(k), &mut vec![false; n], &mut out);
    }
    out
}

/// PIT outcome. `permutation[i]` is the estimate assigned to source `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub permutation: Vec<usize>,
    pub si_snr: Vec<f64>,
}

/// Minimum over assignments of the mean negative SI-SNR. Ties go to the
/// lexicographically first permutation.
pub fn pit_loss(sources: &[Waveform], estimates: &[Waveform]) -> Result<LossReport> {
    let c = sources.len();
    if c != estimates.len() {
        return Err(Error::CountMismatch {
            sources: c,
            estimates: estimates.len(),
        });
    }
    if c == 0 {
        return Err(Error::Empty("pit_loss sources"));
    }
    if c > MAX_PIT_SOURCES {
        return Err(Error::Capacity {
            requested: c,
            capacity: MAX_PIT_SOURCES,
        });
    }
    let mut table = vec![vec![0.0; c]; c];
    for (i, s) in sources.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            table[i][j] = si_snr(s.samples(), e.samples())?;
        }
    }
    let mut best: Option<LossReport> = None;
    for perm in arrangements(c, c) {
        let vals: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| table[i][j]).collect();
        let loss = -vals.iter().sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(LossReport {
                loss,
                permutation: perm,
                si_snr: vals,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// PIT loss plus its gradient w.r.t. every estimate.
pub fn pit_loss_grad(sources: &[Waveform], estimates: &[Waveform]) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let report = pit_loss(sources, estimates)?;
    let c = sources.len() as f64;
    let mut grads = vec![Vec::new(); estimates.len()];
    for (i, &j) in report.permutation.iter().enumerate() {
        let (_, g) = si_snr_grad(sources[i].samples(), estimates[j].samples())?;
        grads[j] = g.into_iter().map(|v| -v / c).collect();
    }
    Ok((report, grads))
}
