//! Framing, square-root Hann windowing, the 20-point log-magnitude
//! spectrogram and overlap-add synthesis.
//!
//! Window and hop are fixed: 20 samples (2.5 ms at 8 kHz) with a hop of 10.
//! The periodic sqrt-Hann window satisfies `w²[k] + w²[k + 10] = 1`, so
//! analysis followed by synthesis is the identity wherever two frames
//! overlap, i.e. on `[10, len − 10)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const SAMPLE_RATE: u32 = 8000;
pub const WINDOW_LEN: usize = 20;
pub const HOP: usize = 10;
/// Unique bins of a real 20-point DFT.
pub const SPEC_BINS: usize = WINDOW_LEN / 2 + 1;
pub const LOG_FLOOR: f64 = 1e-8;
/// Samples at each edge not covered by two overlapping frames.
pub const EDGE: usize = HOP;

/// Mono 8 kHz signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    /// Copy truncated to `len` samples or zero-padded at the tail.
    pub fn fit_to(&self, len: usize) -> Waveform {
        let mut s = self.samples.clone();
        s.resize(len, 0.0);
        Waveform { samples: s }
    }

    /// Drops `edge` samples from both ends (COLA edges).
    pub fn trimmed(&self, edge: usize) -> &[f64] {
        if self.samples.len() <= 2 * edge {
            &self.samples
        } else {
            &self.samples[edge..self.samples.len() - edge]
        }
    }
}

/// Windowed analysis frames, `T × 20`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    pub frames: Tensor,
    pub hop: usize,
}

impl FrameMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Log-magnitude spectrogram, `T × 11`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecFeature(pub Tensor);

/// Periodic square-root Hann window of even length `n`.
pub fn sqrt_hann(n: usize) -> Result<Vec<f64>> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("sqrt-Hann length must be even and positive, got {n}")));
    }
    Ok((0..n)
        .map(|k| (0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).max(0.0).sqrt())
        .collect())
}

/// `T = floor((len − 20)/10) + 1`.
pub fn num_frames(len: usize) -> Result<usize> {
    if len < WINDOW_LEN {
        return Err(Error::TooShort {
            got: len,
            min: WINDOW_LEN,
        });
    }
    Ok((len - WINDOW_LEN) / HOP + 1)
}

/// Length of the overlap-added output of `frames` frames.
pub fn synthesis_len(frames: usize) -> usize {
    if frames == 0 {
        0
    } else {
        (frames - 1) * HOP + WINDOW_LEN
    }
}

pub fn frame(x: &Waveform) -> Result<FrameMatrix> {
    let t = num_frames(x.len())?;
    let window = sqrt_hann(WINDOW_LEN)?;
    let s = x.samples();
    let frames = Tensor::from_fn(&[t, WINDOW_LEN], |i| {
        let (row, k) = (i / WINDOW_LEN, i % WINDOW_LEN);
        s[row * HOP + k] * window[k]
    });
    Ok(FrameMatrix { frames, hop: HOP })
}

/// Per frame: `log(|X_k| + ε)` for DFT bins `k = 0..=10`.
pub fn logmag_spectrogram(fm: &FrameMatrix) -> Result<SpecFeature> {
    if fm.frames.ndim() != 2 || fm.frames.cols() != WINDOW_LEN {
        return Err(Error::Shape {
            context: "logmag_spectrogram",
            detail: format!("expected T×{WINDOW_LEN} frames, got {:?}", fm.frames.shape()),
        });
    }
    let n = WINDOW_LEN as f64;
    let mut cos_t = [[0.0; WINDOW_LEN]; SPEC_BINS];
    let mut sin_t = [[0.0; WINDOW_LEN]; SPEC_BINS];
    for k in 0..SPEC_BINS {
        for j in 0..WINDOW_LEN {
            let ang = 2.0 * PI * ((k * j) % WINDOW_LEN) as f64 / n;
            cos_t[k][j] = ang.cos();
            sin_t[k][j] = ang.sin();
        }
    }
    let t = fm.num_frames();
    let mut out = Tensor::zeros(&[t, SPEC_BINS]);
    for row in 0..t {
        let x = fm.frames.row(row);
        for k in 0..SPEC_BINS {
            let (mut re, mut im) = (0.0, 0.0);
            for j in 0..WINDOW_LEN {
                re += x[j] * cos_t[k][j];
                im -= x[j] * sin_t[k][j];
            }
            out.set(row, k, ((re * re + im * im).sqrt() + LOG_FLOOR).ln());
        }
    }
    Ok(SpecFeature(out))
}

/// Multiplies each `T × 20` frame by the synthesis window and sums at hop 10.
pub fn overlap_add(frames: &Tensor) -> Result<Waveform> {
    if frames.ndim() != 2 || frames.cols() != WINDOW_LEN {
        return Err(Error::Shape {
            context: "overlap_add",
            detail: format!("expected T×{WINDOW_LEN} frames, got {:?}", frames.shape()),
        });
    }
    let window = sqrt_hann(WINDOW_LEN)?;
    let t = frames.rows();
    let mut out = vec![0.0; synthesis_len(t)];
    for row in 0..t {
        for (k, v) in frames.row(row).iter().enumerate() {
            out[row * HOP + k] += v * window[k];
        }
    }
    Waveform::new(out)
}
