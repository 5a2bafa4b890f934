//! Synthetic multi-speaker corpus: harmonic "speakers", level-controlled
//! mixing, 16-bit WAV I/O and JSON-lines manifests.
//!
//! Each speaker has a fixed pitch range, harmonic decay, 8-tap spectral
//! shaping filter and amplitude-modulation rate. Utterances alternate voiced
//! segments (gliding harmonic tone) with unvoiced ones (filtered noise).

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Peak amplitude of generated utterances and of rescaled mixtures.
pub const PEAK: f64 = 0.9;
pub const MIN_DURATION: f64 = 0.5;
pub const MAX_DURATION: f64 = 10.0;
pub const MAX_LEVEL_DB: f64 = 2.5;
pub const FILTER_TAPS: usize = 8;
const PROFILE_SALT: u64 = 0x5eed_5eed_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: u32,
    /// Pitch range in Hz.
    pub f0_range: (f64, f64),
    /// Relative amplitude of harmonics 1, 2, ….
    pub harmonics: Vec<f64>,
    pub filter: [f64; FILTER_TAPS],
    /// Amplitude-modulation rate in Hz.
    pub am_rate: f64,
}

impl SpeakerProfile {
    /// Deterministic profile for `(seed, id)`.
    pub fn new(seed: u64, id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROFILE_SALT);
        rng.set_stream(u64::from(id));
        let center: f64 = rng.random_range(80.0..400.0);
        let spread: f64 = rng.random_range(0.05..0.12);
        let decay: f64 = rng.random_range(0.4..1.6);
        let count = (3600.0 / (center * (1.0 - spread))).floor() as usize;
        let harmonics = (1..=count)
            .map(|h| (h as f64).powf(-decay) * rng.random_range(0.5..1.0))
            .collect();
        let mut filter = [0.0; FILTER_TAPS];
        for tap in filter.iter_mut() {
            *tap = StandardNormal.sample(&mut rng);
        }
        let norm = filter.iter().map(|v| v * v).sum::<f64>().sqrt();
        for tap in filter.iter_mut() {
            *tap /= norm;
        }
        Self {
            id,
            f0_range: (center * (1.0 - spread), center * (1.0 + spread)),
            harmonics,
            filter,
            am_rate: rng.random_range(2.0..6.0),
        }
    }
}

/// One utterance of `duration` seconds, peak-normalized to [`PEAK`].
pub fn synth_utterance(profile: &SpeakerProfile, duration: f64, seed: u64) -> Result<Waveform> {
    if !(MIN_DURATION..=MAX_DURATION).contains(&duration) {
        return Err(Error::Config(format!(
            "utterance duration {duration} s outside [{MIN_DURATION}, {MAX_DURATION}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(profile.id));
    let fs = f64::from(SAMPLE_RATE);
    let len = (duration * fs).round() as usize;
    let mut raw = vec![0.0; len];
    // Phase-locked harmonics give one excitation pulse per pitch period.
    let phi0 = rng.random_range(0.0..2.0 * PI);
    let mut phase: Vec<f64> = (1..=profile.harmonics.len()).map(|h| h as f64 * phi0).collect();
    let mut start = 0;
    while start < len {
        let seg = ((rng.random_range(0.08..0.3) * fs) as usize).min(len - start);
        let voiced = rng.random_bool(0.75);
        if voiced {
            let (lo, hi) = profile.f0_range;
            let f_a = rng.random_range(lo..hi);
            let f_b = rng.random_range(lo..hi);
            for i in 0..seg {
                let f0 = f_a + (f_b - f_a) * i as f64 / seg as f64;
                let mut v = 0.0;
                for (h, (amp, ph)) in profile.harmonics.iter().zip(phase.iter_mut()).enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f < 0.48 * fs {
                        *ph += 2.0 * PI * f / fs;
                        v += amp * ph.cos();
                    }
                }
                raw[start + i] = v;
            }
        } else {
            let level = rng.random_range(0.02..0.1);
            for slot in &mut raw[start..start + seg] {
                let g: f64 = StandardNormal.sample(&mut rng);
                *slot = level * g;
            }
        }
        start += seg;
    }
    let phi = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![0.0; len];
    for n in 0..len {
        let mut acc = 0.0;
        for (k, tap) in profile.filter.iter().enumerate() {
            if n >= k {
                acc += tap * raw[n - k];
            }
        }
        let env = 0.65 + 0.35 * (2.0 * PI * profile.am_rate * n as f64 / fs + phi).sin();
        out[n] = acc * env;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::ZeroPower(0));
    }
    for v in out.iter_mut() {
        *v *= PEAK / peak;
    }
    Waveform::new(out)
}

/// Mixture of sources at relative levels.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub mixture: Waveform,
    /// `gain_i · source_i`, cropped to the common length.
    pub sources: Vec<Waveform>,
    pub gains: Vec<f64>,
}

/// Scales source `i ≥ 1` so that `10·log₁₀(P₁/P_i) = levels_db[i − 1]`,
/// sums, and rescales everything to peak [`PEAK`] if the sum clips.
pub fn mix_at_snr(sources: &[Waveform], levels_db: &[f64]) -> Result<Mixed> {
    if sources.is_empty() {
        return Err(Error::Empty("mixture sources"));
    }
    if levels_db.len() + 1 != sources.len() {
        return Err(Error::Config(format!(
            "{} sources need {} relative levels, got {}",
            sources.len(),
            sources.len() - 1,
            levels_db.len()
        )));
    }
    if let Some(l) = levels_db.iter().find(|l| l.abs() > MAX_LEVEL_DB + 1e-12) {
        return Err(Error::Config(format!("level {l} dB outside ±{MAX_LEVEL_DB} dB")));
    }
    let len = sources.iter().map(Waveform::len).min().unwrap_or(0);
    let cropped: Vec<Waveform> = sources.iter().map(|s| s.fit_to(len)).collect();
    let powers: Vec<f64> = cropped.iter().map(Waveform::power).collect();
    if let Some(i) = powers.iter().position(|&p| p == 0.0) {
        return Err(Error::ZeroPower(i));
    }
    let mut gains = vec![1.0];
    for (i, l) in levels_db.iter().enumerate() {
        gains.push((powers[0] / (powers[i + 1] * 10f64.powf(l / 10.0))).sqrt());
    }
    let mut mix = vec![0.0; len];
    for (s, g) in cropped.iter().zip(&gains) {
        for (m, v) in mix.iter_mut().zip(s.samples()) {
            *m += g * v;
        }
    }
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let r = PEAK / peak;
        gains.iter_mut().for_each(|g| *g *= r);
        mix.iter_mut().for_each(|v| *v *= r);
    }
    let scaled = cropped
        .iter()
        .zip(&gains)
        .map(|(s, g)| Waveform::new(s.samples().iter().map(|v| v * g).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mixed {
        mixture: Waveform::new(mix)?,
        sources: scaled,
        gains,
    })
}

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

const PCM_SCALE: f64 = 32768.0;

pub fn wav_spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

/// Writes mono 16-bit PCM at 8 kHz; samples are clamped to `[-1, 1)`.
pub fn wav_write(path: &Path, w: &Waveform) -> Result<()> {
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavParse {
            path: path.to_path_buf(),
            source: other,
        },
    };
    let mut writer = hound::WavWriter::create(path, wav_spec()).map_err(wrap)?;
    for &v in w.samples() {
        let q = (v * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

pub fn wav_read(path: &Path) -> Result<Waveform> {
    let wrap = |e: hound::Error| Error::WavParse {
        path: path.to_path_buf(),
        source: e,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(wrap)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavFormat {
            field: "channels",
            got: spec.channels.to_string(),
            expected: "1".into(),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::WavFormat {
            field: "sample_rate",
            got: spec.sample_rate.to_string(),
            expected: SAMPLE_RATE.to_string(),
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::WavFormat {
            field: "bits_per_sample",
            got: format!("{} ({:?})", spec.bits_per_sample, spec.sample_format),
            expected: "16 (Int)".into(),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wrap)?;
    Waveform::new(samples)
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|valid|test)"))),
        }
    }
}

/// Generation settings. Mixture counts are per source count per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Source counts to generate, each in `1..=4`.
    pub counts: Vec<usize>,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    /// Speakers shared by train and valid.
    pub train_speakers: u32,
    /// Held-out speakers used only in test.
    pub test_speakers: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 100,
            valid: 20,
            test: 20,
            counts: vec![2, 3],
            duration: (1.0, 2.0),
            train_speakers: 20,
            test_speakers: 10,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn toy() -> Self {
        Self {
            train: 20,
            valid: 4,
            test: 50,
            duration: (0.5, 0.5),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() {
            return Err(Error::Config("dataset needs at least one source count".into()));
        }
        for &c in &self.counts {
            if !(1..=4).contains(&c) {
                return Err(Error::Capacity {
                    requested: c,
                    capacity: 4,
                });
            }
            if c as u32 > self.train_speakers.min(self.test_speakers) {
                return Err(Error::Config(format!("C = {c} needs at least {c} speakers in every pool")));
            }
        }
        let (lo, hi) = self.duration;
        if !(MIN_DURATION <= lo && lo <= hi && hi <= MAX_DURATION) {
            return Err(Error::Config(format!(
                "duration range ({lo}, {hi}) must lie within [{MIN_DURATION}, {MAX_DURATION}] s"
            )));
        }
        Ok(())
    }

    pub fn per_split(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    /// Speaker ids available to `split`; test ids never overlap the others.
    pub fn speaker_pool(&self, split: Split) -> std::ops::Range<u32> {
        match split {
            Split::Train | Split::Valid => 0..self.train_speakers,
            Split::Test => self.train_speakers..self.train_speakers + self.test_speakers,
        }
    }
}

/// One line of the manifest. Paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecord {
    pub id: String,
    pub split: Split,
    pub count: usize,
    pub mixture: PathBuf,
    /// Unscaled sources; the mixture is `Σ gains[i] · sources[i]`.
    pub sources: Vec<PathBuf>,
    pub gains: Vec<f64>,
    pub levels_db: Vec<f64>,
    pub speakers: Vec<u32>,
}

/// A generated mixture held in memory.
#[derive(Clone, Debug)]
pub struct Example {
    pub record: MixtureRecord,
    pub mixture: Waveform,
    /// Scaled sources (`gain · source`).
    pub sources: Vec<Waveform>,
    unscaled: Vec<Waveform>,
}

/// Deterministically generates mixture `index` of `(split, count)`.
pub fn generate_example(cfg: &DatasetConfig, split: Split, count: usize, index: usize) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split_id = Split::ALL.iter().position(|&s| s == split).unwrap_or(0) as u64;
    rng.set_stream((split_id << 40) | ((count as u64) << 32) | index as u64);
    let pool = cfg.speaker_pool(split);
    let mut speakers: Vec<u32> = Vec::with_capacity(count);
    while speakers.len() < count {
        let s = rng.random_range(pool.clone());
        if !speakers.contains(&s) {
            speakers.push(s);
        }
    }
    let (lo, hi) = cfg.duration;
    let mut unscaled = Vec::with_capacity(count);
    for &spk in &speakers {
        let dur = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let seed = rng.random::<u64>();
        unscaled.push(synth_utterance(&SpeakerProfile::new(cfg.seed, spk), dur, seed)?);
    }
    let levels_db: Vec<f64> = (1..count).map(|_| rng.random_range(-MAX_LEVEL_DB..=MAX_LEVEL_DB)).collect();
    let mixed = mix_at_snr(&unscaled, &levels_db)?;
    let len = mixed.mixture.len();
    let id = format!("{}_c{}_{:05}", split.name(), count, index);
    let dir = PathBuf::from(split.name());
    Ok(Example {
        record: MixtureRecord {
            mixture: dir.join(format!("{id}_mix.wav")),
            sources: (0..count).map(|i| dir.join(format!("{id}_s{}.wav", i + 1))).collect(),
            id,
            split,
            count,
            gains: mixed.gains,
            levels_db,
            speakers,
        },
        mixture: mixed.mixture,
        sources: mixed.sources,
        unscaled: unscaled.into_iter().map(|w| w.fit_to(len)).collect(),
    })
}

/// Every example of a split, ordered by count then index.
pub fn generate_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &c in &cfg.counts {
        for i in 0..cfg.per_split(split) {
            out.push(generate_example(cfg, split, c, i)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<MixtureRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&MixtureRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Manifest {
                line: 0,
                detail: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest file, or `manifest.jsonl` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let file = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: i + 1,
                detail: e.to_string(),
            })?;
            if rec.sources.len() != rec.count || rec.gains.len() != rec.count {
                return Err(Error::Manifest {
                    line: i + 1,
                    detail: format!("record {} lists {} sources for count {}", rec.id, rec.sources.len(), rec.count),
                });
            }
            records.push(rec);
        }
        Ok(Self {
            root: file_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    /// Mixture and gain-scaled sources of one record.
    pub fn load(&self, rec: &MixtureRecord) -> Result<(Waveform, Vec<Waveform>)> {
        let mixture = wav_read(&self.root.join(&rec.mixture))?;
        let sources = rec
            .sources
            .iter()
            .zip(&rec.gains)
            .map(|(p, g)| {
                let s = wav_read(&self.root.join(p))?;
                Waveform::new(s.samples().iter().map(|v| v * g).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((mixture, sources))
    }
}

/// Generates every split, writes WAVs under `out/<split>/` and the
/// manifest at `out/manifest.jsonl`.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut records = Vec::new();
    for split in Split::ALL {
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for ex in generate_split(cfg, split)? {
            wav_write(&out.join(&ex.record.mixture), &ex.mixture)?;
            for (p, s) in ex.record.sources.iter().zip(&ex.unscaled) {
                wav_write(&out.join(p), s)?;
            }
            records.push(ex.record);
        }
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        records,
    };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn utterances_are_deterministic_and_normalized() {
        let p = SpeakerProfile::new(1, 3);
        assert_eq!(p, SpeakerProfile::new(1, 3));
        assert_ne!(p.filter, SpeakerProfile::new(1, 4).filter);
        let a = synth_utterance(&p, 0.5, 9).unwrap();
        let b = synth_utterance(&p, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4000);
        assert!((a.peak() - PEAK).abs() < 1e-12);
        assert!(synth_utterance(&p, 0.4, 9).is_err());
        assert!(synth_utterance(&p, 10.5, 9).is_err());
    }

    #[test]
    fn distinct_speakers_are_weakly_correlated() {
        let mut worst = 0.0f64;
        for pair in 0..100u32 {
            let a = synth_utterance(&SpeakerProfile::new(0, 2 * pair), 0.5, 77).unwrap();
            let b = synth_utterance(&SpeakerProfile::new(0, 2 * pair + 1), 0.5, 77).unwrap();
            worst = worst.max(corr(a.samples(), b.samples()).abs());
        }
        assert!(worst < 0.5, "max |corr| = {worst}");
    }

    #[test]
    fn mixing_levels() {
        let s = Waveform::new((0..100).map(|i| (i as f64 * 0.1).sin() * 0.3).collect()).unwrap();
        let t = Waveform::new((0..120).map(|i| (i as f64 * 0.37).cos() * 0.3).collect()).unwrap();
        let eq = Waveform::new(s.samples().iter().rev().copied().collect()).unwrap();
        let m = mix_at_snr(&[s.clone(), eq], &[0.0]).unwrap();
        assert!((m.gains[1] - 1.0).abs() < 1e-12);

        let m = mix_at_snr(&[s.clone(), s.clone()], &[20.0 * 2f64.log10() - 1e-13]);
        assert!(m.is_err(), "6 dB is outside the allowed range");
        let m = mix_at_snr(&[s.clone(), t.clone()], &[2.5]).unwrap();
        assert_eq!(m.mixture.len(), 100);
        let p1 = m.sources[0].power();
        let p2 = m.sources[1].power();
        assert!((10.0 * (p1 / p2).log10() - 2.5).abs() < 1e-9);
        for i in 0..100 {
            let sum: f64 = m.sources.iter().map(|w| w.samples()[i]).sum();
            assert!((m.mixture.samples()[i] - sum).abs() < 1e-12);
        }
        let z = Waveform::zeros(100);
        assert!(matches!(mix_at_snr(&[s.clone(), z], &[0.0]), Err(Error::ZeroPower(1))));
    }

    #[test]
    fn amplitude_ratio_at_six_db() {
        // The ±2.5 dB bound is a corpus rule; the gain law itself is checked
        // on the raw formula.
        let p1 = 1.0;
        let p2 = 1.0;
        let level = 20.0 * 2f64.log10();
        let gain = (p1 / (p2 * 10f64.powf(level / 10.0))).sqrt();
        assert!((1.0 / gain - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_mixture_is_rescaled() {
        let s = Waveform::new(vec![0.9; 50]).unwrap();
        let m = mix_at_snr(&[s.clone(), s.clone(), s], &[0.0, 0.0]).unwrap();
        assert!((m.mixture.peak() - PEAK).abs() < 1e-12);
        assert!((m.gains[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wav_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Waveform::new((0..1000).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        wav_write(&path, &w).unwrap();
        let r = wav_read(&path).unwrap();
        let err = w.samples().iter().zip(r.samples()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1.0 / 32768.0);

        let hi = dir.path().join("hi.wav");
        let spec = hound::WavSpec {
            sample_rate: 44_100,
            ..wav_spec()
        };
        let mut wr = hound::WavWriter::create(&hi, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(wav_read(&hi), Err(Error::WavFormat { field: "sample_rate", .. })));

        let empty = dir.path().join("empty.wav");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(wav_read(&empty), Err(Error::WavParse { .. })));
    }

    #[test]
    fn dataset_counts_and_disjoint_pools() {
        let cfg = DatasetConfig {
            train: 100,
            valid: 20,
            test: 20,
            ..DatasetConfig::default()
        };
        let total: usize = Split::ALL.iter().map(|&s| cfg.per_split(s) * cfg.counts.len()).sum();
        assert_eq!(total, 280);
        let train = cfg.speaker_pool(Split::Train);
        let test = cfg.speaker_pool(Split::Test);
        assert!(test.clone().all(|s| !train.contains(&s)));
        let ex = generate_example(&cfg, Split::Test, 3, 4).unwrap();
        assert!(ex.record.speakers.iter().all(|s| test.contains(s)));
        assert_eq!(ex.sources.len(), 3);
        let bad = DatasetConfig {
            counts: vec![5],
            ..DatasetConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Capacity { .. })));
    }

    #[test]
    fn build_and_reload() {
        let cfg = DatasetConfig {
            train: 2,
            valid: 1,
            test: 1,
            duration: (0.5, 0.6),
            ..DatasetConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = build_dataset(&cfg, a.path()).unwrap();
        build_dataset(&cfg, b.path()).unwrap();
        assert_eq!(m.records.len(), 8);
        let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        for r in &m.records {
            assert_eq!(fs::read(a.path().join(&r.mixture)).unwrap(), fs::read(b.path().join(&r.mixture)).unwrap());
        }
        let back = Manifest::read(a.path()).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.split(Split::Train).len(), 4);
        for r in &back.records {
            let (mix, src) = back.load(r).unwrap();
            for i in 0..mix.len() {
                let sum: f64 = src.iter().map(|s| s.samples()[i]).sum();
                assert!((mix.samples()[i] - sum).abs() < 4.0 / 32768.0);
            }
        }
    }
}
