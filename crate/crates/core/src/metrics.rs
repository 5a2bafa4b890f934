//! Evaluation measures: SI-SNR improvement, a projection-free SDR stand-in,
//! and source-counting accuracy.
//!
//! `sdr_plain` is `10·log₁₀(‖s‖² / ‖s − ŝ‖²)`; it is not the BSS-eval SDR,
//! which fits distortion filters before measuring the residual.

use serde::{Deserialize, Serialize};

use crate::decoder::{arrangements, si_snr};
use crate::dsp::{Waveform, EDGE};
use crate::error::{Error, Result};

/// Display clamp for dB values.
pub const REPORT_CLAMP_DB: f64 = 80.0;

pub fn si_snri(s: &[f64], e: &[f64], x: &[f64]) -> Result<f64> {
    Ok(si_snr(s, e)? - si_snr(s, x)?)
}

/// Plain SNR of the error signal, clamped to `±80 dB`.
pub fn sdr_plain(s: &[f64], e: &[f64]) -> Result<f64> {
    if s.len() != e.len() || s.is_empty() {
        return Err(Error::Shape {
            context: "sdr_plain",
            detail: format!("reference has {} samples, estimate {}", s.len(), e.len()),
        });
    }
    let p: f64 = s.iter().map(|v| v * v).sum();
    if p == 0.0 {
        return Err(Error::ZeroReference);
    }
    let err: f64 = s.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
    let db = if err == 0.0 {
        REPORT_CLAMP_DB
    } else {
        10.0 * (p / err).log10()
    };
    Ok(db.clamp(-REPORT_CLAMP_DB, REPORT_CLAMP_DB))
}

pub fn sdri(s: &[f64], e: &[f64], x: &[f64]) -> Result<f64> {
    Ok(sdr_plain(s, e)? - sdr_plain(s, x)?)
}

/// Counting accuracy in percent, per true count and macro-averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountAccuracy {
    /// `(true count, accuracy %, number of records)`, ascending by count.
    pub per_count: Vec<(usize, f64, usize)>,
    pub average: f64,
}

impl CountAccuracy {
    pub fn for_count(&self, c: usize) -> Option<f64> {
        self.per_count.iter().find(|p| p.0 == c).map(|p| p.1)
    }
}

/// `pairs` holds `(true C, estimated Ĉ)`.
pub fn counting_accuracy(pairs: &[(usize, usize)]) -> Result<CountAccuracy> {
    if pairs.is_empty() {
        return Err(Error::Empty("counting records"));
    }
    let mut counts: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    counts.sort_unstable();
    counts.dedup();
    let per_count: Vec<(usize, f64, usize)> = counts
        .iter()
        .map(|&c| {
            let total = pairs.iter().filter(|p| p.0 == c).count();
            let hit = pairs.iter().filter(|p| p.0 == c && p.1 == c).count();
            (c, 100.0 * hit as f64 / total as f64, total)
        })
        .collect();
    let average = per_count.iter().map(|p| p.1).sum::<f64>() / per_count.len() as f64;
    Ok(CountAccuracy { per_count, average })
}

/// Per-utterance evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub true_count: usize,
    pub estimated_count: usize,
    /// `(source index, estimate index)` for every scored pair.
    pub pairs: Vec<(usize, usize)>,
    pub si_snr: Vec<f64>,
    pub si_snri: Vec<f64>,
    pub sdr: Vec<f64>,
    pub sdri: Vec<f64>,
}

impl EvalRecord {
    pub fn count_mismatch(&self) -> bool {
        self.true_count != self.estimated_count
    }

    pub fn mean_si_snri(&self) -> f64 {
        mean(&self.si_snri)
    }

    pub fn mean_sdri(&self) -> f64 {
        mean(&self.sdri)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores estimates against references after trimming the overlap-add
/// edges. With `Ĉ ≠ C`, the `min(Ĉ, C)` pairs maximizing mean SI-SNR are
/// scored.
pub fn score_utterance(id: &str, sources: &[Waveform], estimates: &[Waveform], mixture: &Waveform) -> Result<EvalRecord> {
    if sources.is_empty() {
        return Err(Error::Empty("reference sources"));
    }
    let x = mixture.trimmed(EDGE);
    let trim = |w: &Waveform| -> Result<Vec<f64>> {
        if w.len() != mixture.len() {
            return Err(Error::Shape {
                context: "score_utterance",
                detail: format!("signal has {} samples, mixture {}", w.len(), mixture.len()),
            });
        }
        Ok(w.trimmed(EDGE).to_vec())
    };
    let s: Vec<Vec<f64>> = sources.iter().map(trim).collect::<Result<_>>()?;
    let e: Vec<Vec<f64>> = estimates.iter().map(trim).collect::<Result<_>>()?;
    let mut table = vec![vec![0.0; e.len()]; s.len()];
    for i in 0..s.len() {
        for j in 0..e.len() {
            table[i][j] = si_snr(&s[i], &e[j])?;
        }
    }
    let k = s.len().min(e.len());
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let candidates: Vec<Vec<(usize, usize)>> = if e.len() >= s.len() {
        arrangements(k, e.len())
            .into_iter()
            .map(|a| a.into_iter().enumerate().collect())
            .collect()
    } else {
        arrangements(k, s.len())
            .into_iter()
            .map(|a| {
                let mut p: Vec<(usize, usize)> = a.into_iter().enumerate().map(|(j, i)| (i, j)).collect();
                p.sort_unstable();
                p
            })
            .collect()
    };
    for pairs in candidates {
        let total: f64 = pairs.iter().map(|&(i, j)| table[i][j]).sum();
        if best.as_ref().is_none_or(|b| total > b.0) {
            best = Some((total, pairs));
        }
    }
    let pairs = best.map(|b| b.1).unwrap_or_default();
    let mut rec = EvalRecord {
        id: id.to_string(),
        true_count: s.len(),
        estimated_count: e.len(),
        pairs: pairs.clone(),
        si_snr: Vec::new(),
        si_snri: Vec::new(),
        sdr: Vec::new(),
        sdri: Vec::new(),
    };
    for (i, j) in pairs {
        rec.si_snr.push(table[i][j]);
        rec.si_snri.push(si_snri(&s[i], &e[j], x)?);
        rec.sdr.push(sdr_plain(&s[i], &e[j])?);
        rec.sdri.push(sdri(&s[i], &e[j], x)?);
    }
    Ok(rec)
}

/// Collection of utterance records with CSV and text renderings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

fn fmt_db(v: f64) -> String {
    format!("{:.3}", v.clamp(-REPORT_CLAMP_DB, REPORT_CLAMP_DB))
}

impl EvalReport {
    pub fn counting(&self) -> Result<CountAccuracy> {
        counting_accuracy(
            &self
                .records
                .iter()
                .map(|r| (r.true_count, r.estimated_count))
                .collect::<Vec<_>>(),
        )
    }

    /// Mean per-source `(SI-SNRi, SDRi)` over records with true count `c`.
    pub fn mean_improvements(&self, c: Option<usize>) -> (f64, f64) {
        let sel: Vec<&EvalRecord> = self
            .records
            .iter()
            .filter(|r| c.is_none_or(|c| r.true_count == c))
            .collect();
        let si: Vec<f64> = sel.iter().flat_map(|r| r.si_snri.iter().copied()).collect();
        let sd: Vec<f64> = sel.iter().flat_map(|r| r.sdri.iter().copied()).collect();
        (mean(&si), mean(&sd))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,true_count,estimated_count,source,estimate,si_snr,si_snri,sdr,sdri\n");
        for r in &self.records {
            if r.pairs.is_empty() {
                s.push_str(&format!("{},{},{},,,,,,\n", r.id, r.true_count, r.estimated_count));
            }
            for (k, &(i, j)) in r.pairs.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.id,
                    r.true_count,
                    r.estimated_count,
                    i,
                    j,
                    fmt_db(r.si_snr[k]),
                    fmt_db(r.si_snri[k]),
                    fmt_db(r.sdr[k]),
                    fmt_db(r.sdri[k])
                ));
            }
        }
        s
    }

    pub fn summary(&self) -> Result<String> {
        if self.records.is_empty() {
            return Err(Error::Empty("evaluation report"));
        }
        let mut counts: Vec<usize> = self.records.iter().map(|r| r.true_count).collect();
        counts.sort_unstable();
        counts.dedup();
        let mut out = format!("{:<10}{:>10}{:>12}{:>12}\n", "C", "records", "SDRi [dB]", "SI-SNRi [dB]");
        for &c in &counts {
            let n = self.records.iter().filter(|r| r.true_count == c).count();
            let (si, sd) = self.mean_improvements(Some(c));
            out.push_str(&format!("{:<10}{:>10}{:>12.2}{:>12.2}\n", c, n, sd, si));
        }
        let (si, sd) = self.mean_improvements(None);
        out.push_str(&format!("{:<10}{:>10}{:>12.2}{:>12.2}\n", "all", self.records.len(), sd, si));
        let acc = self.counting()?;
        out.push_str("\nCounting accuracy [%]\n");
        for (c, a, n) in &acc.per_count {
            out.push_str(&format!("C={c}: {a:.1} ({n} records)\n"));
        }
        out.push_str(&format!("average: {:.1}\n", acc.average));
        let mismatched = self.records.iter().filter(|r| r.count_mismatch()).count();
        if mismatched > 0 {
            out.push_str(&format!("count mismatches: {mismatched}\n"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn si_snri_cases() {
        let s = [1.0, 0.0];
        let x = [1.0, 1.0];
        assert_eq!(si_snri(&s, &x, &x).unwrap(), 0.0);
        let e = [1.0, 0.1];
        let direct = 10.0 * (1.0 / (1.01 - 1.0 + 1e-8) + 1e-8f64).log10();
        assert!((si_snri(&s, &e, &x).unwrap() - direct).abs() < 1e-6);
        assert!(si_snri(&s, &s, &x).unwrap() >= 80.0 - si_snr(&s, &x).unwrap());
    }

    #[test]
    fn sdr_cases() {
        let s = [0.5, -1.0, 2.0, 0.25];
        assert_eq!(sdr_plain(&s, &s).unwrap(), 80.0);
        assert_eq!(sdr_plain(&s, &[0.0; 4]).unwrap(), 0.0);
        let p: f64 = s.iter().map(|v| v * v).sum();
        let e: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + if i == 0 { (0.1 * p).sqrt() } else { 0.0 }).collect();
        assert!((sdr_plain(&s, &e).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(sdri(&s, &e, &e).unwrap(), 0.0);
        assert!(matches!(sdr_plain(&[0.0; 4], &s), Err(Error::ZeroReference)));
    }

    #[test]
    fn counting_cases() {
        assert_eq!(counting_accuracy(&[(2, 2), (3, 3)]).unwrap().average, 100.0);
        let half = counting_accuracy(&[(2, 2), (2, 3), (3, 3), (3, 2)]).unwrap();
        assert_eq!(half.average, 50.0);
        // Macro average weighs classes equally.
        let skew = counting_accuracy(&[(2, 2), (2, 2), (2, 2), (3, 2)]).unwrap();
        assert_eq!(skew.average, 50.0);
        assert!(counting_accuracy(&[]).is_err());
    }

    fn w(v: Vec<f64>) -> Waveform {
        Waveform::new(v).unwrap()
    }

    fn signals() -> (Vec<Waveform>, Waveform) {
        let a: Vec<f64> = (0..60).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..60).map(|i| (i as f64 * 0.71).cos()).collect();
        let c: Vec<f64> = (0..60).map(|i| ((i * i) % 7) as f64 - 3.0).collect();
        let x: Vec<f64> = (0..60).map(|i| a[i] + b[i] + c[i]).collect();
        (vec![w(a), w(b), w(c)], w(x))
    }

    #[test]
    fn scoring_is_permutation_invariant() {
        let (src, x) = signals();
        let est = vec![src[2].clone(), src[0].clone(), src[1].clone()];
        let r = score_utterance("u", &src, &est, &x).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 2), (2, 0)]);
        assert!(r.si_snr.iter().all(|&v| v >= 80.0));
        let r2 = score_utterance("u", &src, &src, &x).unwrap();
        assert_eq!(r.si_snri, r2.si_snri);
        assert_eq!(r.sdri, r2.sdri);
    }

    #[test]
    fn scoring_with_count_mismatch() {
        let (src, x) = signals();
        let r = score_utterance("u", &src, &[src[1].clone(), src[2].clone()], &x).unwrap();
        assert!(r.count_mismatch());
        assert_eq!(r.pairs, vec![(1, 0), (2, 1)]);
        let r = score_utterance("u", &src[..2], &[x.clone(), src[0].clone(), src[1].clone()], &x).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 2)]);
        let report = EvalReport { records: vec![r] };
        assert!(report.summary().unwrap().contains("count mismatches: 1"));
        assert_eq!(report.to_csv().lines().count(), 3);
        assert!(EvalReport::default().summary().is_err());
    }
}
