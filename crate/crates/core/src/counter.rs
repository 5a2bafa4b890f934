//! Source counting from embeddings by Gerschgorin disk estimation, plus the
//! covariance-rank baseline.
//!
//! With `B = (1/N) Σ vₙvₙᵀ` partitioned as `[[R₁, r], [rᵀ, r_LL]]`, the
//! leading block is diagonalized, `R₁ = U₁ΛU₁ᵀ`, and the transformed matrix
//! `U₂ᵀBU₂` (`U₂ = diag(U₁, 1)`) has disk centers `λ_k` and radii
//! `ρ = U₁ᵀr`. Signal directions carry large radii; noise disks shrink
//! towards zero. The count is `k₀ − 1` where `k₀` is the first `k` with
//!
//! ```text
//! GDE(k) = |ρ_k| − F(N)/(L−1) · Σ_l |ρ_l|  ≤ 0
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{counting_accuracy, CountAccuracy};
use crate::numcore::{sym_eig, Tensor};

/// Default scale `c` in `F(N) = c / √log₁₀ N`, calibrated once on synthetic
/// validation embeddings (see `calibrate_gde_scale`).
pub const DEFAULT_GDE_SCALE: f64 = 0.25;
/// Default rank-baseline threshold as a fraction of the largest eigenvalue.
pub const DEFAULT_RANK_THRESHOLD: f64 = 0.1;

/// Second-moment matrix of the embedding rows (no mean removal).
#[derive(Clone, Debug, PartialEq)]
pub struct CovMatrix {
    pub b: Tensor,
}

impl CovMatrix {
    pub fn dim(&self) -> usize {
        self.b.rows()
    }

    /// `B` without its last row and column.
    pub fn r1(&self) -> Tensor {
        let l = self.dim() - 1;
        Tensor::from_fn(&[l, l], |i| self.b.at(i / l, i % l))
    }

    /// Last column of `B` minus its final entry.
    pub fn r(&self) -> Vec<f64> {
        let l = self.dim() - 1;
        (0..l).map(|i| self.b.at(i, l)).collect()
    }

    pub fn r_ll(&self) -> f64 {
        let l = self.dim() - 1;
        self.b.at(l, l)
    }
}

pub fn covariance(v: &Tensor) -> Result<CovMatrix> {
    if v.ndim() != 2 {
        return Err(Error::Shape {
            context: "covariance",
            detail: format!("expected N×L embeddings, got {:?}", v.shape()),
        });
    }
    let (n, l) = (v.rows(), v.cols());
    if n < l {
        return Err(Error::InsufficientSamples { got: n, min: l });
    }
    let mut b = Tensor::zeros(&[l, l]);
    crate::numcore::gemm(
        crate::numcore::MatRef::new(v.data(), n, l).t(),
        crate::numcore::MatRef::new(v.data(), n, l),
        b.data_mut(),
        false,
    );
    let inv = 1.0 / n as f64;
    for i in 0..l {
        for j in 0..=i {
            let s = 0.5 * (b.at(i, j) + b.at(j, i)) * inv;
            b.set(i, j, s);
            b.set(j, i, s);
        }
    }
    b.ensure_finite("covariance")?;
    Ok(CovMatrix { b })
}

/// Unitary transform exposing the Gerschgorin disks of `B`.
#[derive(Clone, Debug)]
pub struct GdeTransform {
    /// Disk centers `λ₁ ≥ … ≥ λ_{L−1}` (eigenvalues of `R₁`).
    pub centers: Vec<f64>,
    /// Signed radii `ρ = U₁ᵀ r`, in the order of `centers`.
    pub radii: Vec<f64>,
    /// Eigenvectors of `R₁` as columns.
    pub u1: Tensor,
    pub r_ll: f64,
}

impl GdeTransform {
    /// `U₂ = [[U₁, 0], [0, 1]]`.
    pub fn u2(&self) -> Tensor {
        let l = self.u1.rows() + 1;
        let mut u = Tensor::zeros(&[l, l]);
        for i in 0..l - 1 {
            for j in 0..l - 1 {
                u.set(i, j, self.u1.at(i, j));
            }
        }
        u.set(l - 1, l - 1, 1.0);
        u
    }

    /// Arrow-shaped matrix with `λ` on the leading diagonal and `ρ` in the
    /// last row and column.
    pub fn r2(&self) -> Tensor {
        let l = self.centers.len() + 1;
        let mut r = Tensor::zeros(&[l, l]);
        for k in 0..l - 1 {
            r.set(k, k, self.centers[k]);
            r.set(k, l - 1, self.radii[k]);
            r.set(l - 1, k, self.radii[k]);
        }
        r.set(l - 1, l - 1, self.r_ll);
        r
    }
}

pub fn gde_transform(b: &CovMatrix) -> Result<GdeTransform> {
    if b.dim() < 2 {
        return Err(Error::Config("GDE needs embedding dimension ≥ 2".into()));
    }
    let eig = sym_eig(&b.r1())?;
    let r = b.r();
    let l1 = r.len();
    let radii = (0..l1)
        .map(|k| (0..l1).map(|i| eig.vectors.at(i, k) * r[i]).sum())
        .collect();
    Ok(GdeTransform {
        centers: eig.values,
        radii,
        u1: eig.vectors,
        r_ll: b.r_ll(),
    })
}

/// `F(N) = c / √log₁₀ N`, clamped into `(0, 1)`.
pub fn gde_factor(n: usize, scale: f64) -> f64 {
    let lg = (n.max(2) as f64).log10();
    (scale / lg.sqrt()).clamp(1e-6, 1.0 - 1e-6)
}

#[derive(Clone, Debug)]
pub struct GdeResult {
    pub centers: Vec<f64>,
    pub radii: Vec<f64>,
    /// `GDE(1) … GDE(L−1)`.
    pub gde: Vec<f64>,
    pub estimate: usize,
    pub factor: f64,
    /// No non-positive `GDE(k)` existed; `estimate` is `L − 1`.
    pub saturated: bool,
    /// `Σ|ρ| = 0`; `estimate` is 0.
    pub zero_radius: bool,
}

/// Counts sources in `V` using the fixed factor `F(N) = factor`.
pub fn gde_count(v: &Tensor, factor: f64) -> Result<GdeResult> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::Config(format!("GDE factor must lie in (0, 1), got {factor}")));
    }
    let tr = gde_transform(&covariance(v)?)?;
    Ok(gde_from_transform(tr, factor))
}

/// [`gde_count`] with the factor derived from `N` via [`gde_factor`].
pub fn gde_count_scaled(v: &Tensor, scale: f64) -> Result<GdeResult> {
    gde_count(v, gde_factor(v.rows(), scale))
}

fn gde_from_transform(tr: GdeTransform, factor: f64) -> GdeResult {
    let l1 = tr.radii.len();
    let total: f64 = tr.radii.iter().map(|r| r.abs()).sum();
    let threshold = factor / l1 as f64 * total;
    let gde: Vec<f64> = tr.radii.iter().map(|r| r.abs() - threshold).collect();
    let zero_radius = total == 0.0;
    let (estimate, saturated) = if zero_radius {
        (0, false)
    } else {
        match gde.iter().position(|&g| g <= 0.0) {
            Some(k0) => (k0, false), // k₀ is 1-based, so Ĉ = k₀ − 1 = index
            None => (l1, true),
        }
    };
    GdeResult {
        centers: tr.centers,
        radii: tr.radii,
        gde,
        estimate,
        factor,
        saturated,
        zero_radius,
    }
}

/// Number of eigenvalues of `B` above `threshold · λ_max`.
pub fn rank_count(v: &Tensor, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("rank threshold must lie in (0, 1), got {threshold}")));
    }
    let eig = sym_eig(&covariance(v)?.b)?;
    let max = eig.values[0];
    Ok(eig.values.iter().filter(|&&l| l > threshold * max).count())
}

// ---------------------------------------------------------------------------
// Benchmark on synthetic embeddings
// ---------------------------------------------------------------------------

/// Anything that maps an embedding matrix to a source count.
pub trait CountPredictor {
    fn name(&self) -> String;
    fn predict(&self, v: &Tensor, true_count: usize) -> Result<usize>;
}

#[derive(Clone, Copy, Debug)]
pub struct GdePredictor {
    pub scale: f64,
}

impl CountPredictor for GdePredictor {
    fn name(&self) -> String {
        "GDE".into()
    }

    fn predict(&self, v: &Tensor, _: usize) -> Result<usize> {
        Ok(gde_count_scaled(v, self.scale)?.estimate)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RankPredictor {
    pub threshold: f64,
}

impl CountPredictor for RankPredictor {
    fn name(&self) -> String {
        "Rank".into()
    }

    fn predict(&self, v: &Tensor, _: usize) -> Result<usize> {
        rank_count(v, self.threshold)
    }
}

/// Wraps a closure as a predictor (test stubs, constant baselines).
pub struct FnPredictor<F>(pub &'static str, pub F);

impl<F: Fn(&Tensor, usize) -> usize> CountPredictor for FnPredictor<F> {
    fn name(&self) -> String {
        self.0.into()
    }

    fn predict(&self, v: &Tensor, c: usize) -> Result<usize> {
        Ok((self.1)(v, c))
    }
}

/// Generator parameters for embeddings living along `C` orthonormal
/// directions plus isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEmbeddings {
    pub rows: usize,
    pub dim: usize,
    /// Per-direction energy `E[coef²]`, drawn uniformly per trial.
    pub energy: (f64, f64),
    /// Noise standard deviation, drawn uniformly per trial.
    pub noise: (f64, f64),
}

impl Default for SyntheticEmbeddings {
    fn default() -> Self {
        Self {
            rows: 5000,
            dim: 20,
            energy: (0.3, 1.0),
            noise: (0.02, 0.1),
        }
    }
}

/// `count` random orthonormal directions in `R^dim` (Gram–Schmidt).
pub fn random_orthonormal(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= d * ui;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

impl SyntheticEmbeddings {
    /// Each row picks one direction uniformly and carries a Gaussian
    /// coefficient of variance equal to that direction's energy.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Tensor {
        let dirs = random_orthonormal(count, self.dim, rng);
        let energies: Vec<f64> = (0..count).map(|_| draw(self.energy, rng)).collect();
        let sigma = draw(self.noise, rng);
        let mut v = Tensor::zeros(&[self.rows, self.dim]);
        for n in 0..self.rows {
            let c = rng.random_range(0..count);
            let g: f64 = StandardNormal.sample(rng);
            let coef = energies[c].sqrt() * g;
            for (l, slot) in v.row_mut(n).iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                *slot = coef * dirs[c][l] + sigma * e;
            }
        }
        v
    }
}

fn draw(range: (f64, f64), rng: &mut impl Rng) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub trials_per_count: usize,
    pub counts: Vec<usize>,
    pub embeddings: SyntheticEmbeddings,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            trials_per_count: 200,
            counts: vec![2, 3],
            embeddings: SyntheticEmbeddings::default(),
            seed: 0,
        }
    }
}

/// One method's row of the accuracy table.
#[derive(Clone, Debug)]
pub struct MethodAccuracy {
    pub method: String,
    pub accuracy: CountAccuracy,
}

/// Table mirroring "two speakers / three speakers / average" columns.
#[derive(Clone, Debug)]
pub struct CountingTable {
    pub counts: Vec<usize>,
    pub rows: Vec<MethodAccuracy>,
}

impl CountingTable {
    pub fn row(&self, method: &str) -> Option<&MethodAccuracy> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("Source counting accuracy [%]\n");
        s.push_str(&format!("{:<12}", "Method"));
        for c in &self.counts {
            s.push_str(&format!("{:>12}", format!("C={c}")));
        }
        s.push_str(&format!("{:>10}\n", "Avg."));
        for r in &self.rows {
            s.push_str(&format!("{:<12}", r.method));
            for c in &self.counts {
                s.push_str(&format!("{:>12.1}", r.accuracy.for_count(*c).unwrap_or(f64::NAN)));
            }
            s.push_str(&format!("{:>10.1}\n", r.accuracy.average));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for c in &self.counts {
            s.push_str(&format!(",c{c}"));
        }
        s.push_str(",average\n");
        for r in &self.rows {
            s.push_str(&r.method);
            for c in &self.counts {
                s.push_str(&format!(",{:.2}", r.accuracy.for_count(*c).unwrap_or(f64::NAN)));
            }
            s.push_str(&format!(",{:.2}\n", r.accuracy.average));
        }
        s
    }
}

/// Runs every predictor on the same deterministic trial set.
pub fn counting_benchmark(cfg: &BenchmarkConfig, predictors: &[&dyn CountPredictor]) -> Result<CountingTable> {
    if cfg.trials_per_count == 0 {
        return Err(Error::Config("trials_per_count must be at least 1".into()));
    }
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); predictors.len()];
    for (ci, &c) in cfg.counts.iter().enumerate() {
        for trial in 0..cfg.trials_per_count {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((ci * cfg.trials_per_count + trial) as u64);
            let v = cfg.embeddings.sample(c, &mut rng);
            for (p, out) in predictors.iter().zip(pairs.iter_mut()) {
                out.push((c, p.predict(&v, c)?));
            }
        }
    }
    let rows = predictors
        .iter()
        .zip(pairs)
        .map(|(p, pr)| {
            Ok(MethodAccuracy {
                method: p.name(),
                accuracy: counting_accuracy(&pr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountingTable {
        counts: cfg.counts.clone(),
        rows,
    })
}

/// Threshold grid `0.01, 0.02, …, 0.50`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=50).map(|i| i as f64 / 100.0).collect()
}

/// Picks the first grid value with the best average accuracy on `cfg`.
fn calibrate<P: CountPredictor>(
    cfg: &BenchmarkConfig,
    grid: &[f64],
    make: impl Fn(f64) -> P,
) -> Result<(f64, f64)> {
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &g in grid {
        let p = make(g);
        let acc = counting_benchmark(cfg, &[&p])?.rows[0].accuracy.average;
        if acc > best.1 {
            best = (g, acc);
        }
    }
    Ok(best)
}

/// Tunes the rank threshold; returns `(threshold, accuracy %)`.
pub fn calibrate_rank_threshold(cfg: &BenchmarkConfig, grid: &[f64]) -> Result<(f64, f64)> {
    calibrate(cfg, grid, |t| RankPredictor { threshold: t })
}

/// Tunes the GDE scale `c`; returns `(scale, accuracy %)`.
pub fn calibrate_gde_scale(cfg: &BenchmarkConfig, grid: &[f64]) -> Result<(f64, f64)> {
    calibrate(cfg, grid, |s| GdePredictor { scale: s })
}
