//! Attractor selection and mask estimation.
//!
//! `C` of the `K` trainable bank centers seed a k-means pass over the rows
//! of `V`; among all `C`-subsets the refined centroid set with the largest
//! minimum pairwise distance wins. Masks are a softmax over sources of the
//! embedding/attractor dot products.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::decoder::MaskTensor;
use crate::embedder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numcore::{gemm, DiffLayer, MatRef, ParamSet, Softmax, Tensor};

pub const BANK: &str = "attractor.bank";

/// Bank of `K × L` centers, standard normal scaled by `1/√L`.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng, params: &mut ParamSet) {
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
    params.insert(
        BANK,
        Tensor::from_fn(&[cfg.num_centers, cfg.embed_dim], |_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        }),
    );
}

/// Assignments made during each k-means iteration.
#[derive(Clone, Debug)]
pub struct KmeansTrace {
    pub centroids: Tensor,
    /// `assignments[i][n]` is the cluster of row `n` in iteration `i`.
    pub assignments: Vec<Vec<usize>>,
    pub counts: Vec<Vec<usize>>,
}

/// Lloyd iterations from `init`; an empty cluster keeps its center.
/// Distance ties go to the lower cluster index.
pub fn kmeans_refine(v: &Tensor, init: &Tensor, iters: usize) -> Result<KmeansTrace> {
    let (n, l) = (v.rows(), v.cols());
    let c = init.rows();
    if c == 0 || iters == 0 {
        return Err(Error::Config("k-means needs at least one center and one iteration".into()));
    }
    if init.cols() != l {
        return Err(Error::Dimension {
            context: "kmeans_refine",
            axis: 1,
            expected: l,
            got: init.cols(),
        });
    }
    let mut cent = init.clone();
    let mut assignments = Vec::with_capacity(iters);
    let mut counts = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut assign = vec![0usize; n];
        for (row, slot) in assign.iter_mut().enumerate() {
            let x = v.row(row);
            let mut best = (0, f64::INFINITY);
            for k in 0..c {
                let d: f64 = x.iter().zip(cent.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            *slot = best.0;
        }
        let mut sums = Tensor::zeros(&[c, l]);
        let mut cnt = vec![0usize; c];
        for (row, &k) in assign.iter().enumerate() {
            cnt[k] += 1;
            for (s, x) in sums.row_mut(k).iter_mut().zip(v.row(row)) {
                *s += x;
            }
        }
        for k in 0..c {
            if cnt[k] > 0 {
                let inv = 1.0 / cnt[k] as f64;
                for (dst, s) in cent.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *dst = s * inv;
                }
            }
        }
        assignments.push(assign);
        counts.push(cnt);
    }
    Ok(KmeansTrace {
        centroids: cent,
        assignments,
        counts,
    })
}

/// Backward pass of [`kmeans_refine`] with assignments held fixed.
/// Returns `(dV, d_init)`.
pub fn kmeans_backward(v: &Tensor, trace: &KmeansTrace, d_centroids: &Tensor) -> (Tensor, Tensor) {
    let mut dv = Tensor::zeros(v.shape());
    let mut d = d_centroids.clone();
    for (assign, cnt) in trace.assignments.iter().zip(&trace.counts).rev() {
        let mut prev = Tensor::zeros(d.shape());
        for (k, &c) in cnt.iter().enumerate() {
            if c == 0 {
                prev.row_mut(k).copy_from_slice(d.row(k));
            }
        }
        for (row, &k) in assign.iter().enumerate() {
            let inv = 1.0 / cnt[k] as f64;
            for (dst, g) in dv.row_mut(row).iter_mut().zip(d.row(k)) {
                *dst += g * inv;
            }
        }
        d = prev;
    }
    (dv, d)
}

/// Minimum pairwise Euclidean distance between rows; `+∞` for one row.
pub fn in_set_distance(a: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..a.rows() {
        for j in i + 1..a.rows() {
            let d: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(k: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttractorSet {
    /// Refined centroids `A`, `C × L`.
    pub centroids: Tensor,
    pub subset: Vec<usize>,
    pub score: f64,
    pub trace: KmeansTrace,
}

/// Picks the `C`-subset of bank centers whose refined centroids are most
/// separated. Ties keep the lexicographically lowest subset.
pub fn select_attractors(v: &Tensor, count: usize, bank: &Tensor, iters: usize) -> Result<AttractorSet> {
    let k = bank.rows();
    if count > k {
        return Err(Error::Capacity {
            requested: count,
            capacity: k,
        });
    }
    if count == 0 {
        return Err(Error::NoSource);
    }
    let mut best: Option<AttractorSet> = None;
    for subset in combinations(count, k) {
        let init = Tensor::from_rows(&subset.iter().map(|&i| bank.row(i).to_vec()).collect::<Vec<_>>())?;
        let trace = kmeans_refine(v, &init, iters)?;
        let score = in_set_distance(&trace.centroids);
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(AttractorSet {
                centroids: trace.centroids.clone(),
                subset,
                score,
                trace,
            });
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Softmax output over sources, `N × C`, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MaskCache {
    soft: Tensor,
}

/// `mask_i(t, f) = softmax_i ⟨V_{t·F_conv+f}, a_i⟩`, reshaped to `F_conv × T`.
pub fn compute_masks(v: &EmbeddingMatrix, a: &Tensor) -> Result<(MaskTensor, MaskCache)> {
    let (n, l) = (v.num_rows(), v.dim());
    if a.cols() != l {
        return Err(Error::Dimension {
            context: "compute_masks",
            axis: 1,
            expected: l,
            got: a.cols(),
        });
    }
    let c = a.rows();
    let mut logits = Tensor::zeros(&[n, c]);
    gemm(
        MatRef::new(v.v.data(), n, l),
        MatRef::new(a.data(), c, l).t(),
        logits.data_mut(),
        false,
    );
    let (soft, _) = Softmax { axis: 1 }.forward(&ParamSet::new(), &logits)?;
    let f = v.conv_channels;
    let t = v.num_frames();
    let masks = (0..c)
        .map(|i| Tensor::from_fn(&[f, t], |j| soft.at((j % t) * f + j / t, i)))
        .collect();
    Ok((MaskTensor { masks }, MaskCache { soft }))
}

/// Returns `(dV, dA)` given per-source mask gradients (`F_conv × T` each).
pub fn compute_masks_backward(
    v: &EmbeddingMatrix,
    a: &Tensor,
    cache: &MaskCache,
    d_masks: &[Tensor],
) -> Result<(Tensor, Tensor)> {
    let (n, l) = (v.num_rows(), v.dim());
    let c = a.rows();
    if d_masks.len() != c {
        return Err(Error::CountMismatch {
            sources: c,
            estimates: d_masks.len(),
        });
    }
    let f = v.conv_channels;
    let mut d_soft = Tensor::zeros(&[n, c]);
    for (i, dm) in d_masks.iter().enumerate() {
        let t = dm.cols();
        for row in 0..n {
            d_soft.set(row, i, dm.at(row % f, row / f));
        }
        debug_assert_eq!(t * f, n);
    }
    let d_logits = Softmax { axis: 1 }.backward(&ParamSet::new(), &cache.soft, &d_soft, &mut ParamSet::new())?;
    let mut dv = Tensor::zeros(&[n, l]);
    gemm(
        MatRef::new(d_logits.data(), n, c),
        MatRef::new(a.data(), c, l),
        dv.data_mut(),
        false,
    );
    let mut da = Tensor::zeros(&[c, l]);
    gemm(
        MatRef::new(d_logits.data(), n, c).t(),
        MatRef::new(v.v.data(), n, l),
        da.data_mut(),
        false,
    );
    Ok((dv, da))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{numeric_gradient, relative_error, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kmeans_cases() {
        let p: &[f64] = &[1.0, 2.0];
        let v = rows(&[p; 5]);
        let t = kmeans_refine(&v, &rows(&[&[0.0, 0.0]]), 1).unwrap();
        assert_eq!(t.centroids.row(0), &[1.0, 2.0]);

        let v = rows(&[&[1.1, 0.0], &[0.9, 0.0], &[1.0, 0.1], &[-1.0, 0.0], &[-1.2, 0.1]]);
        let t = kmeans_refine(&v, &rows(&[&[0.5, 0.0], &[-0.5, 0.0]]), 1).unwrap();
        assert!((t.centroids.at(0, 0) - 1.0).abs() < 1e-12);
        assert!((t.centroids.at(0, 1) - 0.1 / 3.0).abs() < 1e-12);
        assert!((t.centroids.at(1, 0) + 1.1).abs() < 1e-12);
        let again = kmeans_refine(&v, &t.centroids, 1).unwrap();
        assert_eq!(again.centroids, t.centroids);

        // Empty cluster keeps its center.
        let t = kmeans_refine(&v, &rows(&[&[1.0, 0.0], &[50.0, 50.0]]), 2).unwrap();
        assert_eq!(t.centroids.row(1), &[50.0, 50.0]);
        assert_eq!(t.counts[1][1], 0);
    }

    #[test]
    fn combination_order() {
        assert_eq!(combinations(2, 4).len(), 6);
        assert_eq!(combinations(3, 4), vec![vec![0, 1, 2], vec![0, 1, 3], vec![0, 2, 3], vec![1, 2, 3]]);
        assert_eq!(combinations(4, 4), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn selection_cases() {
        // Centers 1 and 3 sit just above the two clusters: any subset that
        // seeds both clusters refines to the same centroids, and the tie
        // rule then prefers {0, 2}.
        let bank = rows(&[&[1.0, 0.0], &[1.0, 0.3], &[-1.0, 0.0], &[-1.0, 0.3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data = Vec::new();
        for i in 0..200 {
            let base = if i % 2 == 0 { [1.0, 0.0] } else { [-1.0, 0.0] };
            data.push(vec![base[0] + rng.random_range(-0.05..0.05), base[1] + rng.random_range(-0.05..0.05)]);
        }
        let v = Tensor::from_rows(&data).unwrap();
        let a = select_attractors(&v, 2, &bank, 1).unwrap();
        assert_eq!(a.subset, vec![0, 2]);
        assert!((a.score - 2.0).abs() < 0.05);
        let scores: Vec<f64> = combinations(2, 4)
            .iter()
            .map(|s| {
                let init = Tensor::from_rows(&s.iter().map(|&i| bank.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
                in_set_distance(&kmeans_refine(&v, &init, 1).unwrap().centroids)
            })
            .collect();
        assert!(scores[0] < 1.1 && scores[5] < 1.1);
        assert_eq!(scores[1], scores[2]);
        let all = select_attractors(&v, 4, &bank, 1).unwrap();
        assert_eq!(all.subset, vec![0, 1, 2, 3]);
        assert!(matches!(select_attractors(&v, 5, &bank, 1), Err(Error::Capacity { .. })));
        let one = select_attractors(&v, 1, &bank, 1).unwrap();
        assert_eq!(one.score, f64::INFINITY);
        assert_eq!(one.subset, vec![0]);

        let dup = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let a = select_attractors(&v, 2, &dup, 1).unwrap();
        assert_eq!(a.subset, vec![0, 1]);
    }

    fn emb(v: Tensor, f: usize) -> EmbeddingMatrix {
        EmbeddingMatrix { v, conv_channels: f }
    }

    #[test]
    fn mask_cases() {
        let v = emb(rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5], &[2.0, -1.0]]), 2);
        let (m, _) = compute_masks(&v, &rows(&[&[3.0, 1.0]])).unwrap();
        assert!(m.masks[0].data().iter().all(|&x| x == 1.0));
        let (m, _) = compute_masks(&v, &rows(&[&[10.0, 0.0], &[0.0, 10.0]])).unwrap();
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        // row 0 = (t 0, f 0)
        assert!((m.masks[0].at(0, 0) - expect).abs() < 1e-12);
        assert!((expect - 0.99995).abs() < 1e-5);
        let (m, _) = compute_masks(&v, &rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        for mask in &m.masks {
            assert!(mask.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn mask_layout_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, t, l) = (3, 4, 5);
        let v = emb(Tensor::from_fn(&[f * t, l], |_| rng.random_range(-1.0..1.0)), f);
        let a = Tensor::from_fn(&[3, l], |_| rng.random_range(-1.0..1.0));
        let (m, _) = compute_masks(&v, &a).unwrap();
        for ff in 0..f {
            for tt in 0..t {
                let n = tt * f + ff;
                let logits: Vec<f64> = (0..3).map(|i| (0..l).map(|j| v.v.at(n, j) * a.at(i, j)).sum()).collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                for i in 0..3 {
                    assert!((m.masks[i].at(ff, tt) - logits[i].exp() / z).abs() < 1e-12);
                }
            }
        }
        let perm = [2usize, 0, 1];
        let ap = Tensor::from_rows(&perm.iter().map(|&i| a.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (mp, _) = compute_masks(&v, &ap).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in mp.masks[k].data().iter().zip(m.masks[i].data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mask_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, t, l, c) = (3, 4, 5, 2);
        let v = Tensor::from_fn(&[f * t, l], |_| rng.random_range(-1.0..1.0));
        let a = Tensor::from_fn(&[c, l], |_| rng.random_range(-1.0..1.0));
        let w: Vec<Tensor> = (0..c).map(|_| Tensor::from_fn(&[f, t], |_| rng.random_range(-1.0..1.0))).collect();
        let loss = |v: &Tensor, a: &Tensor| -> Result<f64> {
            let (m, _) = compute_masks(&emb(v.clone(), f), a)?;
            Ok(m.masks.iter().zip(&w).map(|(x, y)| x.dot(y)).sum())
        };
        let e = emb(v.clone(), f);
        let (_, cache) = compute_masks(&e, &a).unwrap();
        let (dv, da) = compute_masks_backward(&e, &a, &cache, &w).unwrap();
        let nv = numeric_gradient(&mut v.data().to_vec(), FD_STEP, |x| {
            loss(&Tensor::new(vec![f * t, l], x.to_vec())?, &a)
        })
        .unwrap();
        assert!(relative_error(dv.data(), &nv) < 1e-6);
        let na = numeric_gradient(&mut a.data().to_vec(), FD_STEP, |x| {
            loss(&v, &Tensor::new(vec![c, l], x.to_vec())?)
        })
        .unwrap();
        assert!(relative_error(da.data(), &na) < 1e-6);
    }

    #[test]
    fn kmeans_gradient_with_fixed_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Tensor::from_fn(&[30, 3], |_| rng.random_range(-1.0..1.0));
        // Third center is far away and stays empty.
        let init = rows(&[&[0.5, 0.0, 0.0], &[-0.5, 0.0, 0.0], &[9.0, 9.0, 9.0]]);
        let trace = kmeans_refine(&v, &init, 1).unwrap();
        let w = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
        let (dv, dinit) = kmeans_backward(&v, &trace, &w);
        let nv = numeric_gradient(&mut v.data().to_vec(), 1e-6, |x| {
            let t = kmeans_refine(&Tensor::new(vec![30, 3], x.to_vec())?, &init, 1)?;
            Ok(t.centroids.dot(&w))
        })
        .unwrap();
        assert!(relative_error(dv.data(), &nv) < 1e-6);
        assert_eq!(dinit.row(2), w.row(2));
        assert!(dinit.row(0).iter().all(|&x| x == 0.0));
    }
}
