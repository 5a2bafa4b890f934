//! The full separator: encoder → embedder → attractors → masks → decoder,
//! with a hand-written backward pass through every stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attractor::{self, compute_masks, compute_masks_backward, kmeans_backward, select_attractors, AttractorSet, MaskCache, BANK};
use crate::config::ModelConfig;
use crate::counter::{gde_count_scaled, rank_count, GdeResult, DEFAULT_GDE_SCALE, DEFAULT_RANK_THRESHOLD};
use crate::decoder::{self, apply_masks, pit_loss_grad, synthesize, synthesize_backward, LossReport, MaskTensor};
use crate::dsp::{synthesis_len, Waveform};
use crate::embedder::{embed, embeddings_to_head, EmbeddingMatrix, SeparatorStack, StackCache};
use crate::encoder::{self, encode, encode_backward, Encoded, EncoderCache};
use crate::error::{Error, Result};
use crate::numcore::{DiffLayer, ParamSet, Tensor};

/// Stream ids for the initialization sub-seeds.
const INIT_STREAMS: [(&str, u64); 4] = [("encoder", 1), ("embedder", 2), ("attractor", 3), ("decoder", 4)];

/// How the number of sources is chosen at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum CountMode {
    /// Count supplied by the caller.
    Oracle { count: usize },
    Gde { scale: f64 },
    Rank { threshold: f64 },
}

impl CountMode {
    pub fn gde() -> Self {
        CountMode::Gde {
            scale: DEFAULT_GDE_SCALE,
        }
    }

    pub fn rank() -> Self {
        CountMode::Rank {
            threshold: DEFAULT_RANK_THRESHOLD,
        }
    }
}

/// Model configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Separator {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    stack: SeparatorStack,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoded: Encoded,
    pub embeddings: EmbeddingMatrix,
    pub attractors: AttractorSet,
    pub masks: MaskTensor,
    /// One waveform per source, fitted to the input length.
    pub estimates: Vec<Waveform>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    encoder: EncoderCache,
    stack: StackCache,
    mask: MaskCache,
    gated_conv: Tensor,
    masked: Vec<Tensor>,
    input_len: usize,
}

/// Result of [`Separator::separate`].
#[derive(Clone, Debug)]
pub struct Separation {
    pub estimates: Vec<Waveform>,
    pub count: usize,
    /// Counter diagnostics when the count was estimated by GDE.
    pub gde: Option<GdeResult>,
    pub warnings: Vec<String>,
}

impl Separator {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stack = SeparatorStack::new(&cfg);
        let mut params = ParamSet::new();
        let rng = |name: &str| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(INIT_STREAMS.iter().find(|s| s.0 == name).map(|s| s.1).unwrap_or(0));
            r
        };
        encoder::init_params(&cfg, &mut rng("encoder"), &mut params);
        stack.init_params(&cfg, &mut rng("embedder"), &mut params);
        attractor::init_params(&cfg, &mut rng("attractor"), &mut params);
        decoder::init_params(&cfg, &mut rng("decoder"), &mut params);
        Ok(Self { cfg, params, stack })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(cfg.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            stack: reference.stack,
            cfg,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Encoder and embedder only.
    pub fn embeddings(&self, x: &Waveform) -> Result<EmbeddingMatrix> {
        let (enc, _) = encode(&self.cfg, &self.params, x)?;
        Ok(embed(&self.stack, &self.params, &enc.gated)?.0)
    }

    /// Forward pass for a known number of sources.
    pub fn forward(&self, x: &Waveform, count: usize) -> Result<(ForwardOutput, ForwardCache)> {
        let (encoded, enc_cache) = encode(&self.cfg, &self.params, x)?;
        let (embeddings, stack_cache) = embed(&self.stack, &self.params, &encoded.gated)?;
        self.finish(x.len(), encoded, enc_cache, embeddings, stack_cache, count)
    }

    fn finish(
        &self,
        input_len: usize,
        encoded: Encoded,
        enc_cache: EncoderCache,
        embeddings: EmbeddingMatrix,
        stack_cache: StackCache,
        count: usize,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        let bank = self.params.get(BANK)?;
        let attractors = select_attractors(&embeddings.v, count, bank, self.cfg.kmeans_iters)?;
        let (masks, mask_cache) = compute_masks(&embeddings, &attractors.centroids)?;
        let gated_conv = encoded.gated_conv();
        let masked = apply_masks(&gated_conv, &masks)?;
        let estimates = masked
            .iter()
            .map(|m| Ok(synthesize(&self.params, m)?.fit_to(input_len)))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            ForwardOutput {
                encoded,
                embeddings,
                attractors,
                masks,
                estimates,
            },
            ForwardCache {
                encoder: enc_cache,
                stack: stack_cache,
                mask: mask_cache,
                gated_conv,
                masked,
                input_len,
            },
        ))
    }

    /// Gradients of a scalar loss given `∂L/∂estimate_i` (input length each).
    pub fn backward(&self, out: &ForwardOutput, cache: &ForwardCache, d_estimates: &[Vec<f64>]) -> Result<ParamSet> {
        let mut grads = self.params.zeros_like();
        self.backward_into(out, cache, d_estimates, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(
        &self,
        out: &ForwardOutput,
        cache: &ForwardCache,
        d_estimates: &[Vec<f64>],
        grads: &mut ParamSet,
    ) -> Result<()> {
        let c = out.masks.num_sources();
        if d_estimates.len() != c {
            return Err(Error::CountMismatch {
                sources: c,
                estimates: d_estimates.len(),
            });
        }
        let h = &cache.gated_conv;
        let t = h.cols();
        let syn_len = synthesis_len(t);
        let mut d_h = Tensor::zeros(h.shape());
        let mut d_masks = Vec::with_capacity(c);
        for (i, d_est) in d_estimates.iter().enumerate() {
            if d_est.len() != cache.input_len {
                return Err(Error::Dimension {
                    context: "Separator::backward",
                    axis: 0,
                    expected: cache.input_len,
                    got: d_est.len(),
                });
            }
            let mut d_syn = vec![0.0; syn_len];
            let n = syn_len.min(d_est.len());
            d_syn[..n].copy_from_slice(&d_est[..n]);
            let d_masked = synthesize_backward(&self.params, &cache.masked[i], &d_syn, grads)?;
            let m = &out.masks.masks[i];
            let dm = Tensor::from_fn(h.shape(), |j| d_masked.data()[j] * h.data()[j]);
            for (j, slot) in d_h.data_mut().iter_mut().enumerate() {
                *slot += d_masked.data()[j] * m.data()[j];
            }
            d_masks.push(dm);
        }
        let emb = &out.embeddings;
        let a = &out.attractors;
        let (mut dv, da) = compute_masks_backward(emb, &a.centroids, &cache.mask, &d_masks)?;
        let (dv_km, d_init) = kmeans_backward(&emb.v, &a.trace, &da);
        dv.add_assign(&dv_km)?;
        let l = self.cfg.embed_dim;
        let mut d_bank = vec![0.0; self.cfg.num_centers * l];
        for (row, &k) in a.subset.iter().enumerate() {
            for (j, g) in d_init.row(row).iter().enumerate() {
                d_bank[k * l + j] += g;
            }
        }
        grads.add_to(BANK, &d_bank)?;
        let d_head = embeddings_to_head(&dv, self.cfg.conv_channels)?;
        let mut d_gated = self.stack.backward(&self.params, &cache.stack, &d_head, grads)?;
        for (slot, g) in d_gated.data_mut().iter_mut().zip(d_h.data()) {
            *slot += g;
        }
        encode_backward(&self.cfg, &self.params, &cache.encoder, &d_gated, grads)
    }

    /// PIT loss on one mixture and its parameter gradients.
    pub fn loss_and_grad(&self, mixture: &Waveform, sources: &[Waveform]) -> Result<(LossReport, ParamSet)> {
        let mut grads = self.params.zeros_like();
        let rep = self.accumulate_grad(mixture, sources, 1.0, &mut grads)?;
        Ok((rep, grads))
    }

    /// Adds `weight · ∂loss/∂θ` into `grads`.
    pub fn accumulate_grad(&self, mixture: &Waveform, sources: &[Waveform], weight: f64, grads: &mut ParamSet) -> Result<LossReport> {
        let (out, cache) = self.forward(mixture, sources.len())?;
        let (rep, mut d) = pit_loss_grad(sources, &out.estimates)?;
        for g in d.iter_mut() {
            for v in g.iter_mut() {
                *v *= weight;
            }
        }
        self.backward_into(&out, &cache, &d, grads)?;
        Ok(rep)
    }

    /// PIT loss only.
    pub fn loss(&self, mixture: &Waveform, sources: &[Waveform]) -> Result<LossReport> {
        let (out, _) = self.forward(mixture, sources.len())?;
        decoder::pit_loss(sources, &out.estimates)
    }

    /// Separates a mixture, counting the sources unless told how many.
    pub fn separate(&self, x: &Waveform, mode: CountMode) -> Result<Separation> {
        let (encoded, enc_cache) = encode(&self.cfg, &self.params, x)?;
        let (embeddings, stack_cache) = embed(&self.stack, &self.params, &encoded.gated)?;
        let mut warnings = Vec::new();
        let mut gde = None;
        let raw = match mode {
            CountMode::Oracle { count } => count,
            CountMode::Gde { scale } => {
                let res = gde_count_scaled(&embeddings.v, scale)?;
                if res.saturated {
                    warnings.push(format!(
                        "GDE saturated: no non-positive disk statistic, count set to {}",
                        res.estimate
                    ));
                }
                let est = res.estimate;
                gde = Some(res);
                est
            }
            CountMode::Rank { threshold } => rank_count(&embeddings.v, threshold)?,
        };
        if raw == 0 {
            return Err(Error::NoSource);
        }
        let k = self.cfg.num_centers;
        let count = if raw > k {
            if matches!(mode, CountMode::Oracle { .. }) {
                return Err(Error::Capacity {
                    requested: raw,
                    capacity: k,
                });
            }
            warnings.push(format!("estimated {raw} sources, capped at {k} attractor centers"));
            k
        } else {
            raw
        };
        let (out, _) = self.finish(x.len(), encoded, enc_cache, embeddings, stack_cache, count)?;
        Ok(Separation {
            estimates: out.estimates,
            count,
            gde,
            warnings,
        })
    }
}
