//! Dilated residual separator stack producing per-bin embeddings `V`.
//!
//! `H̃ (F×T)` → entry 1×1 conv → residual blocks → linear 1×1 head with
//! `F_conv·L` outputs, reshaped so that row `n = t·F_conv + f` of `V` is the
//! `L`-dimensional embedding of conv-feature bin `(t, f)`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::numcore::{
    Conv1d, ConvCache, DepthwiseConv1d, DiffLayer, GlobalLayerNorm, NormCache, ParamSet, Relu,
    Tensor,
};

/// `x + conv_out(relu(dw(relu(conv_in(gLN(x))))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub index: usize,
    pub norm: GlobalLayerNorm,
    pub conv_in: Conv1d,
    pub depthwise: DepthwiseConv1d,
    pub conv_out: Conv1d,
}

impl ResidualBlock {
    pub fn new(index: usize, dilation: usize) -> Self {
        let prefix = format!("embedder.block{index}");
        Self {
            index,
            norm: GlobalLayerNorm::new(&format!("{prefix}.norm")),
            conv_in: Conv1d::pointwise(&format!("{prefix}.in"), true),
            depthwise: DepthwiseConv1d::new(&format!("{prefix}.dw"), dilation),
            conv_out: Conv1d::pointwise(&format!("{prefix}.out"), true),
        }
    }

    pub fn dilation(&self) -> usize {
        self.depthwise.dilation
    }
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    norm: NormCache,
    conv_in: ConvCache,
    relu1: Tensor,
    dw: Tensor,
    relu2: Tensor,
    conv_out: ConvCache,
}

impl DiffLayer for ResidualBlock {
    type Cache = BlockCache;

    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (a, norm) = self.norm.forward(p, x)?;
        let (b, conv_in) = self.conv_in.forward(p, &a)?;
        let (c, relu1) = Relu.forward(p, &b)?;
        let (d, dw) = self.depthwise.forward(p, &c)?;
        let (e, relu2) = Relu.forward(p, &d)?;
        let (f, conv_out) = self.conv_out.forward(p, &e)?;
        let out = x.add(&f)?;
        Ok((
            out,
            BlockCache {
                norm,
                conv_in,
                relu1,
                dw,
                relu2,
                conv_out,
            },
        ))
    }

    fn backward(&self, p: &ParamSet, c: &BlockCache, dy: &Tensor, g: &mut ParamSet) -> Result<Tensor> {
        let de = self.conv_out.backward(p, &c.conv_out, dy, g)?;
        let dd = Relu.backward(p, &c.relu2, &de, g)?;
        let dc = self.depthwise.backward(p, &c.dw, &dd, g)?;
        let db = Relu.backward(p, &c.relu1, &dc, g)?;
        let da = self.conv_in.backward(p, &c.conv_in, &db, g)?;
        let dx = self.norm.backward(p, &c.norm, &da, g)?;
        dx.add(dy)
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = self.norm.param_names();
        v.extend(self.conv_in.param_names());
        v.extend(self.depthwise.param_names());
        v.extend(self.conv_out.param_names());
        v
    }
}

/// Entry conv, residual blocks and embedding head.
#[derive(Clone, Debug)]
pub struct SeparatorStack {
    pub entry: Conv1d,
    pub blocks: Vec<ResidualBlock>,
    pub head: Conv1d,
    pub conv_channels: usize,
    pub embed_dim: usize,
    pub depthwise_kernel: usize,
}

impl SeparatorStack {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            entry: Conv1d::pointwise("embedder.entry", true),
            blocks: cfg
                .dilations()
                .into_iter()
                .enumerate()
                .map(|(i, d)| ResidualBlock::new(i, d))
                .collect(),
            head: Conv1d::pointwise("embedder.head", true),
            conv_channels: cfg.conv_channels,
            embed_dim: cfg.embed_dim,
            depthwise_kernel: cfg.depthwise_kernel,
        }
    }

    /// Frames on either side of an output frame that can influence it.
    pub fn receptive_radius(&self) -> usize {
        let half = (self.depthwise_kernel - 1) / 2;
        self.blocks.iter().map(|b| b.dilation() * half).sum()
    }

    pub fn init_params(&self, cfg: &ModelConfig, rng: &mut impl Rng, params: &mut ParamSet) {
        let f = cfg.feature_dim();
        let b = cfg.bottleneck;
        let k = cfg.depthwise_kernel;
        params.insert("embedder.entry.weight", uniform(&[b, f, 1], f, rng));
        params.insert("embedder.entry.bias", uniform(&[b], f, rng));
        for blk in &self.blocks {
            params.insert(blk.norm.gain.clone(), Tensor::filled(&[b], 1.0));
            params.insert(blk.norm.offset.clone(), Tensor::zeros(&[b]));
            params.insert(blk.conv_in.weight.clone(), uniform(&[b, b, 1], b, rng));
            params.insert(blk.conv_in.bias.clone().unwrap(), uniform(&[b], b, rng));
            params.insert(blk.depthwise.weight.clone(), uniform(&[b, k], k, rng));
            params.insert(blk.depthwise.bias.clone(), uniform(&[b], k, rng));
            params.insert(blk.conv_out.weight.clone(), uniform(&[b, b, 1], b, rng));
            params.insert(blk.conv_out.bias.clone().unwrap(), uniform(&[b], b, rng));
        }
        let out = cfg.conv_channels * cfg.embed_dim;
        params.insert("embedder.head.weight", uniform(&[out, b, 1], b, rng));
        params.insert("embedder.head.bias", uniform(&[out], b, rng));
    }
}

#[derive(Clone, Debug)]
pub struct StackCache {
    entry: ConvCache,
    blocks: Vec<BlockCache>,
    head: ConvCache,
}

impl DiffLayer for SeparatorStack {
    type Cache = StackCache;

    /// Returns the raw head tensor, `(F_conv·L) × T`.
    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<(Tensor, StackCache)> {
        let (mut h, entry) = self.entry.forward(p, x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (next, c) = blk.forward(p, &h)?;
            if next.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation after residual block {}",
                    blk.index
                )));
            }
            blocks.push(c);
            h = next;
        }
        let (out, head) = self.head.forward(p, &h)?;
        Ok((out, StackCache { entry, blocks, head }))
    }

    fn backward(&self, p: &ParamSet, c: &StackCache, dy: &Tensor, g: &mut ParamSet) -> Result<Tensor> {
        let mut d = self.head.backward(p, &c.head, dy, g)?;
        for (blk, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            d = blk.backward(p, bc, &d, g)?;
        }
        self.entry.backward(p, &c.entry, &d, g)
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = self.entry.param_names();
        for b in &self.blocks {
            v.extend(b.param_names());
        }
        v.extend(self.head.param_names());
        v
    }
}

/// Embedding matrix `V`, `N × L` with `N = T·F_conv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub v: Tensor,
    pub conv_channels: usize,
}

impl EmbeddingMatrix {
    pub fn num_rows(&self) -> usize {
        self.v.rows()
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    pub fn num_frames(&self) -> usize {
        self.v.rows() / self.conv_channels
    }
}

/// Head tensor `(F_conv·L) × T` → `V` with `V[t·F_conv + f, l] = head[f·L + l, t]`.
pub fn head_to_embeddings(head: &Tensor, conv_channels: usize, embed_dim: usize) -> Result<EmbeddingMatrix> {
    head.expect_shape(&[conv_channels * embed_dim, head.cols()], "head_to_embeddings")?;
    let t = head.cols();
    let mut v = Tensor::zeros(&[t * conv_channels, embed_dim]);
    let hd = head.data();
    let vd = v.data_mut();
    for f in 0..conv_channels {
        for l in 0..embed_dim {
            let src = &hd[(f * embed_dim + l) * t..(f * embed_dim + l + 1) * t];
            for (ti, &val) in src.iter().enumerate() {
                vd[(ti * conv_channels + f) * embed_dim + l] = val;
            }
        }
    }
    Ok(EmbeddingMatrix { v, conv_channels })
}

/// Inverse layout of [`head_to_embeddings`], used to route `∂L/∂V` back.
pub fn embeddings_to_head(dv: &Tensor, conv_channels: usize) -> Result<Tensor> {
    let (n, l) = (dv.rows(), dv.cols());
    if n % conv_channels != 0 {
        return Err(Error::Shape {
            context: "embeddings_to_head",
            detail: format!("{n} rows is not a multiple of F_conv = {conv_channels}"),
        });
    }
    let t = n / conv_channels;
    let mut head = Tensor::zeros(&[conv_channels * l, t]);
    let hd = head.data_mut();
    for ti in 0..t {
        for f in 0..conv_channels {
            let row = dv.row(ti * conv_channels + f);
            for (li, &val) in row.iter().enumerate() {
                hd[(f * l + li) * t + ti] = val;
            }
        }
    }
    Ok(head)
}

/// `V = Embed(H̃)`.
pub fn embed(stack: &SeparatorStack, params: &ParamSet, gated: &Tensor) -> Result<(EmbeddingMatrix, StackCache)> {
    let (head, cache) = stack.forward(params, gated)?;
    Ok((head_to_embeddings(&head, stack.conv_channels, stack.embed_dim)?, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig, seed: u64) -> (SeparatorStack, ParamSet) {
        let stack = SeparatorStack::new(cfg);
        let mut p = ParamSet::new();
        stack.init_params(cfg, &mut ChaCha8Rng::seed_from_u64(seed), &mut p);
        (stack, p)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            conv_channels: 6,
            bottleneck: 5,
            blocks_per_repeat: 3,
            repeats: 1,
            se_reduction: 4,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn paper_scale_shape() {
        let cfg = ModelConfig::paper();
        let (stack, p) = setup(&cfg, 0);
        let x = Tensor::from_fn(&[267, 50], |i| ((i % 13) as f64) * 0.01);
        let (v, _) = embed(&stack, &p, &x).unwrap();
        assert_eq!(v.v.shape(), &[12800, 20]);
        assert_eq!(v.num_frames(), 50);
    }

    #[test]
    fn zero_head_gives_zero_embeddings() {
        let cfg = small();
        let (stack, mut p) = setup(&cfg, 1);
        for name in ["embedder.head.weight", "embedder.head.bias"] {
            let t = p.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let (v, _) = embed(&stack, &p, &Tensor::zeros(&[cfg.feature_dim(), 9])).unwrap();
        assert!(v.v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_blocks_reduce_to_head_after_entry() {
        let cfg = small();
        let (stack, mut p) = setup(&cfg, 2);
        for blk in &stack.blocks {
            for name in blk.conv_out.param_names() {
                let t = p.get_mut(&name).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[cfg.feature_dim(), 12], |_| rng.random_range(-1.0..1.0));
        let (full, _) = stack.forward(&p, &x).unwrap();
        let (e, _) = stack.entry.forward(&p, &x).unwrap();
        let (direct, _) = stack.head.forward(&p, &e).unwrap();
        assert_eq!(full, direct);
    }

    #[test]
    fn layout_round_trip() {
        let head = Tensor::from_fn(&[6 * 20, 4], |i| i as f64);
        let v = head_to_embeddings(&head, 6, 20).unwrap();
        // row n = t·F + f, col l  ←  head[f·L + l, t]
        assert_eq!(v.v.at(2 * 6 + 3, 7), head.at(3 * 20 + 7, 2));
        assert_eq!(embeddings_to_head(&v.v, 6).unwrap(), head);
    }

    #[test]
    fn receptive_field_of_depthwise_chain() {
        // gLN couples frames globally, so locality is checked on the temporal
        // path alone: an impulse through every block's depthwise conv.
        let cfg = small();
        let stack = SeparatorStack::new(&cfg);
        let radius = stack.receptive_radius();
        assert_eq!(radius, 1 + 2 + 4);
        let mut p = ParamSet::new();
        for blk in &stack.blocks {
            p.insert(blk.depthwise.weight.clone(), Tensor::filled(&[1, 3], 1.0));
            p.insert(blk.depthwise.bias.clone(), Tensor::zeros(&[1]));
        }
        let (t, k) = (40, 20);
        let mut x = Tensor::zeros(&[1, t]);
        x.set(0, k, 1.0);
        for blk in &stack.blocks {
            x = blk.depthwise.forward(&p, &x).unwrap().0;
        }
        for ti in 0..t {
            assert_eq!(x.at(0, ti) != 0.0, ti.abs_diff(k) <= radius, "frame {ti}");
        }
    }
}
