//! Differentiable layers with hand-derived backward passes.
//!
//! Every layer reads its parameters by name from a [`ParamSet`] and writes
//! gradients into a second `ParamSet` of identical layout, so a model is a
//! plain list of layer descriptors plus one parameter store.

use super::tensor::{gemm, MatRef, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Forward/backward contract shared by every trainable building block.
pub trait DiffLayer {
    type Cache;

    fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    fn backward(
        &self,
        params: &ParamSet,
        cache: &Self::Cache,
        upstream: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor>;

    /// Names of the parameters this layer reads.
    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }
}

fn expect_2d(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape {
            context,
            detail: format!("expected 2-D tensor, got shape {:?}", t.shape()),
        });
    }
    Ok((t.rows(), t.cols()))
}

// ---------------------------------------------------------------------------
// 1-D convolution (cross-correlation)
// ---------------------------------------------------------------------------

/// Geometry of a strided, dilated, zero-padded 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry {
        stride: 1,
        dilation: 1,
        padding: 0,
    };

    pub fn output_len(&self, len: usize, kernel: usize) -> Result<usize> {
        if kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "conv1d needs kernel, stride, dilation >= 1 (got {kernel}, {}, {})",
                self.stride, self.dilation
            )));
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(Error::TooShort {
                got: len,
                min: span.saturating_sub(2 * self.padding),
            });
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// State kept by [`conv1d_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    /// Unfolded input, `(in·k) × T'`.
    columns: Vec<f64>,
    kernels: Tensor,
    in_channels: usize,
    in_len: usize,
    out_len: usize,
    geometry: ConvGeometry,
}

fn im2col(input: &Tensor, k: usize, g: ConvGeometry, out_len: usize) -> Vec<f64> {
    let (cin, len) = (input.rows(), input.cols());
    let x = input.data();
    let mut cols = vec![0.0; cin * k * out_len];
    for c in 0..cin {
        for j in 0..k {
            let row = &mut cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * g.stride + j * g.dilation) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    *slot = x[c * len + pos as usize];
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, len: usize, k: usize, g: ConvGeometry, out_len: usize) -> Tensor {
    let mut out = vec![0.0; cin * len];
    for c in 0..cin {
        for j in 0..k {
            let row = &cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * g.stride + j * g.dilation) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    out[c * len + pos as usize] += v;
                }
            }
        }
    }
    Tensor::new(vec![cin, len], out).expect("col2im shape")
}

/// Multi-channel 1-D cross-correlation.
///
/// `input` is `in × T`, `kernels` is `out × in × k`; the result is `out × T'`
/// with `T' = floor((T + 2p − d(k−1) − 1)/s) + 1`.
pub fn conv1d_forward(
    input: &Tensor,
    kernels: &Tensor,
    geometry: ConvGeometry,
) -> Result<(Tensor, ConvCache)> {
    let (cin, len) = expect_2d(input, "conv1d_forward input")?;
    if kernels.ndim() != 3 {
        return Err(Error::Shape {
            context: "conv1d_forward kernels",
            detail: format!("expected out×in×k, got {:?}", kernels.shape()),
        });
    }
    let (cout, kin, k) = (kernels.dim(0), kernels.dim(1), kernels.dim(2));
    if kin != cin {
        return Err(Error::Dimension {
            context: "conv1d_forward",
            axis: 0,
            expected: kin,
            got: cin,
        });
    }
    let out_len = geometry.output_len(len, k)?;
    let columns = im2col(input, k, geometry, out_len);
    let mut out = vec![0.0; cout * out_len];
    gemm(
        MatRef::new(kernels.data(), cout, cin * k),
        MatRef::new(&columns, cin * k, out_len),
        &mut out,
        false,
    );
    let cache = ConvCache {
        columns,
        kernels: kernels.clone(),
        in_channels: cin,
        in_len: len,
        out_len,
        geometry,
    };
    Ok((Tensor::new(vec![cout, out_len], out)?, cache))
}

/// Gradients of [`conv1d_forward`] with respect to its input and kernels.
pub fn conv1d_backward(cache: &ConvCache, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let (cout, k) = (cache.kernels.dim(0), cache.kernels.dim(2));
    upstream.expect_shape(&[cout, cache.out_len], "conv1d_backward upstream")?;
    let ck = cache.in_channels * k;
    let mut grad_kernels = vec![0.0; cout * ck];
    gemm(
        MatRef::new(upstream.data(), cout, cache.out_len),
        MatRef::new(&cache.columns, ck, cache.out_len).t(),
        &mut grad_kernels,
        false,
    );
    let mut grad_cols = vec![0.0; ck * cache.out_len];
    gemm(
        MatRef::new(cache.kernels.data(), cout, ck).t(),
        MatRef::new(upstream.data(), cout, cache.out_len),
        &mut grad_cols,
        false,
    );
    let grad_input = col2im(
        &grad_cols,
        cache.in_channels,
        cache.in_len,
        k,
        cache.geometry,
        cache.out_len,
    );
    Ok((
        grad_input,
        Tensor::new(cache.kernels.shape().to_vec(), grad_kernels)?,
    ))
}

/// Convolution layer with named kernel and optional bias parameters.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: String,
    pub bias: Option<String>,
    pub geometry: ConvGeometry,
}

impl Conv1d {
    /// Pointwise (1×1) convolution.
    pub fn pointwise(prefix: &str, with_bias: bool) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: with_bias.then(|| format!("{prefix}.bias")),
            geometry: ConvGeometry::UNIT,
        }
    }
}

impl DiffLayer for Conv1d {
    type Cache = ConvCache;

    fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, ConvCache)> {
        let (mut out, cache) = conv1d_forward(input, params.get(&self.weight)?, self.geometry)?;
        if let Some(b) = &self.bias {
            let bias = params.get(b)?;
            bias.expect_shape(&[out.rows()], "Conv1d bias")?;
            for (r, &bv) in bias.data().iter().enumerate() {
                for v in out.row_mut(r) {
                    *v += bv;
                }
            }
        }
        Ok((out, cache))
    }

    fn backward(
        &self,
        _params: &ParamSet,
        cache: &ConvCache,
        upstream: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor> {
        let (gi, gk) = conv1d_backward(cache, upstream)?;
        grads.add_to(&self.weight, gk.data())?;
        if let Some(b) = &self.bias {
            let gb: Vec<f64> = (0..upstream.rows()).map(|r| upstream.row(r).iter().sum()).collect();
            grads.add_to(b, &gb)?;
        }
        Ok(gi)
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }
}

// ---------------------------------------------------------------------------
// Depthwise dilated convolution with "same" zero padding
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    /// `C × k` kernels, one per channel.
    pub weight: String,
    /// `C` biases.
    pub bias: String,
    pub dilation: usize,
}

impl DepthwiseConv1d {
    pub fn new(prefix: &str, dilation: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            dilation,
        }
    }
}

impl DiffLayer for DepthwiseConv1d {
    type Cache = Tensor;

    fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c, len) = expect_2d(input, "DepthwiseConv1d input")?;
        let w = params.get(&self.weight)?;
        let b = params.get(&self.bias)?;
        let k = w.cols();
        w.expect_shape(&[c, k], "DepthwiseConv1d weight")?;
        b.expect_shape(&[c], "DepthwiseConv1d bias")?;
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel must be odd for same padding, got {k}")));
        }
        let half = (self.dilation * (k - 1) / 2) as isize;
        let x = input.data();
        let mut out = vec![0.0; c * len];
        for ch in 0..c {
            let xr = &x[ch * len..(ch + 1) * len];
            let wr = w.row(ch);
            let orow = &mut out[ch * len..(ch + 1) * len];
            orow.fill(b.data()[ch]);
            for (j, &wj) in wr.iter().enumerate() {
                let shift = (j * self.dilation) as isize - half;
                let lo = (-shift).max(0) as usize;
                let hi = ((len as isize) - shift).min(len as isize).max(0) as usize;
                for t in lo..hi {
                    orow[t] += wj * xr[(t as isize + shift) as usize];
                }
            }
        }
        Ok((Tensor::new(vec![c, len], out)?, input.clone()))
    }

    fn backward(
        &self,
        params: &ParamSet,
        input: &Tensor,
        upstream: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor> {
        let (c, len) = (input.rows(), input.cols());
        upstream.expect_shape(&[c, len], "DepthwiseConv1d upstream")?;
        let w = params.get(&self.weight)?;
        let k = w.cols();
        let half = (self.dilation * (k - 1) / 2) as isize;
        let x = input.data();
        let dy = upstream.data();
        let mut dx = vec![0.0; c * len];
        let mut dw = vec![0.0; c * k];
        let mut db = vec![0.0; c];
        for ch in 0..c {
            let xr = &x[ch * len..(ch + 1) * len];
            let dyr = &dy[ch * len..(ch + 1) * len];
            let dxr = &mut dx[ch * len..(ch + 1) * len];
            db[ch] = dyr.iter().sum();
            for (j, &wj) in w.row(ch).iter().enumerate() {
                let shift = (j * self.dilation) as isize - half;
                let lo = (-shift).max(0) as usize;
                let hi = ((len as isize) - shift).min(len as isize).max(0) as usize;
                let mut acc = 0.0;
                for t in lo..hi {
                    let src = (t as isize + shift) as usize;
                    acc += dyr[t] * xr[src];
                    dxr[src] += wj * dyr[t];
                }
                dw[ch * k + j] = acc;
            }
        }
        grads.add_to(&self.weight, &dw)?;
        grads.add_to(&self.bias, &db)?;
        Tensor::new(vec![c, len], dx)
    }

    fn param_names(&self) -> Vec<String> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

// ---------------------------------------------------------------------------
// Global layer normalization over (channel, time)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GlobalLayerNorm {
    pub gain: String,
    pub offset: String,
    pub eps: f64,
}

impl GlobalLayerNorm {
    pub fn new(prefix: &str) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            offset: format!("{prefix}.offset"),
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormCache {
    normalized: Tensor,
    inv_std: f64,
}

impl DiffLayer for GlobalLayerNorm {
    type Cache = NormCache;

    fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, NormCache)> {
        let (c, len) = expect_2d(input, "GlobalLayerNorm input")?;
        let gain = params.get(&self.gain)?;
        let offset = params.get(&self.offset)?;
        gain.expect_shape(&[c], "GlobalLayerNorm gain")?;
        offset.expect_shape(&[c], "GlobalLayerNorm offset")?;
        let n = (c * len) as f64;
        let mean = input.sum() / n;
        let var = input.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let normalized = input.map(|v| (v - mean) * inv_std);
        let mut out = normalized.clone();
        for ch in 0..c {
            let (g, o) = (gain.data()[ch], offset.data()[ch]);
            for v in out.row_mut(ch) {
                *v = g * *v + o;
            }
        }
        Ok((out, NormCache { normalized, inv_std }))
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &NormCache,
        upstream: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor> {
        let xhat = &cache.normalized;
        let (c, len) = (xhat.rows(), xhat.cols());
        upstream.expect_shape(&[c, len], "GlobalLayerNorm upstream")?;
        let gain = params.get(&self.gain)?;
        let mut dgain = vec![0.0; c];
        let mut doffset = vec![0.0; c];
        let mut dxhat = vec![0.0; c * len];
        for ch in 0..c {
            let g = gain.data()[ch];
            for t in 0..len {
                let i = ch * len + t;
                let dy = upstream.data()[i];
                dgain[ch] += dy * xhat.data()[i];
                doffset[ch] += dy;
                dxhat[i] = g * dy;
            }
        }
        let n = (c * len) as f64;
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xhat.data()).map(|(a, b)| a * b).sum::<f64>() / n;
        let dx: Vec<f64> = dxhat
            .iter()
            .zip(xhat.data())
            .map(|(d, xh)| cache.inv_std * (d - mean_d - xh * mean_dx))
            .collect();
        grads.add_to(&self.gain, &dgain)?;
        grads.add_to(&self.offset, &doffset)?;
        Tensor::new(vec![c, len], dx)
    }

    fn param_names(&self) -> Vec<String> {
        vec![self.gain.clone(), self.offset.clone()]
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct Relu;

impl DiffLayer for Relu {
    type Cache = Tensor;

    fn forward(&self, _: &ParamSet, input: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((input.map(|v| v.max(0.0)), input.clone()))
    }

    fn backward(&self, _: &ParamSet, input: &Tensor, upstream: &Tensor, _: &mut ParamSet) -> Result<Tensor> {
        upstream.expect_shape(input.shape(), "Relu upstream")?;
        let data = input
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::new(input.shape().to_vec(), data)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sigmoid;

impl DiffLayer for Sigmoid {
    type Cache = Tensor;

    fn forward(&self, _: &ParamSet, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = input.map(sigmoid);
        Ok((out.clone(), out))
    }

    fn backward(&self, _: &ParamSet, out: &Tensor, upstream: &Tensor, _: &mut ParamSet) -> Result<Tensor> {
        upstream.expect_shape(out.shape(), "Sigmoid upstream")?;
        let data = out
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        Tensor::new(out.shape().to_vec(), data)
    }
}

/// Softmax over one axis of a 2-D tensor.
#[derive(Clone, Copy, Debug)]
pub struct Softmax {
    pub axis: usize,
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    // (lane count, lane length, stride within lane)
    let (r, c) = (shape[0], shape[1]);
    if axis == 0 {
        (c, r, c)
    } else {
        (r, c, 1)
    }
}

fn lane_start(shape: &[usize], axis: usize, lane: usize) -> usize {
    if axis == 0 {
        lane
    } else {
        lane * shape[1]
    }
}

impl DiffLayer for Softmax {
    type Cache = Tensor;

    fn forward(&self, _: &ParamSet, input: &Tensor) -> Result<(Tensor, Tensor)> {
        expect_2d(input, "Softmax input")?;
        if self.axis > 1 {
            return Err(Error::Config(format!("softmax axis {} out of range", self.axis)));
        }
        let shape = input.shape();
        let (count, n, stride) = lanes(shape, self.axis);
        let mut out = input.clone();
        let x = input.data();
        let o = out.data_mut();
        for lane in 0..count {
            let s = lane_start(shape, self.axis, lane);
            let m = (0..n).map(|i| x[s + i * stride]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                let e = (x[s + i * stride] - m).exp();
                o[s + i * stride] = e;
                z += e;
            }
            for i in 0..n {
                o[s + i * stride] /= z;
            }
        }
        Ok((out.clone(), out))
    }

    fn backward(&self, _: &ParamSet, out: &Tensor, upstream: &Tensor, _: &mut ParamSet) -> Result<Tensor> {
        upstream.expect_shape(out.shape(), "Softmax upstream")?;
        let shape = out.shape();
        let (count, n, stride) = lanes(shape, self.axis);
        let y = out.data();
        let g = upstream.data();
        let mut dx = vec![0.0; y.len()];
        for lane in 0..count {
            let s = lane_start(shape, self.axis, lane);
            let inner: f64 = (0..n).map(|i| y[s + i * stride] * g[s + i * stride]).sum();
            for i in 0..n {
                let j = s + i * stride;
                dx[j] = y[j] * (g[j] - inner);
            }
        }
        Tensor::new(shape.to_vec(), dx)
    }
}

/// Mean over one axis of a 2-D tensor, producing a 1-D tensor.
#[derive(Clone, Copy, Debug)]
pub struct MeanAxis {
    pub axis: usize,
}

impl DiffLayer for MeanAxis {
    type Cache = Vec<usize>;

    fn forward(&self, _: &ParamSet, input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (r, c) = expect_2d(input, "MeanAxis input")?;
        let shape = input.shape();
        let (count, n, stride) = lanes(shape, self.axis);
        if n == 0 {
            return Err(Error::Empty("mean over an empty axis"));
        }
        let x = input.data();
        let out: Vec<f64> = (0..count)
            .map(|lane| {
                let s = lane_start(shape, self.axis, lane);
                (0..n).map(|i| x[s + i * stride]).sum::<f64>() / n as f64
            })
            .collect();
        Ok((Tensor::new(vec![count], out)?, vec![r, c]))
    }

    fn backward(&self, _: &ParamSet, shape: &Vec<usize>, upstream: &Tensor, _: &mut ParamSet) -> Result<Tensor> {
        let (count, n, stride) = lanes(shape, self.axis);
        upstream.expect_shape(&[count], "MeanAxis upstream")?;
        let mut dx = vec![0.0; shape[0] * shape[1]];
        for lane in 0..count {
            let s = lane_start(shape, self.axis, lane);
            let g = upstream.data()[lane] / n as f64;
            for i in 0..n {
                dx[s + i * stride] = g;
            }
        }
        Tensor::new(shape.clone(), dx)
    }
}

/// Bias-free dense map `y = W·x` on a vector (or on each column of a matrix).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
}

impl DiffLayer for Linear {
    type Cache = Tensor;

    fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = params.get(&self.weight)?;
        let as_matrix = match input.ndim() {
            1 => input.clone().reshape(vec![input.len(), 1])?,
            2 => input.clone(),
            _ => {
                return Err(Error::Shape {
                    context: "Linear input",
                    detail: format!("expected 1-D or 2-D, got {:?}", input.shape()),
                })
            }
        };
        let y = w.matmul(&as_matrix)?;
        let y = if input.ndim() == 1 {
            let n = y.rows();
            y.reshape(vec![n])?
        } else {
            y
        };
        Ok((y, input.clone()))
    }

    fn backward(
        &self,
        params: &ParamSet,
        input: &Tensor,
        upstream: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor> {
        let w = params.get(&self.weight)?;
        let cols = if input.ndim() == 1 { 1 } else { input.cols() };
        let (m, k) = (w.rows(), w.cols());
        if upstream.len() != m * cols {
            return Err(Error::Shape {
                context: "Linear upstream",
                detail: format!("expected {m}×{cols}, got {:?}", upstream.shape()),
            });
        }
        let mut dw = vec![0.0; m * k];
        gemm(
            MatRef::new(upstream.data(), m, cols),
            MatRef::new(input.data(), k, cols).t(),
            &mut dw,
            false,
        );
        let mut dx = vec![0.0; k * cols];
        gemm(
            MatRef::new(w.data(), m, k).t(),
            MatRef::new(upstream.data(), m, cols),
            &mut dx,
            false,
        );
        grads.add_to(&self.weight, &dw)?;
        Tensor::new(input.shape().to_vec(), dx)
    }

    fn param_names(&self) -> Vec<String> {
        vec![self.weight.clone()]
    }
}

/// Gradients of `C = A·B` for plain (non-parameter) operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    upstream.expect_shape(&[a.rows(), b.cols()], "matmul_backward upstream")?;
    let da = upstream.matmul(&b.transpose())?;
    let db = a.transpose().matmul(upstream)?;
    Ok((da, db))
}
