//! Dense row-major tensors and named parameter collections.

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Row-major dense array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension {
                    context: "Tensor::from_rows",
                    axis: 1,
                    expected: cols,
                    got: rows[i].len(),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Checks the shape exactly, reporting the first offending axis.
    pub fn expect_shape(&self, expected: &[usize], context: &'static str) -> Result<()> {
        if self.shape.len() != expected.len() {
            return Err(Error::Shape {
                context,
                detail: format!("expected rank {}, got shape {:?}", expected.len(), self.shape),
            });
        }
        for (axis, (&e, &g)) in expected.iter().zip(&self.shape).enumerate() {
            if e != g {
                return Err(Error::Dimension {
                    context,
                    axis,
                    expected: e,
                    got: g,
                });
            }
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "non-finite value {} at flat index {i} in {what}",
                self.data[i]
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        other.expect_shape(&self.shape, "Tensor::add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        other.expect_shape(&self.shape, "Tensor::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(Error::Shape {
                context: "Tensor::matmul",
                detail: format!("operands must be 2-D, got {:?} and {:?}", self.shape, other.shape),
            });
        }
        if self.cols() != other.rows() {
            return Err(Error::Dimension {
                context: "Tensor::matmul",
                axis: 0,
                expected: self.cols(),
                got: other.rows(),
            });
        }
        let (m, n) = (self.rows(), other.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(&self.data, m, self.cols()),
            MatRef::new(&other.data, other.rows(), n),
            &mut out,
            false,
        );
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }
}

/// Borrowed row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical_rows(&self) -> usize {
        if self.transposed {
            self.cols
        } else {
            self.rows
        }
    }

    fn logical_cols(&self) -> usize {
        if self.transposed {
            self.rows
        } else {
            self.cols
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (=|+=) a · b` with `out` row-major of shape `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = (a.logical_rows(), a.logical_cols());
    let n = b.logical_cols();
    assert_eq!(k, b.logical_rows(), "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe in-bounds views of `a.data`, `b.data`
    // (checked via the logical dimensions) and of the dense row-major `out`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Ordered collection of named tensors; used for parameters, gradients and
/// optimizer moments alike.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Adds `other` entrywise into `self`; shapes must agree.
    pub fn accumulate(&mut self, other: &ParamSet) -> Result<()> {
        for (name, g) in other.iter() {
            self.get_mut(name)?.add_assign(g)?;
        }
        Ok(())
    }

    /// Adds `delta` into the tensor called `name`.
    pub fn add_to(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.len() != delta.len() {
            return Err(Error::Shape {
                context: "ParamSet::add_to",
                detail: format!("`{name}` has {} values, delta has {}", t.len(), delta.len()),
            });
        }
        for (a, b) in t.data_mut().iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_all(&mut self, alpha: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64).sin());
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.at(i, k) * b.at(k, j)).sum();
                assert!((c.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposed_views() {
        let a = Tensor::from_fn(&[4, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4, 2], |i| 1.0 + i as f64);
        let mut out = vec![0.0; 6];
        gemm(
            MatRef::new(a.data(), 4, 3).t(),
            MatRef::new(b.data(), 4, 2),
            &mut out,
            false,
        );
        let want = a.transpose().matmul(&b).unwrap();
        assert_eq!(out, want.data());
    }

    #[test]
    fn expect_shape_names_axis() {
        let t = Tensor::zeros(&[2, 5]);
        match t.expect_shape(&[2, 4], "test") {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.ensure_finite("t").is_err());
    }
}
