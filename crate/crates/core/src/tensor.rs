//! Dense NCHW feature maps in double precision.

use crate::error::{Error, Result};

/// A batch of feature maps stored row-major as `(batch, channels, height, width)`.
///
/// Flattened vectors are carried as `(batch, width, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::dimension(
                "feature map",
                "all dimensions positive",
                shape,
            ));
        }
        if data.len() != len {
            return Err(Error::dimension("feature map buffer", len, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per sample.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_shape(&self, expected: [usize; 4], context: &'static str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::dimension(context, expected, self.shape));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &FeatureMap, context: &'static str) -> Result<()> {
        self.ensure_shape(other.shape, context)
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        self.ensure_same_shape(other, "element-wise add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stacks two maps of identical shape along the batch axis.
    pub fn stack_batch(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
        a.ensure_same_shape(b, "batch stacking")?;
        let mut data = Vec::with_capacity(a.data.len() * 2);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        let [n, c, h, w] = a.shape;
        Ok(FeatureMap {
            shape: [2 * n, c, h, w],
            data,
        })
    }

    /// Inverse of [`FeatureMap::stack_batch`].
    pub fn split_batch(self) -> Result<(FeatureMap, FeatureMap)> {
        let [n, c, h, w] = self.shape;
        if n % 2 != 0 {
            return Err(Error::dimension("batch split", "even batch", n));
        }
        let mut data = self.data;
        let tail = data.split_off(data.len() / 2);
        let shape = [n / 2, c, h, w];
        Ok((FeatureMap { shape, data }, FeatureMap { shape, data: tail }))
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(mut self, shape: [usize; 4]) -> Result<FeatureMap> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dimension("reshape", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }
}
