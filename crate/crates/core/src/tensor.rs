use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// How to fill a freshly created tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Constant(f64),
    Values(Vec<f64>),
    /// Normal(0, std) from a SplitMix64 stream.
    Normal { std: f64, seed: u64 },
    /// Uniform on `[low, high)` from a SplitMix64 stream.
    Uniform { low: f64, high: f64, seed: u64 },
}

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], init: Init) -> Result<Self> {
        let len = checked_len(shape)?;
        let data = match init {
            Init::Constant(v) => vec![v; len],
            Init::Values(values) => {
                if values.len() != len {
                    return Err(Error::ValueCount {
                        expected: len,
                        actual: values.len(),
                    });
                }
                values
            }
            Init::Normal { std, seed } => {
                let mut rng = SplitMix64::new(seed);
                (0..len).map(|_| std * rng.next_normal()).collect()
            }
            Init::Uniform { low, high, seed } => {
                let mut rng = SplitMix64::new(seed);
                (0..len)
                    .map(|_| low + (high - low) * rng.next_f64())
                    .collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Init::Constant(0.0))
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::new(shape, Init::Values(values))
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// Same as [`Tensor::new`] but with a zeroed gradient buffer attached.
    pub fn parameter(shape: &[usize], init: Init) -> Result<Self> {
        let mut t = Self::new(shape, init)?;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn tracks_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn set_tracks_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    /// Clears the gradient buffer to zero. Gradients are never cleared
    /// implicitly.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ValueCount {
                expected: self.data.len(),
                actual: delta.len(),
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in g.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch(self.shape, shape.to_vec()));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }
}

pub(crate) fn checked_len(shape: &[usize]) -> Result<usize> {
    if let Some(&d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::InvalidDimension(d));
    }
    if shape.is_empty() {
        return Err(Error::Invalid("empty shape".into()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Invalid("shape overflows usize".into()))
}
