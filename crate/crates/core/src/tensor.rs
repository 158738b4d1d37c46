//! Row-major dense arrays of `f64`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows `start..end` along axis 0.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(Error::Index(format!(
                "row range {start}..{end} outside axis of length {}",
                self.shape[0]
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * stride..end * stride].to_vec() })
    }

    /// Gathers the given rows (axis 0) in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Index("empty row selection".into()));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::Index(format!("row {i} out of range {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Copy of the leading block with the given per-axis extents.
    pub fn leading_slice(&self, extents: &[usize]) -> Result<Self> {
        self.check_extents(extents)?;
        if extents == self.shape.as_slice() {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(extents.iter().product());
        self.for_each_leading_offset(extents, |off| out.push(self.data[off]));
        Ok(Self { shape: extents.to_vec(), data: out })
    }

    /// Adds `block` into the leading block of `self` with `block`'s shape.
    pub fn add_leading(&mut self, block: &Array) -> Result<()> {
        self.check_extents(&block.shape)?;
        if block.shape == self.shape {
            for (d, s) in self.data.iter_mut().zip(&block.data) {
                *d += s;
            }
            return Ok(());
        }
        let mut offsets = Vec::with_capacity(block.numel());
        self.for_each_leading_offset(&block.shape, |off| offsets.push(off));
        for (off, v) in offsets.into_iter().zip(&block.data) {
            self.data[off] += v;
        }
        Ok(())
    }

    /// Overwrites the leading block of `self` with `block`.
    pub fn assign_leading(&mut self, block: &Array) -> Result<()> {
        self.check_extents(&block.shape)?;
        let mut offsets = Vec::with_capacity(block.numel());
        self.for_each_leading_offset(&block.shape, |off| offsets.push(off));
        for (off, v) in offsets.into_iter().zip(&block.data) {
            self.data[off] = *v;
        }
        Ok(())
    }

    fn check_extents(&self, extents: &[usize]) -> Result<()> {
        if extents.len() != self.shape.len()
            || extents.iter().zip(&self.shape).any(|(&e, &s)| e == 0 || e > s)
        {
            return Err(Error::dim(format!(
                "leading block {extents:?} does not fit in {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn for_each_leading_offset(&self, extents: &[usize], mut f: impl FnMut(usize)) {
        let rank = self.shape.len();
        let mut strides = vec![1usize; rank];
        for ax in (0..rank.saturating_sub(1)).rev() {
            strides[ax] = strides[ax + 1] * self.shape[ax + 1];
        }
        let mut idx = vec![0usize; rank];
        loop {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            f(off);
            let mut ax = rank;
            loop {
                if ax == 0 {
                    return;
                }
                ax -= 1;
                idx[ax] += 1;
                if idx[ax] < extents[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }
}
