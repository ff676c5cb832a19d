use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extents of a 4-D `[N, C, H, W]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0, 0, 0])),
        }
    }

    /// Gather the listed channels of an `[N, C, H, W]` tensor, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4("select_channels")?;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels.len() * plane);
        for i in 0..n {
            for &ch in channels {
                if ch >= c {
                    return Err(Error::InvalidArgument(format!(
                        "channel {ch} out of range for {c} channels"
                    )));
                }
                let start = (i * c + ch) * plane;
                data.extend_from_slice(&self.data[start..start + plane]);
            }
        }
        Tensor::new(vec![n, channels.len(), h, w], data)
    }

    /// Overwrite the listed channels of `self` with the channels of `src`, in order.
    pub fn assign_channels(&mut self, channels: &[usize], src: &Tensor) -> Result<()> {
        let (n, c, h, w) = self.dims4("assign_channels")?;
        let expected = [n, channels.len(), h, w];
        if src.shape() != expected {
            return Err(Error::shape("assign_channels", &expected, src.shape()));
        }
        let plane = h * w;
        for i in 0..n {
            for (k, &ch) in channels.iter().enumerate() {
                if ch >= c {
                    return Err(Error::InvalidArgument(format!(
                        "channel {ch} out of range for {c} channels"
                    )));
                }
                let dst = (i * c + ch) * plane;
                let from = (i * channels.len() + k) * plane;
                self.data[dst..dst + plane].copy_from_slice(&src.data[from..from + plane]);
            }
        }
        Ok(())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// The `i`-th slice along the leading axis.
    pub fn index(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn channel_select_and_assign_are_inverse() {
        let t = Tensor::new(vec![2, 3, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        let g = t.select_channels(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0, 10.0, 11.0, 6.0, 7.0]);
        let mut z = Tensor::zeros(vec![2, 3, 1, 2]);
        z.assign_channels(&[2, 0], &g).unwrap();
        assert_eq!(z.select_channels(&[2, 0]).unwrap(), g);
        assert_eq!(z.select_channels(&[1]).unwrap().sum(), 0.0);
    }

    #[test]
    fn non_finite_detected() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(t.ensure_finite("x"), Err(Error::NonFinite { .. })));
    }
}
