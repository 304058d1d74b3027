//! Dense N-dimensional array with row-major flat storage.
//!
//! Tensors are immutable after construction from the caller's perspective and
//! safe to share read-only across workers. There is no broadcasting and no
//! view machinery; every operation allocates its result.

use crate::error::{Error, Result};
use crate::float::Real;

/// Dense row-major tensor over an `f32` or `f64` element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Reduction operator for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Min,
    Max,
}

/// Shape summary of a `[maps, height, width]` activation tensor.
/// `size` is the number of units per feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMapMeta {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
}

impl FeatureMapMeta {
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "expected rank-3 [maps, height, width]".into(),
            });
        }
        let (maps, height, width) = (shape[0], shape[1], shape[2]);
        let size = height * width;
        if size == 0 || maps == 0 {
            return Err(Error::Empty("feature map has zero units".into()));
        }
        Ok(FeatureMapMeta { maps, height, width, size })
    }
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that `shape` is made of positive dimensions
    /// and that `data` has exactly `product(shape)` entries. A rank-0 shape
    /// denotes a scalar holding one value.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape { shape, reason: "zero-sized dimension".into() });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expects {} elements, got {}", expected, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index, row-major.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Reinterprets the flat data under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_usize(self.len()).unwrap()
    }

    pub fn min_all(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_all(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reduces over `axes` (deduplicated); the reduced axes are removed from
    /// the output shape. Reducing a scalar or passing no axes is an error.
    pub fn reduce(&self, op: Reduce, axes: &[usize]) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidAxes { axes: axes.to_vec(), rank: self.rank() });
        }
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.iter().any(|&a| a >= self.rank()) {
            return Err(Error::InvalidAxes { axes: axes.to_vec(), rank: self.rank() });
        }

        let out_shape: Vec<usize> = (0..self.rank()).filter(|d| !sorted.contains(d)).map(|d| self.shape[d]).collect();
        let out_len: usize = out_shape.iter().product();
        let group: usize = sorted.iter().map(|&a| self.shape[a]).product();

        let init = match op {
            Reduce::Sum | Reduce::Mean => T::zero(),
            Reduce::Min => T::infinity(),
            Reduce::Max => T::neg_infinity(),
        };
        let mut out = vec![init; out_len];

        // Walk every element once; fold it into its output cell.
        let mut index = vec![0usize; self.rank()];
        for &v in &self.data {
            let mut off = 0;
            for (d, &ix) in index.iter().enumerate() {
                if !sorted.contains(&d) {
                    off = off * self.shape[d] + ix;
                }
            }
            out[off] = match op {
                Reduce::Sum | Reduce::Mean => out[off] + v,
                Reduce::Min => out[off].min(v),
                Reduce::Max => out[off].max(v),
            };
            for d in (0..self.rank()).rev() {
                index[d] += 1;
                if index[d] < self.shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }

        if op == Reduce::Mean {
            let count = T::from_usize(group).unwrap();
            for v in &mut out {
                *v /= count;
            }
        }
        Tensor::from_vec(out_shape, out)
    }

    /// Round-to-nearest conversion between element types. Widening `f32` to
    /// `f64` is exact.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_rn(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_is_elementwise_max_with_zero() {
        let t = t64(&[4], &[1.0, -1.0, 2.0, 0.0]);
        assert_eq!(t.relu().data(), &[1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn scale_and_add() {
        let a = t64(&[2], &[1.0, 2.0]);
        assert_eq!(a.scale(2.0).data(), &[2.0, 4.0]);
        let b = t64(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn binary_op_rejects_shape_mismatch() {
        let a = t64(&[2], &[1.0, 2.0]);
        let b = t64(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reductions() {
        let t = t64(&[4], &[1.0, -1.0, 2.0, 0.0]);
        assert_eq!(t.mean_all(), 0.5);
        let m = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.reduce(Reduce::Sum, &[0, 1]).unwrap().data(), &[10.0]);
        let mx = t64(&[2], &[-3.0, -1.0]);
        assert_eq!(mx.max_all(), -1.0);
    }

    #[test]
    fn reduce_single_axis_keeps_other_dims() {
        let m = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = m.reduce(Reduce::Sum, &[1]).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = m.reduce(Reduce::Min, &[0]).unwrap();
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reduce_rejects_empty_axes() {
        let t = t64(&[2], &[1.0, 2.0]);
        assert!(matches!(t.reduce(Reduce::Sum, &[]), Err(Error::InvalidAxes { .. })));
        assert!(matches!(t.reduce(Reduce::Sum, &[5]), Err(Error::InvalidAxes { .. })));
    }

    #[test]
    fn from_vec_enforces_shape_product() {
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn cast_round_trips_f32_exactly_through_f64() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![0.1, -2.5, 1e-7]).unwrap();
        let wide: Tensor<f64> = t.cast();
        let back: Tensor<f32> = wide.cast();
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn feature_map_meta_requires_rank_3() {
        assert!(FeatureMapMeta::from_shape(&[2, 3]).is_err());
        let meta = FeatureMapMeta::from_shape(&[4, 2, 3]).unwrap();
        assert_eq!(meta.size, 6);
        assert_eq!(meta.maps, 4);
    }
}
