//! Dense row-major tensors.
//!
//! Image tensors are channel-last: a single image is `(h, w, c)` and a batch
//! is `(b, h, w, c)`. Scalars are stored with shape `[1]`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Numeric precision of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Element type of tensors. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    const PRECISION: Precision;

    /// `c = a · b (+ c if accumulate)`, with `a` of logical shape m×k and `b`
    /// of logical shape k×n. A transposed operand is stored as its transpose
    /// in row-major order.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Little-endian bytes of the value rounded to 32 bits.
    fn to_le_f32(self) -> [u8; 4] {
        (self.as_f64() as f32).to_le_bytes()
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_transposed);
                let (rsb, csb) = strides(k, n, b_transposed);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slices hold at least m·k, k·n and m·n elements
                // and the strides describe row-major layouts inside them.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, Precision::F32, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::F64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what}: non-finite value {:?} at flat index {pos} (shape {:?})",
                self.data[pos], self.shape
            )));
        }
        Ok(())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Splits a batch tensor `(b, ...)` into its `b` items.
    pub fn unstack(&self) -> Vec<Tensor<T>> {
        let b = self.shape[0];
        let item_shape = if self.rank() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        let stride = self.numel() / b;
        self.data
            .chunks(stride)
            .map(|chunk| Tensor {
                shape: item_shape.clone(),
                data: chunk.to_vec(),
            })
            .collect()
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty list"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::dim(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, item.shape
                )));
            }
            data.extend_from_slice(&item.data);
        }
        Ok(Self { shape, data })
    }
}

/// Splits a channel-last shape into (outer pixel count, channels).
pub(crate) fn pixels_and_channels(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap();
        let err = t.check_finite("probe").unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("index 1"));
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ · b with a stored transposed: aᵀ = [1 3; 2 4]
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, true);
        assert_eq!(c, [52.0, 60.0, 76.0, 88.0]);
    }

    #[test]
    fn stack_unstack_round_trip() {
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 3], |i| -(i as f32));
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.unstack(), vec![a, b]);
    }
}
