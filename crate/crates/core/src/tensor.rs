//! Dense row-major tensors and the numeric kernels everything else is built on.
//!
//! All kernels use a fixed left-to-right reduction order so that repeated
//! runs (and the parallel/streaming dual forward paths) are bit-stable.

use crate::error::{Error, Result};
use num_traits::Float;

/// Element type for all tensors. The engine is instantiated at `f64`
/// (default, tight equivalence contract) or `f32` (benchmark mode).
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Copy + Send + Sync + 'static
{
    const NAME: &'static str;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Dense row-major tensor. Shape is fixed at construction; the flat data
/// length always equals the product of the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "element count does not match data length",
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input; test helper mostly.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| S::from_f64(x)));
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Copy with a new shape; element count must be unchanged.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: "element count changed",
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Rows `[start, end)` of a 2-D tensor as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.as_f64()).collect()
    }
}

/// Stack 2-D tensors along the row axis. Empty inputs are skipped; the
/// column count is taken from the first non-empty operand.
pub fn concat_rows<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    let cols = parts
        .iter()
        .find(|t| t.rows() > 0)
        .or_else(|| parts.first())
        .map_or(0, |t| t.cols());
    let rows: usize = parts.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for t in parts {
        if t.rows() > 0 {
            data.extend_from_slice(t.data());
        }
    }
    Tensor {
        shape: vec![rows, cols],
        data,
    }
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale<S: Scalar>(a: &Tensor<S>, s: S) -> Tensor<S> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| x * s).collect(),
    }
}

/// Standard matrix product with a fixed left-to-right sum over the inner axis.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, n) = (a.rows(), b.cols());
    let mut data = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let mut acc = S::zero();
            for (t, &av) in arow.iter().enumerate() {
                acc = acc + av * b.data[t * n + j];
            }
            data[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// Max-subtracted softmax over the last axis. Rejects NaN input; `-inf`
/// entries are legal (masked logits) as long as each row keeps at least
/// one finite entry.
pub fn softmax_lastaxis<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let n = x.cols();
    if n == 0 {
        return Err(Error::InvalidShape {
            op: "softmax_lastaxis",
            shape: x.shape.to_vec(),
            reason: "empty last axis",
        });
    }
    let mut data = x.data.clone();
    for (ri, row) in data.chunks_mut(n).enumerate() {
        let mut max = S::neg_infinity();
        for &v in row.iter() {
            if v.is_nan() {
                return Err(Error::NanInput("softmax_lastaxis"));
            }
            if v > max {
                max = v;
            }
        }
        if max == S::neg_infinity() {
            return Err(Error::FullyMaskedQuery(ri));
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Per-row layer normalization (biased variance, eps inside the sqrt),
/// followed by elementwise gain and bias.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let dn = S::from_f64(d as f64);
    let mut data = x.data.clone();
    for row in data.chunks_mut(d) {
        let mut mean = S::zero();
        for &v in row.iter() {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = S::zero();
        for &v in row.iter() {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let inv = (var + eps).sqrt().recip();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(S::zero())).collect(),
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

pub fn swish<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

/// Gated linear unit over the last axis: first half gated by the sigmoid
/// of the second half. The last extent must be even.
pub fn glu_lastaxis<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let n = x.cols();
    if n % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "glu_lastaxis",
            shape: x.shape.to_vec(),
            reason: "last extent must be even",
        });
    }
    let d = n / 2;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = d;
    let mut data = Vec::with_capacity(x.len() / 2);
    for row in x.data.chunks(n) {
        for j in 0..d {
            data.push(row[j] * sigmoid(row[d + j]));
        }
    }
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn matmul_identity() {
        let a = T::eye(2);
        let b = T::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), b);
    }

    #[test]
    fn matmul_projector_row() {
        let a = T::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let b = T::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out, T::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]]));
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let a = T::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.37 - 1.1).collect()).unwrap();
        let b = T::new(vec![4, 2], (0..8).map(|i| (i as f64) * -0.21 + 0.4).collect()).unwrap();
        let out = matmul(&a, &b).unwrap();
        // naive triple-loop oracle, same summation order
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f64;
                for t in 0..4 {
                    acc += a.data()[i * 4 + t] * b.data()[t * 2 + j];
                }
                assert_eq!(out.data()[i * 2 + j], acc);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = T::zeros(vec![2, 3]);
        let b = T::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric() {
        let x = T::from_rows(&[vec![0.0; 4]]);
        let y = softmax_lastaxis(&x).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn softmax_analytic_ln2() {
        let x = T::from_rows(&[vec![2.0f64.ln(), 0.0]]);
        let y = softmax_lastaxis(&x).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula_oracle() {
        // independent route: plain exp/sum without max subtraction
        let x = T::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let y = softmax_lastaxis(&x).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (j, &v) in y.data().iter().enumerate() {
            assert!((v - x.data()[j].exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = T::from_rows(&[vec![0.0, f64::NAN]]);
        assert!(matches!(
            softmax_lastaxis(&x),
            Err(Error::NanInput(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = T::from_rows(&[vec![3.5; 6]]);
        let g = T::new(vec![6], vec![1.0; 6]).unwrap();
        let b = T::zeros(vec![6]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let x = T::from_rows(&[vec![1.0, -1.0]]);
        let g = T::new(vec![2], vec![1.0; 2]).unwrap();
        let b = T::zeros(vec![2]);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_matches_direct_formula_oracle() {
        let x = T::from_rows(&[vec![0.3, -1.7, 2.2, 0.05]]);
        let g = T::new(vec![4], vec![1.3, 0.7, -0.2, 2.0]).unwrap();
        let b = T::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let eps = 1e-5;
        let y = layer_norm(&x, &g, &b, eps).unwrap();
        let row = x.row(0);
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for j in 0..4 {
            let want = (row[j] - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j];
            assert!((y.data()[j] - want).abs() <= 1e-14);
        }
    }

    #[test]
    fn activations_trivial_values() {
        assert_eq!(swish(&T::from_rows(&[vec![0.0]])).data()[0], 0.0);
        let r = relu(&T::from_rows(&[vec![-1.0, 2.0]]));
        assert_eq!(r.data(), &[0.0, 2.0]);
        // glu([a; 0]) = 0.5 a
        let g = glu_lastaxis(&T::from_rows(&[vec![3.0, -4.0, 0.0, 0.0]])).unwrap();
        assert_eq!(g.data(), &[1.5, -2.0]);
    }

    #[test]
    fn glu_rejects_odd_extent() {
        assert!(glu_lastaxis(&T::from_rows(&[vec![1.0, 2.0, 3.0]])).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
                proptest::collection::vec(-1e4f64..1e4, 1..8), 1..5)) {
                let n = rows[0].len();
                let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
                let x = T::from_rows(&rows);
                let y = softmax_lastaxis(&x).unwrap();
                for i in 0..y.rows() {
                    let s: f64 = y.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                    prop_assert!(y.row(i).iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn matmul_distributes_over_addition(seed in 0u64..1000) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut gen = |r: usize, c: usize| {
                    T::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
                };
                let a = gen(3, 4);
                let b = gen(4, 2);
                let c = gen(4, 2);
                let lhs = matmul(&a, &add(&b, &c).unwrap()).unwrap();
                let rhs = add(&matmul(&a, &b).unwrap(), &matmul(&a, &c).unwrap()).unwrap();
                for (x, y) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
                let id = T::eye(4);
                prop_assert_eq!(matmul(&a, &id).unwrap(), a);
            }

            #[test]
            fn layer_norm_shift_invariant(row in proptest::collection::vec(-10.0f64..10.0, 2..9),
                                          shift in -100.0f64..100.0) {
                let d = row.len();
                let g = T::new(vec![d], vec![1.0; d]).unwrap();
                let b = T::zeros(vec![d]);
                let x = T::from_rows(&[row.clone()]);
                let shifted = T::from_rows(&[row.iter().map(|v| v + shift).collect::<Vec<_>>()]);
                let y0 = layer_norm(&x, &g, &b, 1e-5).unwrap();
                let y1 = layer_norm(&shifted, &g, &b, 1e-5).unwrap();
                for (a, c) in y0.data().iter().zip(y1.data()) {
                    prop_assert!((a - c).abs() <= 1e-10);
                }
            }
        }
    }
}
