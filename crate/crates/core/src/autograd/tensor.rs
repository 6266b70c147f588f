//! Dense row-major f64 array with trailing-dimension broadcasting.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of 64-bit floats, row-major.
///
/// `Tensor` is a plain value: gradient tracking lives on the [`Tape`]
/// (see [`crate::autograd::Tape`]), which keeps this type `Send + Sync`
/// so read-only model weights can be shared across inference workers.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-1 tensor of length 1; the scalar convention used throughout.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
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

    /// Value of a rank-anything tensor holding exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place elementwise accumulate; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// 2-D transpose.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::invalid(format!(
                "transpose expects rank 2, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// Shape produced by trailing-dimension broadcasting, or an error naming both.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on broadcast (size-1 or missing) dims
/// once the shape is right-aligned against `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Elementwise binary op with trailing-dimension broadcasting.
pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape.clone(), data);
    }
    let out_shape = broadcast_shapes(op, &a.shape, &b.shape)?;
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = vec![0.0; numel];
    let mut index = vec![0usize; out_shape.len()];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for slot in data.iter_mut() {
        *slot = f(a.data[off_a], b.data[off_b]);
        // odometer increment over the output index space
        for d in (0..out_shape.len()).rev() {
            index[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if index[d] < out_shape[d] {
                break;
            }
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
            index[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `grad` down to `target_shape`, undoing a broadcast: leading extra
/// dims are reduced away and size-1 dims are summed over.
pub fn reduce_to_shape(grad: &Tensor, target_shape: &[usize]) -> Tensor {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let rank = grad.shape().len();
    let offset = rank - target_shape.len();
    let strides = broadcast_strides(target_shape, grad.shape());
    let numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut index = vec![0usize; rank];
    let mut off_t = 0usize;
    for &g in grad.data() {
        out[off_t] += g;
        for d in (0..rank).rev() {
            index[d] += 1;
            off_t += strides[d];
            if index[d] < grad.shape()[d] {
                break;
            }
            off_t -= strides[d] * grad.shape()[d];
            index[d] = 0;
        }
    }
    let _ = offset;
    Tensor::new(target_shape.to_vec(), out).expect("reduce_to_shape numel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(
            broadcast_shapes("t", &[3, 4], &[4]).unwrap(),
            vec![3, 4]
        );
        assert_eq!(
            broadcast_shapes("t", &[3, 1], &[3, 4]).unwrap(),
            vec![3, 4]
        );
        assert_eq!(broadcast_shapes("t", &[2, 3], &[1]).unwrap(), vec![2, 3]);
        assert!(broadcast_shapes("t", &[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn broadcast_binary_row_bias() {
        let a = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = Tensor::from_vec(vec![10.0, 20.0, 30.0]);
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[2.0, 2.0, 2.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[3.0, 3.0]);
        let r3 = reduce_to_shape(&g, &[1]);
        assert_eq!(r3.data(), &[6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = broadcast_shapes("add", &[2, 3], &[5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[5]"), "{msg}");
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transposed().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at(&[2, 1]), 6.0);
        assert_eq!(t.transposed().unwrap(), a);
    }
}
