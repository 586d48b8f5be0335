//! Small tensor helpers shared by the layers and losses.

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub const DEVICE: Device = Device::Cpu;

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &DEVICE)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn from_array2(a: &Array2<f64>, dtype: DType) -> Result<Tensor> {
    let (r, c) = a.dim();
    from_f64(a.iter().copied().collect(), &[r, c], dtype)
}

/// Copies a rank-2 tensor (or any tensor with two trailing axes and unit
/// leading axes) into an ndarray.
pub fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let dims = t.dims();
    let (r, c) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let v = to_f64_vec(t)?;
    Ok(Array2::from_shape_vec((r, c), v).expect("element count checked by tensor shape"))
}

pub fn randn<R: Rng>(shape: &[usize], rng: &mut R, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    from_f64(v, shape, dtype)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?;
    let lse = s.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_sub(&lse)?)
}

/// Nearest-neighbour ×2 upsampling of a (b, c, h, w) map.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// (1, 1, p, p) tensor with ones on the leading n×n block.
pub fn square_mask(n: usize, p: usize, dtype: DType) -> Result<Tensor> {
    let v = (0..p * p).map(|k| if k / p < n && k % p < n { 1.0 } else { 0.0 }).collect();
    from_f64(v, &[1, 1, p, p], dtype)
}

/// Zero-pads the trailing two axes of an (.., n, n) tensor to p×p.
pub fn pad_square(x: &Tensor, p: usize) -> Result<Tensor> {
    let rank = x.rank();
    let n = x.dim(rank - 1)?;
    Ok(x.pad_with_zeros(rank - 2, 0, p - n)?.pad_with_zeros(rank - 1, 0, p - n)?)
}

/// Sinusoidal codes for scalar positions: row k is
/// `[sin(p w_0), .., sin(p w_{h-1}), cos(p w_0), ..]` with geometric
/// frequencies `w_i = base^(-i/h)`.
pub fn sinusoidal(positions: &[f64], dim: usize, base: f64, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let row_start = v.len();
        for i in 0..half {
            v.push((p * base.powf(-(i as f64) / half as f64)).sin());
        }
        for i in 0..half {
            v.push((p * base.powf(-(i as f64) / half as f64)).cos());
        }
        v.resize(row_start + dim, 0.0);
    }
    from_f64(v, &[positions.len(), dim], dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_repeats_each_cell() {
        let x = from_f64(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], DType::F64).unwrap();
        let y = to_f64_vec(&upsample2(&x).unwrap()).unwrap();
        assert_eq!(
            y,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = from_f64(vec![1.0, 2.0, 3.0, -1.0, 0.0, 50.0], &[2, 3], DType::F64).unwrap();
        let s = to_array2(&softmax_last(&x).unwrap()).unwrap();
        for r in s.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let l = to_array2(&log_softmax_last(&x).unwrap()).unwrap();
        for (a, b) in l.iter().zip(s.iter()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_and_pad_agree() {
        let x = from_f64(vec![1.0; 9], &[1, 1, 3, 3], DType::F32).unwrap();
        let p = pad_square(&x, 4).unwrap();
        let m = square_mask(3, 4, DType::F32).unwrap();
        assert_eq!(to_f64_vec(&p).unwrap(), to_f64_vec(&m).unwrap());
    }
}
