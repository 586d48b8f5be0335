//! Layers used by the encoders, decoder and denoiser. All maps are (1, c, h, w).

use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::params::{Init, Scope};
use crate::tensor::{sinusoidal, softmax_last};

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self { w: s.get("weight", &[din, dout], Init::Uniform(bound))?, b: Some(s.get("bias", &[dout], Init::Zeros)?) })
    }

    pub fn no_bias(s: &Scope, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self { w: s.get("weight", &[din, dout], Init::Uniform(bound))?, b: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new(s: &Scope, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Self { l1: Linear::new(&s.pp("l1"), din, hidden)?, l2: Linear::new(&s.pp("l2"), hidden, dout)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Self {
            w: s.get("weight", &[cout, cin, k, k], Init::Uniform(bound))?,
            b: s.get("bias", &[cout], Init::Zeros)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.b.dim(0)?;
        let y = x.conv2d(&self.w, self.pad, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

/// Largest group count ≤ 8 that divides `c`.
pub fn group_count(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(s: &Scope, c: usize) -> Result<Self> {
        Ok(Self { gamma: s.get("gamma", &[c], Init::Ones)?, beta: s.get("beta", &[c], Init::Zeros)?, groups: group_count(c) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xg = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(2)?;
        let xn = xc.broadcast_div(&var.affine(1.0, 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    temb: Option<Linear>,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &Scope, cin: usize, cout: usize, temb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(&s.pp("n1"), cin)?,
            c1: Conv2d::new(&s.pp("c1"), cin, cout, 3, 1)?,
            temb: temb_dim.map(|d| Linear::new(&s.pp("temb"), d, cout)).transpose()?,
            n2: GroupNorm::new(&s.pp("n2"), cout)?,
            c2: Conv2d::new(&s.pp("c2"), cout, cout, 3, 1)?,
            skip: if cin != cout { Some(Conv2d::new(&s.pp("skip"), cin, cout, 1, 1)?) } else { None },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        if let (Some(lin), Some(t)) = (&self.temb, temb) {
            let e = lin.forward(&t.silu()?)?;
            let c = e.dim(1)?;
            h = h.broadcast_add(&e.reshape((1, c, 1, 1))?)?;
        }
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(skip.add(&h)?)
    }
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    Ok(x.reshape((c, h * w))?.t()?)
}

fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let c = t.dim(1)?;
    Ok(t.t()?.contiguous()?.reshape((1, c, h, w))?)
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl SelfAttention {
    pub fn new(s: &Scope, c: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&s.pp("norm"), c)?,
            q: Linear::new(&s.pp("q"), c, c)?,
            k: Linear::new(&s.pp("k"), c, c)?,
            v: Linear::new(&s.pp("v"), c, c)?,
            o: Linear::new(&s.pp("o"), c, c)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let t = to_tokens(&self.norm.forward(x)?)?;
        let (q, k, v) = (self.q.forward(&t)?, self.k.forward(&t)?, self.v.forward(&t)?);
        let att = softmax_last(&q.matmul(&k.t()?)?.affine(1.0 / (c as f64).sqrt(), 0.0)?)?;
        let out = self.o.forward(&att.matmul(&v)?)?;
        Ok(x.add(&from_tokens(&out, h, w)?)?)
    }
}

pub const POSITION_BASE: f64 = 512.0;

/// Cross-attention from map cells to a token sequence. Two heads: queries of
/// the first carry the cell's row position, queries of the second its
/// column position, and keys carry the token's slot position, all measured
/// in region units. The value projection has no bias, so zero value weights
/// make the block independent of the tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    d: usize,
}

impl CrossAttention {
    pub fn new(s: &Scope, c: usize, token_dim: usize, attn_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&s.pp("norm"), c)?,
            q: Linear::new(&s.pp("q"), c, 2 * attn_dim)?,
            k: Linear::new(&s.pp("k"), token_dim, 2 * attn_dim)?,
            v: Linear::no_bias(&s.pp("v"), token_dim, 2 * attn_dim)?,
            o: Linear::new(&s.pp("o"), 2 * attn_dim, c)?,
            d: attn_dim,
        })
    }

    pub fn value_weight(&self) -> &Tensor {
        self.v.weight()
    }

    /// `region_side` is the padded matrix side the map covers.
    pub fn forward(&self, x: &Tensor, tokens: &Tensor, region_side: usize) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let dt = x.dtype();
        let n = tokens.dim(0)?;
        let d = self.d;
        let t = to_tokens(&self.norm.forward(x)?)?;
        let q = self.q.forward(&t)?;
        let (rows, cols) = cell_positions(h, w, region_side);
        let q_row = q.narrow(1, 0, d)?.add(&sinusoidal(&rows, d, POSITION_BASE, dt)?)?;
        let q_col = q.narrow(1, d, d)?.add(&sinusoidal(&cols, d, POSITION_BASE, dt)?)?;
        let slots: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
        let pe = sinusoidal(&slots, d, POSITION_BASE, dt)?;
        let k = self.k.forward(tokens)?;
        let v = self.v.forward(tokens)?;
        let scale = 1.0 / (d as f64).sqrt();
        let head = |q: &Tensor, i: usize| -> Result<Tensor> {
            let kh = k.narrow(1, i * d, d)?.add(&pe)?;
            let att = softmax_last(&q.matmul(&kh.t()?)?.affine(scale, 0.0)?)?;
            Ok(att.matmul(&v.narrow(1, i * d, d)?.contiguous()?)?)
        };
        let out = Tensor::cat(&[head(&q_row, 0)?, head(&q_col, 1)?], 1)?;
        let out = self.o.forward(&out)?;
        Ok(x.add(&from_tokens(&out, h, w)?)?)
    }
}

fn cell_positions(h: usize, w: usize, side: usize) -> (Vec<f64>, Vec<f64>) {
    let (sr, sc) = (side as f64 / h as f64, side as f64 / w as f64);
    let mut rows = Vec::with_capacity(h * w);
    let mut cols = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            rows.push((r as f64 + 0.5) * sr);
            cols.push((c as f64 + 0.5) * sc);
        }
    }
    (rows, cols)
}

/// Sinusoidal timestep code of width `dim` as a (1, dim) tensor.
pub fn timestep_embedding(t: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    sinusoidal(&[t as f64], dim, 10_000.0, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{from_f64, to_f64_vec};

    #[test]
    fn group_counts_divide() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(9), 3);
        assert_eq!(group_count(1), 1);
    }

    #[test]
    fn group_norm_standardises_each_group() {
        let store = ParamStore::new(DType::F64, 0);
        let gn = GroupNorm::new(&store.root(), 4).unwrap();
        let x = from_f64((0..64).map(|i| (i * i) as f64).collect(), &[1, 4, 4, 4], DType::F64).unwrap();
        let y = to_f64_vec(&gn.forward(&x).unwrap()).unwrap();
        for g in y.chunks(16) {
            let m = g.iter().sum::<f64>() / 16.0;
            let v = g.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn strided_conv_halves_the_side() {
        let store = ParamStore::new(DType::F32, 0);
        let c = Conv2d::new(&store.root(), 2, 3, 3, 2).unwrap();
        let x = from_f64(vec![0.5; 2 * 12 * 12], &[1, 2, 12, 12], DType::F32).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[1, 3, 6, 6]);
    }

    #[test]
    fn cross_attention_keeps_shape() {
        let store = ParamStore::new(DType::F32, 0);
        let ca = CrossAttention::new(&store.root(), 8, 5, 4).unwrap();
        let x = from_f64(vec![0.1; 8 * 6 * 6], &[1, 8, 6, 6], DType::F32).unwrap();
        let tok = from_f64(vec![0.3; 7 * 5], &[7, 5], DType::F32).unwrap();
        assert_eq!(ca.forward(&x, &tok, 8).unwrap().dims(), &[1, 8, 6, 6]);
    }
}
