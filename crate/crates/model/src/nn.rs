//! Minimal layers over candle tensors with explicitly owned parameters.
//!
//! Every trainable tensor is registered by name in a [`ParamStore`], which
//! is what the optimizer, the checkpoint writer and the gradient checks walk.

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    params: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn register(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        if self.get(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.params.push((name, var));
        Ok(out)
    }

    /// Registers a parameter drawn from N(0, std²).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        self.register(name.to_string(), Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.register(name.to_string(), Tensor::zeros(shape, DType::F64, &Device::Cpu)?)
    }

    /// Overwrites every parameter from `values`, matched by name and shape.
    pub fn load(&self, values: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            let t = values
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!("{name}: expected {:?}, found {:?}", var.dims(), t.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// He-initialised square convolution with `same`-style padding.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let w = ps.normal(&format!("{name}.w"), &[c_out, c_in, kernel, kernel], std, rng)?;
        let b = ps.zeros(&format!("{name}.b"), &[c_out])?;
        Ok(Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        })
    }

    /// Wraps frozen weights, e.g. loaded from a file.
    pub fn frozen(w: Tensor, b: Tensor, stride: usize) -> Result<Self> {
        let (c_out, _, k, _) = w.dims4()?;
        if b.dims() != [c_out] {
            return Err(Error::shape(format!("bias {:?} for {c_out} output channels", b.dims())));
        }
        Ok(Self { w, b, stride, pad: k / 2 })
    }

    /// Copy whose weights are constants outside any gradient graph.
    pub fn detached(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::ops::conv2d(x, &self.w, &self.b, self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let std = gain / (d_in as f64).sqrt();
        let w = ps.normal(&format!("{name}.w"), &[d_out, d_in], std, rng)?;
        let b = ps.zeros(&format!("{name}.b"), &[d_out])?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.t()?)?.broadcast_add(&self.b)?)
    }
}

/// Residual stride-2 block: two 3×3 convolutions on the main path, a strided
/// 1×1 projection on the shortcut. No normalization layers.
#[derive(Clone, Debug)]
pub struct ResDown {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

impl ResDown {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 2, rng)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng)?,
            skip: Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 2, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?)?;
        let h = self.conv2.forward(&h)?;
        leaky_relu(&(h + self.skip.forward(x)?)?)
    }
}

/// Residual block at constant resolution, used by the detector backbone.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c, c, 3, 1, rng)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c, c, 3, 1, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?)?;
        let h = self.conv2.forward(&h)?;
        leaky_relu(&(h + x)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(crate::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcasts
/// so the backward pass accumulates over every copied pixel.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}

/// Mean over the spatial axes: (N, C, H, W) → (N, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

/// Scalar value of a rank-0 or single-element tensor, as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn upsample_matches_index_formula_and_accumulates_gradients() {
        let x = Var::from_vec((0..6).map(|v| v as f64).collect::<Vec<_>>(), (1, 1, 2, 3), &Device::Cpu).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        let v = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!((v.len(), v[0].len()), (4, 6));
        for (r, row) in v.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                assert_eq!(*val, (r / 2 * 3 + c / 2) as f64);
            }
        }
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![4.0; 6]);
    }

    #[test]
    fn leaky_relu_slopes() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap();
        assert_eq!(leaky_relu(&x).unwrap().to_vec1::<f64>().unwrap(), vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn param_init_is_seeded_and_names_are_unique() {
        let make = || {
            let mut ps = ParamStore::new(DType::F32);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            Conv2d::new(&mut ps, "c", 2, 4, 3, 1, &mut rng).unwrap();
            ps
        };
        let (a, b) = (make(), make());
        assert_eq!(a.n_parameters(), 4 * 2 * 9 + 4);
        let wa = a.get("c.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wb = b.get("c.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(wa, wb);
        let mut ps = make();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(Conv2d::new(&mut ps, "c", 2, 4, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn strided_block_halves_resolution() {
        let mut ps = ParamStore::new(DType::F32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let block = ResDown::new(&mut ps, "b", 3, 8, &mut rng).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(block.forward(&x).unwrap().dims(), &[2, 8, 8, 8]);
    }
}
