//! Custom CPU ops with hand-written backward passes.
//!
//! * 2-D convolution as im2col followed by one gemm per image. Much faster
//!   than the generic kernels for the small channel counts used here.
//! * Leaky ReLU in a single pass instead of a chain of elementwise ops.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[n, c, h, w], &[o, ck, k, k2]) = (x, kernel) else {
            candle_core::bail!("conv expects 4-d input and kernel, got {x:?} and {kernel:?}")
        };
        if c != ck || k != k2 || stride == 0 {
            candle_core::bail!("conv shape mismatch: input {x:?}, kernel {kernel:?}, stride {stride}")
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv kernel {k} larger than padded input {h}x{w}")
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn hw_in(&self) -> usize {
        self.h * self.w
    }

    /// Output positions `[lo, hi)` whose source pixel along one axis lies
    /// inside `0..len` for kernel offset `kk`.
    fn valid(&self, kk: usize, len: usize, out: usize) -> (usize, usize) {
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(self.stride) } else { 0 };
        let hi = if len + self.pad > kk { ((len - 1 + self.pad - kk) / self.stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// `cols[(c, ky, kx), (oy, ox)] = x[c, oy*s + ky - p, ox*s + kx - p]`, zero outside.
fn im2col<T: WithDType>(x: &[T], g: &Geom, cols: &mut [T]) {
    let hw = g.hw_out();
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.hw_in()..(c + 1) * g.hw_in()];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                let dst = &mut cols[row * hw..(row + 1) * hw];
                dst[..ylo * g.wo].fill(T::zero());
                dst[yhi * g.wo..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    out[..xlo].fill(T::zero());
                    out[xhi..].fill(T::zero());
                    let base = xlo * s + kx - g.pad;
                    if s == 1 {
                        out[xlo..xhi].copy_from_slice(&src[base..base + (xhi - xlo)]);
                    } else {
                        for (j, v) in out[xlo..xhi].iter_mut().enumerate() {
                            *v = src[base + j * s];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, summing.
fn col2im_add<T: WithDType>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let hw = g.hw_out();
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.hw_in()..(c + 1) * g.hw_in()];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let from = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                    let base = xlo * s + kx - g.pad;
                    if s == 1 {
                        for (d, v) in dst[base..base + from.len()].iter_mut().zip(from) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[base..].iter_mut().step_by(s).zip(from) {
                            *d += *v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major strides of a matrix view: element (i, j) is at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

/// `dst (m × n, row-major) = [dst +] lhs (m × k) · rhs (k × n)`.
fn matmul<T: WithDType>(dst: &mut [T], m: usize, n: usize, k: usize, lhs: View<T>, rhs: View<T>, accumulate: bool) {
    assert!(dst.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(lhs.data.len() > (m - 1) * lhs.rs + (k - 1) * lhs.cs);
        assert!(rhs.data.len() > (k - 1) * rhs.rs + (n - 1) * rhs.cs);
    } else if !accumulate {
        dst[..m * n].fill(T::zero());
        return;
    }
    // SAFETY: the asserts above bound every index the kernel reads or writes.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.data.as_ptr(),
            lhs.cs as isize,
            lhs.rs as isize,
            rhs.data.as_ptr(),
            rhs.cs as isize,
            rhs.rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv op expects contiguous tensors"),
    }
}

fn forward<T: WithDType>(x: &[T], w: &[T], b: &[T], g: &Geom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.o * g.hw_out()];
    for (i, plane) in out.chunks_mut(g.hw_out()).enumerate() {
        plane.fill(b[i % g.o]);
    }
    let mut cols = vec![T::zero(); g.ckk() * g.hw_out()];
    let per_in = g.c * g.hw_in();
    let per_out = g.o * g.hw_out();
    for i in 0..g.n {
        im2col(&x[i * per_in..(i + 1) * per_in], g, &mut cols);
        let lhs = View { data: w, rs: g.ckk(), cs: 1 };
        let rhs = View { data: &cols, rs: g.hw_out(), cs: 1 };
        matmul(&mut out[i * per_out..(i + 1) * per_out], g.o, g.hw_out(), g.ckk(), lhs, rhs, true);
    }
    out
}

/// Per-channel sums of an (N, C, H, W) tensor.
fn channel_sums<T: WithDType>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for (i, plane) in x.chunks(hw).enumerate() {
        let mut acc = T::zero();
        for &v in plane {
            acc += v;
        }
        out[i % c] += acc;
    }
    out
}

fn grad_input<T: WithDType>(gout: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.c * g.hw_in()];
    let mut cols = vec![T::zero(); g.ckk() * g.hw_out()];
    let per_in = g.c * g.hw_in();
    let per_out = g.o * g.hw_out();
    for i in 0..g.n {
        // cols = Wᵀ · gout_i
        let lhs = View { data: w, rs: 1, cs: g.ckk() };
        let rhs = View { data: &gout[i * per_out..(i + 1) * per_out], rs: g.hw_out(), cs: 1 };
        matmul(&mut cols, g.ckk(), g.hw_out(), g.o, lhs, rhs, false);
        col2im_add(&cols, g, &mut dx[i * per_in..(i + 1) * per_in]);
    }
    dx
}

fn grad_weight<T: WithDType>(x: &[T], gout: &[T], g: &Geom) -> Vec<T> {
    let mut dw = vec![T::zero(); g.o * g.ckk()];
    let mut cols = vec![T::zero(); g.ckk() * g.hw_out()];
    let per_in = g.c * g.hw_in();
    let per_out = g.o * g.hw_out();
    for i in 0..g.n {
        im2col(&x[i * per_in..(i + 1) * per_in], g, &mut cols);
        // dw += gout_i · colsᵀ
        let lhs = View { data: &gout[i * per_out..(i + 1) * per_out], rs: g.hw_out(), cs: 1 };
        let rhs = View { data: &cols, rs: 1, cs: g.hw_out() };
        matmul(&mut dw, g.o, g.ckk(), g.hw_out(), lhs, rhs, i > 0);
    }
    dw
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f(slice(a, $l1)?, slice(b, $l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f(slice(a, $l1)?, slice(b, $l2)?)),
            _ => candle_core::bail!("conv op supports matching f32 or f64 operands"),
        }
    };
}

struct Conv {
    stride: usize,
    pad: usize,
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geom::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        if l3.dims() != [g.o] {
            candle_core::bail!("conv bias {:?} for {} output channels", l3.dims(), g.o)
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                CpuStorage::F32(forward(slice(x, l1)?, slice(w, l2)?, slice(b, l3)?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                CpuStorage::F64(forward(slice(x, l1)?, slice(w, l2)?, slice(b, l3)?, &g))
            }
            _ => candle_core::bail!("conv op supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((g.n, g.o, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = Geom::new(x.dims(), w.dims(), self.stride, self.pad)?;
        let grad = grad.contiguous()?;
        // Inputs outside the graph, such as raw images, need no gradient.
        let dx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(w, &GradInput(g))?)
        } else {
            None
        };
        let dw = x.apply_op2_no_bwd(&grad, &GradWeight(g))?;
        let db = grad.apply_op1_no_bwd(&ChannelSum)?;
        Ok((dx, Some(dw), Some(db)))
    }
}

struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let &[_, c, h, w] = l.dims() else {
            candle_core::bail!("channel sum expects a 4-d tensor")
        };
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(channel_sums(slice(x, l)?, c, h * w)),
            CpuStorage::F64(x) => CpuStorage::F64(channel_sums(slice(x, l)?, c, h * w)),
            _ => candle_core::bail!("channel sum supports f32 and f64"),
        };
        Ok((out, Shape::from(c)))
    }
}

struct GradInput(Geom);

impl CustomOp2 for GradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |gout, w| grad_input(gout, w, &g));
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

struct GradWeight(Geom);

impl CustomOp2 for GradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, gout| grad_weight(x, gout, &g));
        Ok((out, Shape::from((g.o, g.c, g.k, g.k))))
    }
}

/// Cross-correlation of `x` (N, C, H, W) with `kernel` (O, C, k, k) plus a
/// per-channel `bias` (O), zero padding `pad` on every side. Differentiable
/// in all three arguments.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&kernel.contiguous()?, &bias.contiguous()?, Conv { stride, pad })
}

struct Leaky(f64);

impl CustomOp1 for Leaky {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: WithDType>(x: &[T], slope: f64) -> Vec<T> {
            let a = T::from_f64(slope);
            x.iter().map(|&v| if v > T::zero() { v } else { v * a }).collect()
        }
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(f(slice(x, l)?, self.0)),
            CpuStorage::F64(x) => CpuStorage::F64(f(slice(x, l)?, self.0)),
            _ => candle_core::bail!("leaky relu supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &LeakyGrad(self.0))?))
    }
}

struct LeakyGrad(f64);

impl CustomOp2 for LeakyGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: WithDType>(x: &[T], g: &[T], slope: f64) -> Vec<T> {
            let a = T::from_f64(slope);
            x.iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { d * a }).collect()
        }
        let slope = self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, g| f(x, g, slope));
        Ok((out, l1.shape().clone()))
    }
}

/// max(x, 0) + slope · min(x, 0), elementwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Leaky(slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    fn det(n: usize, a: usize, m: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * a % m) as f64 / (m / 2) as f64) - 1.0).collect()
    }

    /// Forward against candle's convolution, all three gradients against
    /// central differences of a weighted sum of the output.
    fn check(c: usize, o: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize) {
        let dev = Device::Cpu;
        let x = Var::from_vec(det(2 * c * h * w, 37, 101), (2, c, h, w), &dev).unwrap();
        let kern = Var::from_vec(det(o * c * k * k, 53, 89), (o, c, k, k), &dev).unwrap();
        let bias = Var::from_vec(det(o, 7, 11), o, &dev).unwrap();
        let ours = conv2d(&x, &kern, &bias, stride, pad).unwrap();
        let reference = x
            .conv2d(&kern, pad, stride, 1, 1)
            .unwrap()
            .broadcast_add(&bias.reshape((1, o, 1, 1)).unwrap())
            .unwrap();
        assert_eq!(ours.dims(), reference.dims());
        assert!(max_abs_diff(&ours, &reference) < 1e-10);
        let wts = Tensor::from_vec(det(ours.elem_count(), 29, 61), ours.dims(), &dev).unwrap();
        let objective = |x: &Tensor, k: &Tensor, b: &Tensor| {
            (conv2d(x, k, b, stride, pad).unwrap() * &wts)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let grads = (&ours * &wts).unwrap().sum_all().unwrap().backward().unwrap();
        let vars = [&x, &kern, &bias];
        for (which, var) in vars.iter().enumerate() {
            let analytic = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    let t = Tensor::from_vec(v, var.dims(), &dev).unwrap();
                    let mut args: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
                    args[which] = t;
                    objective(&args[0], &args[1], &args[2])
                };
                let num = (eval(1e-4) - eval(-1e-4)) / 2e-4;
                assert!(
                    (num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()),
                    "geometry {c} {o} {k} {stride} {pad} {h} {w}, arg {which}[{i}]: {num} vs {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn matches_reference_convolution_and_gradients() {
        check(3, 4, 3, 1, 1, 7, 6);
        check(2, 5, 3, 2, 1, 8, 8);
        check(4, 2, 1, 2, 0, 9, 7);
        check(1, 1, 3, 1, 0, 5, 5);
        check(3, 2, 3, 2, 1, 7, 5);
        check(2, 3, 5, 1, 2, 6, 6);
    }

    #[test]
    fn f32_path_runs() {
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let k = Tensor::ones((1, 2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
        let y = conv2d(&x, &k, &b, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // corners see 2x2 of the kernel in each of 2 channels
        assert_eq!(y[0], 8.0);
        assert_eq!(y[5], 18.0);
    }

    #[test]
    fn leaky_matches_composite_and_gradient() {
        let x = Var::new(&[-2.0f64, -0.5, 0.25, 3.0], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![-0.4, -0.1, 0.25, 3.0]);
        let w = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &Device::Cpu).unwrap();
        let g = (&y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.2, 0.4, 3.0, 4.0]);
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let k = Tensor::ones((1, 3, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
        assert!(conv2d(&x, &k, &b, 1, 1).is_err());
    }
}
