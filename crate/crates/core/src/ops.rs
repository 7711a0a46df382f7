//! Differentiable tensor operations recorded on a [`Tape`].
//!
//! Spatial operations work on single rasters laid out as `(C, H, W)`; batching
//! is done by the caller, which keeps every kernel simple and deterministic.

use std::cell::Cell;
use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Resets the per-thread convolution multiply-accumulate counter.
pub fn reset_mac_counter() {
    MAC_COUNTER.with(|c| c.set(0));
}

/// Multiply-accumulates executed by [`conv2d`] forwards on this thread since
/// the last reset.
pub fn mac_counter() -> u64 {
    MAC_COUNTER.with(|c| c.get())
}

/// `c = alpha * a * b + beta * c` for row-major matrices with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the asserts above bound every index the kernel touches given the
    // dense operand layouts used by the callers in this module.
    unsafe {
        matrixmultiply::dgemm(
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

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape().op(
            &[self, other],
            v,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape().op(
            &[self, other],
            v,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = a.zip_map(&b, |x, y| x * y);
        self.tape().op(
            &[self, other],
            v,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                    needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.tape().op(&[self], v, Box::new(move |g, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|a| a.max(0.0));
        self.tape().op(
            &[self],
            v,
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |g, a| if a > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let y2 = y.clone();
        self.tape().op(
            &[self],
            (*y).clone(),
            Box::new(move |g, _| vec![Some(g.zip_map(&y2, |g, s| g * s * (1.0 - s)))]),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().op(
            &[self],
            Tensor::scalar(x.sum()),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let old = self.shape();
        let v = (*self.value()).clone().reshape(shape).expect("reshape element count");
        self.tape().op(
            &[self],
            v,
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("reshape back"))]),
        )
    }

    /// Channels `[start, end)` of a `(C, H, W)` raster.
    pub fn slice_channels(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        assert!(start < end && end <= c, "channel slice {start}..{end} of {c}");
        let hw = h * w;
        let v = Tensor::from_vec(&[end - start, h, w], x.data()[start * hw..end * hw].to_vec())
            .expect("slice shape");
        self.tape().op(
            &[self],
            v,
            Box::new(move |g, _| {
                let mut full = Tensor::zeros(&[c, h, w]);
                full.data_mut()[start * hw..end * hw].copy_from_slice(g.data());
                vec![Some(full)]
            }),
        )
    }

    /// Softmax over the leading axis of a `(D, H, W)` raster.
    pub fn softmax_channels(self) -> Var<'t> {
        let x = self.value();
        let (d, h, w) = x.dims3();
        let hw = h * w;
        let mut y = Tensor::zeros(&[d, h, w]);
        {
            let xs = x.data();
            let ys = y.data_mut();
            for p in 0..hw {
                let m = (0..d).map(|k| xs[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..d {
                    let e = (xs[k * hw + p] - m).exp();
                    ys[k * hw + p] = e;
                    z += e;
                }
                for k in 0..d {
                    ys[k * hw + p] /= z;
                }
            }
        }
        let y = Rc::new(y);
        let yb = y.clone();
        self.tape().op(
            &[self],
            (*y).clone(),
            Box::new(move |g, _| {
                let ys = yb.data();
                let gs = g.data();
                let mut out = Tensor::zeros(&[d, h, w]);
                let os = out.data_mut();
                for p in 0..hw {
                    let dot: f64 = (0..d).map(|k| gs[k * hw + p] * ys[k * hw + p]).sum();
                    for k in 0..d {
                        os[k * hw + p] = ys[k * hw + p] * (gs[k * hw + p] - dot);
                    }
                }
                vec![Some(out)]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of an arbitrary list of same-shaped variables.
pub fn add_all<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let tape = vars.first().expect("add_all of nothing").tape();
    let mut v = (*vars[0].value()).clone();
    for x in &vars[1..] {
        v.add_assign(&x.value());
    }
    let n = vars.len();
    tape.op(vars, v, Box::new(move |g, _| vec![Some(g.clone()); n]))
}

/// Concatenates `(C_i, H, W)` rasters along channels.
pub fn concat_channels<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let tape = vars.first().expect("concat of nothing").tape();
    let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat_channels(&refs).expect("concat shapes checked by caller");
    let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    tape.op(
        vars,
        out,
        Box::new(move |g, needs| {
            let mut off = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for ((n, shape), need) in sizes.iter().zip(&shapes).zip(needs) {
                res.push(need.then(|| {
                    Tensor::from_vec(shape, g.data()[off..off + n].to_vec()).expect("concat grad")
                }));
                off += n;
            }
            res
        }),
    )
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let rows = g.c_in * g.k * g.k;
    let cols = ho * wo;
    let mut out = vec![0.0; rows * cols];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let cols = ho * wo;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols_data[r * cols..(r + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution of a `(C_in, H, W)` raster with weights `(C_out, C_in, k, k)`
/// and bias `(C_out)`.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    let xv = x.value();
    let wv = weight.value();
    let (c_in, h, w) = xv.dims3();
    let ws = wv.shape();
    assert_eq!(ws.len(), 4, "conv weight must be rank 4");
    assert_eq!(ws[1], c_in, "conv weight expects {} input channels, got {}", ws[1], c_in);
    assert_eq!(ws[2], ws[3], "square kernels only");
    let c_out = ws[0];
    let geom = ConvGeom { c_in, h, w, k: ws[2], stride, pad };
    let (ho, wo) = geom.out_hw();
    let kk = c_in * geom.k * geom.k;
    let n = ho * wo;

    let cols = im2col(xv.data(), &geom);
    let bv = bias.value();
    let mut out = vec![0.0; c_out * n];
    for (o, row) in out.chunks_mut(n).enumerate() {
        row.fill(bv.data()[o]);
    }
    gemm(c_out, kk, n, wv.data(), (kk as isize, 1), &cols, (n as isize, 1), 1.0, &mut out);
    MAC_COUNTER.with(|m| m.set(m.get() + (c_out * n * kk) as u64));
    let out = Tensor::from_vec(&[c_out, ho, wo], out).expect("conv output");

    x.tape().op(
        &[x, weight, bias],
        out,
        Box::new(move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gcols = vec![0.0; kk * n];
                // W^T (kk x c_out) * g (c_out x n)
                gemm(kk, c_out, n, wv.data(), (1, kk as isize), gd, (n as isize, 1), 0.0, &mut gcols);
                Tensor::from_vec(&[c_in, h, w], col2im(&gcols, &geom)).expect("conv dx")
            });
            let gw = needs[1].then(|| {
                let cols = im2col(xv.data(), &geom);
                let mut gw = vec![0.0; c_out * kk];
                // g (c_out x n) * cols^T (n x kk)
                gemm(c_out, n, kk, gd, (n as isize, 1), &cols, (1, n as isize), 0.0, &mut gw);
                Tensor::from_vec(&[c_out, c_in, geom.k, geom.k], gw).expect("conv dw")
            });
            let gb = needs[2].then(|| {
                Tensor::from_vec(&[c_out], gd.chunks(n).map(|r| r.iter().sum()).collect())
                    .expect("conv db")
            });
            vec![gx, gw, gb]
        }),
    )
}

/// Per-channel normalization over the spatial extent of one raster, followed
/// by a learned affine transform.
pub fn instance_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
    let xv = x.value();
    let (c, h, w) = xv.dims3();
    let n = h * w;
    let gv = gamma.value();
    let bv = beta.value();
    let mut xhat = vec![0.0; c * n];
    let mut inv_std = vec![0.0; c];
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let xs = &xv.data()[ch * n..(ch + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ch] = is;
        for i in 0..n {
            let xh = (xs[i] - mean) * is;
            xhat[ch * n + i] = xh;
            out[ch * n + i] = gv.data()[ch] * xh + bv.data()[ch];
        }
    }
    let out = Tensor::from_vec(&[c, h, w], out).expect("norm out");
    x.tape().op(
        &[x, gamma, beta],
        out,
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![0.0; c * n]);
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                let gs = &gd[ch * n..(ch + 1) * n];
                let xh = &xhat[ch * n..(ch + 1) * n];
                let sum_g: f64 = gs.iter().sum();
                let sum_gx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
                gg[ch] = sum_gx;
                gb[ch] = sum_g;
                if let Some(gx) = gx.as_mut() {
                    let gam = gv.data()[ch];
                    let mean_g = sum_g / n as f64;
                    let mean_gx = sum_gx / n as f64;
                    for i in 0..n {
                        gx[ch * n + i] = gam * inv_std[ch] * (gs[i] - mean_g - xh[i] * mean_gx);
                    }
                }
            }
            vec![
                gx.map(|v| Tensor::from_vec(&[c, h, w], v).expect("norm dx")),
                needs[1].then(|| Tensor::from_vec(&[c], gg).expect("norm dgamma")),
                needs[2].then(|| Tensor::from_vec(&[c], gb).expect("norm dbeta")),
            ]
        }),
    )
}

/// Runs `f` on a scratch tape with constant inputs and returns the value.
pub fn eval_detached(f: impl for<'a> FnOnce(&'a Tape) -> Var<'a>) -> Tensor {
    let tape = Tape::new();
    let out = f(&tape);
    (*out.value()).clone()
}
