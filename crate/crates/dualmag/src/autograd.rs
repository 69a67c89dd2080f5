//! Reverse-mode automatic differentiation on a tape of f64 tensors.
//!
//! Every operation appends one node holding its value and a backward
//! closure; `Tape::backward` walks the nodes in reverse and accumulates
//! gradients. The op set is exactly what the restoration network and its
//! losses need, including differentiable STFT/iSTFT that mirror the
//! framing in [`crate::signal`]. Each op has a finite-difference gradient
//! test.

use ndarray::{concatenate, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, IxDyn, Slice, Zip};
use ndarray::{Array2, Array3};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::signal::StftConfig;

/// Handle to one tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut [Option<ArrayD<f64>>])>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Gradients {
    gs: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero-filled if the variable did not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> ArrayD<f64> {
        self.gs[v.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(tape.nodes[v.0].value.raw_dim()))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let av = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bv = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            av == bv || av == 1 || bv == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = av.max(bv);
    }
    out
}

/// Sums a gradient over broadcast axes so it matches the parent's shape.
fn reduce_to(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for i in 0..shape.len() {
        if shape[i] == 1 && g.shape()[i] > 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn acc(gs: &mut [Option<ArrayD<f64>>], id: usize, g: ArrayD<f64>) {
    match &mut gs[id] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters and network inputs alike).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Accumulates gradients of the scalar `loss` into every upstream node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut gs: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        gs[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            if gs[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                let g = gs[i].clone().expect("checked above");
                back(&g, &mut gs);
            }
        }
        Gradients { gs }
    }

    // -- elementwise helpers -------------------------------------------------

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x).clone();
        let y = xv.mapv(&f);
        let yv = y.clone();
        let back: BackFn = Box::new(move |g, gs| {
            let gx = Zip::from(g)
                .and(&xv)
                .and(&yv)
                .map_collect(|&gv, &a, &b| gv * df(a, b));
            acc(gs, x.0, gx);
        });
        self.push(y, Some(back))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let shape = broadcast_shape(av.shape(), bv.shape());
        let abc = av.broadcast(IxDyn(&shape)).expect("validated broadcast");
        let bbc = bv.broadcast(IxDyn(&shape)).expect("validated broadcast");
        let y = Zip::from(&abc).and(&bbc).map_collect(|&x, &z| f(x, z));
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        let back: BackFn = Box::new(move |g, gs| {
            let abc = av.broadcast(g.raw_dim()).expect("validated broadcast");
            let bbc = bv.broadcast(g.raw_dim()).expect("validated broadcast");
            let ga = Zip::from(g)
                .and(&abc)
                .and(&bbc)
                .map_collect(|&gv, &x, &z| gv * dfa(x, z));
            let gb = Zip::from(g)
                .and(&abc)
                .and(&bbc)
                .map_collect(|&gv, &x, &z| gv * dfb(x, z));
            acc(gs, a.0, reduce_to(ga, &ash));
            acc(gs, b.0, reduce_to(gb, &bsh));
        });
        self.push(y, Some(back))
    }

    // -- arithmetic ----------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, z| x + z, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, z| x - z, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, z| x * z, |_, z| z, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, z| x / z, |_, z| 1.0 / z, |x, z| -x / (z * z))
    }

    /// atan2(y, x) in (-pi, pi].
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.binary(
            y,
            x,
            f64::atan2,
            |yv, xv| xv / (xv * xv + yv * yv),
            |yv, xv| -yv / (xv * xv + yv * yv),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| c * v, move |_, _| c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, move |v| v.powf(p), move |v, _| p * v.powf(p - 1.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |v, _| 1.0 / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |v, _| if v >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, |v, _| v.cos())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, |v, _| -v.sin())
    }

    /// Swish / SiLU: x * sigmoid(x).
    pub fn swish(&mut self, x: Var) -> Var {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xsh = self.value(x).shape().to_vec();
        let y = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        let back: BackFn = Box::new(move |g, gs| {
            let gv = g[IxDyn(&[])];
            acc(gs, x.0, ArrayD::from_elem(IxDyn(&xsh), gv));
        });
        self.push(y, Some(back))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the last axis, keeping it as a length-1 axis.
    pub fn mean_last_keep(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let last = xv.ndim() - 1;
        let n = xv.shape()[last] as f64;
        let y = xv.mean_axis(Axis(last)).expect("non-empty axis").insert_axis(Axis(last));
        let xsh = xv.shape().to_vec();
        let back: BackFn = Box::new(move |g, gs| {
            let spread = g
                .broadcast(IxDyn(&xsh))
                .expect("keepdim broadcast")
                .mapv(|v| v / n);
            acc(gs, x.0, spread);
        });
        self.push(y, Some(back))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let last = xv.ndim() - 1;
        let mut y = xv.clone();
        for mut lane in y.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - m).exp());
            let s: f64 = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let yv = y.clone();
        let back: BackFn = Box::new(move |g, gs| {
            let mut gx = g.clone();
            for (mut glane, slane) in gx.lanes_mut(Axis(last)).into_iter().zip(yv.lanes(Axis(last)))
            {
                let dot: f64 = glane.iter().zip(slane.iter()).map(|(a, b)| a * b).sum();
                for (gv, &sv) in glane.iter_mut().zip(slane.iter()) {
                    *gv = sv * (*gv - dot);
                }
            }
            acc(gs, x.0, gx);
        });
        self.push(y, Some(back))
    }

    // -- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x).clone();
        let xsh = xv.shape().to_vec();
        let y = xv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        let back: BackFn = Box::new(move |g, gs| {
            let gx = g
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&xsh))
                .expect("reshape element count");
            acc(gs, x.0, gx);
        });
        self.push(y, Some(back))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xv = self.value(x).clone();
        let y = xv.permuted_axes(IxDyn(perm)).as_standard_layout().to_owned();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back: BackFn = Box::new(move |g, gs| {
            let gx = g
                .clone()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned();
            acc(gs, x.0, gx);
        });
        self.push(y, Some(back))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let xv = self.value(x).clone();
        let xsh = xv.shape().to_vec();
        let y = xv
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let back: BackFn = Box::new(move |g, gs| {
            let mut gx = ArrayD::zeros(IxDyn(&xsh));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(g);
            acc(gs, x.0, gx);
        });
        self.push(y, Some(back))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<ArrayD<f64>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let y = concatenate(
            Axis(axis),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
        let back: BackFn = Box::new(move |g, gs| {
            let mut off = 0;
            for (id, &sz) in ids.iter().zip(&sizes) {
                let part = g
                    .slice_axis(Axis(axis), Slice::from(off..off + sz))
                    .to_owned();
                acc(gs, *id, part);
                off += sz;
            }
        });
        self.push(y, Some(back))
    }

    // -- linear algebra ------------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let y = a2.dot(&b2).into_dyn();
        let back: BackFn = Box::new(move |g, gs| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-D");
            let a2 = av.view().into_dimensionality::<Ix2>().expect("lhs 2-D");
            let b2 = bv.view().into_dimensionality::<Ix2>().expect("rhs 2-D");
            acc(gs, a.0, g2.dot(&b2.t()).into_dyn());
            acc(gs, b.0, a2.t().dot(&g2).into_dyn());
        });
        self.push(y, Some(back))
    }

    /// Batched matrix product of [B, M, K] and [B, K, N].
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.ndim(), 3, "bmm lhs must be 3-D");
        assert_eq!(bv.ndim(), 3, "bmm rhs must be 3-D");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner dim mismatch");
        let (batch, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut y = ArrayD::zeros(IxDyn(&[batch, m, n]));
        for i in 0..batch {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let a2 = ai.into_dimensionality::<Ix2>().expect("2-D");
            let b2 = bi.into_dimensionality::<Ix2>().expect("2-D");
            y.index_axis_mut(Axis(0), i).assign(&a2.dot(&b2));
        }
        let back: BackFn = Box::new(move |g, gs| {
            let mut ga = ArrayD::zeros(av.raw_dim());
            let mut gb = ArrayD::zeros(bv.raw_dim());
            for i in 0..batch {
                let gi = g
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<Ix2>()
                    .expect("2-D");
                let a2 = av
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<Ix2>()
                    .expect("2-D");
                let b2 = bv
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<Ix2>()
                    .expect("2-D");
                ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&b2.t()));
                gb.index_axis_mut(Axis(0), i).assign(&a2.t().dot(&gi));
            }
            acc(gs, a.0, ga);
            acc(gs, b.0, gb);
        });
        self.push(y, Some(back))
    }

    // -- convolutions --------------------------------------------------------

    /// 2-D convolution: x [B, Cin, H, W], w [Cout, Cin, kh, kw].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), padding: (usize, usize), dilation: (usize, usize)) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        assert_eq!(xv.ndim(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(wv.ndim(), 4, "conv2d weight must be [Cout, Cin, kh, kw]");
        let (b, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        assert_eq!(wv.shape()[1], cin, "conv2d channel mismatch");
        let ho = conv_out(h, kh, stride.0, padding.0, dilation.0);
        let wo = conv_out(wd, kw, stride.1, padding.1, dilation.1);
        let wmat = wv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight reshape");
        let mut y = ArrayD::zeros(IxDyn(&[b, cout, ho, wo]));
        for i in 0..b {
            let xi = xv
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix3>()
                .expect("3-D");
            let col = im2col(&xi, kh, kw, stride, padding, dilation, ho, wo);
            let out = wmat.dot(&col);
            y.index_axis_mut(Axis(0), i).assign(
                &out.into_shape_with_order((cout, ho, wo)).expect("conv reshape"),
            );
        }
        let back: BackFn = Box::new(move |g, gs| {
            let mut gx = ArrayD::zeros(xv.raw_dim());
            let mut gw = Array2::<f64>::zeros((cout, cin * kh * kw));
            let wmat = wv
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((cout, cin * kh * kw))
                .expect("weight reshape");
            for i in 0..b {
                let gi = g
                    .index_axis(Axis(0), i)
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((cout, ho * wo))
                    .expect("grad reshape");
                let xi = xv
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3-D");
                let col = im2col(&xi, kh, kw, stride, padding, dilation, ho, wo);
                gw = gw + gi.dot(&col.t());
                let gcol = wmat.t().dot(&gi);
                let gxi = col2im(&gcol.view(), cin, h, wd, kh, kw, stride, padding, dilation, ho, wo);
                gx.index_axis_mut(Axis(0), i).assign(&gxi);
            }
            acc(gs, x.0, gx);
            acc(
                gs,
                w.0,
                gw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .expect("weight grad reshape"),
            );
        });
        self.push(y, Some(back))
    }

    /// Transposed 2-D convolution: x [B, Cin, H, W], w [Cin, Cout, kh, kw].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        assert_eq!(xv.ndim(), 4, "conv_transpose2d input must be [B, C, H, W]");
        assert_eq!(wv.ndim(), 4, "conv_transpose2d weight must be [Cin, Cout, kh, kw]");
        let (b, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, kh, kw) = (wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(wv.shape()[0], cin, "conv_transpose2d channel mismatch");
        let ho = (h - 1) * stride.0 + kh - 2 * padding.0;
        let wo = (wd - 1) * stride.1 + kw - 2 * padding.1;
        let w2 = wv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((cin, cout * kh * kw))
            .expect("weight reshape");
        let mut y = ArrayD::zeros(IxDyn(&[b, cout, ho, wo]));
        for i in 0..b {
            let xi = xv
                .index_axis(Axis(0), i)
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((cin, h * wd))
                .expect("input reshape");
            let col = w2.t().dot(&xi);
            let yi = col2im(
                &col.view(),
                cout,
                ho,
                wo,
                kh,
                kw,
                stride,
                padding,
                (1, 1),
                h,
                wd,
            );
            y.index_axis_mut(Axis(0), i).assign(&yi);
        }
        let back: BackFn = Box::new(move |g, gs| {
            let mut gx = ArrayD::zeros(xv.raw_dim());
            let mut gw = Array2::<f64>::zeros((cin, cout * kh * kw));
            let w2 = wv
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((cin, cout * kh * kw))
                .expect("weight reshape");
            for i in 0..b {
                let gi = g
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3-D");
                let gcol = im2col(&gi, kh, kw, stride, padding, (1, 1), h, wd);
                let xi = xv
                    .index_axis(Axis(0), i)
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((cin, h * wd))
                    .expect("input reshape");
                gx.index_axis_mut(Axis(0), i).assign(
                    &w2.dot(&gcol)
                        .into_shape_with_order((cin, h, wd))
                        .expect("input grad reshape"),
                );
                gw = gw + xi.dot(&gcol.t());
            }
            acc(gs, x.0, gx);
            acc(
                gs,
                w.0,
                gw.into_shape_with_order(IxDyn(&[cin, cout, kh, kw]))
                    .expect("weight grad reshape"),
            );
        });
        self.push(y, Some(back))
    }

    /// Depthwise 1-D convolution along the last axis with same padding:
    /// x [B, C, T], w [C, k] with odd k.
    pub fn dwconv1d_same(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        assert_eq!(xv.ndim(), 3, "dwconv1d input must be [B, C, T]");
        assert_eq!(wv.ndim(), 2, "dwconv1d weight must be [C, k]");
        let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = wv.shape()[1];
        assert_eq!(wv.shape()[0], c, "dwconv1d channel mismatch");
        assert_eq!(k % 2, 1, "dwconv1d kernel must be odd");
        let p = k / 2;
        let mut y = ArrayD::zeros(xv.raw_dim());
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let mut s = 0.0;
                    for j in 0..k {
                        let src = ti as i64 + j as i64 - p as i64;
                        if src >= 0 && (src as usize) < t {
                            s += xv[[bi, ci, src as usize]] * wv[[ci, j]];
                        }
                    }
                    y[[bi, ci, ti]] = s;
                }
            }
        }
        let back: BackFn = Box::new(move |g, gs| {
            let mut gx = ArrayD::zeros(xv.raw_dim());
            let mut gw = ArrayD::zeros(wv.raw_dim());
            for bi in 0..b {
                for ci in 0..c {
                    for ti in 0..t {
                        let gv = g[[bi, ci, ti]];
                        for j in 0..k {
                            let src = ti as i64 + j as i64 - p as i64;
                            if src >= 0 && (src as usize) < t {
                                gx[[bi, ci, src as usize]] += gv * wv[[ci, j]];
                                gw[[ci, j]] += gv * xv[[bi, ci, src as usize]];
                            }
                        }
                    }
                }
            }
            acc(gs, x.0, gx);
            acc(gs, w.0, gw);
        });
        self.push(y, Some(back))
    }

    // -- transforms ----------------------------------------------------------

    /// Differentiable STFT of a 1-D signal; output [2, T, F] holds the
    /// real and imaginary parts. Framing matches [`crate::signal::stft_complex`].
    pub fn stft(&mut self, x: Var, cfg: &StftConfig) -> Var {
        let xv = self.value(x).clone();
        assert_eq!(xv.ndim(), 1, "stft input must be 1-D");
        let samples = xv.as_slice().expect("contiguous").to_vec();
        let len = samples.len();
        assert!(len >= cfg.win_length, "stft input shorter than the window");
        let cfg = cfg.clone();
        let pad = cfg.win_length;
        let frames = cfg.frames_for_len(len);
        let bins = cfg.bins();
        let window = cfg.window_vec();
        let n_fft = cfg.n_fft;

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_fft);
        let mut y = ArrayD::zeros(IxDyn(&[2, frames, bins]));
        let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
        for t in 0..frames {
            let start = t * cfg.hop;
            for (n, slot) in buf.iter_mut().enumerate() {
                let v = if n < cfg.win_length {
                    let idx = start + n;
                    if idx >= pad && idx - pad < len {
                        samples[idx - pad] * window[n]
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            for f in 0..bins {
                y[[0, t, f]] = buf[f].re;
                y[[1, t, f]] = buf[f].im;
            }
        }
        let back: BackFn = Box::new(move |g, gs| {
            // Per frame, the gradient wrt the windowed samples is the real
            // part of the unnormalized inverse DFT of the one-sided bin
            // gradients (no Hermitian extension: only those bins exist).
            let mut planner = FftPlanner::new();
            let ifft = planner.plan_fft_inverse(n_fft);
            let mut gx = vec![0.0f64; len];
            let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
            for t in 0..frames {
                for slot in buf.iter_mut() {
                    *slot = Complex::new(0.0, 0.0);
                }
                for f in 0..bins {
                    buf[f] = Complex::new(g[[0, t, f]], g[[1, t, f]]);
                }
                ifft.process(&mut buf);
                let start = t * cfg.hop;
                for n in 0..cfg.win_length {
                    let idx = start + n;
                    if idx >= pad && idx - pad < len {
                        gx[idx - pad] += buf[n].re * window[n];
                    }
                }
            }
            acc(gs, x.0, ArrayD::from_shape_vec(IxDyn(&[len]), gx).expect("shape"));
        });
        self.push(y, Some(back))
    }

    /// Differentiable iSTFT of [2, T, F] to `length` samples, matching
    /// [`crate::signal::istft_complex`].
    pub fn istft(&mut self, s: Var, cfg: &StftConfig, length: usize) -> Var {
        let sv = self.value(s).clone();
        assert_eq!(sv.ndim(), 3, "istft input must be [2, T, F]");
        assert_eq!(sv.shape()[0], 2, "istft axis 0 must be re/im");
        let frames = sv.shape()[1];
        let bins = sv.shape()[2];
        let cfg = cfg.clone();
        assert_eq!(bins, cfg.bins(), "istft bin count mismatch");
        assert!(
            length <= frames * cfg.hop + cfg.win_length,
            "istft length exceeds frame coverage"
        );
        let n_fft = cfg.n_fft;
        let pad = cfg.win_length;
        let window = cfg.window_vec();
        let total = (frames - 1) * cfg.hop + n_fft;
        let mut wsq = vec![0.0f64; total];
        for t in 0..frames {
            let start = t * cfg.hop;
            for (n, &wn) in window.iter().enumerate() {
                wsq[start + n] += wn * wn;
            }
        }

        let mut planner = FftPlanner::new();
        let ifft = planner.plan_fft_inverse(n_fft);
        let mut acc_buf = vec![0.0f64; total];
        let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = Complex::new(sv[[0, t, f]], sv[[1, t, f]]);
            }
            for f in bins..n_fft {
                buf[f] = Complex::new(sv[[0, t, n_fft - f]], -sv[[1, t, n_fft - f]]);
            }
            ifft.process(&mut buf);
            let start = t * cfg.hop;
            for n in 0..cfg.win_length {
                acc_buf[start + n] += buf[n].re / n_fft as f64 * window[n];
            }
        }
        let mut out = vec![0.0f64; length];
        for (i, o) in out.iter_mut().enumerate() {
            let idx = pad + i;
            if idx < acc_buf.len() && wsq[idx] > 1e-12 {
                *o = acc_buf[idx] / wsq[idx];
            }
        }
        let back: BackFn = Box::new(move |g, gs| {
            // Adjoint of WOLA synthesis: spread the sample gradients back
            // through the 1/wsq normalization and the window, then take
            // the forward DFT of each frame; one-sided bins pick up the
            // Hermitian doubling factor c_k.
            let mut gpad = vec![0.0f64; total];
            for i in 0..length {
                let idx = pad + i;
                if idx < total && wsq[idx] > 1e-12 {
                    gpad[idx] = g[[i]] / wsq[idx];
                }
            }
            let mut planner = FftPlanner::new();
            let fft = planner.plan_fft_forward(n_fft);
            let mut gsv = ArrayD::zeros(IxDyn(&[2, frames, bins]));
            let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
            for t in 0..frames {
                let start = t * cfg.hop;
                for (n, slot) in buf.iter_mut().enumerate() {
                    let v = if n < cfg.win_length {
                        gpad[start + n] * window[n]
                    } else {
                        0.0
                    };
                    *slot = Complex::new(v, 0.0);
                }
                fft.process(&mut buf);
                for f in 0..bins {
                    let ck = if f == 0 || (n_fft % 2 == 0 && f == n_fft / 2) {
                        1.0
                    } else {
                        2.0
                    };
                    gsv[[0, t, f]] = ck / n_fft as f64 * buf[f].re;
                    gsv[[1, t, f]] = ck / n_fft as f64 * buf[f].im;
                }
            }
            acc(gs, s.0, gsv);
        });
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[length]), out).expect("shape"),
            Some(back),
        )
    }
}

fn conv_out(h: usize, k: usize, s: usize, p: usize, d: usize) -> usize {
    (h + 2 * p - d * (k - 1) - 1) / s + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let src_i = (oi * stride.0 + ki * dilation.0) as i64 - padding.0 as i64;
                    if src_i < 0 || src_i as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let src_j = (oj * stride.1 + kj * dilation.1) as i64 - padding.1 as i64;
                        if src_j < 0 || src_j as usize >= w {
                            continue;
                        }
                        col[[row, oi * wo + oj]] = x[[ci, src_i as usize, src_j as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds column entries back into an image
/// of shape [c, h, w]. The column's spatial grid is `ho` by `wo`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut img = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let dst_i = (oi * stride.0 + ki * dilation.0) as i64 - padding.0 as i64;
                    if dst_i < 0 || dst_i as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let dst_j = (oj * stride.1 + kj * dilation.1) as i64 - padding.1 as i64;
                        if dst_j < 0 || dst_j as usize >= w {
                            continue;
                        }
                        img[[ci, dst_i as usize, dst_j as usize]] += col[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    img
}
