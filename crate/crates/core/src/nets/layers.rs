//! A small sequential network with hand-written backward passes.
//!
//! All parameters of a network live in one flat buffer; layers only hold
//! offsets into it. That keeps the optimizer, teacher snapshots and
//! checkpoints trivial: they all work on `&[T]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};
use crate::rng::Rng;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`; smooth, so finite differences behave everywhere.
    Silu,
}

/// `(channels, height, width)`; vectors are `(n, 1, 1)`.
pub type Shape = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    /// Square convolution, stride 1, "same" padding; `k` is 1 or 3.
    Conv { cin: usize, cout: usize, k: usize, w: usize, b: usize },
    /// Per-sample normalisation over (C, H, W) with a per-channel affine.
    Norm { c: usize, g: usize, b: usize },
    Act(Activation),
    /// 2x2 average pooling.
    Pool,
    GlobalPool,
    Linear { din: usize, dout: usize, w: usize, b: usize },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Op>, shortcut: Vec<Op> },
    /// Projection of the whole vector onto the unit sphere.
    L2Normalize,
}

/// Name, offset and shape of one parameter tensor inside the flat buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builder that allocates parameters and records their canonical names.
pub(crate) struct Builder<'a> {
    pub params: Vec<f64>,
    pub entries: Vec<ParamEntry>,
    rng: &'a mut Rng,
    shape: Shape,
}

impl<'a> Builder<'a> {
    pub fn new(rng: &'a mut Rng, input: Shape) -> Self {
        Builder {
            params: Vec::new(),
            entries: Vec::new(),
            rng,
            shape: input,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn set_shape(&mut self, s: Shape) {
        self.shape = s;
    }

    fn alloc(&mut self, name: String, shape: Vec<usize>, init: impl Fn(&mut Rng) -> f64) -> usize {
        let offset = self.params.len();
        let n: usize = shape.iter().product();
        for _ in 0..n {
            let v = init(self.rng);
            self.params.push(v);
        }
        self.entries.push(ParamEntry { name, offset, shape });
        offset
    }

    fn gaussian(std: f64) -> impl Fn(&mut Rng) -> f64 {
        move |r: &mut Rng| {
            let z: f64 = StandardNormal.sample(r);
            std * z
        }
    }

    pub fn conv(&mut self, name: &str, cout: usize, k: usize) -> Op {
        let (cin, h, w) = self.shape;
        let fan_in = (cin * k * k) as f64;
        let wo = self.alloc(format!("{name}.weight"), vec![cout, cin, k, k], Self::gaussian(Float::sqrt(2.0 / fan_in)));
        let bo = self.alloc(format!("{name}.bias"), vec![cout], |_| 0.0);
        self.shape = (cout, h, w);
        Op::Conv { cin, cout, k, w: wo, b: bo }
    }

    pub fn norm(&mut self, name: &str) -> Op {
        let c = self.shape.0;
        let g = self.alloc(format!("{name}.gain"), vec![c], |_| 1.0);
        let b = self.alloc(format!("{name}.shift"), vec![c], |_| 0.0);
        Op::Norm { c, g, b }
    }

    pub fn pool(&mut self) -> Result<Op> {
        let (c, h, w) = self.shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
        }
        self.shape = (c, h / 2, w / 2);
        Ok(Op::Pool)
    }

    pub fn global_pool(&mut self) -> Op {
        self.shape = (self.shape.0, 1, 1);
        Op::GlobalPool
    }

    pub fn linear(&mut self, name: &str, dout: usize) -> Op {
        let (c, h, w) = self.shape;
        let din = c * h * w;
        let wo = self.alloc(format!("{name}.weight"), vec![dout, din], Self::gaussian(Float::sqrt(1.0 / din as f64)));
        let bo = self.alloc(format!("{name}.bias"), vec![dout], |_| 0.0);
        self.shape = (dout, 1, 1);
        Op::Linear { din, dout, w: wo, b: bo }
    }
}

/// Per-op state saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Trace<T> {
    Conv { cols: Vec<T>, shape: Shape },
    Norm { xhat: Vec<T>, inv_std: T },
    Act { input: Vec<T> },
    Pool { shape: Shape },
    GlobalPool { shape: Shape },
    Linear { input: Vec<T> },
    Residual { body: Vec<Trace<T>>, shortcut: Vec<Trace<T>> },
    L2Normalize { output: Vec<T>, norm: T },
}

fn im2col3<T: Real>(x: &[T], (c, h, w): Shape, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    if x0 == 1 {
                        dst[0] = T::zero();
                    }
                    if x1 == w - 1 {
                        dst[w - 1] = T::zero();
                    }
                    let sx0 = x0 + kx - 1;
                    dst[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im3<T: Real>(cols: &[T], (c, h, w): Shape, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w - 1 } else { w };
                let sx0 = x0 + kx - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + x0..y * w + x1];
                    let dst = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn out_shape(ops: &[Op], mut s: Shape) -> Shape {
    for op in ops {
        s = match op {
            Op::Conv { cout, .. } => (*cout, s.1, s.2),
            Op::Norm { .. } | Op::Act(_) | Op::L2Normalize => s,
            Op::Pool => (s.0, s.1 / 2, s.2 / 2),
            Op::GlobalPool => (s.0, 1, 1),
            Op::Linear { dout, .. } => (*dout, 1, 1),
            Op::Residual { body, .. } => out_shape(body, s),
        };
    }
    s
}

pub(crate) fn forward<T: Real>(ops: &[Op], p: &[T], x: Vec<T>, shape: Shape, mut trace: Option<&mut Vec<Trace<T>>>) -> (Vec<T>, Shape) {
    let mut x = x;
    let mut s = shape;
    for op in ops {
        let (y, ns, t) = forward_op(op, p, x, s, trace.is_some());
        if let (Some(tr), Some(t)) = (trace.as_deref_mut(), t) {
            tr.push(t);
        }
        x = y;
        s = ns;
    }
    (x, s)
}

fn forward_op<T: Real>(op: &Op, p: &[T], x: Vec<T>, s: Shape, keep: bool) -> (Vec<T>, Shape, Option<Trace<T>>) {
    let (c, h, w) = s;
    let hw = h * w;
    match *op {
        Op::Conv { cin, cout, k, w: wo, b: bo } => {
            let kk = cin * k * k;
            let mut y = vec![T::zero(); cout * hw];
            for co in 0..cout {
                y[co * hw..(co + 1) * hw].fill(p[bo + co]);
            }
            let cols = if k == 3 {
                let mut cols = vec![T::zero(); kk * hw];
                im2col3(&x, s, &mut cols);
                cols
            } else {
                x
            };
            T::gemm(cout, kk, hw, &p[wo..wo + cout * kk], false, &cols, false, T::one(), &mut y);
            let t = keep.then(|| Trace::Conv { cols, shape: s });
            (y, (cout, h, w), t)
        }
        Op::Norm { c: nc, g, b } => {
            debug_assert_eq!(nc, c);
            let n = T::of((c * hw) as f64);
            let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv_std = T::one() / (var + T::of(NORM_EPS)).sqrt();
            let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
            let mut y = vec![T::zero(); c * hw];
            for ci in 0..c {
                let (gg, bb) = (p[g + ci], p[b + ci]);
                for (yo, &xv) in y[ci * hw..(ci + 1) * hw].iter_mut().zip(&xhat[ci * hw..(ci + 1) * hw]) {
                    *yo = gg * xv + bb;
                }
            }
            let t = keep.then(|| Trace::Norm { xhat, inv_std });
            (y, s, t)
        }
        Op::Act(a) => {
            let y: Vec<T> = match a {
                Activation::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
                Activation::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
            };
            let t = keep.then(|| Trace::Act { input: x });
            (y, s, t)
        }
        Op::Pool => {
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::of(0.25);
            let mut y = vec![T::zero(); c * oh * ow];
            for ci in 0..c {
                let src = &x[ci * hw..(ci + 1) * hw];
                for yy in 0..oh {
                    for xx in 0..ow {
                        let i = 2 * yy * w + 2 * xx;
                        y[ci * oh * ow + yy * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                    }
                }
            }
            (y, (c, oh, ow), keep.then_some(Trace::Pool { shape: s }))
        }
        Op::GlobalPool => {
            let inv = T::one() / T::of(hw as f64);
            let y = (0..c)
                .map(|ci| x[ci * hw..(ci + 1) * hw].iter().fold(T::zero(), |a, &v| a + v) * inv)
                .collect();
            (y, (c, 1, 1), keep.then_some(Trace::GlobalPool { shape: s }))
        }
        Op::Linear { din, dout, w: wo, b: bo } => {
            debug_assert_eq!(din, x.len());
            let mut y: Vec<T> = p[bo..bo + dout].to_vec();
            T::gemm(dout, din, 1, &p[wo..wo + dout * din], false, &x, false, T::one(), &mut y);
            let t = keep.then(|| Trace::Linear { input: x });
            (y, (dout, 1, 1), t)
        }
        Op::L2Normalize => {
            let norm = (x.iter().fold(T::zero(), |a, &v| a + v * v) + T::of(NORM_EPS)).sqrt();
            let y: Vec<T> = x.iter().map(|&v| v / norm).collect();
            let t = keep.then(|| Trace::L2Normalize { output: y.clone(), norm });
            (y, s, t)
        }
        Op::Residual { ref body, ref shortcut } => {
            let mut tb = Vec::new();
            let mut ts = Vec::new();
            let (sx, _) = if shortcut.is_empty() {
                (x.clone(), s)
            } else {
                forward(shortcut, p, x.clone(), s, keep.then_some(&mut ts))
            };
            let (mut y, ns) = forward(body, p, x, s, keep.then_some(&mut tb));
            for (a, b) in y.iter_mut().zip(&sx) {
                *a += *b;
            }
            let t = keep.then(|| Trace::Residual {
                body: tb,
                shortcut: ts,
            });
            (y, ns, t)
        }
    }
}

/// Back-propagates `gy` through `ops`, accumulating parameter gradients into
/// `grads`. Returns the input gradient when `want_input` is set.
pub(crate) fn backward<T: Real>(
    ops: &[Op],
    p: &[T],
    traces: &[Trace<T>],
    gy: Vec<T>,
    grads: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let mut g = gy;
    let n = ops.len();
    for (i, (op, tr)) in ops.iter().zip(traces).enumerate().rev() {
        let need = want_input || i > 0;
        match backward_op(op, p, tr, g, grads, need) {
            Some(gx) => g = gx,
            None => {
                debug_assert!(i == 0 && n > 0);
                return None;
            }
        }
    }
    Some(g)
}

fn backward_op<T: Real>(op: &Op, p: &[T], tr: &Trace<T>, gy: Vec<T>, grads: &mut [T], need: bool) -> Option<Vec<T>> {
    match (op, tr) {
        (&Op::Conv { cin, cout, k, w: wo, b: bo }, Trace::Conv { cols, shape }) => {
            let hw = shape.1 * shape.2;
            let kk = cin * k * k;
            for co in 0..cout {
                grads[bo + co] += gy[co * hw..(co + 1) * hw].iter().fold(T::zero(), |a, &v| a + v);
            }
            T::gemm(cout, hw, kk, &gy, false, cols, true, T::one(), &mut grads[wo..wo + cout * kk]);
            if !need {
                return None;
            }
            let mut dcols = vec![T::zero(); kk * hw];
            T::gemm(kk, cout, hw, &p[wo..wo + cout * kk], true, &gy, false, T::zero(), &mut dcols);
            if k == 3 {
                let mut dx = vec![T::zero(); cin * hw];
                col2im3(&dcols, *shape, &mut dx);
                Some(dx)
            } else {
                Some(dcols)
            }
        }
        (&Op::Norm { c, g, b }, Trace::Norm { xhat, inv_std }) => {
            let hw = xhat.len() / c;
            let mut dxhat = vec![T::zero(); xhat.len()];
            for ci in 0..c {
                let r = ci * hw..(ci + 1) * hw;
                let (mut sg, mut sb) = (T::zero(), T::zero());
                for ((d, &gyv), &xh) in dxhat[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&xhat[r]) {
                    sg += gyv * xh;
                    sb += gyv;
                    *d = gyv * p[g + ci];
                }
                grads[g + ci] += sg;
                grads[b + ci] += sb;
            }
            if !need {
                return None;
            }
            let nn = T::of(xhat.len() as f64);
            let sum_d = dxhat.iter().fold(T::zero(), |a, &v| a + v);
            let sum_dx = dxhat.iter().zip(xhat).fold(T::zero(), |a, (&d, &x)| a + d * x);
            let scale = *inv_std / nn;
            Some(
                dxhat
                    .iter()
                    .zip(xhat)
                    .map(|(&d, &x)| scale * (nn * d - sum_d - x * sum_dx))
                    .collect(),
            )
        }
        (&Op::Act(a), Trace::Act { input }) => Some(match a {
            Activation::Relu => gy
                .iter()
                .zip(input)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            Activation::Silu => gy
                .iter()
                .zip(input)
                .map(|(&g, &x)| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })
                .collect(),
        }),
        (Op::Pool, Trace::Pool { shape: (c, h, w) }) => {
            let (c, h, w) = (*c, *h, *w);
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::of(0.25);
            let mut dx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let g = gy[ci * oh * ow + yy * ow + xx] * quarter;
                        let i = ci * h * w + 2 * yy * w + 2 * xx;
                        dx[i] = g;
                        dx[i + 1] = g;
                        dx[i + w] = g;
                        dx[i + w + 1] = g;
                    }
                }
            }
            Some(dx)
        }
        (Op::GlobalPool, Trace::GlobalPool { shape: (c, h, w) }) => {
            let hw = h * w;
            let inv = T::one() / T::of(hw as f64);
            let mut dx = vec![T::zero(); c * hw];
            for ci in 0..*c {
                dx[ci * hw..(ci + 1) * hw].fill(gy[ci] * inv);
            }
            Some(dx)
        }
        (&Op::Linear { din, dout, w: wo, b: bo }, Trace::Linear { input }) => {
            for (gb, &g) in grads[bo..bo + dout].iter_mut().zip(&gy) {
                *gb += g;
            }
            T::gemm(dout, 1, din, &gy, false, input, false, T::one(), &mut grads[wo..wo + dout * din]);
            if !need {
                return None;
            }
            let mut dx = vec![T::zero(); din];
            T::gemm(din, dout, 1, &p[wo..wo + dout * din], true, &gy, false, T::zero(), &mut dx);
            Some(dx)
        }
        (Op::Residual { body, shortcut }, Trace::Residual { body: tb, shortcut: ts }) => {
            let mut dx = backward(body, p, tb, gy.clone(), grads, true).expect("input gradient requested");
            let ds = if shortcut.is_empty() {
                gy
            } else {
                backward(shortcut, p, ts, gy, grads, true).expect("input gradient requested")
            };
            for (a, b) in dx.iter_mut().zip(&ds) {
                *a += *b;
            }
            Some(dx)
        }
        (Op::L2Normalize, Trace::L2Normalize { output, norm }) => {
            let dot = output.iter().zip(&gy).fold(T::zero(), |a, (&y, &g)| a + y * g);
            Some(output.iter().zip(&gy).map(|(&y, &g)| (g - y * dot) / *norm).collect())
        }
        _ => unreachable!("trace does not match op"),
    }
}

/// A sequential network and its flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub(crate) ops: Vec<Op>,
    pub(crate) input: Shape,
    pub params: Vec<T>,
    pub entries: Vec<ParamEntry>,
}

/// Saved forward state of one sample.
pub struct Tape<T> {
    traces: Vec<Trace<T>>,
}

impl<T: Real> Network<T> {
    pub(crate) fn from_builder(ops: Vec<Op>, input: Shape, params: Vec<f64>, entries: Vec<ParamEntry>) -> Self {
        Network {
            ops,
            input,
            params: params.into_iter().map(T::of).collect(),
            entries,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_len(&self) -> usize {
        let s = out_shape(&self.ops, self.input);
        s.0 * s.1 * s.2
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            ops: self.ops.clone(),
            input: self.input,
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
            entries: self.entries.clone(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "expected input of length {}, got {}",
                self.input_len(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Inference on one sample.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(forward(&self.ops, &self.params, x.to_vec(), self.input, None).0)
    }

    /// Inference on `n` samples stored back to back; each row is processed
    /// independently, so the result equals per-sample calls concatenated.
    pub fn forward_rows(&self, xs: &[T]) -> Result<Vec<T>> {
        let d = self.input_len();
        if d == 0 || xs.len() % d != 0 {
            return Err(Error::Shape(format!("{} values is not a whole number of {d}-rows", xs.len())));
        }
        let mut out = Vec::with_capacity(xs.len() / d * self.output_len());
        for row in xs.chunks(d) {
            out.extend(self.forward(row)?);
        }
        Ok(out)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_tape(&self, x: &[T]) -> Result<(Vec<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut traces = Vec::with_capacity(self.ops.len());
        let (y, _) = forward(&self.ops, &self.params, x.to_vec(), self.input, Some(&mut traces));
        Ok((y, Tape { traces }))
    }

    /// Accumulates parameter gradients for one sample into `grads`
    /// (`grads.len() == num_params()`); returns the input gradient on request.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &[T], grads: &mut [T], want_input: bool) -> Option<Vec<T>> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        assert_eq!(grad_out.len(), self.output_len(), "output gradient size");
        backward(&self.ops, &self.params, &tape.traces, grad_out.to_vec(), grads, want_input)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Parameter tensors by canonical name, in allocation order.
    pub fn tensors(&self) -> Vec<(&str, &[T])> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &self.params[e.offset..e.offset + e.len()]))
            .collect()
    }

    /// Overwrites the tensor called `name`.
    pub fn set_tensor(&mut self, name: &str, values: &[T]) -> Result<()> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named `{name}`")))?
            .clone();
        if values.len() != e.len() {
            return Err(Error::Shape(format!(
                "`{name}` holds {} values, got {}",
                e.len(),
                values.len()
            )));
        }
        self.params[e.offset..e.offset + e.len()].copy_from_slice(values);
        Ok(())
    }
}
