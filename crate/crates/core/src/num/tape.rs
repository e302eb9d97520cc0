//! Dynamic reverse-mode tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and the
//! handles of its parents. Parents always precede children, so a single
//! reverse sweep over the node list is a valid backward pass.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::mem::MaybeUninit;

use super::tensor::{broadcast_index, broadcast_shape};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

type Id = usize;

enum Op<S> {
    Leaf,
    Constant,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, S),
    Offset(Id),
    Silu(Id),
    Relu(Id),
    Sqrt(Id),
    Abs(Id),
    Square(Id),
    Sum(Id),
    Mean(Id),
    MeanPerSample(Id),
    Reshape(Id),
    Linear {
        x: Id,
        w: Id,
        b: Option<Id>,
    },
    Conv {
        x: Id,
        w: Id,
        b: Option<Id>,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    Upsample2(Id),
    /// `mask ? b : a`, elementwise over equal shapes.
    Select {
        a: Id,
        b: Id,
        mask: Vec<bool>,
    },
    SpatialMean(Id),
    Concat1(Vec<Id>),
    CrossEntropy {
        logits: Id,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }
    fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kx).div_ceil(s);
        let hi = if self.w + p > kx { (self.w + p - kx - 1) / s + 1 } else { 0 };
        (lo.min(self.wo), hi.min(self.wo))
    }

    /// Writes the patches of one sample, padding zeros included, into columns
    /// `[col0, col0 + out_px)` of a `patch x stride` matrix.
    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [MaybeUninit<S>], stride: usize, col0: usize) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let zero = MaybeUninit::new(S::ZERO);
        for ci in 0..self.ci {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * stride + col0..row * stride + col0 + self.out_px()];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = oy * s + ky;
                        if lo >= hi || iy < p || iy - p >= self.h {
                            out.fill(zero);
                            continue;
                        }
                        let src = &plane[(iy - p) * self.w..(iy - p + 1) * self.w];
                        out[..lo].fill(zero);
                        out[hi..].fill(zero);
                        let first = lo * s + kx - p;
                        if s == 1 {
                            out[lo..hi].write_copy_of_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (o, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                o.write(v);
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], stride: usize, col0: usize, gx: &mut [S]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.ci {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * stride + col0..row * stride + col0 + self.out_px()];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= self.h {
                            continue;
                        }
                        let dst = &mut plane[(iy - p) * self.w..(iy - p + 1) * self.w];
                        let g = &src[oy * self.wo + lo..oy * self.wo + hi];
                        let first = lo * s + kx - p;
                        if s == 1 {
                            for (d, &v) in dst[first..first + (hi - lo)].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst[first..].iter_mut().step_by(s).zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a tape node. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: Id,
}

impl<S: Scalar> core::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: receives a gradient from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient (data, frozen weights, detached paths).
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: Id) -> Rc<Tensor<S>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every leaf recorded before it.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), S::ONE));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: Id| -> &Tensor<S> { &nodes[i].value };
            let wants = |i: Id| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => leaves[id] = Some(g),
                Op::Constant => {}
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        if wants(p) {
                            accumulate(&mut grads[p], reduce_to(&g, val(p).shape()));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], reduce_to(&g, val(*a).shape()));
                    }
                    if wants(*b) {
                        let neg = g.map(|v| -v);
                        accumulate(&mut grads[*b], reduce_to(&neg, val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if wants(*a) {
                        let ga = mul_broadcast(&g, vb);
                        accumulate(&mut grads[*a], reduce_to(&ga, va.shape()));
                    }
                    if wants(*b) {
                        let gb = mul_broadcast(&g, va);
                        accumulate(&mut grads[*b], reduce_to(&gb, vb.shape()));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[*a], g.map(|v| v * s));
                }
                Op::Select { a, b, mask } => {
                    for (p, pick) in [(*a, false), (*b, true)] {
                        if wants(p) {
                            let data = g.data().iter().zip(mask).map(|(&v, &m)| if m == pick { v } else { S::ZERO }).collect();
                            accumulate(&mut grads[p], Tensor::from_parts(g.shape().to_vec(), data));
                        }
                    }
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    let shaped = Tensor::from_parts(val(*a).shape().to_vec(), g.into_data());
                    accumulate(&mut grads[*a], shaped);
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let ga = x
                        .zip_map(&g, |x, g| {
                            let sig = S::ONE / (S::ONE + (-x).exp());
                            g * sig * (S::ONE + x * (S::ONE - sig))
                        })
                        .expect("silu shapes");
                    accumulate(&mut grads[*a], ga);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let ga = x
                        .zip_map(&g, |x, g| if x > S::ZERO { g } else { S::ZERO })
                        .expect("relu shapes");
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sqrt(a) => {
                    // d sqrt(x) at x = 0 is taken as 0 so all-zero inputs stay finite
                    let y = &node.value;
                    let two = S::from_f64(2.0);
                    let ga = y
                        .zip_map(&g, |y, g| if y > S::ZERO { g / (two * y) } else { S::ZERO })
                        .expect("sqrt shapes");
                    accumulate(&mut grads[*a], ga);
                }
                Op::Abs(a) => {
                    let x = val(*a);
                    let ga = x
                        .zip_map(&g, |x, g| {
                            if x > S::ZERO {
                                g
                            } else if x < S::ZERO {
                                -g
                            } else {
                                S::ZERO
                            }
                        })
                        .expect("abs shapes");
                    accumulate(&mut grads[*a], ga);
                }
                Op::Square(a) => {
                    let x = val(*a);
                    let two = S::from_f64(2.0);
                    let ga = x.zip_map(&g, |x, g| two * x * g).expect("square shapes");
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[*a], Tensor::full(val(*a).shape(), g.item()));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let s = g.item() / S::from_f64(x.len() as f64);
                    accumulate(&mut grads[*a], Tensor::full(x.shape(), s));
                }
                Op::MeanPerSample(a) => {
                    let x = val(*a);
                    let per = x.per_sample();
                    let inv = S::ONE / S::from_f64(per as f64);
                    let mut ga = Vec::with_capacity(x.len());
                    for &gv in g.data() {
                        ga.extend(core::iter::repeat_n(gv * inv, per));
                    }
                    accumulate(&mut grads[*a], Tensor::from_parts(x.shape().to_vec(), ga));
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (n, fin) = (vx.shape()[0], vx.shape()[1]);
                    let fout = vw.shape()[0];
                    if wants(*x) {
                        let mut gx = vec![S::ZERO; n * fin];
                        S::gemm(n, fout, fin, g.data(), fout as isize, 1, vw.data(), fin as isize, 1, S::ZERO, &mut gx, fin as isize, 1);
                        accumulate(&mut grads[*x], Tensor::from_parts(vx.shape().to_vec(), gx));
                    }
                    if wants(*w) {
                        let mut gw = vec![S::ZERO; fout * fin];
                        S::gemm(fout, n, fin, g.data(), 1, fout as isize, vx.data(), fin as isize, 1, S::ZERO, &mut gw, fin as isize, 1);
                        accumulate(&mut grads[*w], Tensor::from_parts(vw.shape().to_vec(), gw));
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let mut gb = vec![S::ZERO; fout];
                            for row in g.data().chunks(fout) {
                                for (acc, &v) in gb.iter_mut().zip(row) {
                                    *acc += v;
                                }
                            }
                            accumulate(&mut grads[*b], Tensor::from_parts(vec![fout], gb));
                        }
                    }
                }
                Op::Conv { x, w, b, geom, cols } => {
                    let vw = val(*w);
                    let (patch, px) = (geom.patch(), geom.out_px());
                    let wide = geom.n * px;
                    // [N, Co, px] -> [Co, N * px]
                    let mut gwide = vec![S::ZERO; geom.co * wide];
                    for (i, sample) in g.data().chunks(geom.co * px).enumerate() {
                        for (co, plane) in sample.chunks(px).enumerate() {
                            gwide[co * wide + i * px..co * wide + (i + 1) * px].copy_from_slice(plane);
                        }
                    }
                    if wants(*w) {
                        let mut gw = vec![S::ZERO; geom.co * patch];
                        S::gemm(geom.co, wide, patch, &gwide, wide as isize, 1, cols, 1, wide as isize, S::ZERO, &mut gw, patch as isize, 1);
                        accumulate(&mut grads[*w], Tensor::from_parts(vw.shape().to_vec(), gw));
                    }
                    if wants(*x) {
                        let in_per = geom.ci * geom.h * geom.w;
                        let mut gx = vec![S::ZERO; geom.n * in_per];
                        let mut gcols = vec![S::ZERO; patch * wide];
                        S::gemm(patch, geom.co, wide, vw.data(), 1, patch as isize, &gwide, wide as isize, 1, S::ZERO, &mut gcols, wide as isize, 1);
                        for i in 0..geom.n {
                            geom.col2im(&gcols, wide, i * px, &mut gx[i * in_per..(i + 1) * in_per]);
                        }
                        accumulate(&mut grads[*x], Tensor::from_parts(val(*x).shape().to_vec(), gx));
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let gb = gwide.chunks(wide).map(|row| row.iter().fold(S::ZERO, |a, &v| a + v)).collect();
                            accumulate(&mut grads[*b], Tensor::from_parts(vec![geom.co], gb));
                        }
                    }
                }
                Op::Upsample2(a) => {
                    let x = val(*a);
                    let s = x.shape();
                    let w = s[3];
                    let mut ga = Vec::with_capacity(x.len());
                    for pair in g.data().chunks_exact(4 * w) {
                        let (top, bottom) = pair.split_at(2 * w);
                        ga.extend(top.chunks_exact(2).zip(bottom.chunks_exact(2)).map(|(t, b)| t[0] + t[1] + b[0] + b[1]));
                    }
                    accumulate(&mut grads[*a], Tensor::from_parts(s.to_vec(), ga));
                }
                Op::SpatialMean(a) => {
                    let x = val(*a);
                    let s = x.shape();
                    let hw = s[2] * s[3];
                    let inv = S::ONE / S::from_f64(hw as f64);
                    let mut ga = Vec::with_capacity(x.len());
                    for &gv in g.data() {
                        ga.extend(core::iter::repeat_n(gv * inv, hw));
                    }
                    accumulate(&mut grads[*a], Tensor::from_parts(s.to_vec(), ga));
                }
                Op::Concat1(parts) => {
                    let out_shape = g.shape();
                    let inner: usize = out_shape[2..].iter().product();
                    let total = out_shape[1] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let ps = val(p).shape();
                        let width = ps[1] * inner;
                        if wants(p) {
                            let mut gp = Vec::with_capacity(val(p).len());
                            for n in 0..out_shape[0] {
                                gp.extend_from_slice(&g.data()[n * total + offset..n * total + offset + width]);
                            }
                            accumulate(&mut grads[p], Tensor::from_parts(ps.to_vec(), gp));
                        }
                        offset += width;
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g.item() / S::from_f64(n as f64);
                    let mut gl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * k + l] -= S::ONE;
                    }
                    for v in gl.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads[*logits], Tensor::from_parts(vec![n, k], gl));
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sums a gradient of broadcast shape back onto `shape`.
/// When `src` equals `out` on a leading prefix and is 1 afterwards, the run
/// length each source element is repeated over.
fn trailing_run(src: &[usize], out: &[usize]) -> Option<usize> {
    if src.len() != out.len() {
        return None;
    }
    let k = src.iter().rposition(|&d| d != 1).map_or(0, |i| i + 1);
    (src[..k] == out[..k]).then(|| out[k..].iter().product())
}

fn reduce_to<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g.clone();
    }
    if let Some(run) = trailing_run(shape, g.shape()) {
        let data = g
            .data()
            .chunks(run)
            .map(|c| {
                let mut acc = S::ZERO;
                for &v in c {
                    acc += v;
                }
                acc
            })
            .collect();
        return Tensor::from_parts(shape.to_vec(), data);
    }
    let idx = broadcast_index(shape, g.shape());
    let mut out = vec![S::ZERO; shape.iter().product()];
    for (&i, &v) in idx.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// `g * broadcast(other)` where `g` already has the broadcast shape.
fn mul_broadcast<S: Scalar>(g: &Tensor<S>, other: &Tensor<S>) -> Tensor<S> {
    if g.shape() == other.shape() {
        return g.mul(other).expect("equal shapes");
    }
    if let Some(run) = trailing_run(other.shape(), g.shape()) {
        let od = other.data();
        let data = g.data().chunks(run).zip(od).flat_map(|(c, &o)| c.iter().map(move |&v| v * o)).collect();
        return Tensor::from_parts(g.shape().to_vec(), data);
    }
    let idx = broadcast_index(other.shape(), g.shape());
    let od = other.data();
    Tensor::from_parts(
        g.shape().to_vec(),
        g.data().iter().zip(&idx).map(|(&v, &i)| v * od[i]).collect(),
    )
}

fn binary<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    if a.shape() == shape.as_slice() {
        if let Some(run) = trailing_run(b.shape(), &shape) {
            let mut data = Vec::with_capacity(a.len());
            for (c, &y) in a.data().chunks(run).zip(b.data()) {
                data.extend(c.iter().map(|&x| f(x, y)));
            }
            return Ok(Tensor::from_parts(shape, data));
        }
    }
    let ia = broadcast_index(a.shape(), &shape);
    let ib = broadcast_index(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Result of [`Tape::backward`]: one gradient per leaf.
pub struct Gradients<S> {
    leaves: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `var`; zeros when `var` did not influence the loss.
    pub fn wrt(&self, var: Var<'_, S>) -> Tensor<S> {
        match self.leaves.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => var.value().zeros_like(),
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var<'_, S>) -> bool {
        matches!(self.leaves.get(var.id), Some(Some(_)))
    }
}

// Arithmetic is fallible (shape checks), so these stay inherent methods rather than operator impls.
#[allow(clippy::should_implement_trait)]
impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> S {
        self.value().item()
    }

    fn unary(self, value: Tensor<S>, op: Op<S>) -> Self {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary_op(self, other: Self, value: Tensor<S>, op: Op<S>) -> Self {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let v = binary("add", &self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.binary_op(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let v = binary("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.binary_op(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let v = binary("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.binary_op(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: S) -> Self {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Self {
        self.scale(-S::ONE)
    }

    pub fn offset(self, c: S) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn silu(self) -> Self {
        let v = self.value().map(|x| x / (S::ONE + (-x).exp()));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|x| if x > S::ZERO { x } else { S::ZERO });
        self.unary(v, Op::Relu(self.id))
    }

    /// Square root; negative inputs are clamped to zero.
    pub fn sqrt(self) -> Self {
        let v = self.value().map(|x| if x > S::ZERO { x.sqrt() } else { S::ZERO });
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn abs(self) -> Self {
        let v = self.value().map(|x| x.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn square(self) -> Self {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    /// Takes `other` where `mask` is one and `self` where it is zero; values are copied bit-exactly.
    pub fn select(self, other: Self, mask: &Tensor<S>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.shape() != mask.shape() {
            return Err(Error::ShapeMismatch { op: "select", left: a.shape().to_vec(), right: mask.shape().to_vec() });
        }
        if mask.data().iter().any(|&m| m != S::ZERO && m != S::ONE) {
            return Err(Error::NonBinaryMask);
        }
        let pick: Vec<bool> = mask.data().iter().map(|&m| m == S::ONE).collect();
        let data = a.data().iter().zip(b.data()).zip(&pick).map(|((&x, &y), &m)| if m { y } else { x }).collect();
        let v = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.binary_op(other, v, Op::Select { a: self.id, b: other.id, mask: pick }))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Mean over every axis but the leading one: `[N, ...] -> [N]`.
    pub fn mean_per_sample(self) -> Self {
        let x = self.value();
        let per = x.per_sample();
        let inv = S::ONE / S::from_f64(per as f64);
        let data = x
            .data()
            .chunks(per)
            .map(|c| {
                let mut acc = S::ZERO;
                for &v in c {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        self.unary(Tensor::from_parts(vec![x.batch()], data), Op::MeanPerSample(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// `x [N, in] * w[out, in]^T + b[out]`.
    pub fn linear(self, w: Self, b: Option<Self>) -> Result<Self> {
        let (vx, vw) = (self.value(), w.value());
        let mismatch = || Error::ShapeMismatch {
            op: "linear",
            left: vx.shape().to_vec(),
            right: vw.shape().to_vec(),
        };
        if vx.rank() != 2 || vw.rank() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(mismatch());
        }
        let (n, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut out = vec![S::ZERO; n * fout];
        if let Some(b) = b {
            let vb = b.value();
            if vb.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: vec![fout],
                    right: vb.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(vb.data());
            }
        }
        S::gemm(n, fin, fout, vx.data(), fin as isize, 1, vw.data(), 1, fin as isize, S::ONE, &mut out, fout as isize, 1);
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.requires(&ids);
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, fout], out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    /// 2-D convolution of `x [N, Ci, H, W]` with square kernel `w [Co, Ci, k, k]`.
    pub fn conv2d(self, w: Self, b: Option<Self>, stride: usize, pad: usize) -> Result<Self> {
        let (vx, vw) = (self.value(), w.value());
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let k = ws[2];
        let geom = ConvGeom {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let bias = match b {
            Some(b) => {
                let vb = b.value();
                if vb.shape() != [geom.co] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        left: vec![geom.co],
                        right: vb.shape().to_vec(),
                    });
                }
                Some(vb)
            }
            None => None,
        };
        let (patch, px) = (geom.patch(), geom.out_px());
        let in_per = geom.ci * geom.h * geom.w;
        let wide = geom.n * px;
        let mut cols: Vec<S> = Vec::with_capacity(patch * wide);
        let spare = &mut cols.spare_capacity_mut()[..patch * wide];
        for i in 0..geom.n {
            geom.im2col(&vx.data()[i * in_per..(i + 1) * in_per], spare, wide, i * px);
        }
        // SAFETY: im2col wrote every element of rows [0, patch) across all n * px columns.
        unsafe { cols.set_len(patch * wide) };
        let mut owide = vec![S::ZERO; geom.co * wide];
        S::gemm(geom.co, patch, wide, vw.data(), patch as isize, 1, &cols, wide as isize, 1, S::ZERO, &mut owide, wide as isize, 1);
        let mut out = Vec::with_capacity(geom.co * wide);
        for i in 0..geom.n {
            for co in 0..geom.co {
                let row = &owide[co * wide + i * px..co * wide + (i + 1) * px];
                match &bias {
                    Some(vb) => {
                        let bv = vb.data()[co];
                        out.extend(row.iter().map(|&v| v + bv));
                    }
                    None => out.extend_from_slice(row),
                }
            }
        }
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.requires(&ids);
        // weight gradients need the patches; input-only paths do not
        let keep_cols = rg && self.tape.requires(&[w.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![geom.n, geom.co, geom.ho, geom.wo], out),
            Op::Conv {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2(self) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "upsample2 expects rank 4".into(),
            });
        }
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(x.len() * 4);
        for row in x.data().chunks_exact(w) {
            let start = out.len();
            out.extend(row.iter().flat_map(|&v| [v, v]));
            out.extend_from_within(start..start + 2 * w);
        }
        let v = Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out);
        Ok(self.unary(v, Op::Upsample2(self.id)))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(self) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "spatial_mean expects rank 4".into(),
            });
        }
        let hw = s[2] * s[3];
        let inv = S::ONE / S::from_f64(hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|c| {
                let mut acc = S::ZERO;
                for &v in c {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        Ok(self.unary(Tensor::from_parts(vec![s[0], s[1]], data), Op::SpatialMean(self.id)))
    }

    /// Concatenation along axis 1; all other extents must agree.
    pub fn concat1(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: Vec::new(),
            reason: "concat of zero tensors".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape().to_vec();
        if s0.len() < 2 {
            return Err(Error::InvalidShape {
                shape: s0,
                reason: "concat1 expects rank >= 2".into(),
            });
        }
        let mut width = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::ShapeMismatch {
                    op: "concat1",
                    left: s0.clone(),
                    right: s.to_vec(),
                });
            }
            width += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let mut data = Vec::new();
        for n in 0..s0[0] {
            for v in &values {
                let w = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[n * w..(n + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[1] = width;
        let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
        let rg = first.tape.requires(&ids);
        Ok(first.tape.push(Tensor::from_parts(shape, data), Op::Concat1(ids), rg))
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![labels.len()],
            });
        }
        let k = s[1];
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0f64;
        for (row, &l) in x.data().chunks(k).zip(labels) {
            let m = row.iter().fold(row[0], |m, &v| m.max(v));
            let mut z = S::ZERO;
            for &v in row {
                z += (v - m).exp();
            }
            for &v in row {
                probs.push((v - m).exp() / z);
            }
            loss += (m + z.ln() - row[l]).to_f64();
        }
        let v = Tensor::scalar(S::from_f64(loss / labels.len() as f64));
        Ok(self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}
