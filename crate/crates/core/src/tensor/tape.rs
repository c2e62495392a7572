//! Reverse-mode autodiff on a dynamic tape.
//!
//! Each forward op appends a node holding its value plus a one-shot closure
//! that maps the output gradient to parent gradients. Nodes whose parents all
//! carry `needs_grad == false` skip the closure entirely, so inference pays
//! only the forward cost. Values are `ArcArray`s: closures capture them by
//! reference count, not by copy.
//!
//! Determinism contract: every op reduces in a fixed sequential order per
//! output element. Rayon is used only across disjoint output slices, so
//! results are bit-identical regardless of thread count.

use ndarray::{ArcArray, Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn};
use rayon::prelude::*;
use std::sync::Arc;

use super::index_maps::{im2col_map, IndexMap, PadMode, RowMap, ZERO_SRC};
use super::Element;

pub type Value<E> = ArcArray<E, IxDyn>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub usize);

type BackClosure<E> = Box<dyn FnOnce(&ArrayD<E>) -> Vec<ArrayD<E>> + Send>;

struct BackOp<E: Element> {
    parents: Vec<ValueId>,
    run: BackClosure<E>,
}

struct Node<E: Element> {
    value: Value<E>,
    needs_grad: bool,
    back: Option<BackOp<E>>,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients<E: Element> {
    by_node: Vec<Option<ArrayD<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn take(&mut self, id: ValueId) -> Option<ArrayD<E>> {
        self.by_node.get_mut(id.0).and_then(|g| g.take())
    }
    pub fn get(&self, id: ValueId) -> Option<&ArrayD<E>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new(true)
    }
}

impl<E: Element> Tape<E> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn value(&self, id: ValueId) -> &Value<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Read a scalar (0-d or single-element) node.
    pub fn scalar(&self, id: ValueId) -> E {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<E>, needs_grad: bool, back: Option<BackOp<E>>) -> ValueId {
        let needs_grad = needs_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: value.into_shared(),
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<E>) -> ValueId {
        self.push(value, false, None)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: ArrayD<E>) -> ValueId {
        self.push(value, true, None)
    }

    pub fn leaf_shared(&mut self, value: Value<E>) -> ValueId {
        self.nodes.push(Node {
            value,
            needs_grad: self.grad_enabled,
            back: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn unary<F>(&mut self, a: ValueId, value: ArrayD<E>, back: F) -> ValueId
    where
        F: FnOnce(&ArrayD<E>) -> Vec<ArrayD<E>> + Send + 'static,
    {
        let ng = self.needs(&[a]);
        let op = ng.then(|| BackOp {
            parents: vec![a],
            run: Box::new(back) as BackClosure<E>,
        });
        self.push(value, ng, op)
    }

    fn binary<F>(&mut self, a: ValueId, b: ValueId, value: ArrayD<E>, back: F) -> ValueId
    where
        F: FnOnce(&ArrayD<E>) -> Vec<ArrayD<E>> + Send + 'static,
    {
        let ng = self.needs(&[a, b]);
        let op = ng.then(|| BackOp {
            parents: vec![a, b],
            run: Box::new(back) as BackClosure<E>,
        });
        self.push(value, ng, op)
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &va.view() + &vb.view();
        self.binary(a, b, out, move |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &va.view() - &vb.view();
        self.binary(a, b, out, move |g| vec![g.clone(), g.mapv(|v| -v)])
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &va.view() * &vb.view();
        self.binary(a, b, out, move |g| {
            vec![g * &vb.view(), g * &va.view()]
        })
    }

    pub fn scale(&mut self, a: ValueId, c: E) -> ValueId {
        let out = self.value(a).mapv(|v| v * c);
        self.unary(a, out, move |g| vec![g.mapv(|v| v * c)])
    }

    pub fn abs(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a).clone();
        let out = va.mapv(|v| v.abs());
        self.unary(a, out, move |g| {
            vec![ndarray::Zip::from(g).and(&va.view()).map_collect(|&gv, &xv| {
                if xv > E::zero() {
                    gv
                } else if xv < E::zero() {
                    -gv
                } else {
                    E::zero()
                }
            })]
        })
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a).clone();
        let out = va.mapv(|v| if v > E::zero() { v } else { E::zero() });
        self.unary(a, out, move |g| {
            vec![ndarray::Zip::from(g)
                .and(&va.view())
                .map_collect(|&gv, &xv| if xv > E::zero() { gv } else { E::zero() })]
        })
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a).clone();
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let one = E::one();
        let out = va.mapv(|x| half * x * (one + (c * (x + k * x * x * x)).tanh()));
        self.unary(a, out, move |g| {
            let three = E::from_f64(3.0);
            vec![ndarray::Zip::from(g).and(&va.view()).map_collect(|&gv, &x| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let sech2 = one - t * t;
                let du = c * (one + three * k * x * x);
                gv * (half * (one + t) + half * x * sech2 * du)
            })]
        })
    }

    // ----- reductions -----

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a).clone();
        let n = va.len();
        let inv = E::from_f64(1.0 / n as f64);
        let m = va.iter().fold(E::zero(), |acc, &v| acc + v) * inv;
        let out = ArrayD::from_elem(IxDyn(&[]), m);
        let shape: Vec<usize> = va.shape().to_vec();
        self.unary(a, out, move |g| {
            let gv = *g.iter().next().unwrap() * inv;
            vec![ArrayD::from_elem(IxDyn(&shape), gv)]
        })
    }

    pub fn add_scalar_nodes(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.add(a, b)
    }

    // ----- linear algebra -----

    /// `y = x.w + b` over the last axis; `x: (..., in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let vb = self.value(b).clone();
        let in_dim = *vx.shape().last().expect("linear input rank");
        assert_eq!(vw.shape()[0], in_dim, "linear weight shape");
        let out_dim = vw.shape()[1];
        let rows: usize = vx.len() / in_dim;

        let x2 = vx
            .view()
            .into_shape_with_order((rows, in_dim))
            .expect("linear reshape");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear w 2d");
        let mut y = matmul(&x2, &w2);
        {
            let bv = vb.view().into_shape_with_order(out_dim).unwrap();
            for mut row in y.rows_mut() {
                row += &bv;
            }
        }
        let mut out_shape: Vec<usize> = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        let y = y.into_shape_with_order(IxDyn(&out_shape)).unwrap();

        let x_shape: Vec<usize> = vx.shape().to_vec();
        let ng = self.needs(&[x, w, b]);
        let op = ng.then(|| BackOp {
            parents: vec![x, w, b],
            run: Box::new(move |g: &ArrayD<E>| {
                let g2 = g.view().into_shape_with_order((rows, out_dim)).unwrap();
                let x2 = vx.view().into_shape_with_order((rows, in_dim)).unwrap();
                let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
                let dx = matmul(&g2, &w2.t());
                let dw = matmul(&x2.t(), &g2);
                let db = g2.sum_axis(Axis(0));
                vec![
                    dx.into_shape_with_order(IxDyn(&x_shape)).unwrap(),
                    dw.into_dyn(),
                    db.into_dyn(),
                ]
            }) as BackClosure<E>,
        });
        self.push(y, ng, op)
    }

    /// Batched matmul over leading axis: `a: (B, m, k)`, `b: (B, k, n)` (or
    /// `(B, n, k)` when `transpose_b`), producing `(B, m, n)`.
    pub fn bmm(&mut self, a: ValueId, b: ValueId, transpose_b: bool) -> ValueId {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        assert_eq!(va.ndim(), 3, "bmm lhs rank");
        assert_eq!(vb.ndim(), 3, "bmm rhs rank");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = if transpose_b { vb.shape()[1] } else { vb.shape()[2] };
        assert_eq!(vb.shape()[0], bs, "bmm batch");
        assert_eq!(
            if transpose_b { vb.shape()[2] } else { vb.shape()[1] },
            k,
            "bmm inner dim"
        );

        let mut out = ArrayD::<E>::zeros(IxDyn(&[bs, m, n]));
        {
            let av = va.view();
            let bv = vb.view();
            par_batch(&mut out, m * n, |i, dst| {
                let ai = batch_slice(&av, i, m, k);
                let bi = if transpose_b {
                    batch_slice(&bv, i, n, k).reversed_axes()
                } else {
                    batch_slice(&bv, i, k, n)
                };
                matmul_into(&ai, &bi, dst, n);
            });
        }

        let ng = self.needs(&[a, b]);
        let op = ng.then(|| BackOp {
            parents: vec![a, b],
            run: Box::new(move |g: &ArrayD<E>| {
                let gv = g.view();
                let av = va.view();
                let bv = vb.view();
                let mut da = ArrayD::<E>::zeros(IxDyn(&[bs, m, k]));
                let mut db = ArrayD::<E>::zeros(vb.raw_dim());
                par_batch(&mut da, m * k, |i, dst| {
                    let gi = batch_slice(&gv, i, m, n);
                    let bi = if transpose_b {
                        batch_slice(&bv, i, n, k)
                    } else {
                        batch_slice(&bv, i, k, n).reversed_axes()
                    };
                    matmul_into(&gi, &bi, dst, k);
                });
                let (r1, r2) = if transpose_b { (n, k) } else { (k, n) };
                par_batch(&mut db, r1 * r2, |i, dst| {
                    let gi = batch_slice(&gv, i, m, n);
                    let ai = batch_slice(&av, i, m, k);
                    if transpose_b {
                        // db_i = g_i^T a_i -> (n, k)
                        matmul_into(&gi.reversed_axes(), &ai, dst, k);
                    } else {
                        // db_i = a_i^T g_i -> (k, n)
                        matmul_into(&ai.reversed_axes(), &gi, dst, n);
                    }
                });
                vec![da, db]
            }) as BackClosure<E>,
        });
        self.push(out, ng, op)
    }

    // ----- normalization / activation over last axis -----

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: E) -> ValueId {
        let vx = self.value(x).clone();
        let vg = self.value(gamma).clone();
        let vb = self.value(beta).clone();
        let c = *vx.shape().last().expect("layer_norm rank");
        assert_eq!(vg.len(), c, "layer_norm gamma len");
        let rows = vx.len() / c;

        let xs = vx.as_slice().expect("layer_norm standard layout");
        let gs: Vec<E> = vg.iter().copied().collect();
        let bs: Vec<E> = vb.iter().copied().collect();
        let mut y = vec![E::zero(); rows * c];
        let mut xhat = vec![E::zero(); rows * c];
        let mut inv_std = vec![E::zero(); rows];
        let inv_c = E::from_f64(1.0 / c as f64);
        for r in 0..rows {
            let xr = &xs[r * c..(r + 1) * c];
            let mean = xr.iter().fold(E::zero(), |a, &v| a + v) * inv_c;
            let var = xr
                .iter()
                .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_c;
            let istd = E::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..c {
                let h = (xr[i] - mean) * istd;
                xhat[r * c + i] = h;
                y[r * c + i] = h * gs[i] + bs[i];
            }
        }
        let y = ArrayD::from_shape_vec(vx.raw_dim(), y).unwrap();

        let x_shape = vx.raw_dim();
        let ng = self.needs(&[x, gamma, beta]);
        let op = ng.then(|| BackOp {
            parents: vec![x, gamma, beta],
            run: Box::new(move |g: &ArrayD<E>| {
                let gflat = g.as_slice().expect("ln grad layout");
                let mut dx = vec![E::zero(); rows * c];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for r in 0..rows {
                    let go = &gflat[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let istd = inv_std[r];
                    let mut sum_gh = E::zero();
                    let mut sum_gh_xh = E::zero();
                    for i in 0..c {
                        let gh = go[i] * gs[i];
                        sum_gh += gh;
                        sum_gh_xh += gh * xh[i];
                        dgamma[i] += go[i] * xh[i];
                        dbeta[i] += go[i];
                    }
                    let mgh = sum_gh * inv_c;
                    let mghx = sum_gh_xh * inv_c;
                    for i in 0..c {
                        let gh = go[i] * gs[i];
                        dx[r * c + i] = istd * (gh - mgh - xh[i] * mghx);
                    }
                }
                vec![
                    ArrayD::from_shape_vec(x_shape.clone(), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                ]
            }) as BackClosure<E>,
        });
        self.push(y, ng, op)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: ValueId) -> ValueId {
        let vx = self.value(x).clone();
        let c = *vx.shape().last().expect("softmax rank");
        let rows = vx.len() / c;
        let xs = vx.as_slice().expect("softmax layout");
        let mut y = vec![E::zero(); rows * c];
        for r in 0..rows {
            let xr = &xs[r * c..(r + 1) * c];
            let mx = xr.iter().fold(E::neg_infinity(), |a, &v| a.max(v));
            let mut z = E::zero();
            for i in 0..c {
                let e = (xr[i] - mx).exp();
                y[r * c + i] = e;
                z += e;
            }
            let inv = E::one() / z;
            for i in 0..c {
                y[r * c + i] *= inv;
            }
        }
        let yarr = ArrayD::from_shape_vec(vx.raw_dim(), y).unwrap();
        let ycap = yarr.clone();
        self.unary(x, yarr, move |g| {
            let gs = g.as_slice().unwrap();
            let ys = ycap.as_slice().unwrap();
            let mut dx = vec![E::zero(); rows * c];
            for r in 0..rows {
                let go = &gs[r * c..(r + 1) * c];
                let yo = &ys[r * c..(r + 1) * c];
                let dot = go
                    .iter()
                    .zip(yo.iter())
                    .fold(E::zero(), |a, (&g, &y)| a + g * y);
                for i in 0..c {
                    dx[r * c + i] = yo[i] * (go[i] - dot);
                }
            }
            vec![ArrayD::from_shape_vec(ycap.raw_dim(), dx).unwrap()]
        })
    }

    // ----- structural -----

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> ValueId {
        let vx = self.value(x).clone();
        assert_eq!(vx.len(), shape.iter().product::<usize>(), "reshape size");
        let out = vx
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let old: Vec<usize> = vx.shape().to_vec();
        self.unary(x, out, move |g| {
            vec![g.clone().into_shape_with_order(IxDyn(&old)).unwrap()]
        })
    }

    pub fn permute(&mut self, x: ValueId, axes: &[usize]) -> ValueId {
        let vx = self.value(x).clone();
        let out = vx
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.unary(x, out, move |g| {
            vec![g
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned()]
        })
    }

    /// Flat gather through a shared [`IndexMap`].
    pub fn gather(&mut self, x: ValueId, map: Arc<IndexMap>) -> ValueId {
        let vx = self.value(x).clone();
        let out = map.apply(&vx.to_owned());
        let src_shape: Vec<usize> = vx.shape().to_vec();
        self.unary(x, out, move |g| vec![map.scatter_add(g, &src_shape)])
    }

    /// Row gather over a `(rows, cols)` matrix through a shared [`RowMap`].
    pub fn gather_rows(&mut self, x: ValueId, map: Arc<RowMap>) -> ValueId {
        let vx = self.value(x).clone();
        assert_eq!(vx.ndim(), 2, "gather_rows expects a matrix");
        let cols = vx.shape()[1];
        let rows = vx.shape()[0];
        let out = map.apply(&vx.to_owned(), cols);
        self.unary(x, out, move |g| vec![map.scatter_add(g, rows, cols)])
    }

    /// Adds a per-head relative position bias and an optional per-window mask
    /// to attention scores laid out as `(groups*heads, t, t)`, where `groups`
    /// cycles through `mask_windows` windows. The mask is constant; the bias
    /// receives gradient summed over all groups.
    pub fn attn_bias_mask(
        &mut self,
        scores: ValueId,
        bias: ValueId,
        mask: Option<(Arc<ArrayD<E>>, usize)>,
    ) -> ValueId {
        let vs = self.value(scores).clone();
        let vb = self.value(bias).clone();
        assert_eq!(vs.ndim(), 3);
        let (bh, t, t2) = (vs.shape()[0], vs.shape()[1], vs.shape()[2]);
        assert_eq!(t, t2);
        let heads = vb.shape()[0];
        assert_eq!(vb.shape()[1..], [t, t]);
        assert_eq!(bh % heads, 0, "scores not divisible by heads");

        let ss = vs.as_slice().unwrap();
        let bs = vb.as_slice().unwrap();
        let mut out = vec![E::zero(); ss.len()];
        let tt = t * t;
        for i in 0..bh {
            let h = i % heads;
            let src = &ss[i * tt..(i + 1) * tt];
            let bias_h = &bs[h * tt..(h + 1) * tt];
            let dst = &mut out[i * tt..(i + 1) * tt];
            if let Some((m, nw)) = &mask {
                let wi = (i / heads) % nw;
                let ms = m.as_slice().unwrap();
                let mw = &ms[wi * tt..(wi + 1) * tt];
                for j in 0..tt {
                    dst[j] = src[j] + bias_h[j] + mw[j];
                }
            } else {
                for j in 0..tt {
                    dst[j] = src[j] + bias_h[j];
                }
            }
        }
        let out = ArrayD::from_shape_vec(vs.raw_dim(), out).unwrap();

        let bias_shape = vb.raw_dim();
        let ng = self.needs(&[scores, bias]);
        let op = ng.then(|| BackOp {
            parents: vec![scores, bias],
            run: Box::new(move |g: &ArrayD<E>| {
                let gs = g.as_slice().unwrap();
                let mut dbias = vec![E::zero(); heads * tt];
                for i in 0..bh {
                    let h = i % heads;
                    let src = &gs[i * tt..(i + 1) * tt];
                    let dst = &mut dbias[h * tt..(h + 1) * tt];
                    for j in 0..tt {
                        dst[j] += src[j];
                    }
                }
                vec![
                    g.clone(),
                    ArrayD::from_shape_vec(bias_shape.clone(), dbias).unwrap(),
                ]
            }) as BackClosure<E>,
        });
        self.push(out, ng, op)
    }

    /// Scales sample `n`'s slice (leading axis) by `factors[n]`; used for
    /// stochastic depth. Factors are constants.
    pub fn scale_rows0(&mut self, x: ValueId, factors: Arc<Vec<E>>) -> ValueId {
        let vx = self.value(x).clone();
        let n = vx.shape()[0];
        assert_eq!(factors.len(), n);
        let chunk = vx.len() / n;
        let xs = vx.as_slice().unwrap();
        let mut out = Vec::with_capacity(xs.len());
        for (i, &f) in factors.iter().enumerate() {
            out.extend(xs[i * chunk..(i + 1) * chunk].iter().map(|&v| v * f));
        }
        let out = ArrayD::from_shape_vec(vx.raw_dim(), out).unwrap();
        let fac = factors.clone();
        self.unary(x, out, move |g| {
            let gs = g.as_slice().unwrap();
            let mut dx = Vec::with_capacity(gs.len());
            for (i, &f) in fac.iter().enumerate() {
                dx.extend(gs[i * chunk..(i + 1) * chunk].iter().map(|&v| v * f));
            }
            vec![ArrayD::from_shape_vec(g.raw_dim(), dx).unwrap()]
        })
    }

    // ----- convolution / pooling -----

    /// Same-size `k x k`, stride-1 convolution with the given padding mode.
    /// `x: (n, cin, h, w)`, `w: (cout, cin, k, k)`, `b: (cout)`.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        weight: ValueId,
        bias: ValueId,
        pad: PadMode,
    ) -> ValueId {
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();
        assert_eq!(vx.ndim(), 4, "conv2d input rank");
        let (n, cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cout, k) = (vw.shape()[0], vw.shape()[2]);
        assert_eq!(vw.shape()[1], cin, "conv2d channel mismatch");
        assert_eq!(vw.shape()[3], k);
        assert_eq!(vb.len(), cout);

        let map = Arc::new(im2col_map(cin, h, w, k, pad));
        let ckk = cin * k * k;
        let hw = h * w;

        let mut out = ArrayD::<E>::zeros(IxDyn(&[n, cout, h, w]));
        {
            let w2: Array2<E> = vw
                .view()
                .into_shape_with_order((cout, ckk))
                .unwrap()
                .to_owned();
            let bvals: Vec<E> = vb.iter().copied().collect();
            let xs = vx.as_slice().unwrap();
            let sample_len = cin * hw;
            let out_slice = out.as_slice_mut().unwrap();
            out_slice
                .par_chunks_mut(cout * hw)
                .enumerate()
                .for_each(|(s, dst)| {
                    let col = gather_cols(&map, &xs[s * sample_len..(s + 1) * sample_len]);
                    let col = ArrayView2::from_shape((ckk, hw), &col).unwrap();
                    let y = matmul(&w2.view(), &col);
                    let ys = y.as_slice().unwrap();
                    for c in 0..cout {
                        let bc = bvals[c];
                        let d = &mut dst[c * hw..(c + 1) * hw];
                        let s = &ys[c * hw..(c + 1) * hw];
                        for i in 0..hw {
                            d[i] = s[i] + bc;
                        }
                    }
                });
        }

        let ng = self.needs(&[x, weight, bias]);
        let op = ng.then(|| BackOp {
            parents: vec![x, weight, bias],
            run: Box::new(move |g: &ArrayD<E>| {
                let w2: Array2<E> = vw
                    .view()
                    .into_shape_with_order((cout, ckk))
                    .unwrap()
                    .to_owned();
                let xs = vx.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let sample_len = cin * hw;

                // per-sample contributions computed in parallel, reduced in
                // fixed sample order below
                let parts: Vec<(Array2<E>, Array1<E>, Vec<E>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let gsamp =
                            ArrayView2::from_shape((cout, hw), &gs[s * cout * hw..(s + 1) * cout * hw])
                                .unwrap();
                        let col = gather_cols(&map, &xs[s * sample_len..(s + 1) * sample_len]);
                        let colv = ArrayView2::from_shape((ckk, hw), &col).unwrap();
                        let dw_s = matmul(&gsamp, &colv.t());
                        let db_s = gsamp.sum_axis(Axis(1));
                        // dcol = w^T g, then scatter back through the map
                        let dcol = matmul(&w2.t(), &gsamp);
                        let mut dx_s = vec![E::zero(); sample_len];
                        let dc = dcol.as_slice().unwrap();
                        for (j, &src) in map.idx.iter().enumerate() {
                            if src != ZERO_SRC {
                                dx_s[src] += dc[j];
                            }
                        }
                        (dw_s, db_s, dx_s)
                    })
                    .collect();

                let mut dw = Array2::<E>::zeros((cout, ckk));
                let mut db = Array1::<E>::zeros(cout);
                let mut dx = vec![E::zero(); n * sample_len];
                for (s, (dw_s, db_s, dx_s)) in parts.into_iter().enumerate() {
                    dw += &dw_s;
                    db += &db_s;
                    dx[s * sample_len..(s + 1) * sample_len].copy_from_slice(&dx_s);
                }
                vec![
                    ArrayD::from_shape_vec(IxDyn(&[n, cin, h, w]), dx).unwrap(),
                    dw.into_shape_with_order(IxDyn(&[cout, cin, k, k])).unwrap(),
                    db.into_dyn(),
                ]
            }) as BackClosure<E>,
        });
        self.push(out, ng, op)
    }

    /// 2x2 stride-2 max pooling; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: ValueId) -> ValueId {
        let vx = self.value(x).clone();
        assert_eq!(vx.ndim(), 4);
        let (n, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = vx.as_slice().unwrap();
        let mut out = vec![E::zero(); n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = E::neg_infinity();
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = base + (oy * 2 + dy) * w + ox * 2 + dx;
                            if xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        let in_len = vx.len();
        let in_shape = vx.raw_dim();
        self.unary(x, out, move |g| {
            let gs = g.as_slice().unwrap();
            let mut dx = vec![E::zero(); in_len];
            for (o, &src) in arg.iter().enumerate() {
                dx[src] += gs[o];
            }
            vec![ArrayD::from_shape_vec(in_shape.clone(), dx).unwrap()]
        })
    }

    // ----- backward -----

    /// Reverse sweep from a scalar root. Consumes the recorded closures.
    pub fn backward(&mut self, root: ValueId) -> Gradients<E> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            E::one(),
        ));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(op) = self.nodes[id].back.take() {
                let gout = grads[id].take().expect("gradient present");
                let parent_grads = (op.run)(&gout);
                debug_assert_eq!(parent_grads.len(), op.parents.len());
                for (pid, pg) in op.parents.into_iter().zip(parent_grads) {
                    if !self.nodes[pid.0].needs_grad {
                        continue;
                    }
                    match &mut grads[pid.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { by_node: grads }
    }
}

fn gather_cols<E: Element>(map: &IndexMap, src: &[E]) -> Vec<E> {
    map.idx
        .iter()
        .map(|&i| if i == ZERO_SRC { E::zero() } else { src[i] })
        .collect()
}

fn batch_slice<'a, E: Element>(
    v: &'a ndarray::ArrayViewD<'a, E>,
    i: usize,
    r: usize,
    c: usize,
) -> ArrayView2<'a, E> {
    let flat = v.as_slice().expect("batch standard layout");
    ArrayView2::from_shape((r, c), &flat[i * r * c..(i + 1) * r * c]).unwrap()
}

/// Splits `out` into per-batch chunks and fills each in parallel. Each chunk
/// is produced by exactly one closure invocation, so the result does not
/// depend on scheduling.
fn par_batch<E: Element, F>(out: &mut ArrayD<E>, chunk: usize, f: F)
where
    F: Fn(usize, &mut [E]) + Sync,
{
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, dst)| f(i, dst));
}

fn matmul<E: Element>(a: &ArrayView2<'_, E>, b: &ArrayView2<'_, E>) -> Array2<E> {
    a.dot(b)
}

fn matmul_into<E: Element>(a: &ArrayView2<'_, E>, b: &ArrayView2<'_, E>, dst: &mut [E], _n: usize) {
    let y = a.dot(b);
    dst.copy_from_slice(y.as_slice().expect("matmul output layout"));
}

pub fn view_mut2<E: Element>(dst: &mut [E], r: usize, c: usize) -> ArrayViewMut2<'_, E> {
    ArrayViewMut2::from_shape((r, c), dst).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::index_maps::{pixel_shuffle_map, window_partition_rows};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central finite differences of `f` w.r.t. each input entry, compared
    /// against the analytic gradient.
    fn check_grad<F>(inputs: &[ArrayD<f64>], f: F, tol: f64)
    where
        F: Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
    {
        let mut tape = Tape::new(true);
        let ids: Vec<ValueId> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = f(&mut tape, &ids);
        let mut grads = tape.backward(root);
        let analytic: Vec<ArrayD<f64>> = ids
            .iter()
            .map(|&id| grads.take(id).expect("leaf grad"))
            .collect();

        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for flat in 0..input.len() {
                let eval = |v: f64| -> f64 {
                    let mut per: Vec<ArrayD<f64>> = inputs.to_vec();
                    per[k].as_slice_mut().unwrap()[flat] = v;
                    let mut t = Tape::new(false);
                    let ids: Vec<ValueId> = per.iter().map(|a| t.constant(a.clone())).collect();
                    let r = f(&mut t, &ids);
                    t.scalar(r)
                };
                let x0 = input.as_slice().unwrap()[flat];
                let fd = (eval(x0 + eps) - eval(x0 - eps)) / (2.0 * eps);
                let an = analytic[k].as_slice().unwrap()[flat];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < tol,
                    "input {k} entry {flat}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        check_grad(&[a, b], |t, ids| {
            let m = t.mul(ids[0], ids[1]);
            let s = t.sub(m, ids[0]);
            let g = t.gelu(s);
            let r = t.relu(g);
            let a = t.abs(r);
            t.mean_all(a)
        }, 1e-5);
    }

    #[test]
    fn grad_linear_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[5, 4]);
        let w = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[3]);
        let gamma = randn(&mut rng, &[3]);
        let beta = randn(&mut rng, &[3]);
        check_grad(&[x, w, b, gamma, beta], |t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2]);
            let n = t.layer_norm(y, ids[3], ids[4], 1e-5);
            let s = t.softmax_last(n);
            t.mean_all(s)
        }, 1e-4);
    }

    #[test]
    fn grad_bmm_both_orients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 5]);
        check_grad(&[a.clone(), b], |t, ids| {
            let y = t.bmm(ids[0], ids[1], false);
            t.mean_all(y)
        }, 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bt = randn(&mut rng, &[2, 5, 4]);
        check_grad(&[a, bt], |t, ids| {
            let y = t.bmm(ids[0], ids[1], true);
            t.mean_all(y)
        }, 1e-5);
    }

    #[test]
    fn grad_conv_both_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 2, 3, 3]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        for pad in [PadMode::Replicate, PadMode::Zero] {
            check_grad(&[x.clone(), w.clone(), b.clone()], move |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], pad);
                let y = t.gelu(y);
                t.mean_all(y)
            }, 1e-4);
        }
    }

    #[test]
    fn grad_pool_gather_shuffle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[1, 4, 4, 4]);
        let shuffle = Arc::new(pixel_shuffle_map(1, 1, 4, 4, 2));
        check_grad(&[x], move |t, ids| {
            let p = t.maxpool2x2(ids[0]);
            let r = t.reshape(p, &[1, 4, 2, 2]);
            let s = t.gather(r, shuffle.clone());
            let a = t.abs(s);
            t.mean_all(a)
        }, 1e-4);
    }

    #[test]
    fn grad_rows_and_bias_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = randn(&mut rng, &[16, 3]);
        let bias = randn(&mut rng, &[2, 4, 4]);
        let scores = randn(&mut rng, &[4, 4, 4]); // 2 windows x 2 heads
        let rows = Arc::new(window_partition_rows(1, 4, 4, 2, 1));
        let mask = Arc::new(randn(&mut rng, &[2, 4, 4]));
        check_grad(&[tokens, bias, scores], move |t, ids| {
            let w = t.gather_rows(ids[0], rows.clone());
            let sm = t.attn_bias_mask(ids[2], ids[1], Some((mask.clone(), 2)));
            let sm = t.softmax_last(sm);
            let m = t.mean_all(sm);
            let w = t.mean_all(w);
            let tot = t.add(m, w);
            t.scale(tot, 2.0)
        }, 1e-4);
    }

    #[test]
    fn grad_permute_scale_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 3, 4]);
        let f = Arc::new(vec![0.5_f64, 2.0]);
        check_grad(&[x], move |t, ids| {
            let p = t.permute(ids[0], &[0, 2, 1]);
            let s = t.scale_rows0(p, f.clone());
            t.mean_all(s)
        }, 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[6, 8]);
        let mut t = Tape::<f64>::new(false);
        let id = t.constant(x);
        let y = t.softmax_last(id);
        for row in t.value(y).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn inference_tape_builds_no_backward() {
        let mut t = Tape::<f32>::new(false);
        let a = t.leaf(ArrayD::zeros(IxDyn(&[2, 2])));
        let b = t.relu(a);
        assert!(t.nodes[b.0].back.is_none());
        assert!(!t.nodes[b.0].needs_grad);
    }
}
