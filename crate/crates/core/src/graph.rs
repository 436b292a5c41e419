//! Small reverse-mode tape over dynamically shaped `ndarray` tensors.
//!
//! Every operation materializes its output in standard layout and records a
//! backward closure capturing `Rc` handles to whatever it needs. Backward
//! walks nodes in reverse insertion order (a valid reverse topological
//! order), so gradient accumulation order is fixed and runs are bitwise
//! reproducible regardless of thread count: a graph lives on one thread.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

use crate::{Error, Result, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut GradStore<T>)>;

struct Node<T> {
    value: Rc<ArrayD<T>>,
    tracked: bool,
    back: Option<BackFn<T>>,
}

/// Gradients keyed by node id, populated by [`Graph::backward`].
pub struct GradStore<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> GradStore<T> {
    fn accumulate(&mut self, id: usize, g: ArrayD<T>) {
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads[v.0].take()
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    bytes: usize,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::invalid(format!(
                "incompatible broadcast shapes {a:?} vs {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to_shape<T: Scalar>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    #[allow(clippy::needless_range_loop)]
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn standardize<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn roll_array<T: Scalar>(a: &ArrayD<T>, axis: usize, shift: isize) -> ArrayD<T> {
    let n = a.shape()[axis] as isize;
    let s = shift.rem_euclid(n) as usize;
    if s == 0 {
        return a.clone();
    }
    let head = a.slice_axis(Axis(axis), ndarray::Slice::from((n as usize - s) as isize..));
    let tail = a.slice_axis(Axis(axis), ndarray::Slice::from(..(n as usize - s) as isize));
    ndarray::concatenate(Axis(axis), &[head, tail]).expect("roll concat")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            bytes: 0,
        }
    }

    /// Graph that records values only; backward is unavailable.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            bytes: 0,
        }
    }

    /// Total bytes held in node values; peak activation memory of the tape.
    pub fn memory_bytes(&self) -> usize {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Rc<ArrayD<T>>, tracked: bool, back: Option<BackFn<T>>) -> Var {
        self.bytes += value.len() * std::mem::size_of::<T>();
        self.nodes.push(Node {
            value,
            tracked: tracked && self.grad_enabled,
            back: if self.grad_enabled { back } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input; gradients never flow into it.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(Rc::new(standardize(value)), false, None)
    }

    /// Tracked input; its gradient is retained by [`Graph::backward`].
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(Rc::new(standardize(value)), true, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Error if any element of `v` is non-finite.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericFailure {
                context: context.to_string(),
            })
        }
    }

    fn binary<FwdF, BackA, BackB>(
        &mut self,
        a: Var,
        b: Var,
        fwd: FwdF,
        back_a: BackA,
        back_b: BackB,
    ) -> Var
    where
        FwdF: FnOnce(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
        BackA: Fn(&ArrayD<T>) -> ArrayD<T> + 'static,
        BackB: Fn(&ArrayD<T>) -> ArrayD<T> + 'static,
    {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let out = fwd(&av, &bv);
        let (a_tr, b_tr) = (self.tracked(a), self.tracked(b));
        let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
        let back: Option<BackFn<T>> = if a_tr || b_tr {
            Some(Box::new(move |g, store| {
                if a_tr {
                    store.accumulate(a.0, reduce_to_shape(back_a(g), &a_shape));
                }
                if b_tr {
                    store.accumulate(b.0, reduce_to_shape(back_b(g), &b_shape));
                }
            }))
        } else {
            None
        };
        self.push(Rc::new(standardize(out)), a_tr || b_tr, back)
    }

    fn broadcast_fwd(
        a: &ArrayD<T>,
        b: &ArrayD<T>,
        f: impl Fn(T, T) -> T,
    ) -> ArrayD<T> {
        if a.shape() == b.shape() {
            let mut out = a.clone();
            out.zip_mut_with(b, |x, &y| *x = f(*x, y));
            return out;
        }
        let shape = broadcast_shape(a.shape(), b.shape()).expect("broadcast");
        let ab = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
        let bb = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
        let mut out = ab.to_owned();
        out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| Self::broadcast_fwd(x, y, |p, q| p + q),
            |g| g.clone(),
            |g| g.clone(),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| Self::broadcast_fwd(x, y, |p, q| p - q),
            |g| g.clone(),
            |g| g.mapv(|x| -x),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.binary(
            a,
            b,
            |x, y| Self::broadcast_fwd(x, y, |p, q| p * q),
            move |g| Self::broadcast_fwd(g, &bc, |p, q| p * q),
            move |g| Self::broadcast_fwd(g, &ac, |p, q| p * q),
        )
    }

    fn unary<FwdF, BackF>(&mut self, a: Var, fwd: FwdF, back: BackF) -> Var
    where
        FwdF: FnOnce(&ArrayD<T>) -> ArrayD<T>,
        BackF: Fn(&ArrayD<T>) -> ArrayD<T> + 'static,
    {
        let av = self.value_rc(a);
        let out = fwd(&av);
        let a_tr = self.tracked(a);
        let back: Option<BackFn<T>> = if a_tr {
            Some(Box::new(move |g, store| {
                store.accumulate(a.0, back(g));
            }))
        } else {
            None
        };
        self.push(Rc::new(standardize(out)), a_tr, back)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x.mapv(|v| v * c), move |g| g.mapv(|v| v * c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = Rc::new(av.mapv(|v| v.exp()));
        let oc = Rc::clone(&out);
        let a_tr = self.tracked(a);
        let back: Option<BackFn<T>> = if a_tr {
            Some(Box::new(move |g, store| {
                let mut dg = g.clone();
                dg *= &*oc;
                store.accumulate(a.0, dg);
            }))
        } else {
            None
        };
        self.push(out, a_tr, back)
    }

    /// Elementwise min(x, max); gradient is zero where clamped.
    pub fn clamp_max(&mut self, a: Var, max: T) -> Var {
        let av = self.value_rc(a);
        let ac = Rc::clone(&av);
        self.unary(
            a,
            |x| x.mapv(|v| if v > max { max } else { v }),
            move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&ac, |d, &x| {
                    if x > max {
                        *d = T::zero();
                    }
                });
                dg
            },
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::real((2.0 / std::f64::consts::PI).sqrt());
        let k = T::real(0.044715);
        let half = T::real(0.5);
        let one = T::one();
        let three = T::real(3.0);
        let av = self.value_rc(a);
        let ac = Rc::clone(&av);
        self.unary(
            a,
            |x| {
                x.mapv(|v| {
                    let u = c * (v + k * v * v * v);
                    half * v * (one + u.tanh())
                })
            },
            move |g| {
                let mut dg = g.clone();
                dg.zip_mut_with(&ac, |d, &v| {
                    let u = c * (v + k * v * v * v);
                    let t = u.tanh();
                    let sech2 = one - t * t;
                    let du = c * (one + three * k * v * v);
                    *d *= half * (one + t) + half * v * sech2 * du;
                });
                dg
            },
        )
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
        let out = a2.dot(&b2).into_dyn();
        let (a_tr, b_tr) = (self.tracked(a), self.tracked(b));
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let back: Option<BackFn<T>> = if a_tr || b_tr {
            Some(Box::new(move |g, store| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if a_tr {
                    let b2 = bc.view().into_dimensionality::<Ix2>().unwrap();
                    store.accumulate(a.0, g2.dot(&b2.t()).into_dyn());
                }
                if b_tr {
                    let a2 = ac.view().into_dimensionality::<Ix2>().unwrap();
                    store.accumulate(b.0, a2.t().dot(&g2).into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(Rc::new(out), a_tr || b_tr, back)
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let a3 = av.view().into_dimensionality::<Ix3>().expect("bmm lhs 3d");
        let b3 = bv.view().into_dimensionality::<Ix3>().expect("bmm rhs 3d");
        let (nb, m, _k) = a3.dim();
        let n = b3.dim().2;
        let mut out = ndarray::Array3::<T>::zeros((nb, m, n));
        for i in 0..nb {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        let (a_tr, b_tr) = (self.tracked(a), self.tracked(b));
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let back: Option<BackFn<T>> = if a_tr || b_tr {
            Some(Box::new(move |g, store| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = ac.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = bc.view().into_dimensionality::<Ix3>().unwrap();
                let nb = a3.dim().0;
                if a_tr {
                    let mut da = ndarray::Array3::<T>::zeros(a3.dim());
                    for i in 0..nb {
                        da.index_axis_mut(Axis(0), i).assign(
                            &g3.index_axis(Axis(0), i)
                                .dot(&b3.index_axis(Axis(0), i).t()),
                        );
                    }
                    store.accumulate(a.0, da.into_dyn());
                }
                if b_tr {
                    let mut db = ndarray::Array3::<T>::zeros(b3.dim());
                    for i in 0..nb {
                        db.index_axis_mut(Axis(0), i).assign(
                            &a3.index_axis(Axis(0), i)
                                .t()
                                .dot(&g3.index_axis(Axis(0), i)),
                        );
                    }
                    store.accumulate(b.0, db.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(Rc::new(out.into_dyn()), a_tr || b_tr, back)
    }

    /// `x [n,k] * w [k,m] + b [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let prod = self.matmul(x, w);
        self.add(prod, b)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm_last(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value_rc(x);
        let gv = self.value_rc(gain);
        let bv = self.value_rc(bias);
        let d = *xv.shape().last().expect("layer_norm input rank >= 1");
        let rows = xv.len() / d;
        let x2 = xv
            .view()
            .into_shape_with_order((rows, d))
            .expect("layer_norm reshape");
        let g1 = gv.view().into_shape_with_order(d).unwrap();
        let b1 = bv.view().into_shape_with_order(d).unwrap();
        let mut xhat = Array2::<T>::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        let inv_d = T::one() / T::real(d as f64);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() * inv_d;
            let mut var = T::zero();
            for &v in row {
                let dv = v - mean;
                var += dv * dv;
            }
            var *= inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                xhat[[r, j]] = (v - mean) * is;
            }
        }
        let mut out = Array2::<T>::zeros((rows, d));
        for r in 0..rows {
            for j in 0..d {
                out[[r, j]] = xhat[[r, j]] * g1[j] + b1[j];
            }
        }
        let out = out
            .into_shape_with_order(IxDyn(xv.shape()))
            .expect("layer_norm out shape");
        let (x_tr, g_tr, b_tr) = (self.tracked(x), self.tracked(gain), self.tracked(bias));
        let tracked = x_tr || g_tr || b_tr;
        let x_shape = xv.shape().to_vec();
        let (g_shape, b_shape) = (gv.shape().to_vec(), bv.shape().to_vec());
        let xhat = Rc::new(xhat);
        let gvc = Rc::clone(&gv);
        let back: Option<BackFn<T>> = if tracked {
            Some(Box::new(move |g, store| {
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let g1 = gvc.view().into_shape_with_order(d).unwrap();
                if g_tr {
                    let mut dg = ndarray::Array1::<T>::zeros(d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g2[[r, j]] * xhat[[r, j]];
                        }
                    }
                    store.accumulate(gain.0, dg.into_dyn().into_shape_with_order(IxDyn(&g_shape)).unwrap());
                }
                if b_tr {
                    let db = g2.sum_axis(Axis(0));
                    store.accumulate(bias.0, db.into_dyn().into_shape_with_order(IxDyn(&b_shape)).unwrap());
                }
                if x_tr {
                    let inv_d = T::one() / T::real(d as f64);
                    let mut dx = Array2::<T>::zeros((rows, d));
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = g2[[r, j]] * g1[j];
                            m1 += dxh;
                            m2 += dxh * xhat[[r, j]];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = g2[[r, j]] * g1[j];
                            dx[[r, j]] = inv_std[r] * (dxh - m1 - xhat[[r, j]] * m2);
                        }
                    }
                    store.accumulate(
                        x.0,
                        dx.into_dyn().into_shape_with_order(IxDyn(&x_shape)).unwrap(),
                    );
                }
            }))
        } else {
            None
        };
        self.push(Rc::new(out), tracked, back)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let d = *xv.shape().last().expect("softmax input rank >= 1");
        let rows = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((rows, d)).unwrap();
        let mut y = Array2::<T>::zeros((rows, d));
        for r in 0..rows {
            let row = x2.row(r);
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                y[[r, j]] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..d {
                y[[r, j]] *= inv;
            }
        }
        let out = Rc::new(
            y.into_dyn()
                .into_shape_with_order(IxDyn(xv.shape()))
                .unwrap(),
        );
        let oc = Rc::clone(&out);
        let x_tr = self.tracked(x);
        let back: Option<BackFn<T>> = if x_tr {
            Some(Box::new(move |g, store| {
                let y2 = oc.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = Array2::<T>::zeros((rows, d));
                for r in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += g2[[r, j]] * y2[[r, j]];
                    }
                    for j in 0..d {
                        dx[[r, j]] = y2[[r, j]] * (g2[[r, j]] - dot);
                    }
                }
                store.accumulate(
                    x.0,
                    dx.into_dyn()
                        .into_shape_with_order(IxDyn(oc.shape()))
                        .unwrap(),
                );
            }))
        } else {
            None
        };
        self.push(out, x_tr, back)
    }

    /// L2 normalization over the last axis: `y = x / sqrt(sum x^2 + eps)`.
    pub fn l2_normalize_last(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value_rc(x);
        let d = *xv.shape().last().expect("l2 normalize rank >= 1");
        let rows = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((rows, d)).unwrap();
        let mut y = Array2::<T>::zeros((rows, d));
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut s = T::zero();
            for &v in x2.row(r) {
                s += v * v;
            }
            let n = (s + eps).sqrt();
            norms.push(n);
            let inv = T::one() / n;
            for (j, &v) in x2.row(r).iter().enumerate() {
                y[[r, j]] = v * inv;
            }
        }
        let out = Rc::new(
            y.into_dyn()
                .into_shape_with_order(IxDyn(xv.shape()))
                .unwrap(),
        );
        let x_tr = self.tracked(x);
        let xc = Rc::clone(&xv);
        let back: Option<BackFn<T>> = if x_tr {
            Some(Box::new(move |g, store| {
                let x2 = xc.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = Array2::<T>::zeros((rows, d));
                for r in 0..rows {
                    let n = norms[r];
                    let n3 = n * n * n;
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += g2[[r, j]] * x2[[r, j]];
                    }
                    for j in 0..d {
                        dx[[r, j]] = g2[[r, j]] / n - x2[[r, j]] * dot / n3;
                    }
                }
                store.accumulate(
                    x.0,
                    dx.into_dyn()
                        .into_shape_with_order(IxDyn(xc.shape()))
                        .unwrap(),
                );
            }))
        } else {
            None
        };
        self.push(out, x_tr, back)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value_rc(x);
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let out = xv
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: standard layout")
            .to_owned();
        let old_shape = xv.shape().to_vec();
        self.unary(
            x,
            |_| out,
            move |g| {
                standardize(g.clone())
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap()
            },
        )
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Var {
        let order = order.to_vec();
        let mut inverse = vec![0usize; order.len()];
        for (i, &o) in order.iter().enumerate() {
            inverse[o] = i;
        }
        let ord = order.clone();
        self.unary(
            x,
            move |v| standardize(v.clone().permuted_axes(IxDyn(&ord))),
            move |g| standardize(g.clone().permuted_axes(IxDyn(&inverse))),
        )
    }

    /// Circular roll along `axis`: element `i` moves to `(i + shift) mod n`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Var {
        self.unary(
            x,
            |v| roll_array(v, axis, shift),
            move |g| roll_array(g, axis, -shift),
        )
    }

    /// Concatenate along `axis`; backward splits the gradient back apart.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let values: Vec<Rc<ArrayD<T>>> = parts.iter().map(|&p| self.value_rc(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let tracked: Vec<bool> = parts.iter().map(|&p| self.tracked(p)).collect();
        let any = tracked.iter().any(|&t| t);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let back: Option<BackFn<T>> = if any {
            Some(Box::new(move |g, store| {
                let mut start = 0isize;
                for ((&id, &len), &tr) in ids.iter().zip(&lens).zip(&tracked) {
                    if tr {
                        let piece = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len as isize))
                            .to_owned();
                        store.accumulate(id, standardize(piece));
                    }
                    start += len as isize;
                }
            }))
        } else {
            None
        };
        self.push(Rc::new(standardize(out)), any, back)
    }

    /// Slice `len` elements starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value_rc(x);
        let full = xv.shape().to_vec();
        self.unary(
            x,
            |v| {
                standardize(
                    v.slice_axis(
                        Axis(axis),
                        ndarray::Slice::from(start as isize..(start + len) as isize),
                    )
                    .to_owned(),
                )
            },
            move |g| {
                let mut dx = ArrayD::<T>::zeros(IxDyn(&full));
                dx.slice_axis_mut(
                    Axis(axis),
                    ndarray::Slice::from(start as isize..(start + len) as isize),
                )
                .assign(g);
                dx
            },
        )
    }

    /// Mean over all elements; output is a 0-d tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let shape = self.value(x).shape().to_vec();
        let inv = T::one() / T::real(n as f64);
        self.unary(
            x,
            |v| {
                let s: T = v.iter().cloned().sum();
                ndarray::arr0(s * inv).into_dyn()
            },
            move |g| {
                let gs = g[IxDyn(&[])] * inv;
                ArrayD::from_elem(IxDyn(&shape), gs)
            },
        )
    }

    /// Sum over all elements; output is a 0-d tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        self.unary(
            x,
            |v| {
                let s: T = v.iter().cloned().sum();
                ndarray::arr0(s).into_dyn()
            },
            move |g| {
                let gs = g[IxDyn(&[])];
                ArrayD::from_elem(IxDyn(&shape), gs)
            },
        )
    }

    /// Scalar value of a 0-d tensor.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    /// Backward from a scalar root, seeding its gradient with 1.
    pub fn backward(&self, root: Var) -> GradStore<T> {
        let seed = ArrayD::from_elem(IxDyn(self.value(root).shape()), T::one());
        self.backward_seeded(vec![(root, seed)])
    }

    /// Backward from explicitly seeded node gradients.
    pub fn backward_seeded(&self, seeds: Vec<(Var, ArrayD<T>)>) -> GradStore<T> {
        assert!(self.grad_enabled, "backward on a no-grad graph");
        let mut store = GradStore {
            grads: vec![None; self.nodes.len()],
        };
        for (v, s) in seeds {
            store.accumulate(v.0, s);
        }
        for id in (0..self.nodes.len()).rev() {
            if store.grads[id].is_none() {
                continue;
            }
            match &self.nodes[id].back {
                Some(back) => {
                    let g = store.grads[id].take().unwrap();
                    back(&g, &mut store);
                }
                None => {
                    if !self.nodes[id].tracked {
                        store.grads[id] = None;
                    }
                }
            }
        }
        store
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
