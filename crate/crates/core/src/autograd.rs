//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape that records every operation applied to [`Var`]
//! handles. Calling [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that requires them. Graphs are
//! built fresh for each optimisation step and dropped afterwards.
//!
//! Nodes that do not depend on any gradient-requiring leaf store no
//! backward closure, so frozen sub-networks cost only their forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, IxDyn, Zip};

/// Dense tensor type used throughout the crate.
pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed to it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `var` when no
    /// gradient reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(IxDyn(&var.shape())),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        nodes.len() - 1
    }

    /// A leaf that participates in differentiation (typically a parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Vec::new(), None, true);
        Var { graph: self, id }
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Vec::new(), None, false);
        Var { graph: self, id }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records the result of an operation. `backward` receives the upstream
    /// gradient and a mask of which parents need gradients.
    fn record<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let id = if requires_grad {
            self.push(
                value,
                parents.iter().map(|p| p.id).collect(),
                Some(Box::new(backward)),
                true,
            )
        } else {
            self.push(value, Vec::new(), None, false)
        };
        Var { graph: self, id }
    }

    /// Back-propagates from a scalar `loss` (seed gradient 1).
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let seed = Tensor::ones(IxDyn(&loss.shape()));
        self.backward_with(loss, seed)
    }

    /// Back-propagates an explicit upstream gradient from `output`.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&upstream, &mask);
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // keep gradients of leaves, drop intermediates
            grads[id] = None;
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() && id != output.id {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn unbroadcast(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn standard(t: &Tensor) -> Tensor {
    if t.is_standard_layout() {
        t.clone()
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn as_matrix(t: &Tensor, rows: usize, cols: usize) -> Array2<f64> {
    standard(t)
        .into_shape_with_order((rows, cols))
        .expect("matrix reshape")
}

fn from_matrix(m: Array2<f64>, shape: &[usize]) -> Tensor {
    m.into_shape_with_order(IxDyn(shape)).expect("tensor reshape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let mut out = standard(x);
    let last = out.ndim() - 1;
    for mut lane in out.lanes_mut(Axis(last)) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Tensor {
    let mut out = standard(x);
    let last = out.ndim() - 1;
    for mut lane in out.lanes_mut(Axis(last)) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lane.mapv_inplace(|v| v - lse);
    }
    out
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    // ------------------------------------------------------------------
    // Elementwise binary ops with broadcasting
    // ------------------------------------------------------------------

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = &*a + &*b;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(out, &[*self, other], move |g, m| {
            vec![
                m[0].then(|| unbroadcast(g, &sa)),
                m[1].then(|| unbroadcast(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = &*a - &*b;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(out, &[*self, other], move |g, m| {
            vec![
                m[0].then(|| unbroadcast(g, &sa)),
                m[1].then(|| unbroadcast(&g.mapv(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let out = &*a * &*b;
        self.graph.record(out, &[*self, other], move |g, m| {
            vec![
                m[0].then(|| unbroadcast(&(g * &*b), a.shape())),
                m[1].then(|| unbroadcast(&(g * &*a), b.shape())),
            ]
        })
    }

    // ------------------------------------------------------------------
    // Scalar and unary ops
    // ------------------------------------------------------------------

    pub fn scale(&self, s: f64) -> Var<'g> {
        let out = self.value().mapv(|v| v * s);
        self.graph
            .record(out, &[*self], move |g, _| vec![Some(g.mapv(|v| v * s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let out = self.value().mapv(|v| v + s);
        self.graph.record(out, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var<'g> {
        let x = self.value();
        let out = x.mapv(|v| v * v);
        self.graph.record(out, &[*self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*x).for_each(|d, &x| *d *= 2.0 * x);
            vec![Some(d)]
        })
    }

    pub fn exp(&self) -> Var<'g> {
        let out = self.value().mapv(f64::exp);
        let y = Rc::new(out.clone());
        self.graph
            .record(out, &[*self], move |g, _| vec![Some(g * &*y)])
    }

    pub fn ln(&self) -> Var<'g> {
        let x = self.value();
        let out = x.mapv(f64::ln);
        self.graph.record(out, &[*self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*x).for_each(|d, &x| *d /= x);
            vec![Some(d)]
        })
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let out = self.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = Rc::new(out.clone());
        self.graph.record(out, &[*self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*y).for_each(|d, &y| *d *= y * (1.0 - y));
            vec![Some(d)]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'g> {
        let x = self.value();
        let out = x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.graph.record(out, &[*self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(&*x)
                .for_each(|d, &x| *d *= 1.0 / (1.0 + (-x).exp()));
            vec![Some(d)]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g> {
        let x = self.value();
        let out = x.mapv(gelu_scalar);
        self.graph.record(out, &[*self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(&*x)
                .for_each(|d, &x| *d *= gelu_grad_scalar(x));
            vec![Some(d)]
        })
    }

    /// ELU with alpha = 1.
    pub fn elu(&self) -> Var<'g> {
        let x = self.value();
        let out = x.mapv(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.graph.record(out, &[*self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(&*x)
                .for_each(|d, &x| *d *= if x > 0.0 { 1.0 } else { x.exp() });
            vec![Some(d)]
        })
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn sum_all(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = ndarray::arr0(x.sum()).into_dyn();
        self.graph.record(out, &[*self], move |g, _| {
            let s = *g.iter().next().unwrap();
            vec![Some(Tensor::from_elem(IxDyn(&shape), s))]
        })
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`; the axis is removed.
    pub fn sum_axis(&self, axis: usize) -> Var<'g> {
        let x = self.value();
        let n = x.shape()[axis];
        let out = x.sum_axis(Axis(axis));
        self.graph.record(out, &[*self], move |g, _| {
            let expanded = g.clone().insert_axis(Axis(axis));
            let mut shape = expanded.shape().to_vec();
            shape[axis] = n;
            vec![Some(
                expanded
                    .broadcast(IxDyn(&shape))
                    .expect("broadcast")
                    .to_owned(),
            )]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'g> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    // ------------------------------------------------------------------
    // Shape manipulation
    // ------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = standard(&x)
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", old, shape));
        self.graph.record(out, &[*self], move |g, _| {
            vec![Some(
                standard(g)
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape back"),
            )]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let out = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.record(out, &[*self], move |g, _| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let last = a.ndim() - 1;
        let split = a.shape()[last];
        let out = ndarray::concatenate(Axis(last), &[a.view(), b.view()]).expect("concat shapes");
        self.graph.record(out, &[*self, other], move |g, m| {
            let (ga, gb) = g.view().split_at(Axis(last), split);
            vec![m[0].then(|| ga.to_owned()), m[1].then(|| gb.to_owned())]
        })
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack_last(vars: &[Var<'g>]) -> Var<'g> {
        assert!(!vars.is_empty(), "stack of nothing");
        let graph = vars[0].graph;
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let last = views[0].ndim();
        let out = ndarray::stack(Axis(last), &views).expect("stack shapes");
        graph.record(out, vars, move |g, m| {
            m.iter()
                .enumerate()
                .map(|(i, &need)| need.then(|| g.index_axis(Axis(last), i).to_owned()))
                .collect()
        })
    }

    /// Zero-pads `axis` at its end up to `len`.
    pub fn pad_axis(&self, axis: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let cur = x.shape()[axis];
        assert!(len >= cur);
        if len == cur {
            return *self;
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut out = Tensor::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), ndarray::Slice::from(0..cur))
            .assign(&*x);
        self.graph.record(out, &[*self], move |g, _| {
            vec![Some(
                g.slice_axis(Axis(axis), ndarray::Slice::from(0..cur))
                    .to_owned(),
            )]
        })
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `(..., k) x (k, m) -> (..., m)`.
    pub fn matmul(&self, w: Var<'g>) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let xs = x.shape().to_vec();
        let k = *xs.last().unwrap();
        assert_eq!(wv.ndim(), 2, "matmul weight must be 2-D");
        assert_eq!(wv.shape()[0], k, "matmul inner dims {:?} x {:?}", xs, wv.shape());
        let m = wv.shape()[1];
        let rows = x.len() / k.max(1);
        let w2 = as_matrix(&wv, k, m);
        let x2 = as_matrix(&x, rows, k);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = m;
        let out = from_matrix(x2.dot(&w2), &out_shape);
        self.graph.record(out, &[*self, w], move |g, mask| {
            let g2 = as_matrix(g, rows, m);
            vec![
                mask[0].then(|| from_matrix(g2.dot(&w2.t()), &xs)),
                mask[1].then(|| x2.t().dot(&g2).into_dyn()),
            ]
        })
    }

    /// Batched matrix product `(G, n, k) x (G, k, m) -> (G, n, m)`.
    pub fn bmm(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (ga, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (gb, kb, m) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!((ga, k), (gb, kb), "bmm shapes {:?} x {:?}", a.shape(), b.shape());
        let a3 = standard(&a).into_dimensionality::<ndarray::Ix3>().unwrap();
        let b3 = standard(&b).into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((ga, n, m));
        for i in 0..ga {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        self.graph.record(out.into_dyn(), &[*self, other], move |g, mask| {
            let g3 = standard(g).into_dimensionality::<ndarray::Ix3>().unwrap();
            let da = mask[0].then(|| {
                let mut da = ndarray::Array3::<f64>::zeros((ga, n, k));
                for i in 0..ga {
                    da.index_axis_mut(Axis(0), i).assign(
                        &g3.index_axis(Axis(0), i)
                            .dot(&b3.index_axis(Axis(0), i).t()),
                    );
                }
                da.into_dyn()
            });
            let db = mask[1].then(|| {
                let mut db = ndarray::Array3::<f64>::zeros((ga, k, m));
                for i in 0..ga {
                    db.index_axis_mut(Axis(0), i).assign(
                        &a3.index_axis(Axis(0), i)
                            .t()
                            .dot(&g3.index_axis(Axis(0), i)),
                    );
                }
                db.into_dyn()
            });
            vec![da, db]
        })
    }

    // ------------------------------------------------------------------
    // Fused normalisation ops over the last axis
    // ------------------------------------------------------------------

    pub fn softmax_last(&self) -> Var<'g> {
        let y = softmax_last(&self.value());
        let yc = Rc::new(y.clone());
        self.graph.record(y, &[*self], move |g, _| {
            let mut d = &*yc * g;
            let last = d.ndim() - 1;
            for (mut dl, yl) in d.lanes_mut(Axis(last)).into_iter().zip(yc.lanes(Axis(last))) {
                let dot: f64 = dl.sum();
                Zip::from(&mut dl).and(&yl).for_each(|d, &y| *d -= y * dot);
            }
            vec![Some(d)]
        })
    }

    pub fn log_softmax_last(&self) -> Var<'g> {
        let y = log_softmax_last(&self.value());
        let p = Rc::new(y.mapv(f64::exp));
        self.graph.record(y, &[*self], move |g, _| {
            let mut d = standard(g);
            let last = d.ndim() - 1;
            for (mut dl, pl) in d.lanes_mut(Axis(last)).into_iter().zip(p.lanes(Axis(last))) {
                let sum: f64 = dl.sum();
                Zip::from(&mut dl).and(&pl).for_each(|d, &p| *d -= p * sum);
            }
            vec![Some(d)]
        })
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn normalize_last(&self, eps: f64) -> Var<'g> {
        let x = standard(&self.value());
        let last = x.ndim() - 1;
        let n = x.shape()[last] as f64;
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.len() / x.shape()[last]);
        for mut lane in y.lanes_mut(Axis(last)) {
            let mean = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let yc = Rc::new(y.clone());
        self.graph.record(y, &[*self], move |g, _| {
            let mut d = standard(g);
            for ((mut dl, yl), &is) in d
                .lanes_mut(Axis(last))
                .into_iter()
                .zip(yc.lanes(Axis(last)))
                .zip(inv_std.iter())
            {
                let mean_g = dl.sum() / n;
                let mean_gy = dl.iter().zip(yl.iter()).map(|(g, y)| g * y).sum::<f64>() / n;
                Zip::from(&mut dl)
                    .and(&yl)
                    .for_each(|d, &y| *d = is * (*d - mean_g - y * mean_gy));
            }
            vec![Some(d)]
        })
    }

    // ------------------------------------------------------------------
    // Convolutions
    // ------------------------------------------------------------------

    /// Depthwise convolution along the last (time) axis of a `(B, C, S, T)`
    /// tensor with zero same-padding. `w` is `(C, K)` with `K` odd, `b` is `(C)`.
    pub fn depthwise_conv_time(&self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        let x = standard(&self.value())
            .into_dimensionality::<ndarray::Ix4>()
            .expect("depthwise conv expects (B,C,S,T)");
        let wv = standard(&w.value()).into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = b.value();
        let (bn, c, s, t) = x.dim();
        let k = wv.shape()[1];
        assert_eq!(wv.shape()[0], c);
        assert!(k % 2 == 1, "kernel must be odd");
        let half = (k / 2) as isize;
        let mut out = ndarray::Array4::<f64>::zeros((bn, c, s, t));
        for bi in 0..bn {
            for ci in 0..c {
                let bias = bv[[ci]];
                for si in 0..s {
                    for ti in 0..t {
                        let mut acc = bias;
                        for ki in 0..k {
                            let src = ti as isize + ki as isize - half;
                            if src >= 0 && (src as usize) < t {
                                acc += wv[[ci, ki]] * x[[bi, ci, si, src as usize]];
                            }
                        }
                        out[[bi, ci, si, ti]] = acc;
                    }
                }
            }
        }
        self.graph.record(out.into_dyn(), &[*self, w, b], move |g, mask| {
            let g4 = standard(g).into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut dx = ndarray::Array4::<f64>::zeros((bn, c, s, t));
            let mut dw = Array2::<f64>::zeros((c, k));
            let mut db = ndarray::Array1::<f64>::zeros(c);
            for bi in 0..bn {
                for ci in 0..c {
                    for si in 0..s {
                        for ti in 0..t {
                            let go = g4[[bi, ci, si, ti]];
                            db[ci] += go;
                            for ki in 0..k {
                                let src = ti as isize + ki as isize - half;
                                if src >= 0 && (src as usize) < t {
                                    let src = src as usize;
                                    dx[[bi, ci, si, src]] += wv[[ci, ki]] * go;
                                    dw[[ci, ki]] += x[[bi, ci, si, src]] * go;
                                }
                            }
                        }
                    }
                }
            }
            vec![
                mask[0].then(|| dx.into_dyn()),
                mask[1].then(|| dw.into_dyn()),
                mask[2].then(|| db.into_dyn()),
            ]
        })
    }

    /// Gathers `k` neighbouring positions along the sequence axis of a
    /// `(B, S, D)` tensor with zero same-padding, producing `(B, S, k*D)`.
    /// Followed by a matmul this is a 1-D convolution over `S`.
    pub fn unfold_seq(&self, k: usize) -> Var<'g> {
        assert!(k % 2 == 1, "kernel must be odd");
        let x = standard(&self.value())
            .into_dimensionality::<ndarray::Ix3>()
            .expect("unfold expects (B,S,D)");
        let (bn, s, d) = x.dim();
        let half = (k / 2) as isize;
        let mut out = ndarray::Array3::<f64>::zeros((bn, s, k * d));
        for bi in 0..bn {
            for si in 0..s {
                for ki in 0..k {
                    let src = si as isize + ki as isize - half;
                    if src >= 0 && (src as usize) < s {
                        out.slice_mut(ndarray::s![bi, si, ki * d..(ki + 1) * d])
                            .assign(&x.slice(ndarray::s![bi, src as usize, ..]));
                    }
                }
            }
        }
        self.graph.record(out.into_dyn(), &[*self], move |g, _| {
            let g3 = standard(g).into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f64>::zeros((bn, s, d));
            for bi in 0..bn {
                for si in 0..s {
                    for ki in 0..k {
                        let src = si as isize + ki as isize - half;
                        if src >= 0 && (src as usize) < s {
                            let mut dst = dx.slice_mut(ndarray::s![bi, src as usize, ..]);
                            dst += &g3.slice(ndarray::s![bi, si, ki * d..(ki + 1) * d]);
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        })
    }

    // ------------------------------------------------------------------
    // Polar decomposition of a complex tensor given as (re, im)
    // ------------------------------------------------------------------

    /// Magnitude `sqrt(re^2 + im^2)`; the gradient at the origin is taken as 0.
    pub fn magnitude(&self, im: Var<'g>) -> Var<'g> {
        let (re, imv) = (self.value(), im.value());
        let mut mag = (*re).clone();
        Zip::from(&mut mag).and(&*imv).for_each(|m, &i| *m = m.hypot(i));
        let mc = Rc::new(mag.clone());
        self.graph.record(mag, &[*self, im], move |g, mask| {
            let grad_of = |num: &Tensor| {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(num)
                    .and(&*mc)
                    .for_each(|d, &n, &m| *d = if m > 0.0 { *d * n / m } else { 0.0 });
                d
            };
            vec![mask[0].then(|| grad_of(&re)), mask[1].then(|| grad_of(&imv))]
        })
    }

    /// `cos(phase)` of `(re, im)`; defined as 1 where the magnitude is 0.
    pub fn phase_cos(&self, im: Var<'g>) -> Var<'g> {
        self.phase_component(im, true)
    }

    /// `sin(phase)` of `(re, im)`; defined as 0 where the magnitude is 0.
    pub fn phase_sin(&self, im: Var<'g>) -> Var<'g> {
        self.phase_component(im, false)
    }

    fn phase_component(&self, im: Var<'g>, cosine: bool) -> Var<'g> {
        let (re, imv) = (self.value(), im.value());
        let mut out = (*re).clone();
        Zip::from(&mut out).and(&*imv).for_each(|o, &i| {
            let r = *o;
            let m = r.hypot(i);
            *o = match (m > 0.0, cosine) {
                (true, true) => r / m,
                (true, false) => i / m,
                (false, true) => 1.0,
                (false, false) => 0.0,
            };
        });
        self.graph.record(out, &[*self, im], move |g, mask| {
            // d(re/m)/dre = im^2/m^3, d(re/m)/dim = -re im/m^3
            // d(im/m)/dre = -re im/m^3, d(im/m)/dim = re^2/m^3
            let mut dre = g.clone();
            let mut dim = g.clone();
            Zip::from(&mut dre)
                .and(&mut dim)
                .and(&*re)
                .and(&*imv)
                .for_each(|dr, di, &r, &i| {
                    let m = r.hypot(i);
                    if m > 0.0 {
                        // unit-circle form keeps 1/m from compounding
                        let (c, s) = (r / m, i / m);
                        let up = *dr / m;
                        if cosine {
                            *dr = up * s * s;
                            *di = -up * c * s;
                        } else {
                            *dr = -up * c * s;
                            *di = up * c * c;
                        }
                    } else {
                        *dr = 0.0;
                        *di = 0.0;
                    }
                });
            vec![mask[0].then_some(dre), mask[1].then_some(dim)]
        })
    }
}
