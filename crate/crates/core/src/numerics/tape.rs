//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! Every primitive appends one node to the [`Tape`]; node indices are
//! assigned in creation order, so a reverse sweep over indices is a valid
//! topological order and visits each node exactly once.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use super::array::{lit, DiffArray, Real};
use crate::ssm::scan;

/// Index value in a gather map that produces a zero instead of reading input.
pub const GATHER_ZERO: usize = usize::MAX;

/// The closed set of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Shift,
    MatMul,
    Exp,
    Ln,
    Sqrt,
    Recip,
    Abs,
    Softplus,
    Sigmoid,
    Silu,
    Exprel,
    SumLast,
    SumAll,
    Gather,
    Concat,
    Reshape,
    DepthwiseConv,
    SelectiveScan,
}

impl Primitive {
    pub const ALL: [Primitive; 22] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Shift,
        Primitive::MatMul,
        Primitive::Exp,
        Primitive::Ln,
        Primitive::Sqrt,
        Primitive::Recip,
        Primitive::Abs,
        Primitive::Softplus,
        Primitive::Sigmoid,
        Primitive::Silu,
        Primitive::Exprel,
        Primitive::SumLast,
        Primitive::SumAll,
        Primitive::Gather,
        Primitive::Concat,
        Primitive::Reshape,
        Primitive::DepthwiseConv,
        Primitive::SelectiveScan,
    ];
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

thread_local! {
    static FAULT: Cell<Option<Primitive>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of one primitive on the current thread.
///
/// Used only to prove that the gradient checker notices a broken rule.
#[doc(hidden)]
pub fn inject_backward_fault(target: Option<Primitive>) {
    FAULT.with(|f| f.set(target));
}

fn fault_factor<T: Real>(p: Primitive) -> T {
    if FAULT.with(|f| f.get()) == Some(p) {
        lit(1.5)
    } else {
        T::one()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Ln,
    Sqrt,
    Recip,
    Abs,
    Softplus,
    Sigmoid,
    Silu,
    Exprel,
}

impl UnaryKind {
    fn primitive(self) -> Primitive {
        match self {
            UnaryKind::Exp => Primitive::Exp,
            UnaryKind::Ln => Primitive::Ln,
            UnaryKind::Sqrt => Primitive::Sqrt,
            UnaryKind::Recip => Primitive::Recip,
            UnaryKind::Abs => Primitive::Abs,
            UnaryKind::Softplus => Primitive::Softplus,
            UnaryKind::Sigmoid => Primitive::Sigmoid,
            UnaryKind::Silu => Primitive::Silu,
            UnaryKind::Exprel => Primitive::Exprel,
        }
    }
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: usize,
        rhs: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Shift {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    SumLast {
        x: usize,
        width: usize,
    },
    SumAll {
        x: usize,
    },
    Gather {
        x: usize,
        index: Rc<[usize]>,
    },
    Concat {
        parts: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    DepthwiseConv {
        x: usize,
        w: usize,
        len: usize,
        channels: usize,
        kernel: usize,
    },
    Scan {
        u: usize,
        a_bar: usize,
        b_bar: usize,
        c: usize,
        states: Vec<T>,
        dims: scan::ScanDims,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of a forward computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of leaf nodes produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Vec<T> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); var.len()],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// True when `small` broadcasts against `big` along trailing axes.
fn is_suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    let n_small = numel(small);
    if n_small == 1 {
        return true;
    }
    let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == trimmed[..]
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records `array` as an input; gradients are tracked when the array
    /// has `requires_grad` set.
    pub fn leaf(&self, array: &DiffArray<T>) -> Var<'_, T> {
        self.push(
            array.shape().to_vec(),
            array.data().to_vec(),
            Op::Leaf,
            array.requires_grad(),
        )
    }

    /// Records an input that gradients are tracked for.
    pub fn variable(&self, shape: &[usize], data: Vec<T>) -> Var<'_, T> {
        assert_eq!(numel(shape), data.len(), "variable shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    /// Records an input that is never differentiated.
    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Var<'_, T> {
        assert_eq!(numel(shape), data.len(), "constant shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn constant_array(&self, array: &DiffArray<T>) -> Var<'_, T> {
        self.constant(array.shape(), array.data().to_vec())
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(&[1], vec![lit(v)])
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_, T> {
        self.constant(shape, vec![T::zero(); numel(shape)])
    }

    fn binary<'t>(&'t self, kind: BinaryKind, lhs: Var<'t, T>, rhs: Var<'t, T>) -> Var<'t, T> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (l, r) = (&nodes[lhs.id], &nodes[rhs.id]);
            assert!(
                is_suffix_broadcast(&l.shape, &r.shape),
                "{kind:?}: rhs shape {:?} does not broadcast onto {:?}",
                r.shape,
                l.shape
            );
            let rn = r.value.len();
            let value: Vec<T> = l
                .value
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let b = r.value[i % rn];
                    match kind {
                        BinaryKind::Add => a + b,
                        BinaryKind::Sub => a - b,
                        BinaryKind::Mul => a * b,
                    }
                })
                .collect();
            (l.shape.clone(), value)
        };
        let ng = self.needs_grad(&[lhs.id, rhs.id]);
        self.push(
            shape,
            value,
            Op::Binary {
                kind,
                lhs: lhs.id,
                rhs: rhs.id,
            },
            ng,
        )
    }

    /// Orders operands so the broadcast one is on the right.
    fn commutative<'t>(&'t self, kind: BinaryKind, a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
        if a.len() < b.len() {
            self.binary(kind, b, a)
        } else {
            self.binary(kind, a, b)
        }
    }

    fn unary<'t>(&'t self, kind: UnaryKind, x: Var<'t, T>) -> Var<'t, T> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.id];
            let value = n.value.iter().map(|&v| unary_forward(kind, v)).collect();
            (n.shape.clone(), value)
        };
        let ng = self.needs_grad(&[x.id]);
        self.push(shape, value, Op::Unary { kind, x: x.id }, ng)
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let tail = nodes[parts[0].id].shape[1..].to_vec();
            let mut lead = 0;
            let mut value = Vec::new();
            for p in parts {
                let n = &nodes[p.id];
                assert_eq!(n.shape[1..], tail[..], "concat trailing shape mismatch");
                lead += n.shape[0];
                value.extend_from_slice(&n.value);
            }
            let mut shape = vec![lead];
            shape.extend(tail);
            (shape, value)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.needs_grad(&ids);
        self.push(shape, value, Op::Concat { parts: ids }, ng)
    }

    /// Recurrence `h_t = a_bar_t ⊙ h_{t-1} + b_bar_t ⊙ u_t`, `y_t = Σ_n c_t h_t`.
    ///
    /// Shapes: `u` [T, ch], `a_bar`/`b_bar` [T, ch, N], `c` [T, N]. The
    /// backward pass runs the adjoint recurrence over the stored states.
    pub fn selective_scan<'t>(
        &'t self,
        u: Var<'t, T>,
        a_bar: Var<'t, T>,
        b_bar: Var<'t, T>,
        c: Var<'t, T>,
    ) -> Var<'t, T> {
        let (dims, y, states) = {
            let nodes = self.nodes.borrow();
            let (us, ab, bb, cs) = (
                &nodes[u.id].shape,
                &nodes[a_bar.id].shape,
                &nodes[b_bar.id].shape,
                &nodes[c.id].shape,
            );
            assert_eq!(us.len(), 2, "scan input must be [T, ch]");
            let dims = scan::ScanDims {
                len: us[0],
                channels: us[1],
                state: cs[1],
            };
            assert_eq!(ab[..], [dims.len, dims.channels, dims.state], "a_bar shape");
            assert_eq!(bb[..], [dims.len, dims.channels, dims.state], "b_bar shape");
            assert_eq!(cs[..], [dims.len, dims.state], "c shape");
            let (y, states) = scan::forward_with_states(
                dims,
                &nodes[u.id].value,
                &nodes[a_bar.id].value,
                &nodes[b_bar.id].value,
                &nodes[c.id].value,
            );
            (dims, y, states)
        };
        let ng = self.needs_grad(&[u.id, a_bar.id, b_bar.id, c.id]);
        self.push(
            vec![dims.len, dims.channels],
            y,
            Op::Scan {
                u: u.id,
                a_bar: a_bar.id,
                b_bar: b_bar.id,
                c: c.id,
                states: if ng { states } else { Vec::new() },
                dims,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![T::one()]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, lhs, rhs } => {
            let prim = match kind {
                BinaryKind::Add => Primitive::Add,
                BinaryKind::Sub => Primitive::Sub,
                BinaryKind::Mul => Primitive::Mul,
            };
            let ff: T = fault_factor(prim);
            let (lv, rv) = (&nodes[*lhs].value, &nodes[*rhs].value);
            let rn = rv.len();
            accumulate(nodes, grads, *lhs, |gl| match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    gl.iter_mut().zip(g).for_each(|(a, &b)| *a += b * ff)
                }
                BinaryKind::Mul => gl
                    .iter_mut()
                    .zip(g)
                    .enumerate()
                    .for_each(|(i, (a, &b))| *a += b * rv[i % rn] * ff),
            });
            accumulate(nodes, grads, *rhs, |gr| {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * lv[i],
                    };
                    gr[i % rn] += d;
                }
            });
        }
        Op::Scale { x, factor } => {
            let ff: T = fault_factor(Primitive::Scale);
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += b * *factor * ff)
            });
        }
        Op::Shift { x } => {
            let ff: T = fault_factor(Primitive::Shift);
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * ff)
            });
        }
        Op::MatMul { a, b, m, k, n } => {
            let ff: T = fault_factor(Primitive::MatMul);
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |ga| {
                // ga[m,k] += g[m,n] · bᵀ
                T::gemm(
                    m, n, k, ff, g, n as isize, 1, bv, 1, n as isize, T::one(), ga, k as isize, 1,
                );
            });
            accumulate(nodes, grads, *b, |gb| {
                // gb[k,n] += aᵀ · g
                T::gemm(
                    k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), gb,
                    n as isize, 1,
                );
            });
        }
        Op::Unary { kind, x } => {
            let ff: T = fault_factor(kind.primitive());
            let xv = &nodes[*x].value;
            let yv = &node.value;
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * unary_derivative(*kind, xv[i], yv[i]) * ff;
                }
            });
        }
        Op::SumLast { x, width } => {
            let ff: T = fault_factor(Primitive::SumLast);
            let w = *width;
            accumulate(nodes, grads, *x, |gx| {
                for (i, a) in gx.iter_mut().enumerate() {
                    *a += g[i / w] * ff;
                }
            });
        }
        Op::SumAll { x } => {
            let ff: T = fault_factor(Primitive::SumAll);
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().for_each(|a| *a += g[0] * ff)
            });
        }
        Op::Gather { x, index } => {
            let ff: T = fault_factor(Primitive::Gather);
            accumulate(nodes, grads, *x, |gx| {
                for (&src, &gi) in index.iter().zip(g) {
                    if src != GATHER_ZERO {
                        gx[src] += gi * ff;
                    }
                }
            });
        }
        Op::Concat { parts } => {
            let ff: T = fault_factor(Primitive::Concat);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                let seg = &g[offset..offset + len];
                accumulate(nodes, grads, p, |gp| {
                    gp.iter_mut().zip(seg).for_each(|(a, &b)| *a += b * ff)
                });
                offset += len;
            }
        }
        Op::Reshape { x } => {
            let ff: T = fault_factor(Primitive::Reshape);
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * ff)
            });
        }
        Op::DepthwiseConv {
            x,
            w,
            len,
            channels,
            kernel,
        } => {
            let ff: T = fault_factor(Primitive::DepthwiseConv);
            let (len, ch, kw) = (*len, *channels, *kernel);
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            accumulate(nodes, grads, *x, |gx| {
                for t in 0..len {
                    for j in 0..kw {
                        let Some(src) = (t + j).checked_sub(kw - 1) else {
                            continue;
                        };
                        for c in 0..ch {
                            gx[src * ch + c] += g[t * ch + c] * wv[c * kw + j] * ff;
                        }
                    }
                }
            });
            accumulate(nodes, grads, *w, |gw| {
                for t in 0..len {
                    for j in 0..kw {
                        let Some(src) = (t + j).checked_sub(kw - 1) else {
                            continue;
                        };
                        for c in 0..ch {
                            gw[c * kw + j] += g[t * ch + c] * xv[src * ch + c];
                        }
                    }
                }
            });
        }
        Op::Scan {
            u,
            a_bar,
            b_bar,
            c,
            states,
            dims,
        } => {
            let ff: T = fault_factor(Primitive::SelectiveScan);
            let adj = scan::adjoint(
                *dims,
                &nodes[*u].value,
                &nodes[*a_bar].value,
                &nodes[*b_bar].value,
                &nodes[*c].value,
                states,
                g,
            );
            accumulate(nodes, grads, *u, |gu| {
                gu.iter_mut().zip(&adj.u).for_each(|(a, &b)| *a += b * ff)
            });
            accumulate(nodes, grads, *a_bar, |ga| {
                ga.iter_mut().zip(&adj.a_bar).for_each(|(a, &b)| *a += b)
            });
            accumulate(nodes, grads, *b_bar, |gb| {
                gb.iter_mut().zip(&adj.b_bar).for_each(|(a, &b)| *a += b)
            });
            accumulate(nodes, grads, *c, |gc| {
                gc.iter_mut().zip(&adj.c).for_each(|(a, &b)| *a += b)
            });
        }
    }
}

/// Numerically stable `ln(1 + e^v)`.
pub fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `(e^x - 1) / x`, continued by its Taylor series near zero.
pub fn exprel<T: Real>(x: T) -> T {
    if x.abs() < lit(1e-8) {
        T::one() + x * lit(0.5)
    } else {
        x.exp_m1() / x
    }
}

fn exprel_derivative<T: Real>(x: T, y: T) -> T {
    if x.abs() < lit(1e-4) {
        lit::<T>(0.5) + x / lit(3.0) + x * x / lit(8.0)
    } else {
        (x.exp() - y) / x
    }
}

fn unary_forward<T: Real>(kind: UnaryKind, v: T) -> T {
    match kind {
        UnaryKind::Exp => v.exp(),
        UnaryKind::Ln => v.ln(),
        UnaryKind::Sqrt => v.sqrt(),
        UnaryKind::Recip => v.recip(),
        UnaryKind::Abs => v.abs(),
        UnaryKind::Softplus => softplus(v),
        UnaryKind::Sigmoid => sigmoid(v),
        UnaryKind::Silu => v * sigmoid(v),
        UnaryKind::Exprel => exprel(v),
    }
}

fn unary_derivative<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Exp => y,
        UnaryKind::Ln => x.recip(),
        UnaryKind::Sqrt => lit::<T>(0.5) / y,
        UnaryKind::Recip => -(y * y),
        UnaryKind::Abs => x.signum(),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        }
        UnaryKind::Exprel => exprel_derivative(x, y),
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// First element, for scalar outputs.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn to_array(&self) -> DiffArray<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        DiffArray::from_vec(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    /// Copies the value into a fresh constant node, cutting the gradient path.
    pub fn detach(self) -> Var<'t, T> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.constant(&shape, value)
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let f: T = lit(factor);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| v * f).collect())
        };
        let ng = self.tape.needs_grad(&[self.id]);
        self.tape
            .push(shape, value, Op::Scale { x: self.id, factor: f }, ng)
    }

    /// Adds a constant to every element.
    pub fn shift(self, offset: f64) -> Var<'t, T> {
        let o: T = lit(offset);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| v + o).collect())
        };
        let ng = self.tape.needs_grad(&[self.id]);
        self.tape.push(shape, value, Op::Shift { x: self.id }, ng)
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading axes of `self` are flattened.
    pub fn matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let (shape, value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-D, got {:?}", b.shape);
            let k = *a.shape.last().expect("matmul lhs has no axes");
            assert_eq!(
                k, b.shape[0],
                "matmul inner extents differ: {:?} · {:?}",
                a.shape, b.shape
            );
            let n = b.shape[1];
            let m = a.value.len() / k;
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.value,
                k as isize,
                1,
                &b.value,
                n as isize,
                1,
                T::zero(),
                &mut out,
                n as isize,
                1,
            );
            let mut shape = a.shape[..a.shape.len() - 1].to_vec();
            shape.push(n);
            (shape, out, m, k, n)
        };
        let ng = self.tape.needs_grad(&[self.id, rhs.id]);
        self.tape.push(
            shape,
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            ng,
        )
    }

    pub fn exp(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Exp, self)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Ln, self)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Sqrt, self)
    }

    pub fn recip(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Recip, self)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Abs, self)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Softplus, self)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Sigmoid, self)
    }

    pub fn silu(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Silu, self)
    }

    pub fn exprel(self) -> Var<'t, T> {
        self.tape.unary(UnaryKind::Exprel, self)
    }

    pub fn square(self) -> Var<'t, T> {
        self * self
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t, T> {
        let (shape, value, width) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let width = *n.shape.last().expect("sum_last on 0-d value");
            let value: Vec<T> = n
                .value
                .chunks(width)
                .map(|row| row.iter().copied().sum())
                .collect();
            let mut shape = n.shape[..n.shape.len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, value, width)
        };
        let ng = self.tape.needs_grad(&[self.id]);
        self.tape.push(
            shape,
            value,
            Op::SumLast {
                x: self.id,
                width,
            },
            ng,
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let value: T = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().copied().sum()
        };
        let ng = self.tape.needs_grad(&[self.id]);
        self.tape
            .push(vec![1], vec![value], Op::SumAll { x: self.id }, ng)
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `out[i] = self[index[i]]` (or zero for [`GATHER_ZERO`]), reshaped to `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Var<'t, T> {
        assert_eq!(numel(shape), index.len(), "gather shape/index mismatch");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            index
                .iter()
                .map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i] })
                .collect()
        };
        let ng = self.tape.needs_grad(&[self.id]);
        self.tape.push(
            shape.to_vec(),
            value,
            Op::Gather {
                x: self.id,
                index,
            },
            ng,
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            assert_eq!(
                numel(shape),
                nodes[self.id].value.len(),
                "cannot reshape {:?} into {shape:?}",
                nodes[self.id].shape
            );
            nodes[self.id].value.clone()
        };
        let ng = self.tape.needs_grad(&[self.id]);
        self.tape
            .push(shape.to_vec(), value, Op::Reshape { x: self.id }, ng)
    }

    /// Causal depthwise 1-D convolution along the leading (token) axis.
    ///
    /// `self` is [T, ch], `weight` is [ch, K]; output token `t` reads inputs
    /// `t-K+1 ..= t` with zero padding before the sequence start.
    pub fn depthwise_conv_causal(self, weight: Var<'t, T>) -> Var<'t, T> {
        let (shape, value, len, channels, kernel) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            assert_eq!(x.shape.len(), 2, "conv input must be [T, ch]");
            let (len, ch) = (x.shape[0], x.shape[1]);
            assert_eq!(w.shape.len(), 2, "conv weight must be [ch, K]");
            assert_eq!(w.shape[0], ch, "conv weight channel mismatch");
            let kw = w.shape[1];
            let mut out = vec![T::zero(); len * ch];
            for t in 0..len {
                for j in 0..kw {
                    let Some(src) = (t + j).checked_sub(kw - 1) else {
                        continue;
                    };
                    for c in 0..ch {
                        out[t * ch + c] += w.value[c * kw + j] * x.value[src * ch + c];
                    }
                }
            }
            (x.shape.clone(), out, len, ch, kw)
        };
        let ng = self.tape.needs_grad(&[self.id, weight.id]);
        self.tape.push(
            shape,
            value,
            Op::DepthwiseConv {
                x: self.id,
                w: weight.id,
                len,
                channels,
                kernel,
            },
            ng,
        )
    }
}

impl<'t, T: Real> Add for Var<'t, T> {
    type Output = Var<'t, T>;

    fn add(self, rhs: Self) -> Self::Output {
        self.tape.commutative(BinaryKind::Add, self, rhs)
    }
}

impl<'t, T: Real> Mul for Var<'t, T> {
    type Output = Var<'t, T>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.tape.commutative(BinaryKind::Mul, self, rhs)
    }
}

impl<'t, T: Real> Sub for Var<'t, T> {
    type Output = Var<'t, T>;

    fn sub(self, rhs: Self) -> Self::Output {
        if self.len() < rhs.len() {
            self.tape.binary(BinaryKind::Add, rhs.scale(-1.0), self)
        } else {
            self.tape.binary(BinaryKind::Sub, self, rhs)
        }
    }
}

impl<'t, T: Real> Neg for Var<'t, T> {
    type Output = Var<'t, T>;

    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}
