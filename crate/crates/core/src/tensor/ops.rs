//! Op set and backward rules for the tape.

use super::conv::{col2im, conv2d_forward, im2col};
use super::{accumulate, broadcast_shape, reduce_to_shape, Node, Real, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, Real),
    AddScalar(usize),
    Sqr(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Silu(usize),
    /// `[m,k] x [k,n]`, both 2-d.
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2x(usize),
    Reshape {
        x: usize,
        orig: Vec<usize>,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    SumAxes {
        x: usize,
        orig: Vec<usize>,
    },
    SumAll(usize),
    /// Softmax over the last axis.
    Softmax(usize),
    /// Row lookup into a 2-d table.
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
}

fn bin_broadcast(
    a: &ArrayD<Real>,
    b: &ArrayD<Real>,
    f: impl Fn(Real, Real) -> Real,
) -> ArrayD<Real> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl<'t> Var<'t> {
    fn unary(self, op: impl FnOnce(usize) -> Op, value: ArrayD<Real>) -> Var<'t> {
        let requires = self.tape.requires(self.id);
        let id = self.tape.push(value, op(self.id), requires);
        Var {
            tape: self.tape,
            id,
        }
    }

    fn binary(self, rhs: Var<'t>, op: impl FnOnce(usize, usize) -> Op, value: ArrayD<Real>) -> Var<'t> {
        let requires = self.tape.requires(self.id) || rhs.tape.requires(rhs.id);
        let id = self.tape.push(value, op(self.id, rhs.id), requires);
        Var {
            tape: self.tape,
            id,
        }
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.with_value(|a| rhs.with_value(|b| bin_broadcast(a, b, |x, y| x + y)));
        self.binary(rhs, Op::Add, v)
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.with_value(|a| rhs.with_value(|b| bin_broadcast(a, b, |x, y| x - y)));
        self.binary(rhs, Op::Sub, v)
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.with_value(|a| rhs.with_value(|b| bin_broadcast(a, b, |x, y| x * y)));
        self.binary(rhs, Op::Mul, v)
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.with_value(|a| rhs.with_value(|b| bin_broadcast(a, b, |x, y| x / y)));
        self.binary(rhs, Op::Div, v)
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| -x));
        self.unary(Op::Neg, v)
    }

    pub fn scale(self, c: Real) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| x * c));
        self.unary(|x| Op::Scale(x, c), v)
    }

    pub fn add_scalar(self, c: Real) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| x + c));
        self.unary(Op::AddScalar, v)
    }

    pub fn sqr(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| x * x));
        self.unary(Op::Sqr, v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(Real::sqrt));
        self.unary(Op::Sqrt, v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(Real::exp));
        self.unary(Op::Exp, v)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(Real::ln));
        self.unary(Op::Ln, v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(sigmoid));
        self.unary(Op::Sigmoid, v)
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.with_value(|a| a.mapv(|x| x * sigmoid(x)));
        self.unary(Op::Silu, v)
    }

    /// 2-d matrix product.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.with_value(|a| {
            rhs.with_value(|b| {
                let a2 = a.view().into_dimensionality::<Ix2>().expect("lhs 2-d");
                let b2 = b.view().into_dimensionality::<Ix2>().expect("rhs 2-d");
                let mut out = Array2::<Real>::zeros((a2.nrows(), b2.ncols()));
                general_mat_mul(1.0, &a2, &b2, 0.0, &mut out);
                out.into_dyn()
            })
        });
        self.binary(rhs, Op::MatMul, v)
    }

    /// 2-d convolution, NCHW input and OIHW weight.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let v = self.with_value(|x| weight.with_value(|w| conv2d_forward(x, w, stride, pad)));
        let requires = self.tape.requires(self.id) || weight.tape.requires(weight.id);
        let id = self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                stride,
                pad,
            },
            requires,
        );
        Var {
            tape: self.tape,
            id,
        }
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(self) -> Var<'t> {
        let v = self.with_value(|x| {
            let (b, c, h, w) = nchw(x.shape());
            let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            out[[bi, ci, i, j]] = x[[bi, ci, i / 2, j / 2]];
                        }
                    }
                }
            }
            out
        });
        self.unary(Op::Upsample2x, v)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let orig = self.shape();
        let v = self.with_value(|a| {
            a.to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape size mismatch")
        });
        self.unary(
            |x| Op::Reshape {
                x,
                orig,
            },
            v,
        )
    }

    /// Axis permutation; materializes a standard-layout copy.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let v = self.with_value(|a| {
            a.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .to_owned()
        });
        let axes = axes.to_vec();
        self.unary(|x| Op::Permute { x, axes }, v)
    }

    /// Sum over the given axes, keeping them as size-1 dims.
    pub fn sum_axes_keep(self, axes: &[usize]) -> Var<'t> {
        let orig = self.shape();
        let v = self.with_value(|a| {
            let mut out = a.clone();
            let mut sorted = axes.to_vec();
            sorted.sort_unstable();
            for &ax in sorted.iter().rev() {
                out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            }
            out
        });
        self.unary(|x| Op::SumAxes { x, orig }, v)
    }

    /// Sum of all elements as a 0-d node.
    pub fn sum_all(self) -> Var<'t> {
        let v = self.with_value(|a| ndarray::arr0(a.sum()).into_dyn());
        self.unary(Op::SumAll, v)
    }

    /// Mean of all elements as a 0-d node.
    pub fn mean_all(self) -> Var<'t> {
        let n = self.with_value(|a| a.len()) as Real;
        self.sum_all().scale(1.0 / n)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = self.with_value(|a| softmax_lastdim(a));
        self.unary(Op::Softmax, v)
    }

    /// Row lookup: `self` is a `[rows, dim]` table, output `[ids.len(), dim]`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let v = self.with_value(|t| {
            let t2 = t.view().into_dimensionality::<Ix2>().expect("table 2-d");
            let mut out = Array2::<Real>::zeros((ids.len(), t2.ncols()));
            for (i, &id) in ids.iter().enumerate() {
                out.row_mut(i).assign(&t2.row(id));
            }
            out.into_dyn()
        });
        let ids = ids.to_vec();
        self.unary(|table| Op::Gather { table, ids }, v)
    }

    /// Mean squared difference against `rhs`, a 0-d node.
    pub fn mse(self, rhs: Var<'t>) -> Var<'t> {
        self.sub(rhs).sqr().mean_all()
    }
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_lastdim(a: &ArrayD<Real>) -> ArrayD<Real> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

fn matmul2(a: &ndarray::ArrayView2<Real>, b: &ndarray::ArrayView2<Real>) -> Array2<Real> {
    let mut out = Array2::<Real>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// Propagate the output gradient `g` of node `id` into its inputs.
pub(crate) fn backward_step(
    nodes: &[Node],
    id: usize,
    g: &ArrayD<Real>,
    slots: &mut [Option<ArrayD<Real>>],
) {
    let val = |i: usize| &nodes[i].value;
    let req = |i: usize| nodes[i].requires;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if req(*a) {
                accumulate(&mut slots[*a], reduce_to_shape(g.clone(), val(*a).shape()));
            }
            if req(*b) {
                accumulate(&mut slots[*b], reduce_to_shape(g.clone(), val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                accumulate(&mut slots[*a], reduce_to_shape(g.clone(), val(*a).shape()));
            }
            if req(*b) {
                accumulate(
                    &mut slots[*b],
                    reduce_to_shape(g.mapv(|x| -x), val(*b).shape()),
                );
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                let da = bin_broadcast(g, val(*b), |x, y| x * y);
                accumulate(&mut slots[*a], reduce_to_shape(da, val(*a).shape()));
            }
            if req(*b) {
                let db = bin_broadcast(g, val(*a), |x, y| x * y);
                accumulate(&mut slots[*b], reduce_to_shape(db, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if req(*a) {
                let da = bin_broadcast(g, val(*b), |x, y| x / y);
                accumulate(&mut slots[*a], reduce_to_shape(da, val(*a).shape()));
            }
            if req(*b) {
                let ratio = bin_broadcast(val(*a), val(*b), |x, y| -x / (y * y));
                let db = bin_broadcast(g, &ratio, |x, y| x * y);
                accumulate(&mut slots[*b], reduce_to_shape(db, val(*b).shape()));
            }
        }
        Op::Neg(a) => accumulate(&mut slots[*a], g.mapv(|x| -x)),
        Op::Scale(a, c) => accumulate(&mut slots[*a], g.mapv(|x| x * c)),
        Op::AddScalar(a) => accumulate(&mut slots[*a], g.clone()),
        Op::Sqr(a) => {
            let da = bin_broadcast(g, val(*a), |gy, x| gy * 2.0 * x);
            accumulate(&mut slots[*a], da);
        }
        Op::Sqrt(a) => {
            let y = &nodes[id].value;
            let da = bin_broadcast(g, y, |gy, s| gy * 0.5 / s);
            accumulate(&mut slots[*a], da);
        }
        Op::Exp(a) => {
            let y = &nodes[id].value;
            let da = bin_broadcast(g, y, |gy, e| gy * e);
            accumulate(&mut slots[*a], da);
        }
        Op::Ln(a) => {
            let da = bin_broadcast(g, val(*a), |gy, x| gy / x);
            accumulate(&mut slots[*a], da);
        }
        Op::Sigmoid(a) => {
            let y = &nodes[id].value;
            let da = bin_broadcast(g, y, |gy, s| gy * s * (1.0 - s));
            accumulate(&mut slots[*a], da);
        }
        Op::Silu(a) => {
            let da = bin_broadcast(g, val(*a), |gy, x| {
                let s = sigmoid(x);
                gy * (s + x * s * (1.0 - s))
            });
            accumulate(&mut slots[*a], da);
        }
        Op::MatMul(a, b) => {
            let a2 = val(*a).view().into_dimensionality::<Ix2>().unwrap();
            let b2 = val(*b).view().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if req(*a) {
                accumulate(&mut slots[*a], matmul2(&g2, &b2.t()).into_dyn());
            }
            if req(*b) {
                accumulate(&mut slots[*b], matmul2(&a2.t(), &g2).into_dyn());
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let xv = val(*x);
            let wv = val(*w);
            let (b, c, h, wd) = nchw(xv.shape());
            let (o, _ci, kh, kw) = nchw(wv.shape());
            let (oh, ow) = super::conv::conv_out_hw(h, wd, kh, kw, *stride, *pad);
            let w2 = wv
                .view()
                .into_shape_with_order((o, c * kh * kw))
                .unwrap();
            let mut dx = req(*x).then(|| ArrayD::<Real>::zeros(xv.raw_dim()));
            let mut dw2 = req(*w).then(|| Array2::<Real>::zeros((o, c * kh * kw)));
            for bi in 0..b {
                let g2 = g
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((o, oh * ow))
                    .unwrap()
                    .to_owned();
                if let Some(dw2) = dw2.as_mut() {
                    let xi = xv
                        .index_axis(Axis(0), bi)
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap();
                    let cols = im2col(&xi, kh, kw, *stride, *pad);
                    general_mat_mul(1.0, &g2.view(), &cols.t(), 1.0, dw2);
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = matmul2(&w2.t(), &g2.view());
                    let dxi = col2im(&dcols, c, h, wd, kh, kw, *stride, *pad);
                    dx.index_axis_mut(Axis(0), bi).assign(&dxi);
                }
            }
            if let Some(dx) = dx {
                accumulate(&mut slots[*x], dx);
            }
            if let Some(dw2) = dw2 {
                let dw = dw2
                    .into_shape_with_order(IxDyn(&[o, c, kh, kw]))
                    .unwrap();
                accumulate(&mut slots[*w], dw);
            }
        }
        Op::Upsample2x(a) => {
            let (b, c, h2, w2) = nchw(g.shape());
            let (h, w) = (h2 / 2, w2 / 2);
            let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            dx[[bi, ci, i / 2, j / 2]] += g[[bi, ci, i, j]];
                        }
                    }
                }
            }
            accumulate(&mut slots[*a], dx);
        }
        Op::Reshape { x, orig } => {
            let dg = g
                .to_owned()
                .into_shape_with_order(IxDyn(orig))
                .expect("reshape grad");
            accumulate(&mut slots[*x], dg);
        }
        Op::Permute { x, axes } => {
            let mut inv = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let dg = g
                .view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned();
            accumulate(&mut slots[*x], dg);
        }
        Op::SumAxes { x, orig } => {
            let gb = g
                .broadcast(IxDyn(orig))
                .expect("sum_axes grad broadcast")
                .to_owned();
            accumulate(&mut slots[*x], gb);
        }
        Op::SumAll(x) => {
            let seed = g.iter().next().copied().unwrap_or(0.0);
            let orig = val(*x).raw_dim();
            accumulate(&mut slots[*x], ArrayD::from_elem(orig, seed));
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            // dx = y * (g - sum(g * y, last))
            let gy = bin_broadcast(g, y, |u, v| u * v);
            let last = gy.ndim() - 1;
            let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
            let centered = bin_broadcast(g, &s, |u, v| u - v);
            let dx = bin_broadcast(&centered, y, |u, v| u * v);
            accumulate(&mut slots[*a], dx);
        }
        Op::Gather { table, ids } => {
            let t_shape = val(*table).shape().to_vec();
            let mut dt = Array2::<Real>::zeros((t_shape[0], t_shape[1]));
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            for (i, &rid) in ids.iter().enumerate() {
                let mut row = dt.row_mut(rid);
                row += &g2.row(i);
            }
            accumulate(&mut slots[*table], dt.into_dyn());
        }
    }
}
