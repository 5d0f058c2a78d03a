//! A small reverse-mode automatic differentiation tape over `ndarray`.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled in from a [`ParamStore`] by id and cached, so a parameter used by
//! several branches (query path and support path) is a single node whose
//! gradient accumulates contributions from all of them.

mod kernels;
mod optim;
mod params;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use num_traits::FromPrimitive;

pub use kernels::{adaptive_bin, im2col, roi_align_plan, ConvGeom, RoiAlignPlan};
pub use optim::Sgd;
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};

pub trait Float:
    num_traits::Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
pub(crate) fn lit<T: Float>(v: f64) -> T {
    T::from_f64(v).expect("float literal")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Variable,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    BroadcastRows(Var),
    SelectRow(Var, usize),
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<Array2<T>>,
    },
    RoiAlign {
        input: Var,
        plan: RoiAlignPlan,
    },
    AdaptiveAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Array2<T>,
        normalizer: T,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<(usize, T)>,
        normalizer: T,
    },
    SmoothL1 {
        input: Var,
        targets: Vec<([usize; 4], [T; 4])>,
        beta: T,
        normalizer: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

fn view2<T>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn standard<T: Float>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Variable | Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value: standard(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        *self.nodes[v.0].value.iter().next().expect("non-empty tensor")
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Variable, &[])
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    /// Parameters bound into this graph so far.
    pub fn used_params(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn rank2(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(format!("{what}: expected rank 2, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale), &[a])
    }

    /// `a` is `M x N`, `bias` is `N`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rank2(a, "add_row_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!("bias {:?} for width {n}", self.shape(bias))));
        }
        let b = self.value(bias).clone().into_shape_with_order((1, n)).expect("bias");
        let v = (&view2(self.value(a)) + &b).into_dyn();
        Ok(self.push(v, Op::AddRowBias(a, bias), &[a, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.rank2(a, "matmul lhs")?;
        let (k2, _) = self.rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let v = view2(self.value(a)).dot(&view2(self.value(b))).into_dyn();
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * w^T` with `a: M x K`, `w: N x K` (row-major linear-layer weights).
    pub fn matmul_nt(&mut self, a: Var, w: Var) -> Result<Var> {
        let (_, k) = self.rank2(a, "matmul_nt lhs")?;
        let (_, k2) = self.rank2(w, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt inner dims {k} vs {k2}")));
        }
        let v = view2(self.value(a)).dot(&view2(self.value(w)).t()).into_dyn();
        Ok(self.push(v, Op::MatMulNT(a, w), &[a, w]))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, weight)?;
        match bias {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| sigmoid(x));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, _) = self.rank2(a, "concat_cols")?;
        let (m2, _) = self.rank2(b, "concat_cols")?;
        if m != m2 {
            return Err(Error::shape(format!("concat_cols rows {m} vs {m2}")));
        }
        let v = ndarray::concatenate(Axis(1), &[view2(self.value(a)), view2(self.value(b))])
            .expect("concat")
            .into_dyn();
        Ok(self.push(v, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of nothing"));
        }
        let n = self.rank2(parts[0], "concat_rows")?.1;
        for &p in parts {
            if self.rank2(p, "concat_rows")?.1 != n {
                return Err(Error::shape("concat_rows width mismatch"));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| view2(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat").into_dyn();
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Repeats a `1 x N` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = self.rank2(a, "broadcast_rows")?;
        if r != 1 {
            return Err(Error::shape("broadcast_rows expects a single row"));
        }
        let v = view2(self.value(a))
            .broadcast((m, n))
            .expect("broadcast")
            .to_owned()
            .into_dyn();
        Ok(self.push(v, Op::BroadcastRows(a), &[a]))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (m, _) = self.rank2(a, "select_row")?;
        if row >= m {
            return Err(Error::shape(format!("row {row} out of {m}")));
        }
        let v = view2(self.value(a)).slice(s![row..row + 1, ..]).to_owned().into_dyn();
        Ok(self.push(v, Op::SelectRow(a, row), &[a]))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2(a, "mean_rows")?;
        if m == 0 {
            return Err(Error::shape("mean of zero rows"));
        }
        let v = view2(self.value(a))
            .mean_axis(Axis(0))
            .expect("rows")
            .into_shape_with_order((1, n))
            .expect("row")
            .into_dyn();
        Ok(self.push(v, Op::MeanRows(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(a))));
        }
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::Sum(a), &[a])
    }

    /// 2-D convolution. `x: N x C x H x W`, `w: O x C x k x k`, `b: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = match self.shape(x) {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(Error::shape(format!("conv2d input {s:?}"))),
        };
        let (o, k) = match self.shape(w) {
            &[o, ci, k, k2] if ci == c && k == k2 => (o, k),
            s => return Err(Error::shape(format!("conv2d weight {s:?} for {c} channels"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias"));
            }
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d kernel {k} does not fit {h}x{wd}")))?;
        let wmat = self
            .value(w)
            .view()
            .into_shape_with_order((o, geom.patch_len()))
            .expect("weight");
        let xs = self.value(x).as_slice().expect("standard layout");
        let plane = c * h * wd;
        let n_out = geom.out_h * geom.out_w;
        let mut out = Vec::with_capacity(n * o * n_out);
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let col = im2col(&xs[i * plane..(i + 1) * plane], &geom);
            let mut y = wmat.dot(&col);
            if let Some(b) = b {
                let bv = self.value(b);
                for (mut row, &bias) in y.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                    row.mapv_inplace(|v| v + bias);
                }
            }
            out.extend(y.iter().copied());
            cols.push(col);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, o, geom.out_h, geom.out_w]), out).expect("conv out");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: x,
                weight: w,
                bias: b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// RoIAlign on a single-image feature map `1 x C x H x W`; output is
    /// `R x C x P x P`.
    pub fn roi_align(&mut self, feat: Var, plan: RoiAlignPlan) -> Result<Var> {
        let c = match self.shape(feat) {
            &[1, c, h, w] if h == plan.feat_h && w == plan.feat_w => c,
            s => return Err(Error::shape(format!("roi_align feature {s:?}"))),
        };
        let out = plan.forward(self.value(feat).as_slice().expect("layout"), c);
        let value = ArrayD::from_shape_vec(IxDyn(&[plan.rois, c, plan.pooled, plan.pooled]), out).expect("roi out");
        Ok(self.push(value, Op::RoiAlign { input: feat, plan }, &[feat]))
    }

    /// Adaptive average pooling of `N x C x H x W` to `N x C x P x P`.
    pub fn adaptive_avg_pool(&mut self, x: Var, pooled: usize) -> Result<Var> {
        let (n, c, h, w) = match self.shape(x) {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(Error::shape(format!("adaptive_avg_pool input {s:?}"))),
        };
        let xs = self.value(x).as_slice().expect("layout");
        let mut out = vec![T::zero(); n * c * pooled * pooled];
        for nc in 0..n * c {
            let src = &xs[nc * h * w..(nc + 1) * h * w];
            for py in 0..pooled {
                let (y0, y1) = adaptive_bin(py, pooled, h);
                for px in 0..pooled {
                    let (x0, x1) = adaptive_bin(px, pooled, w);
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[yy * w + xx];
                        }
                    }
                    out[(nc * pooled + py) * pooled + px] = acc / lit::<T>(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, pooled, pooled]), out).expect("pool");
        Ok(self.push(value, Op::AdaptiveAvgPool(x), &[x]))
    }

    /// Mean-reduced softmax cross-entropy over the listed `(row, class)`
    /// pairs, divided by `normalizer`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], normalizer: T) -> Result<Var> {
        let (m, k) = self.rank2(logits, "softmax_cross_entropy")?;
        if targets.iter().any(|&(r, c)| r >= m || c >= k) {
            return Err(Error::shape("cross-entropy target out of range"));
        }
        let probs = softmax_rows(view2(self.value(logits)));
        let mut loss = T::zero();
        for &(r, c) in targets {
            loss -= probs[[r, c]].max(lit(1e-30)).ln();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), loss / normalizer);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                normalizer,
            },
            &[logits],
        ))
    }

    /// Binary cross-entropy on raw logits addressed by flat index.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[(usize, T)], normalizer: T) -> Result<Var> {
        let x = self.value(logits).as_slice().expect("layout");
        if targets.iter().any(|&(i, _)| i >= x.len()) {
            return Err(Error::shape("bce target out of range"));
        }
        let mut loss = T::zero();
        for &(i, t) in targets {
            let v = x[i];
            loss += v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), loss / normalizer);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                normalizer,
            },
            &[logits],
        ))
    }

    /// Smooth-L1 between gathered quadruples of `input` (flat indices) and
    /// their targets, summed and divided by `normalizer`.
    pub fn smooth_l1(&mut self, input: Var, targets: &[([usize; 4], [T; 4])], beta: T, normalizer: T) -> Result<Var> {
        let x = self.value(input).as_slice().expect("layout");
        let mut loss = T::zero();
        for (idx, tgt) in targets {
            for j in 0..4 {
                let i = idx[j];
                if i >= x.len() {
                    return Err(Error::shape("smooth_l1 index out of range"));
                }
                loss += smooth_l1_value(x[i] - tgt[j], beta);
            }
        }
        let value = ArrayD::from_elem(IxDyn(&[]), loss / normalizer);
        Ok(self.push(
            value,
            Op::SmoothL1 {
                input,
                targets: targets.to_vec(),
                beta,
                normalizer,
            },
            &[input],
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Constant | Op::Variable | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients { nodes: grads, params }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.mapv(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = &g * self.value(*b);
                let gb = &g * self.value(*a);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Affine(a, scale) => {
                let s = *scale;
                self.acc(grads, *a, g.mapv(|v| v * s));
            }
            Op::AddRowBias(a, b) => {
                let gb = view2(&g).sum_axis(Axis(0)).into_dyn();
                self.acc(grads, *b, gb);
                self.acc(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let g2 = view2(&g);
                let ga = g2.dot(&view2(self.value(*b)).t()).into_dyn();
                let gb = view2(self.value(*a)).t().dot(&g2).into_dyn();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::MatMulNT(a, w) => {
                let g2 = view2(&g);
                let ga = g2.dot(&view2(self.value(*w))).into_dyn();
                let gw = g2.t().dot(&view2(self.value(*a))).into_dyn();
                self.acc(grads, *a, ga);
                self.acc(grads, *w, gw);
            }
            Op::Sigmoid(a) => {
                let ga = ndarray::Zip::from(&g)
                    .and(y)
                    .map_collect(|&g, &y| g * y * (T::one() - y));
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = ndarray::Zip::from(&g)
                    .and(y)
                    .map_collect(|&g, &y| g * (T::one() - y * y));
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = ndarray::Zip::from(&g)
                    .and(y)
                    .map_collect(|&g, &y| if y > T::zero() { g } else { T::zero() });
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(*a)[1];
                let g2 = view2(&g);
                self.acc(grads, *a, g2.slice(s![.., ..p]).to_owned().into_dyn());
                self.acc(grads, *b, g2.slice(s![.., p..]).to_owned().into_dyn());
            }
            Op::ConcatRows(parts) => {
                let g2 = view2(&g);
                let mut start = 0;
                for &p in parts {
                    let m = self.shape(p)[0];
                    self.acc(grads, p, g2.slice(s![start..start + m, ..]).to_owned().into_dyn());
                    start += m;
                }
            }
            Op::BroadcastRows(a) => {
                let n = self.shape(*a)[1];
                let ga = view2(&g)
                    .sum_axis(Axis(0))
                    .into_shape_with_order((1, n))
                    .expect("row")
                    .into_dyn();
                self.acc(grads, *a, ga);
            }
            Op::SelectRow(a, row) => {
                let mut ga = ArrayD::zeros(self.value(*a).raw_dim());
                ga.slice_mut(s![*row..*row + 1, ..]).assign(&view2(&g));
                self.acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let m = self.shape(*a)[0];
                let scale = T::one() / lit::<T>(m as f64);
                let n = self.shape(*a)[1];
                let ga = view2(&g)
                    .broadcast((m, n))
                    .expect("broadcast")
                    .mapv(|v| v * scale)
                    .into_dyn();
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.into_shape_with_order(self.value(*a).raw_dim()).expect("reshape back");
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = *g.iter().next().expect("scalar");
                self.acc(grads, *a, ArrayD::from_elem(self.value(*a).raw_dim(), gv));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let n = cols.len();
                let o = self.shape(*weight)[0];
                let n_out = geom.out_h * geom.out_w;
                let gs = g.as_slice().expect("layout");
                let wmat = self
                    .value(*weight)
                    .view()
                    .into_shape_with_order((o, geom.patch_len()))
                    .expect("weight");
                let mut gw = Array2::<T>::zeros((o, geom.patch_len()));
                let mut gb = vec![T::zero(); o];
                let need_x = self.nodes[input.0].needs_grad;
                let plane = geom.in_c * geom.in_h * geom.in_w;
                let mut gx = if need_x { vec![T::zero(); n * plane] } else { Vec::new() };
                for (i, col) in cols.iter().enumerate() {
                    let gy = ArrayView2::from_shape((o, n_out), &gs[i * o * n_out..(i + 1) * o * n_out]).expect("gy");
                    gw = gw + gy.dot(&col.t());
                    for (oc, row) in gy.axis_iter(Axis(0)).enumerate() {
                        gb[oc] += row.sum();
                    }
                    if need_x {
                        let dcols = wmat.t().dot(&gy);
                        kernels::col2im(&dcols, geom, &mut gx[i * plane..(i + 1) * plane]);
                    }
                }
                let wshape = self.value(*weight).raw_dim();
                self.acc(grads, *weight, gw.into_dyn().into_shape_with_order(wshape).expect("gw"));
                if let Some(b) = bias {
                    self.acc(grads, *b, ArrayD::from_shape_vec(IxDyn(&[o]), gb).expect("gb"));
                }
                if need_x {
                    let xshape = self.value(*input).raw_dim();
                    self.acc(grads, *input, ArrayD::from_shape_vec(xshape, gx).expect("gx"));
                }
            }
            Op::RoiAlign { input, plan } => {
                let c = self.shape(*input)[1];
                let mut gf = ArrayD::zeros(self.value(*input).raw_dim());
                plan.backward(g.as_slice().expect("layout"), c, gf.as_slice_mut().expect("layout"));
                self.acc(grads, *input, gf);
            }
            Op::AdaptiveAvgPool(x) => {
                let (n, c, h, w) = match self.shape(*x) {
                    &[n, c, h, w] => (n, c, h, w),
                    _ => unreachable!(),
                };
                let pooled = y.shape()[2];
                let gs = g.as_slice().expect("layout");
                let mut gx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                    for py in 0..pooled {
                        let (y0, y1) = adaptive_bin(py, pooled, h);
                        for px in 0..pooled {
                            let (x0, x1) = adaptive_bin(px, pooled, w);
                            let share = gs[(nc * pooled + py) * pooled + px] / lit::<T>(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dst[yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                let xshape = self.value(*x).raw_dim();
                self.acc(grads, *x, ArrayD::from_shape_vec(xshape, gx).expect("gx"));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                normalizer,
            } => {
                let gv = *g.iter().next().expect("scalar") / *normalizer;
                let mut gl = Array2::<T>::zeros(probs.raw_dim());
                for &(r, c) in targets {
                    let mut row = gl.row_mut(r);
                    row.zip_mut_with(&probs.row(r), |d, &p| *d += p * gv);
                    row[c] -= gv;
                }
                self.acc(grads, *logits, gl.into_dyn());
            }
            Op::BceWithLogits {
                logits,
                targets,
                normalizer,
            } => {
                let gv = *g.iter().next().expect("scalar") / *normalizer;
                let x = self.value(*logits);
                let xs = x.as_slice().expect("layout");
                let mut gl = ArrayD::zeros(x.raw_dim());
                let gls = gl.as_slice_mut().expect("layout");
                for &(i, t) in targets {
                    gls[i] += (sigmoid(xs[i]) - t) * gv;
                }
                self.acc(grads, *logits, gl);
            }
            Op::SmoothL1 {
                input,
                targets,
                beta,
                normalizer,
            } => {
                let gv = *g.iter().next().expect("scalar") / *normalizer;
                let x = self.value(*input);
                let xs = x.as_slice().expect("layout");
                let mut gi = ArrayD::zeros(x.raw_dim());
                let gis = gi.as_slice_mut().expect("layout");
                for (idx, tgt) in targets {
                    for j in 0..4 {
                        let d = xs[idx[j]] - tgt[j];
                        let slope = if d.abs() < *beta { d / *beta } else { d.signum() };
                        gis[idx[j]] += slope * gv;
                    }
                }
                self.acc(grads, *input, gi);
            }
        }
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn smooth_l1_value<T: Float>(d: T, beta: T) -> T {
    let a = d.abs();
    if a < beta {
        lit::<T>(0.5) * a * a / beta
    } else {
        a - lit::<T>(0.5) * beta
    }
}

pub fn softmax_rows<T: Float>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.iter().fold(T::zero(), |a, &v| a + v);
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<ArrayD<T>>>,
    params: Vec<(ParamId, ArrayD<T>)>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn scale(&mut self, factor: T) {
        for (_, g) in &mut self.params {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}
