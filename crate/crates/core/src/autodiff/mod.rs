//! Reverse-mode automatic differentiation over row-major 2-D arrays.
//!
//! A [`Tape`] records every operation eagerly (values are computed when the
//! op is pushed) and [`Tape::backward`] walks the record in reverse.  The
//! recurrent scans are single fused nodes whose adjoints live next to their
//! forward kernels in [`crate::mixers::scan`].

mod kernels;

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::mixers::scan::{self, HeadLayout};
use crate::{Error, Real, Result};

pub use kernels::{conv_forward, focal_loss_grad, focal_loss_value, rmsnorm_forward, ConvMode};

pub type Mat<R> = Array2<R>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
}

impl Activation {
    pub fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<R: Real>(self, x: R, y: R) -> R {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (R::one() + x * (R::one() - s))
            }
            Activation::Sigmoid => y * (R::one() - y),
            Activation::Tanh => R::one() - y * y,
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
        }
    }
}

fn standard<R: Real>(m: Mat<R>) -> Mat<R> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub fn softplus<R: Real>(x: R) -> R {
    if x > R::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

enum Op<R: Real> {
    Leaf,
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    /// `a · b`
    MatMulNn(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// Row vector broadcast over rows.
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// Column vector broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, R),
    Act(Var, Activation),
    SliceCols(Var, usize),
    Concat(Vec<Var>),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<R>,
    },
    L2NormGroups {
        x: Var,
        group: usize,
        norms: Vec<R>,
    },
    Conv {
        x: Var,
        kernel: Var,
        bias: Var,
        mode: ConvMode,
    },
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        mask: Array2<R>,
    },
    SelectiveScan {
        inputs: [Var; 6],
        states: Vec<R>,
    },
    HeadedScan {
        inputs: [Var; 5],
        layout: HeadLayout,
        states: Vec<R>,
    },
    Quasiseparable {
        inputs: [Var; 5],
        layout: HeadLayout,
        forward: Vec<R>,
        backward: Vec<R>,
    },
    DeltaRule {
        inputs: [Var; 5],
        layout: HeadLayout,
        states: Vec<R>,
    },
    FocalLoss {
        logits: Var,
        target: usize,
        gamma: R,
        alpha: R,
    },
}

struct Node<R: Real> {
    value: Arc<Mat<R>>,
    op: Op<R>,
}

/// Recorded computation graph.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<R: Real>(op: &'static str, a: &Mat<R>, b: &Mat<R>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.dim(), b.dim()),
        ));
    }
    Ok(())
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<R>, op: Op<R>) -> Var {
        let value = standard(value);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a shared value (typically a parameter) without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Mat<R>>) -> Var {
        assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value[[0, 0]]
    }

    /// `a · bᵀ`; with `b` a weight matrix `out × in` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", av.dim(), bv.dim()),
            ));
        }
        let out = av.dot(&bv.t());
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", av.dim(), bv.dim()),
            ));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMulNn(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(Error::shape(op, format!("{:?} with row {:?}", av.dim(), rv.dim())));
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let out = self.value(a) + self.value(row);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let out = self.value(a) * self.value(row);
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.ncols() != 1 || cv.nrows() != av.nrows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} with column {:?}", av.dim(), cv.dim()),
            ));
        }
        let out = av * cv;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        let out = self.value(a).mapv(|x| f.apply(x));
        self.push(out, Op::Act(a, f))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.act(a, Activation::Silu)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.ncols() || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + len, av.ncols()),
            ));
        }
        let out = av.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Splits `a` into consecutive column blocks of the given widths.
    pub fn split_cols(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        if total != self.value(a).ncols() {
            return Err(Error::shape(
                "split_cols",
                format!("widths sum to {total}, input has {}", self.value(a).ncols()),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(a, start, w)?);
            start += w;
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).nrows();
        if parts.iter().any(|&p| self.value(p).nrows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .expect("rows checked")
            .as_standard_layout()
            .into_owned();
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Per-row RMS normalisation with a `1 × C` gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: R) -> Result<Var> {
        self.check_row("rmsnorm", x, gain)?;
        let (out, inv_rms) = rmsnorm_forward(self.value(x), self.value(gain), eps)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Unit L2 norm over consecutive column groups of width `group`.
    pub fn l2norm_groups(&mut self, x: Var, group: usize, eps: R) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.ncols() % group != 0 {
            return Err(Error::shape(
                "l2norm_groups",
                format!("{} columns in groups of {group}", xv.ncols()),
            ));
        }
        let (out, norms) = kernels::l2norm_groups_forward(xv, group, eps);
        Ok(self.push(out, Op::L2NormGroups { x, group, norms }))
    }

    /// Depthwise convolution along time: `x` is `T × C`, `kernel` is `C × W`,
    /// `bias` is `1 × C`.
    pub fn conv(&mut self, x: Var, kernel: Var, bias: Var, mode: ConvMode) -> Result<Var> {
        let out = conv_forward(self.value(x), self.value(kernel), self.value(bias), mode)?;
        Ok(self.push(out, Op::Conv { x, kernel, bias, mode }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = kernels::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, x: Var, mask: Array2<R>) -> Result<Var> {
        same_shape("dropout", self.value(x), &mask)?;
        let out = self.value(x) * &mask;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Fused Mamba selective scan; see [`scan::selective_scan`].
    pub fn selective_scan(
        &mut self,
        v: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        skip: Var,
    ) -> Result<Var> {
        let (y, states) = scan::selective_scan(
            self.value(v),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(skip),
        )?;
        Ok(self.push(
            y,
            Op::SelectiveScan {
                inputs: [v, delta, a, b, c, skip],
                states,
            },
        ))
    }

    /// Fused scalar-decay headed scan; see [`scan::headed_scan`].
    pub fn headed_scan(
        &mut self,
        v: Var,
        decay: Var,
        key: Var,
        query: Var,
        skip: Var,
    ) -> Result<Var> {
        let layout = HeadLayout::infer(self.value(v), self.value(decay), self.value(key))?;
        let (y, states) = scan::headed_scan(
            layout,
            self.value(v),
            self.value(decay),
            self.value(key),
            self.value(query),
            self.value(skip),
        )?;
        Ok(self.push(
            y,
            Op::HeadedScan {
                inputs: [v, decay, key, query, skip],
                layout,
                states,
            },
        ))
    }

    /// Fused bidirectional quasiseparable scan; see [`scan::quasiseparable_scan`].
    pub fn quasiseparable_scan(
        &mut self,
        v: Var,
        decay: Var,
        key: Var,
        query: Var,
        diag: Var,
    ) -> Result<Var> {
        let layout = HeadLayout::infer(self.value(v), self.value(decay), self.value(key))?;
        let (y, forward, backward) = scan::quasiseparable_scan(
            layout,
            self.value(v),
            self.value(decay),
            self.value(key),
            self.value(query),
            self.value(diag),
        )?;
        Ok(self.push(
            y,
            Op::Quasiseparable {
                inputs: [v, decay, key, query, diag],
                layout,
                forward,
                backward,
            },
        ))
    }

    /// Fused gated delta-rule scan; see [`scan::delta_rule_scan`].
    pub fn delta_rule_scan(
        &mut self,
        v: Var,
        decay: Var,
        beta: Var,
        key: Var,
        query: Var,
    ) -> Result<Var> {
        let layout = HeadLayout::infer(self.value(v), self.value(decay), self.value(key))?;
        let (y, states) = scan::delta_rule_scan(
            layout,
            self.value(v),
            self.value(decay),
            self.value(beta),
            self.value(key),
            self.value(query),
        )?;
        Ok(self.push(
            y,
            Op::DeltaRule {
                inputs: [v, decay, beta, key, query],
                layout,
                states,
            },
        ))
    }

    /// Two-class focal loss on a `1 × 2` logit row; the result is `1 × 1`.
    pub fn focal_loss(&mut self, logits: Var, target: usize, gamma: R, alpha: R) -> Result<Var> {
        let lv = self.value(logits);
        if lv.dim() != (1, 2) || target > 1 {
            return Err(Error::shape(
                "focal_loss",
                format!("logits {:?}, target {target}", lv.dim()),
            ));
        }
        let loss = kernels::focal_loss_value(lv[[0, 0]], lv[[0, 1]], target, gamma, alpha);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::FocalLoss {
                logits,
                target,
                gamma,
                alpha,
            },
        ))
    }

    /// Back-propagates from `root`, seeding its adjoint with `seed` in every
    /// element.
    pub fn backward(&self, root: Var, seed: R) -> Grads<R> {
        let mut grads: Vec<Option<Mat<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem(self.value(root).dim(), seed));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, id: usize, g: &Mat<R>, grads: &mut [Option<Mat<R>>]) {
        let node = &self.nodes[id];
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, g.dot(self.value(*b)));
                accumulate(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::MatMulNn(a, b) => {
                accumulate(grads, *a, g.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, g.t().as_standard_layout().into_owned());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                accumulate(grads, *a, g * self.value(*row));
                let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, *row, gr);
            }
            Op::MulCol(a, col) => {
                accumulate(grads, *a, g * self.value(*col));
                let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(grads, *col, gc);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Act(a, f) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(x)
                    .and(out)
                    .for_each(|gv, &xv, &yv| *gv *= f.derivative(xv, yv));
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    accumulate(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (gx, gg) =
                    kernels::rmsnorm_backward(self.value(*x), self.value(*gain), inv_rms, g);
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
            }
            Op::L2NormGroups { x, group, norms } => {
                accumulate(grads, *x, kernels::l2norm_groups_backward(out, *group, norms, g));
            }
            Op::Conv { x, kernel, bias, mode } => {
                let (gx, gk, gb) =
                    kernels::conv_backward(self.value(*x), self.value(*kernel), g, *mode);
                accumulate(grads, *x, gx);
                accumulate(grads, *kernel, gk);
                accumulate(grads, *bias, gb);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g * out;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(out.rows()) {
                    let dot: R = row.iter().copied().sum();
                    row.zip_mut_with(&yrow, |gv, &yv| *gv = *gv - yv * dot);
                }
                accumulate(grads, *a, ga);
            }
            Op::Dropout { x, mask } => accumulate(grads, *x, g * mask),
            Op::SelectiveScan { inputs, states } => {
                let [v, delta, a, b, c, skip] = *inputs;
                let gr = scan::selective_scan_backward(
                    self.value(v),
                    self.value(delta),
                    self.value(a),
                    self.value(b),
                    self.value(c),
                    self.value(skip),
                    states,
                    g,
                );
                for (var, gv) in [v, delta, a, b, c, skip].into_iter().zip(gr) {
                    accumulate(grads, var, gv);
                }
            }
            Op::HeadedScan {
                inputs,
                layout,
                states,
            } => {
                let [v, decay, key, query, skip] = *inputs;
                let gr = scan::headed_scan_backward(
                    *layout,
                    self.value(v),
                    self.value(decay),
                    self.value(key),
                    self.value(query),
                    self.value(skip),
                    states,
                    g,
                );
                for (var, gv) in [v, decay, key, query, skip].into_iter().zip(gr) {
                    accumulate(grads, var, gv);
                }
            }
            Op::Quasiseparable {
                inputs,
                layout,
                forward,
                backward,
            } => {
                let [v, decay, key, query, diag] = *inputs;
                let gr = scan::quasiseparable_scan_backward(
                    *layout,
                    self.value(v),
                    self.value(decay),
                    self.value(key),
                    self.value(query),
                    self.value(diag),
                    forward,
                    backward,
                    g,
                );
                for (var, gv) in [v, decay, key, query, diag].into_iter().zip(gr) {
                    accumulate(grads, var, gv);
                }
            }
            Op::DeltaRule {
                inputs,
                layout,
                states,
            } => {
                let [v, decay, beta, key, query] = *inputs;
                let gr = scan::delta_rule_scan_backward(
                    *layout,
                    self.value(v),
                    self.value(decay),
                    self.value(beta),
                    self.value(key),
                    self.value(query),
                    states,
                    g,
                );
                for (var, gv) in [v, decay, beta, key, query].into_iter().zip(gr) {
                    accumulate(grads, var, gv);
                }
            }
            Op::FocalLoss {
                logits,
                target,
                gamma,
                alpha,
            } => {
                let lv = self.value(*logits);
                let gl = kernels::focal_loss_grad(
                    lv[[0, 0]],
                    lv[[0, 1]],
                    *target,
                    *gamma,
                    *alpha,
                );
                let scale = g[[0, 0]];
                let row = Array2::from_shape_vec((1, 2), vec![gl[0] * scale, gl[1] * scale])
                    .expect("1x2");
                accumulate(grads, *logits, row);
            }
        }
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Mat<R>>], v: Var, g: Mat<R>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => {
            *slot = Some(if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().into_owned()
            })
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads<R: Real> {
    grads: Vec<Option<Mat<R>>>,
}

impl<R: Real> Grads<R> {
    pub fn get(&self, v: Var) -> Option<&Mat<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
