//! The recording tape: every primitive pushes a node, `backward` replays the
//! nodes in reverse.
//!
//! Attention over a batch of windows is a single fused node rather than a
//! composition of matmul/softmax primitives: the fused kernel avoids
//! materialising per-head intermediates on the tape, and it keeps the softmax
//! weights around — the backward pass needs them, and so do the tests that
//! assert attention rows form a probability distribution.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::tensor::gemm;
use super::{AutogradError, ParameterSet, Tensor};

const BCE_CLAMP_LO: f64 = 1e-7;
const BCE_CLAMP_HI: f64 = 1.0 - 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Add,
    AddRowVec,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    MulElem,
    SoftmaxRows,
    LayerNorm { eps: f64 },
    EmbeddingLookup { indices: Vec<usize> },
    Attention { windows: usize, heads: usize, weights: Tensor },
    SliceCols { start: usize, len: usize },
    ConcatCols { widths: Vec<usize> },
    SelectRows { indices: Vec<usize> },
    WindowMeanRows { windows: usize },
    WindowWeightedRows { windows: usize },
    TileAddRows { reps: usize },
    AppendRowPerWindow { windows: usize },
    PadCols,
    Reshape,
    SumAll,
    BceMean { labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
}

/// A recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Copyable handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Named leaf handles for a registered [`ParameterSet`].
pub type ParamVars<'t> = BTreeMap<String, Var<'t>>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records an input (leaf) tensor. Leaves are the only nodes that
    /// receive gradients from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>, AutogradError> {
        self.push(value, Vec::new(), Op::Leaf, "leaf")
    }

    /// Registers every parameter as a leaf, in name order.
    pub fn register(&self, params: &ParameterSet) -> Result<ParamVars<'_>, AutogradError> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.clone(), self.leaf(tensor.clone())?);
        }
        Ok(vars)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, AutogradError> {
        if parts.is_empty() {
            return Err(AutogradError::Empty { what: "concat_cols inputs" });
        }
        for p in parts {
            p.check_tape(self)?;
        }
        let (rows, widths, total) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].id].value;
            let rows = first.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.id].value;
                if t.rank() != 2 || t.rows() != rows {
                    return Err(AutogradError::ShapeMismatch {
                        op: "concat_cols",
                        detail: format!("expected rank-2 with {rows} rows, got {:?}", t.shape()),
                    });
                }
                widths.push(t.cols());
            }
            (rows, widths.clone(), widths.iter().sum::<usize>())
        };
        let mut out = Tensor::zeros(vec![rows, total]);
        {
            let nodes = self.nodes.borrow();
            let dst = out.data_mut();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for r in 0..rows {
                    dst[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        self.push(
            out,
            parts.iter().map(|p| p.id).collect(),
            Op::ConcatCols { widths },
            "concat_cols",
        )
    }

    /// Softmax weights of every fused attention node, in recording order.
    /// Each tensor is `(windows·heads·rows) × rows`.
    pub fn attention_weights(&self) -> Vec<Tensor> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { weights, .. } => Some(weights.clone()),
                _ => None,
            })
            .collect()
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients;
    /// intermediate gradients are dropped as soon as their consumers are
    /// processed, only leaves keep theirs.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutogradError> {
        loss.check_tape(self)?;
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(AutogradError::NonScalarLoss { len: loss_node.value.len() });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        let mut seed = Tensor::zeros_like(&loss_node.value);
        seed.data_mut()[0] = 1.0;
        grads[loss.id] = Some(seed);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward_op(&node.op, &node.value, &parent_values, &g)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !pg.is_finite() {
                    return Err(AutogradError::NonFinite { op: "backward" });
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        op: Op,
        name: &'static str,
    ) -> Result<Var<'_>, AutogradError> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, op });
        Ok(Var { tape: self, id })
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if `var` influenced the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, with zeros when `var` did not reach the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }

    /// Collects gradients for registered parameters under their names.
    pub fn named(&self, vars: &ParamVars<'_>) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, var) in vars {
            out.insert(name, self.get_or_zeros(*var));
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Clones the node's value off the tape.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    fn check_tape(&self, tape: &Tape) -> Result<(), AutogradError> {
        if std::ptr::eq(self.tape, tape) {
            Ok(())
        } else {
            Err(AutogradError::TapeMismatch)
        }
    }

    fn unary(
        self,
        op: Op,
        name: &'static str,
        f: impl FnOnce(&Tensor) -> Result<Tensor, AutogradError>,
    ) -> Result<Var<'t>, AutogradError> {
        let value = self.tape.with_value(self.id, f)?;
        self.tape.push(value, vec![self.id], op, name)
    }

    fn binary(
        self,
        rhs: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, AutogradError>,
    ) -> Result<Var<'t>, AutogradError> {
        rhs.check_tape(self.tape)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        self.tape.push(value, vec![self.id, rhs.id], op, name)
    }

    /// `self × rhs` for rank-2 operands with matching inner dimension.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, AutogradError> {
        self.binary(rhs, Op::MatMul, "matmul", |a, b| {
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(AutogradError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} × {:?}", a.shape(), b.shape()),
                });
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = Tensor::zeros(vec![m, n]);
            gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut());
            Ok(out)
        })
    }

    /// Elementwise sum of two tensors with identical shapes.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, AutogradError> {
        self.binary(rhs, Op::Add, "add", |a, b| {
            if a.shape() != b.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "add",
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Adds a rank-1 vector to every row of a rank-2 tensor.
    pub fn add_row_vec(self, bias: Var<'t>) -> Result<Var<'t>, AutogradError> {
        self.binary(bias, Op::AddRowVec, "add_row_vec", |a, b| {
            if a.rank() != 2 || b.rank() != 1 || a.cols() != b.len() {
                return Err(AutogradError::ShapeMismatch {
                    op: "add_row_vec",
                    detail: format!("{:?} + {:?}", a.shape(), b.shape()),
                });
            }
            let w = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data()[i % w])
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>, AutogradError> {
        if !factor.is_finite() {
            return Err(AutogradError::NonFinite { op: "scale" });
        }
        self.unary(Op::Scale(factor), "scale", |a| {
            let data = a.data().iter().map(|x| x * factor).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn relu(self) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::Relu, "relu", |a| {
            let data = a.data().iter().map(|x| x.max(0.0)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::Sigmoid, "sigmoid", |a| {
            let data = a.data().iter().map(|&x| stable_sigmoid(x)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn tanh(self) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::Tanh, "tanh", |a| {
            let data = a.data().iter().map(|x| x.tanh()).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul_elem(self, rhs: Var<'t>) -> Result<Var<'t>, AutogradError> {
        self.binary(rhs, Op::MulElem, "mul_elem", |a, b| {
            if a.shape() != b.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "mul_elem",
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Row-wise softmax of a rank-2 tensor (max-subtracted for stability).
    pub fn softmax_rows(self) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::SoftmaxRows, "softmax_rows", |a| {
            if a.rank() != 2 {
                return Err(AutogradError::ShapeMismatch {
                    op: "softmax_rows",
                    detail: format!("expected rank 2, got {:?}", a.shape()),
                });
            }
            let mut out = Tensor::zeros_like(a);
            let w = a.cols();
            for r in 0..a.rows() {
                softmax_row(a.row(r), &mut out.data_mut()[r * w..(r + 1) * w]);
            }
            Ok(out)
        })
    }

    /// Per-row layer normalisation with learned scale and shift:
    /// `y = γ·(x − μ)/√(σ² + eps) + β` with biased row variance.
    pub fn layer_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<Var<'t>, AutogradError> {
        gamma.check_tape(self.tape)?;
        beta.check_tape(self.tape)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            if x.rank() != 2 || g.rank() != 1 || b.rank() != 1 || g.len() != x.cols() || b.len() != x.cols() {
                return Err(AutogradError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), g.shape(), b.shape()),
                });
            }
            let d = x.cols();
            let mut out = Tensor::zeros_like(x);
            for r in 0..x.rows() {
                let row = x.row(r);
                let (mean, var) = mean_var(row);
                let inv = 1.0 / (var + eps).sqrt();
                let dst = &mut out.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    dst[j] = g.data()[j] * (row[j] - mean) * inv + b.data()[j];
                }
            }
            out
        };
        self.tape.push(
            value,
            vec![self.id, gamma.id, beta.id],
            Op::LayerNorm { eps },
            "layer_norm",
        )
    }

    /// Gathers rows of an embedding table (`self`) by index; gradient
    /// scatter-adds back into the table.
    pub fn embedding_lookup(self, indices: &[usize]) -> Result<Var<'t>, AutogradError> {
        let value = self.tape.with_value(self.id, |table| {
            if table.rank() != 2 {
                return Err(AutogradError::ShapeMismatch {
                    op: "embedding_lookup",
                    detail: format!("table must be rank 2, got {:?}", table.shape()),
                });
            }
            let vocab = table.rows();
            let e = table.cols();
            let mut out = Tensor::zeros(vec![indices.len(), e]);
            for (pos, &ix) in indices.iter().enumerate() {
                if ix >= vocab {
                    return Err(AutogradError::IndexOutOfRange {
                        op: "embedding_lookup",
                        index: ix,
                        limit: vocab,
                    });
                }
                out.data_mut()[pos * e..(pos + 1) * e].copy_from_slice(table.row(ix));
            }
            Ok(out)
        })?;
        self.tape.push(
            value,
            vec![self.id],
            Op::EmbeddingLookup { indices: indices.to_vec() },
            "embedding_lookup",
        )
    }

    /// Fused scaled dot-product attention over a batch of equal-length
    /// windows, split into `heads` heads along the feature axis.
    ///
    /// `self`, `k`, `v` are `(windows·rows) × d` with `d % heads == 0`; each
    /// window attends only within itself, causally when `causal` is set.
    pub fn attention_windows(
        self,
        k: Var<'t>,
        v: Var<'t>,
        windows: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var<'t>, AutogradError> {
        k.check_tape(self.tape)?;
        v.check_tape(self.tape)?;
        let (value, weights) = {
            let nodes = self.tape.nodes.borrow();
            let q = &nodes[self.id].value;
            let kt = &nodes[k.id].value;
            let vt = &nodes[v.id].value;
            attention_forward(q, kt, vt, windows, heads, causal)?
        };
        self.tape.push(
            value,
            vec![self.id, k.id, v.id],
            Op::Attention { windows, heads, weights },
            "attention",
        )
    }

    /// Columns `start .. start+len` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::SliceCols { start, len }, "slice_cols", |a| {
            if a.rank() != 2 || start + len > a.cols() {
                return Err(AutogradError::ShapeMismatch {
                    op: "slice_cols",
                    detail: format!("cols {start}..{} of {:?}", start + len, a.shape()),
                });
            }
            let w = a.cols();
            let mut out = Tensor::zeros(vec![a.rows(), len]);
            for r in 0..a.rows() {
                out.data_mut()[r * len..(r + 1) * len]
                    .copy_from_slice(&a.data()[r * w + start..r * w + start + len]);
            }
            Ok(out)
        })
    }

    /// Gathers rows by index (duplicates allowed).
    pub fn select_rows(self, indices: &[usize]) -> Result<Var<'t>, AutogradError> {
        let value = self.tape.with_value(self.id, |a| {
            if a.rank() != 2 {
                return Err(AutogradError::ShapeMismatch {
                    op: "select_rows",
                    detail: format!("expected rank 2, got {:?}", a.shape()),
                });
            }
            let w = a.cols();
            let mut out = Tensor::zeros(vec![indices.len(), w]);
            for (pos, &ix) in indices.iter().enumerate() {
                if ix >= a.rows() {
                    return Err(AutogradError::IndexOutOfRange {
                        op: "select_rows",
                        index: ix,
                        limit: a.rows(),
                    });
                }
                out.data_mut()[pos * w..(pos + 1) * w].copy_from_slice(a.row(ix));
            }
            Ok(out)
        })?;
        self.tape.push(
            value,
            vec![self.id],
            Op::SelectRows { indices: indices.to_vec() },
            "select_rows",
        )
    }

    /// Mean over each window's rows: `(windows·rows) × d → windows × d`.
    ///
    /// Each column's addends are summed in value order so the result is
    /// bit-identical under any permutation of a window's rows.
    pub fn window_mean_rows(self, windows: usize) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::WindowMeanRows { windows }, "window_mean_rows", |a| {
            let rows = window_rows(a, windows, "window_mean_rows")?;
            let d = a.cols();
            let mut out = Tensor::zeros(vec![windows, d]);
            let mut scratch = vec![0.0; rows];
            for wdx in 0..windows {
                for j in 0..d {
                    for (t, slot) in scratch.iter_mut().enumerate() {
                        *slot = a.data()[(wdx * rows + t) * d + j];
                    }
                    scratch.sort_unstable_by(f64::total_cmp);
                    out.data_mut()[wdx * d + j] = scratch.iter().sum::<f64>() / rows as f64;
                }
            }
            Ok(out)
        })
    }

    /// Weighted sum over each window's rows. `weights` is either rank-1
    /// (`rows`: one weight per time step, shared across features) or rank-2
    /// (`rows × d`: a weight per time step and feature).
    pub fn window_weighted_rows(
        self,
        weights: Var<'t>,
        windows: usize,
    ) -> Result<Var<'t>, AutogradError> {
        self.binary(
            weights,
            Op::WindowWeightedRows { windows },
            "window_weighted_rows",
            |a, w| {
                let rows = window_rows(a, windows, "window_weighted_rows")?;
                let d = a.cols();
                let per_feature = match (w.rank(), w.shape()) {
                    (1, s) if s[0] == rows => false,
                    (2, s) if s[0] == rows && s[1] == d => true,
                    _ => {
                        return Err(AutogradError::ShapeMismatch {
                            op: "window_weighted_rows",
                            detail: format!("weights {:?} for {rows} rows × {d} features", w.shape()),
                        })
                    }
                };
                let mut out = Tensor::zeros(vec![windows, d]);
                for wdx in 0..windows {
                    for t in 0..rows {
                        let row = a.row(wdx * rows + t);
                        let dst = &mut out.data_mut()[wdx * d..(wdx + 1) * d];
                        for j in 0..d {
                            let wt = if per_feature { w.data()[t * d + j] } else { w.data()[t] };
                            dst[j] += wt * row[j];
                        }
                    }
                }
                Ok(out)
            },
        )
    }

    /// Adds a `rows × d` table to `self` repeated `reps` times along the row
    /// axis — the positional-embedding add over a packed batch.
    pub fn tile_add_rows(self, table: Var<'t>, reps: usize) -> Result<Var<'t>, AutogradError> {
        self.binary(table, Op::TileAddRows { reps }, "tile_add_rows", |a, p| {
            if a.rank() != 2 || p.rank() != 2 || a.cols() != p.cols() || a.rows() != reps * p.rows()
            {
                return Err(AutogradError::ShapeMismatch {
                    op: "tile_add_rows",
                    detail: format!("{:?} + {reps}×{:?}", a.shape(), p.shape()),
                });
            }
            let (rows, d) = (p.rows(), p.cols());
            let mut out = a.clone();
            for r in 0..a.rows() {
                let src = p.row(r % rows);
                let dst = &mut out.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    dst[j] += src[j];
                }
            }
            Ok(out)
        })
    }

    /// Appends one shared row to the end of every window:
    /// `(windows·rows) × d → (windows·(rows+1)) × d`.
    pub fn append_row_per_window(
        self,
        row: Var<'t>,
        windows: usize,
    ) -> Result<Var<'t>, AutogradError> {
        self.binary(
            row,
            Op::AppendRowPerWindow { windows },
            "append_row_per_window",
            |a, r| {
                let rows = window_rows(a, windows, "append_row_per_window")?;
                let d = a.cols();
                if r.len() != d || r.rank() > 2 {
                    return Err(AutogradError::ShapeMismatch {
                        op: "append_row_per_window",
                        detail: format!("row {:?} for width {d}", r.shape()),
                    });
                }
                let mut out = Tensor::zeros(vec![windows * (rows + 1), d]);
                for wdx in 0..windows {
                    let src = &a.data()[wdx * rows * d..(wdx + 1) * rows * d];
                    let base = wdx * (rows + 1) * d;
                    out.data_mut()[base..base + rows * d].copy_from_slice(src);
                    out.data_mut()[base + rows * d..base + (rows + 1) * d]
                        .copy_from_slice(r.data());
                }
                Ok(out)
            },
        )
    }

    /// Appends `right` zero columns to a rank-2 tensor.
    pub fn pad_cols(self, right: usize) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::PadCols, "pad_cols", |a| {
            if a.rank() != 2 {
                return Err(AutogradError::ShapeMismatch {
                    op: "pad_cols",
                    detail: format!("expected rank 2, got {:?}", a.shape()),
                });
            }
            let (rows, w) = (a.rows(), a.cols());
            let wide = w + right;
            let mut out = Tensor::zeros(vec![rows, wide]);
            for r in 0..rows {
                out.data_mut()[r * wide..r * wide + w].copy_from_slice(a.row(r));
            }
            Ok(out)
        })
    }

    /// Reinterprets the buffer under a new shape (same element count).
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::Reshape, "reshape", |a| a.reshaped(shape.to_vec()))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(self) -> Result<Var<'t>, AutogradError> {
        self.unary(Op::SumAll, "sum_all", |a| {
            Ok(Tensor::scalar(a.data().iter().sum()))
        })
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[1e-7, 1 − 1e-7]` before the logs.
    pub fn bce_mean(self, labels: &[f64]) -> Result<Var<'t>, AutogradError> {
        let value = self.tape.with_value(self.id, |p| {
            if p.len() != labels.len() {
                return Err(AutogradError::ShapeMismatch {
                    op: "bce_mean",
                    detail: format!("{} probabilities vs {} labels", p.len(), labels.len()),
                });
            }
            if labels.is_empty() {
                return Err(AutogradError::Empty { what: "bce_mean batch" });
            }
            let mut total = 0.0;
            for (&pi, &y) in p.data().iter().zip(labels) {
                let pc = pi.clamp(BCE_CLAMP_LO, BCE_CLAMP_HI);
                total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            }
            Ok(Tensor::scalar(total / labels.len() as f64))
        })?;
        self.tape.push(
            value,
            vec![self.id],
            Op::BceMean { labels: labels.to_vec() },
            "bce_mean",
        )
    }
}

/// Scalar binary cross-entropy with the same clamp as the tape op.
pub(crate) fn bce_scalar(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_CLAMP_LO, BCE_CLAMP_HI);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn window_rows(a: &Tensor, windows: usize, op: &'static str) -> Result<usize, AutogradError> {
    if a.rank() != 2 || windows == 0 || a.rows() % windows != 0 {
        return Err(AutogradError::ShapeMismatch {
            op: "window op",
            detail: format!("{op}: {:?} does not divide into {windows} windows", a.shape()),
        });
    }
    Ok(a.rows() / windows)
}

/// Forward attention kernel: returns the context tensor and the softmax
/// weights (`(windows·heads·rows) × rows`).
fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    windows: usize,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, Tensor), AutogradError> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2 {
        return Err(AutogradError::ShapeMismatch {
            op: "attention",
            detail: format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(AutogradError::ShapeMismatch {
            op: "attention",
            detail: format!("width {d} not divisible into {heads} heads"),
        });
    }
    let rows = window_rows(q, windows, "attention")?;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Tensor::zeros(vec![windows * rows, d]);
    let mut weights = Tensor::zeros(vec![windows * heads * rows, rows]);
    let mut scores = vec![0.0; rows * rows];
    for w in 0..windows {
        for h in 0..heads {
            let base = w * rows * d + h * dk;
            // scores = scale · Q Kᵀ over this window/head slice; operands
            // stay strided inside the packed (windows·rows) × d buffers.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    dk,
                    rows,
                    scale,
                    q.data()[base..].as_ptr(),
                    d as isize,
                    1,
                    k.data()[base..].as_ptr(),
                    1,
                    d as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            if causal {
                for i in 0..rows {
                    for j in i + 1..rows {
                        scores[i * rows + j] = f64::NEG_INFINITY;
                    }
                }
            }
            let wbase = (w * heads + h) * rows;
            for i in 0..rows {
                softmax_row(
                    &scores[i * rows..(i + 1) * rows],
                    &mut weights.data_mut()[(wbase + i) * rows..(wbase + i + 1) * rows],
                );
            }
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    rows,
                    dk,
                    1.0,
                    weights.data()[wbase * rows..].as_ptr(),
                    rows as isize,
                    1,
                    v.data()[base..].as_ptr(),
                    d as isize,
                    1,
                    0.0,
                    out.data_mut()[base..].as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
        }
    }
    if !out.is_finite() || !weights.is_finite() {
        return Err(AutogradError::NonFinite { op: "attention" });
    }
    Ok((out, weights))
}

/// Backward attention kernel; `weights` are the stored forward softmax rows.
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    grad: &Tensor,
    windows: usize,
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dk = d / heads;
    let rows = q.rows() / windows;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Tensor::zeros_like(q);
    let mut dkt = Tensor::zeros_like(k);
    let mut dv = Tensor::zeros_like(v);
    let mut da = vec![0.0; rows * rows];
    let mut ds = vec![0.0; rows * rows];
    for w in 0..windows {
        for h in 0..heads {
            let base = w * rows * d + h * dk;
            let wbase = (w * heads + h) * rows;
            let a = &weights.data()[wbase * rows..(wbase + rows) * rows];
            unsafe {
                // dV = Aᵀ · G
                matrixmultiply::dgemm(
                    rows,
                    rows,
                    dk,
                    1.0,
                    a.as_ptr(),
                    1,
                    rows as isize,
                    grad.data()[base..].as_ptr(),
                    d as isize,
                    1,
                    0.0,
                    dv.data_mut()[base..].as_mut_ptr(),
                    d as isize,
                    1,
                );
                // dA = G · Vᵀ
                matrixmultiply::dgemm(
                    rows,
                    dk,
                    rows,
                    1.0,
                    grad.data()[base..].as_ptr(),
                    d as isize,
                    1,
                    v.data()[base..].as_ptr(),
                    1,
                    d as isize,
                    0.0,
                    da.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            // Softmax backward per row: dS = A ⊙ (dA − ⟨dA, A⟩).
            for i in 0..rows {
                let ar = &a[i * rows..(i + 1) * rows];
                let dar = &da[i * rows..(i + 1) * rows];
                let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                for j in 0..rows {
                    ds[i * rows + j] = ar[j] * (dar[j] - dot);
                }
            }
            unsafe {
                // dQ = scale · dS · K
                matrixmultiply::dgemm(
                    rows,
                    rows,
                    dk,
                    scale,
                    ds.as_ptr(),
                    rows as isize,
                    1,
                    k.data()[base..].as_ptr(),
                    d as isize,
                    1,
                    0.0,
                    dq.data_mut()[base..].as_mut_ptr(),
                    d as isize,
                    1,
                );
                // dK = scale · dSᵀ · Q
                matrixmultiply::dgemm(
                    rows,
                    rows,
                    dk,
                    scale,
                    ds.as_ptr(),
                    1,
                    rows as isize,
                    q.data()[base..].as_ptr(),
                    d as isize,
                    1,
                    0.0,
                    dkt.data_mut()[base..].as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
        }
    }
    (dq, dkt, dv)
}

fn backward_op(
    op: &Op,
    value: &Tensor,
    parents: &[&Tensor],
    g: &Tensor,
) -> Result<Vec<Tensor>, AutogradError> {
    let out = match op {
        Op::Leaf => unreachable!("leaves have no backward"),
        Op::MatMul => {
            let (a, b) = (parents[0], parents[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut da = Tensor::zeros_like(a);
            let mut db = Tensor::zeros_like(b);
            gemm(m, n, k, g.data(), false, b.data(), true, da.data_mut());
            gemm(k, m, n, a.data(), true, g.data(), false, db.data_mut());
            vec![da, db]
        }
        Op::Add => vec![g.clone(), g.clone()],
        Op::AddRowVec => {
            let b = parents[1];
            let w = b.len();
            let mut db = Tensor::zeros_like(b);
            for (i, &gi) in g.data().iter().enumerate() {
                db.data_mut()[i % w] += gi;
            }
            vec![g.clone(), db]
        }
        Op::Scale(c) => {
            let mut da = g.clone();
            da.data_mut().iter_mut().for_each(|x| *x *= c);
            vec![da]
        }
        Op::Relu => {
            let x = parents[0];
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data)?]
        }
        Op::Sigmoid => {
            let data = g
                .data()
                .iter()
                .zip(value.data())
                .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                .collect();
            vec![Tensor::new(value.shape().to_vec(), data)?]
        }
        Op::Tanh => {
            let data = g
                .data()
                .iter()
                .zip(value.data())
                .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                .collect();
            vec![Tensor::new(value.shape().to_vec(), data)?]
        }
        Op::MulElem => {
            let (a, b) = (parents[0], parents[1]);
            let da = g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            let db = g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect();
            vec![
                Tensor::new(a.shape().to_vec(), da)?,
                Tensor::new(b.shape().to_vec(), db)?,
            ]
        }
        Op::SoftmaxRows => {
            let y = value;
            let w = y.cols();
            let mut dx = Tensor::zeros_like(y);
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = &g.data()[r * w..(r + 1) * w];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let dst = &mut dx.data_mut()[r * w..(r + 1) * w];
                for j in 0..w {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![dx]
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (parents[0], parents[1]);
            let d = x.cols();
            let df = d as f64;
            let mut dx = Tensor::zeros_like(x);
            let mut dgamma = Tensor::zeros(vec![d]);
            let mut dbeta = Tensor::zeros(vec![d]);
            for r in 0..x.rows() {
                let row = x.row(r);
                let gr = &g.data()[r * d..(r + 1) * d];
                let (mean, var) = mean_var(row);
                let inv = 1.0 / (var + eps).sqrt();
                // dxhat, plus the two row means the normalisation couples in.
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for j in 0..d {
                    let xh = (row[j] - mean) * inv;
                    let dxh = gr[j] * gamma.data()[j];
                    dgamma.data_mut()[j] += gr[j] * xh;
                    dbeta.data_mut()[j] += gr[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                let m1 = sum_dxh / df;
                let m2 = sum_dxh_xh / df;
                let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    let xh = (row[j] - mean) * inv;
                    let dxh = gr[j] * gamma.data()[j];
                    dst[j] = inv * (dxh - m1 - xh * m2);
                }
            }
            vec![dx, dgamma, dbeta]
        }
        Op::EmbeddingLookup { indices } => {
            let table = parents[0];
            let e = table.cols();
            let mut dt = Tensor::zeros_like(table);
            for (pos, &ix) in indices.iter().enumerate() {
                let src = &g.data()[pos * e..(pos + 1) * e];
                let dst = &mut dt.data_mut()[ix * e..(ix + 1) * e];
                for j in 0..e {
                    dst[j] += src[j];
                }
            }
            vec![dt]
        }
        Op::Attention { windows, heads, weights, .. } => {
            let (q, k, v) = (parents[0], parents[1], parents[2]);
            let (dq, dk, dv) = attention_backward(q, k, v, weights, g, *windows, *heads);
            vec![dq, dk, dv]
        }
        Op::SliceCols { start, len } => {
            let x = parents[0];
            let w = x.cols();
            let mut dx = Tensor::zeros_like(x);
            for r in 0..x.rows() {
                dx.data_mut()[r * w + start..r * w + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![dx]
        }
        Op::ConcatCols { widths } => {
            let rows = value.rows();
            let total = value.cols();
            let mut grads = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for &w in widths {
                let mut dp = Tensor::zeros(vec![rows, w]);
                for r in 0..rows {
                    dp.data_mut()[r * w..(r + 1) * w]
                        .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                }
                grads.push(dp);
                offset += w;
            }
            grads
        }
        Op::SelectRows { indices } => {
            let x = parents[0];
            let w = x.cols();
            let mut dx = Tensor::zeros_like(x);
            for (pos, &ix) in indices.iter().enumerate() {
                let src = &g.data()[pos * w..(pos + 1) * w];
                let dst = &mut dx.data_mut()[ix * w..(ix + 1) * w];
                for j in 0..w {
                    dst[j] += src[j];
                }
            }
            vec![dx]
        }
        Op::WindowMeanRows { windows } => {
            let x = parents[0];
            let d = x.cols();
            let rows = x.rows() / windows;
            let inv = 1.0 / rows as f64;
            let mut dx = Tensor::zeros_like(x);
            for wdx in 0..*windows {
                let gr = &g.data()[wdx * d..(wdx + 1) * d];
                for t in 0..rows {
                    let dst = &mut dx.data_mut()[(wdx * rows + t) * d..(wdx * rows + t + 1) * d];
                    for j in 0..d {
                        dst[j] = gr[j] * inv;
                    }
                }
            }
            vec![dx]
        }
        Op::WindowWeightedRows { windows } => {
            let (x, wts) = (parents[0], parents[1]);
            let d = x.cols();
            let rows = x.rows() / windows;
            let per_feature = wts.rank() == 2;
            let mut dx = Tensor::zeros_like(x);
            let mut dw = Tensor::zeros_like(wts);
            for wdx in 0..*windows {
                let gr = &g.data()[wdx * d..(wdx + 1) * d];
                for t in 0..rows {
                    let xr = x.row(wdx * rows + t);
                    let dst = &mut dx.data_mut()[(wdx * rows + t) * d..(wdx * rows + t + 1) * d];
                    for j in 0..d {
                        let wt = if per_feature { wts.data()[t * d + j] } else { wts.data()[t] };
                        dst[j] = gr[j] * wt;
                        if per_feature {
                            dw.data_mut()[t * d + j] += gr[j] * xr[j];
                        } else {
                            dw.data_mut()[t] += gr[j] * xr[j];
                        }
                    }
                }
            }
            vec![dx, dw]
        }
        Op::TileAddRows { reps } => {
            let p = parents[1];
            let (rows, d) = (p.rows(), p.cols());
            let mut dp = Tensor::zeros_like(p);
            for r in 0..reps * rows {
                let src = &g.data()[r * d..(r + 1) * d];
                let dst = &mut dp.data_mut()[(r % rows) * d..(r % rows + 1) * d];
                for j in 0..d {
                    dst[j] += src[j];
                }
            }
            vec![g.clone(), dp]
        }
        Op::AppendRowPerWindow { windows } => {
            let (x, row) = (parents[0], parents[1]);
            let d = x.cols();
            let rows = x.rows() / windows;
            let mut dx = Tensor::zeros_like(x);
            let mut drow = Tensor::zeros_like(row);
            for wdx in 0..*windows {
                let base = wdx * (rows + 1) * d;
                dx.data_mut()[wdx * rows * d..(wdx + 1) * rows * d]
                    .copy_from_slice(&g.data()[base..base + rows * d]);
                let appended = &g.data()[base + rows * d..base + (rows + 1) * d];
                for j in 0..d {
                    drow.data_mut()[j] += appended[j];
                }
            }
            vec![dx, drow]
        }
        Op::PadCols => {
            let x = parents[0];
            let w = x.cols();
            let wide = value.cols();
            let mut dx = Tensor::zeros_like(x);
            for r in 0..x.rows() {
                dx.data_mut()[r * w..(r + 1) * w]
                    .copy_from_slice(&g.data()[r * wide..r * wide + w]);
            }
            vec![dx]
        }
        Op::Reshape => {
            let x = parents[0];
            vec![g.reshaped(x.shape().to_vec())?]
        }
        Op::SumAll => {
            let x = parents[0];
            let gv = g.item();
            vec![Tensor::new(x.shape().to_vec(), vec![gv; x.len()])?]
        }
        Op::BceMean { labels } => {
            let p = parents[0];
            let n = labels.len() as f64;
            let gv = g.item();
            let data = p
                .data()
                .iter()
                .zip(labels)
                .map(|(&pi, &y)| {
                    if pi <= BCE_CLAMP_LO || pi >= BCE_CLAMP_HI {
                        0.0
                    } else {
                        gv * (pi - y) / (pi * (1.0 - pi) * n)
                    }
                })
                .collect();
            vec![Tensor::new(p.shape().to_vec(), data)?]
        }
    };
    Ok(out)
}
