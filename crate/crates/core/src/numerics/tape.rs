//! Reverse-mode gradient tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the adjoint. Nodes are created in evaluation order, so a reverse
//! sweep over the node list is a valid topological order for `backward`.

use std::collections::HashMap;
use std::fmt;

use super::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into, sigmoid, softmax};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A primitive defined outside this module: the caller computes the forward
/// value and supplies the adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor)
        -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    // gate activations i, f, g, o laid out contiguously
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Embedding { table: Var, ids: Vec<usize> },
    ConvMaxPool {
        x: Var,
        filters: Var,
        bias: Var,
        segments: Vec<(usize, usize)>,
        width: usize,
        argmax: Vec<Option<usize>>,
    },
    LstmCell { x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var, step: LstmStep },
    LstmScan {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        mask: Vec<bool>,
        reverse: bool,
        steps: Vec<Option<LstmStep>>,
    },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Scale { x: Var, factor: f64 },
    ScaleBy { x: Var, s: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LogSumExp { x: Var },
    Dropout { x: Var, mask: Tensor },
    MaskedSum { x: Var, mask: Vec<bool> },
    MaskedMean { x: Var, mask: Vec<bool> },
    Sum { x: Var },
    Gather { x: Var, index: Vec<usize> },
    Reshape { x: Var },
    SliceRows { x: Var, start: usize },
    Row { x: Var, row: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Embedding { .. } => "embedding",
            Op::ConvMaxPool { .. } => "conv_maxpool",
            Op::LstmCell { .. } => "lstm_cell",
            Op::LstmScan { .. } => "lstm_scan",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Dropout { .. } => "dropout",
            Op::MaskedSum { .. } => "masked_sum",
            Op::MaskedMean { .. } => "masked_mean",
            Op::Sum { .. } => "sum",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::Row { .. } => "row",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    // empty for parameter leaves; their value lives in the store
    value: Tensor,
    op: Op,
}

/// Record of one forward evaluation.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Tape<'p> {
    /// A tape without parameters; every leaf is a constant.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.store.expect("parameter leaf without store").get(id).value,
            _ => &node.value,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape was created without a parameter store");
        let v = self.push(Tensor::zeros(&[0]), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Affine map `x·wᵀ + b` for `x` of shape `(n, in)` or `(in,)` and `w` of
    /// shape `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.ndim() != 2 || xv.cols() != wv.cols() {
            return Err(Error::shape(
                "linear",
                format!("input {:?} against weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (n, k) = rows_cols(xv);
        let m = wv.rows();
        let mut out = vec![0.0; n * m];
        matmul_bt_into(xv.data(), wv.data(), &mut out, n, k, m);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for output width {m}", bv.shape()),
                ));
            }
            for row in out.chunks_mut(m) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let shape = if xv.ndim() <= 1 { vec![m] } else { vec![n, m] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| Error::shape("matmul", "inner dimensions differ"))?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// Rows of `table` selected by `ids`, shape `(ids.len(), dim)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::shape("embedding", "table must be a matrix"));
        }
        let dim = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::shape(
                    "embedding",
                    format!("id {id} out of range for {} rows", tv.rows()),
                ));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(&[ids.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// One-dimensional convolution over time followed by max-pooling, applied
    /// independently to each `(start, len)` segment of the rows of `x`.
    ///
    /// `filters` is `(F, width·C)` with window position major; output is
    /// `(segments, F)`. A segment shorter than `width` yields a zero row.
    pub fn conv_maxpool(
        &mut self,
        x: Var,
        filters: Var,
        bias: Var,
        segments: &[(usize, usize)],
        width: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let fv = self.value(filters);
        let bv = self.value(bias);
        let c = xv.cols();
        let nf = fv.rows();
        if width == 0 || fv.ndim() != 2 || fv.cols() != width * c || bv.len() != nf {
            return Err(Error::shape(
                "conv_maxpool",
                format!(
                    "input {:?}, filters {:?}, bias {:?}, width {width}",
                    xv.shape(),
                    fv.shape(),
                    bv.shape()
                ),
            ));
        }
        let n_rows = if xv.ndim() == 2 { xv.rows() } else { 0 };
        let mut out = vec![0.0; segments.len() * nf];
        let mut argmax = vec![None; segments.len() * nf];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if start + len > n_rows {
                return Err(Error::shape("conv_maxpool", "segment exceeds input rows"));
            }
            if len < width {
                continue;
            }
            let span = width * c;
            for f in 0..nf {
                let filt = &fv.data()[f * span..(f + 1) * span];
                let mut best = f64::NEG_INFINITY;
                let mut best_w = 0;
                for w in 0..=(len - width) {
                    let window = &xv.data()[(start + w) * c..(start + w) * c + span];
                    let r = dot(filt, window);
                    if r > best {
                        best = r;
                        best_w = w;
                    }
                }
                out[s * nf + f] = best + bv.data()[f];
                argmax[s * nf + f] = Some(best_w);
            }
        }
        let value = Tensor::new(&[segments.len(), nf], out)?;
        Ok(self.push(
            value,
            Op::ConvMaxPool {
                x,
                filters,
                bias,
                segments: segments.to_vec(),
                width,
                argmax,
            },
        ))
    }

    /// One LSTM step. Gate rows of `w_ih (4H×D)`, `w_hh (4H×H)` and `b (4H)`
    /// are ordered input, forget, candidate, output. Returns a `(2, H)` node
    /// holding the new hidden state (row 0) and cell state (row 1).
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<Var> {
        let hidden = self.value(h).len();
        check_lstm_shapes(
            "lstm_cell",
            self.value(x).len(),
            hidden,
            self.value(w_ih),
            self.value(w_hh),
            self.value(b),
        )?;
        if self.value(c).len() != hidden {
            return Err(Error::shape("lstm_cell", "cell and hidden state widths differ"));
        }
        let step = lstm_forward(
            self.value(x).data(),
            self.value(h).data(),
            self.value(c).data(),
            self.value(w_ih),
            self.value(w_hh),
            self.value(b),
        );
        let mut out = Vec::with_capacity(2 * hidden);
        out.extend(step.new_h());
        out.extend(step.new_c());
        let value = Tensor::new(&[2, hidden], out)?;
        Ok(self.push(
            value,
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                step,
            },
        ))
    }

    /// Runs an LSTM over the rows of `x (T×D)` from a zero state, left to
    /// right or (with `reverse`) right to left. Positions whose mask entry is
    /// false carry the state through unchanged and output zeros.
    pub fn lstm_scan(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        mask: &[bool],
        reverse: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (t_len, d) = (xv.rows(), xv.cols());
        let wh = self.value(w_hh);
        let hidden = wh.cols();
        check_lstm_shapes("lstm_scan", d, hidden, self.value(w_ih), wh, self.value(b))?;
        if xv.ndim() != 2 || mask.len() != t_len {
            return Err(Error::shape(
                "lstm_scan",
                format!("input {:?} with mask of length {}", xv.shape(), mask.len()),
            ));
        }
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut out = vec![0.0; t_len * hidden];
        let mut steps: Vec<Option<LstmStep>> = vec![None; t_len];
        for k in 0..t_len {
            let t = if reverse { t_len - 1 - k } else { k };
            if !mask[t] {
                continue;
            }
            let step = lstm_forward(
                xv.row(t),
                &h,
                &c,
                self.value(w_ih),
                self.value(w_hh),
                self.value(b),
            );
            h = step.new_h().collect();
            c = step.new_c().collect();
            out[t * hidden..(t + 1) * hidden].copy_from_slice(&h);
            steps[t] = Some(step);
        }
        let value = Tensor::new(&[t_len, hidden], out)?;
        Ok(self.push(
            value,
            Op::LstmScan {
                x,
                w_ih,
                w_hh,
                b,
                mask: mask.to_vec(),
                reverse,
                steps,
            },
        ))
    }

    /// Concatenates along the trailing axis. Vectors join into a vector;
    /// matrices must agree on row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let first = self.value(parts[0]);
        let vector = first.ndim() <= 1;
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if (v.ndim() <= 1) != vector || v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("part {:?} does not match {:?}", v.shape(), first.shape()),
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if vector { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stacks rows; vectors count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        }
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} does not match {cols}", v.cols()),
                ));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(bv) {
            *x *= y;
        }
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.ndim() != 1 || bv.len() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let bias = bv.data().to_vec();
        let mut value = xv.clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.push(value, Op::AddBias { x, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "scale must hold one value"));
        }
        let k = self.value(s).item();
        let value = self.value(x).map(|v| v * k);
        Ok(self.push(value, Op::ScaleBy { x, s }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            out.extend(softmax(&xv.data()[r * c..(r + 1) * c]));
        }
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(value, Op::Softmax { x })
    }

    /// Log-sum-exp over the trailing axis: `(n, k) → (n,)`, `(k,) → ()`.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out: Vec<f64> = (0..xv.rows())
            .map(|r| super::tensor::log_sum_exp(&xv.data()[r * c..(r + 1) * c]))
            .collect();
        let value = if xv.ndim() <= 1 {
            Tensor::scalar(out[0])
        } else {
            Tensor::vector(out)
        };
        self.push(value, Op::LogSumExp { x })
    }

    /// Elementwise product with a caller-supplied (already scaled) mask.
    pub fn dropout(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::shape(
                "dropout",
                format!("mask {:?} for input {:?}", mask.shape(), xv.shape()),
            ));
        }
        let mut value = xv.clone();
        for (v, m) in value.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    fn masked_total(&self, op: &'static str, x: Var, mask: &[bool]) -> Result<f64> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape(
                op,
                format!("mask of length {} for input {:?}", mask.len(), xv.shape()),
            ));
        }
        Ok(xv
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum())
    }

    /// Sum of the elements selected by `mask`.
    pub fn masked_sum(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let total = self.masked_total("masked_sum", x, mask)?;
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedSum {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Mean of the elements selected by `mask`; zero when nothing is selected.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let total = self.masked_total("masked_mean", x, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(mean),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Picks `x[i, index[i]]` from each row, giving a vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != xv.rows() || index.iter().any(|&j| j >= xv.cols()) {
            return Err(Error::shape(
                "gather",
                format!("{} indices for input {:?}", index.len(), xv.shape()),
            ));
        }
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &j)| xv.at(i, j)).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || start > end || end > xv.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {:?}", xv.shape()),
            ));
        }
        let c = xv.cols();
        let value = Tensor::new(&[end - start, c], xv.data()[start * c..end * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Row `row` of a matrix as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || row >= xv.rows() {
            return Err(Error::shape("row", format!("row {row} of {:?}", xv.shape())));
        }
        let value = Tensor::vector(xv.row(row).to_vec());
        Ok(self.push(value, Op::Row { x, row }))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Propagates `output_gradient` (ones for a scalar output when `None`)
    /// back through the tape.
    pub fn backward(&self, output: Var, output_gradient: Option<&Tensor>) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::shape("backward", "output does not belong to this tape"));
        }
        let out_value = self.value(output);
        let seed = match output_gradient {
            Some(g) => {
                if g.shape() != out_value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "output gradient {:?} for output {:?}",
                            g.shape(),
                            out_value.shape()
                        ),
                    ));
                }
                g.clone()
            }
            None => {
                if out_value.len() != 1 {
                    return Err(Error::shape(
                        "backward",
                        "non-scalar output needs an explicit output gradient",
                    ));
                }
                Tensor::full(out_value.shape(), 1.0)
            }
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Runs `backward` and adds the parameter gradients into `store`.
    pub fn backward_into(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(output, None)?;
        grads.accumulate_into(store);
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => t.add_assign(&delta),
                None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k) = rows_cols(xv);
                let m = wv.rows();
                let mut dx = vec![0.0; n * k];
                matmul_into(g.data(), wv.data(), &mut dx, n, m, k);
                let mut dw = vec![0.0; m * k];
                matmul_at_into(g.data(), xv.data(), &mut dw, n, m, k);
                acc(*x, Tensor::new(xv.shape(), dx)?, grads);
                acc(*w, Tensor::new(wv.shape(), dw)?, grads);
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape(), db)?, grads);
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = rows_cols(av);
                let n = bv.cols();
                let mut da = vec![0.0; m * k];
                matmul_bt_into(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_into(av.data(), g.data(), &mut db, m, k, n);
                acc(*a, Tensor::new(av.shape(), da)?, grads);
                acc(*b, Tensor::new(bv.shape(), db)?, grads);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let dim = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g.data()[i * dim..(i + 1) * dim];
                    for (d, s) in dt.row_mut(id).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*table, dt, grads);
            }
            Op::ConvMaxPool {
                x,
                filters,
                bias,
                segments,
                width,
                argmax,
            } => {
                let (xv, fv) = (self.value(*x), self.value(*filters));
                let c = xv.cols();
                let nf = fv.rows();
                let span = width * c;
                let mut dx = Tensor::zeros(xv.shape());
                let mut df = Tensor::zeros(fv.shape());
                let mut db = Tensor::zeros(self.value(*bias).shape());
                for (s, &(start, _)) in segments.iter().enumerate() {
                    for f in 0..nf {
                        let Some(w) = argmax[s * nf + f] else { continue };
                        let gv = g.data()[s * nf + f];
                        if gv == 0.0 {
                            continue;
                        }
                        db.data_mut()[f] += gv;
                        let base = (start + w) * c;
                        let window = &xv.data()[base..base + span];
                        let filt = &fv.data()[f * span..(f + 1) * span];
                        for (d, xw) in df.data_mut()[f * span..(f + 1) * span].iter_mut().zip(window) {
                            *d += gv * xw;
                        }
                        for (d, fw) in dx.data_mut()[base..base + span].iter_mut().zip(filt) {
                            *d += gv * fw;
                        }
                    }
                }
                acc(*x, dx, grads);
                acc(*filters, df, grads);
                acc(*bias, db, grads);
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                step,
            } => {
                let hidden = step.c_prev.len();
                let (wi, wh) = (self.value(*w_ih), self.value(*w_hh));
                let mut dw_ih = Tensor::zeros(wi.shape());
                let mut dw_hh = Tensor::zeros(wh.shape());
                let mut db = Tensor::zeros(self.value(*b).shape());
                let mut dx = vec![0.0; step.x.len()];
                let (dh_prev, dc_prev) = lstm_backward(
                    step,
                    &g.data()[..hidden],
                    &g.data()[hidden..],
                    wi,
                    wh,
                    &mut dw_ih,
                    &mut dw_hh,
                    &mut db,
                    &mut dx,
                );
                acc(*x, Tensor::new(self.value(*x).shape(), dx)?, grads);
                acc(*h, Tensor::new(self.value(*h).shape(), dh_prev)?, grads);
                acc(*c, Tensor::new(self.value(*c).shape(), dc_prev)?, grads);
                acc(*w_ih, dw_ih, grads);
                acc(*w_hh, dw_hh, grads);
                acc(*b, db, grads);
            }
            Op::LstmScan {
                x,
                w_ih,
                w_hh,
                b,
                mask,
                reverse,
                steps,
            } => {
                let xv = self.value(*x);
                let (wi, wh) = (self.value(*w_ih), self.value(*w_hh));
                let hidden = wh.cols();
                let d = xv.cols();
                let t_len = mask.len();
                let mut dw_ih = Tensor::zeros(wi.shape());
                let mut dw_hh = Tensor::zeros(wh.shape());
                let mut db = Tensor::zeros(self.value(*b).shape());
                let mut dx = Tensor::zeros(xv.shape());
                let mut dh_next = vec![0.0; hidden];
                let mut dc_next = vec![0.0; hidden];
                // walk the scan in reverse processing order
                for k in (0..t_len).rev() {
                    let t = if *reverse { t_len - 1 - k } else { k };
                    let Some(step) = &steps[t] else { continue };
                    let mut dh = g.row(t).to_vec();
                    for (a, bb) in dh.iter_mut().zip(&dh_next) {
                        *a += bb;
                    }
                    let mut dxt = vec![0.0; d];
                    let (dh_prev, dc_prev) = lstm_backward(
                        step,
                        &dh,
                        &dc_next,
                        wi,
                        wh,
                        &mut dw_ih,
                        &mut dw_hh,
                        &mut db,
                        &mut dxt,
                    );
                    dx.row_mut(t).copy_from_slice(&dxt);
                    dh_next = dh_prev;
                    dc_next = dc_prev;
                }
                acc(*x, dx, grads);
                acc(*w_ih, dw_ih, grads);
                acc(*w_hh, dw_hh, grads);
                acc(*b, db, grads);
            }
            Op::ConcatCols { parts } => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut dp = Vec::with_capacity(pv.len());
                    for r in 0..rows {
                        dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, Tensor::new(pv.shape(), dp)?, grads);
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    acc(p, Tensor::new(pv.shape(), g.data()[offset..offset + n].to_vec())?, grads);
                    offset += n;
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(av.shape(), da)?, grads);
                acc(*b, Tensor::new(bv.shape(), db)?, grads);
            }
            Op::AddBias { x, b } => {
                let bv = self.value(*b);
                let m = bv.len();
                let mut db = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, g.clone(), grads);
                acc(*b, Tensor::new(bv.shape(), db)?, grads);
            }
            Op::Scale { x, factor } => acc(*x, g.map(|v| v * factor), grads),
            Op::ScaleBy { x, s } => {
                let k = self.value(*s).item();
                let ds = dot(g.data(), self.value(*x).data());
                acc(*x, g.map(|v| v * k), grads);
                acc(*s, Tensor::full(self.value(*s).shape(), ds), grads);
            }
            Op::Tanh { x } => {
                let d: Vec<f64> = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                acc(*x, Tensor::new(out.shape(), d)?, grads);
            }
            Op::Sigmoid { x } => {
                let d: Vec<f64> = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                acc(*x, Tensor::new(out.shape(), d)?, grads);
            }
            Op::Softmax { x } => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let inner = dot(y, gr);
                    for j in 0..c {
                        d[r * c + j] = y[j] * (gr[j] - inner);
                    }
                }
                acc(*x, Tensor::new(out.shape(), d)?, grads);
            }
            Op::LogSumExp { x } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let lse = out.data()[r];
                    let gv = g.data()[r];
                    for j in 0..c {
                        d[r * c + j] = gv * (xv.data()[r * c + j] - lse).exp();
                    }
                }
                acc(*x, Tensor::new(xv.shape(), d)?, grads);
            }
            Op::Dropout { x, mask } => {
                let d: Vec<f64> = g.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
                acc(*x, Tensor::new(mask.shape(), d)?, grads);
            }
            Op::MaskedSum { x, mask } | Op::MaskedMean { x, mask } => {
                let count = mask.iter().filter(|&&m| m).count();
                let scale = match node.op {
                    Op::MaskedMean { .. } if count > 0 => g.item() / count as f64,
                    Op::MaskedMean { .. } => 0.0,
                    _ => g.item(),
                };
                let d: Vec<f64> = mask.iter().map(|&m| if m { scale } else { 0.0 }).collect();
                acc(*x, Tensor::new(self.value(*x).shape(), d)?, grads);
            }
            Op::Sum { x } => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.item()), grads);
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                for (i, &j) in index.iter().enumerate() {
                    d.set(i, j, g.data()[i]);
                }
                acc(*x, d, grads);
            }
            Op::Reshape { x } => {
                acc(*x, g.clone().reshape(self.value(*x).shape())?, grads);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, d, grads);
            }
            Op::Row { x, row } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.row_mut(*row).copy_from_slice(g.data());
                acc(*x, d, grads);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let deltas = op.backward(&values, out, g)?;
                if deltas.len() != inputs.len() {
                    return Err(Error::shape(op.name(), "adjoint returned wrong arity"));
                }
                for (&v, d) in inputs.iter().zip(deltas) {
                    if d.shape() != self.value(v).shape() {
                        return Err(Error::shape(op.name(), "adjoint shape mismatch"));
                    }
                    acc(v, d, grads);
                }
            }
        }
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("gradient of {}", node.op.name())));
        }
        Ok(())
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient for a node; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.get_mut(id).gradient.add_assign(g);
            }
        }
    }
}

fn check_lstm_shapes(
    op: &'static str,
    input: usize,
    hidden: usize,
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &Tensor,
) -> Result<()> {
    let ok = w_ih.shape() == [4 * hidden, input]
        && w_hh.shape() == [4 * hidden, hidden]
        && b.len() == 4 * hidden;
    if !ok {
        return Err(Error::shape(
            op,
            format!(
                "input {input}, hidden {hidden}, w_ih {:?}, w_hh {:?}, b {:?}",
                w_ih.shape(),
                w_hh.shape(),
                b.shape()
            ),
        ));
    }
    Ok(())
}

impl LstmStep {
    fn hidden(&self) -> usize {
        self.c_prev.len()
    }

    fn new_c(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.hidden();
        (0..h).map(move |j| {
            let (i, f, g) = (self.gates[j], self.gates[h + j], self.gates[2 * h + j]);
            f * self.c_prev[j] + i * g
        })
    }

    fn new_h(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.hidden();
        (0..h).map(move |j| self.gates[3 * h + j] * self.tanh_c[j])
    }
}

fn lstm_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &Tensor,
) -> LstmStep {
    let hidden = h_prev.len();
    let mut z = b.data().to_vec();
    matmul_bt_into(x, w_ih.data(), &mut z, 1, x.len(), 4 * hidden);
    matmul_bt_into(h_prev, w_hh.data(), &mut z, 1, hidden, 4 * hidden);
    let mut gates = z;
    for (k, v) in gates.iter_mut().enumerate() {
        *v = if k / hidden == 2 { v.tanh() } else { sigmoid(*v) };
    }
    let tanh_c = (0..hidden)
        .map(|j| (gates[hidden + j] * c_prev[j] + gates[j] * gates[2 * hidden + j]).tanh())
        .collect();
    LstmStep {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
    }
}

/// Backpropagates through one step given gradients for its new hidden and
/// cell states; returns gradients for the previous hidden and cell states.
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    step: &LstmStep,
    dh: &[f64],
    dc: &[f64],
    w_ih: &Tensor,
    w_hh: &Tensor,
    dw_ih: &mut Tensor,
    dw_hh: &mut Tensor,
    db: &mut Tensor,
    dx: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let hidden = step.hidden();
    let g = &step.gates;
    let mut dz = vec![0.0; 4 * hidden];
    let mut dc_prev = vec![0.0; hidden];
    for j in 0..hidden {
        let (i, f, cand, o) = (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
        let tc = step.tanh_c[j];
        let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dz[j] = dct * cand * i * (1.0 - i);
        dz[hidden + j] = dct * step.c_prev[j] * f * (1.0 - f);
        dz[2 * hidden + j] = dct * i * (1.0 - cand * cand);
        dz[3 * hidden + j] = dh[j] * tc * o * (1.0 - o);
        dc_prev[j] = dct * f;
    }
    for (d, v) in db.data_mut().iter_mut().zip(&dz) {
        *d += v;
    }
    matmul_at_into(&dz, &step.x, dw_ih.data_mut(), 1, 4 * hidden, step.x.len());
    matmul_at_into(&dz, &step.h_prev, dw_hh.data_mut(), 1, 4 * hidden, hidden);
    matmul_into(&dz, w_ih.data(), dx, 1, 4 * hidden, step.x.len());
    let mut dh_prev = vec![0.0; hidden];
    matmul_into(&dz, w_hh.data(), &mut dh_prev, 1, 4 * hidden, hidden);
    (dh_prev, dc_prev)
}
