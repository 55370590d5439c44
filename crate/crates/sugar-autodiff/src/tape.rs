use ndarray::{concatenate, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};

use crate::error::{AutodiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    /// x: [..., n] plus a bias vector [n] broadcast over leading axes.
    AddBias(usize, usize),
    Matmul(usize, usize),
    BatchMatmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Relu(usize),
    /// Softmax along the last axis.
    Softmax(usize),
    /// Per-row mean/variance normalization along the last axis with affine params.
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// Rows scaled to unit L2 norm; rows with norm below `eps` map to e_1.
    L2NormalizeRows {
        input: usize,
        eps: f64,
    },
    MeanAxis(usize, usize),
    Mean(usize),
    Sum(usize),
    /// Mean token-level cross entropy of row logits against integer targets.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    /// Multiple-positive NCE over a similarity matrix: for each row i,
    /// -log( sum_{n in pos(i)} exp(l_in) / sum_n exp(l_in) ), averaged over rows.
    MilNce {
        logits: usize,
        pos_mask: Array2<f64>,
    },
    /// Temporal depthwise convolution: input [T, V, F], kernel [F, K], same padding.
    DepthwiseConv1d {
        input: usize,
        kernel: usize,
    },
    /// Row gather from an embedding table [P, d].
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

/// Append-only computation tape. Node ids are topologically ordered by
/// construction, so one reverse sweep implements backpropagation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_view(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    debug_assert!(a.is_standard_layout());
    let n = *a.shape().last().expect("rows_view on 0-d array");
    let rows = a.len() / n;
    a.view()
        .into_shape_with_order((rows, n))
        .expect("standard layout reshape")
}

fn softmax_rows(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut y = x.to_owned();
    {
        let n = *x.shape().last().unwrap();
        let rows = x.len() / n;
        let mut flat = y
            .view_mut()
            .into_shape_with_order((rows, n))
            .expect("standard layout reshape");
        for mut row in flat.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    y
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &ArrayD<f64> {
        &self.nodes[var.id].value
    }

    /// Value of a scalar ([1]-shaped) node.
    pub fn scalar_value(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.len(), 1);
        v[[0]]
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        let value = value.as_standard_layout().to_owned();
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        let value = value.as_standard_layout().to_owned();
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array1::from_elem(1, value).into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::Add(a.id, b.id), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "sub: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::Sub(a.id, b.id), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::Mul(a.id, b.id), ng))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.needs(a.id);
        self.push(v, Op::ScalarMul(a.id, c), ng)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.value(x).shape().last().ok_or_else(|| {
            AutodiffError::ShapeMismatch("add_bias: 0-d input".into())
        })?;
        if self.value(bias).shape() != [n] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "add_bias: input last axis {} vs bias {:?}",
                n,
                self.value(bias).shape()
            )));
        }
        let mut v = self.value(x).to_owned();
        {
            let b = self.value(bias);
            let rows = v.len() / n;
            let mut flat = v
                .view_mut()
                .into_shape_with_order((rows, n))
                .expect("standard layout reshape");
            for mut row in flat.rows_mut() {
                for (r, bv) in row.iter_mut().zip(b.iter()) {
                    *r += bv;
                }
            }
        }
        let ng = self.needs(x.id) || self.needs(bias.id);
        Ok(self.push(v, Op::AddBias(x.id, bias.id), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        let v = a2.dot(&b2).into_dyn();
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::Matmul(a.id, b.id), ng))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 3
            || vb.ndim() != 3
            || va.shape()[0] != vb.shape()[0]
            || va.shape()[2] != vb.shape()[1]
        {
            return Err(AutodiffError::ShapeMismatch(format!(
                "batch_matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (bs, m, _k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = vb.shape()[2];
        let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = va.index_axis(Axis(0), i);
            let bi = vb.index_axis(Axis(0), i);
            let a2 = ai.into_dimensionality::<Ix2>().unwrap();
            let b2 = bi.into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&a2.dot(&b2));
        }
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(out, Op::BatchMatmul(a.id, b.id), ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        if axes.len() != self.value(a).ndim() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "permute: axes {:?} for ndim {}",
                axes,
                self.value(a).ndim()
            )));
        }
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(a.id);
        Ok(self.push(v, Op::Permute(a.id, axes.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let total: usize = shape.iter().product();
        if total != self.value(a).len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "reshape: {:?} -> {:?}",
                self.value(a).shape(),
                shape
            )));
        }
        let v = self
            .value(a)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape")
            .to_owned();
        let ng = self.needs(a.id);
        Ok(self.push(v, Op::Reshape(a.id), ng))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidOp("concat of zero parts".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(axis), &views)
            .map_err(|e| AutodiffError::ShapeMismatch(format!("concat: {e}")))?
            .as_standard_layout()
            .to_owned();
        let ng = parts.iter().any(|p| self.needs(p.id));
        Ok(self.push(
            v,
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.id).collect(),
            },
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "slice: axis {axis} range {start}..{} of {:?}",
                start + len,
                shape
            )));
        }
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(a.id);
        Ok(self.push(
            v,
            Op::Slice {
                input: a.id,
                axis,
                start,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a.id);
        self.push(v, Op::Relu(a.id), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() == 0 {
            return Err(AutodiffError::ShapeMismatch("softmax on 0-d".into()));
        }
        let v = softmax_rows(self.value(a));
        let ng = self.needs(a.id);
        Ok(self.push(v, Op::Softmax(a.id), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.value(x).shape().last().ok_or_else(|| {
            AutodiffError::ShapeMismatch("layer_norm: 0-d input".into())
        })?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "layer_norm: gamma {:?} beta {:?} for last axis {}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                n
            )));
        }
        let mut v = self.value(x).to_owned();
        {
            let gamma_v = self.value(gamma);
            let beta_v = self.value(beta);
            let rows = v.len() / n;
            let mut flat = v
                .view_mut()
                .into_shape_with_order((rows, n))
                .expect("standard layout reshape");
            for mut row in flat.rows_mut() {
                let mu = row.mean().unwrap();
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (j, r) in row.iter_mut().enumerate() {
                    *r = gamma_v[[j]] * ((*r - mu) * inv) + beta_v[[j]];
                }
            }
        }
        let ng = self.needs(x.id) || self.needs(gamma.id) || self.needs(beta.id);
        Ok(self.push(
            v,
            Op::LayerNorm {
                input: x.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            ng,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = *self.value(x).shape().last().ok_or_else(|| {
            AutodiffError::ShapeMismatch("l2_normalize: 0-d input".into())
        })?;
        let mut v = self.value(x).to_owned();
        {
            let rows = v.len() / n;
            let mut flat = v
                .view_mut()
                .into_shape_with_order((rows, n))
                .expect("standard layout reshape");
            for mut row in flat.rows_mut() {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < eps {
                    row.fill(0.0);
                    row[0] = 1.0;
                } else {
                    row.mapv_inplace(|x| x / norm);
                }
            }
        }
        let ng = self.needs(x.id);
        Ok(self.push(v, Op::L2NormalizeRows { input: x.id, eps }, ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(a).ndim() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "mean_axis: axis {axis} of {:?}",
                self.value(a).shape()
            )));
        }
        let v = self
            .value(a)
            .mean_axis(Axis(axis))
            .ok_or_else(|| AutodiffError::InvalidOp("mean over empty axis".into()))?
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(a.id);
        Ok(self.push(v, Op::MeanAxis(a.id, axis), ng))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().unwrap_or(0.0);
        let ng = self.needs(a.id);
        self.push(Array1::from_elem(1, m).into_dyn(), Op::Mean(a.id), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a.id);
        self.push(Array1::from_elem(1, s).into_dyn(), Op::Sum(a.id), ng)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.shape()[0] != targets.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cross_entropy: logits {:?} for {} targets",
                v.shape(),
                targets.len()
            )));
        }
        let classes = v.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(AutodiffError::InvalidOp(format!(
                "cross_entropy: target {t} out of {classes} classes"
            )));
        }
        let rows = rows_view(v);
        let mut total = 0.0;
        for (row, &t) in rows.rows().into_iter().zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / targets.len() as f64;
        let ng = self.needs(logits.id);
        Ok(self.push(
            Array1::from_elem(1, loss).into_dyn(),
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// `pos_mask[i][n]` is 1.0 where text n is a positive for row i. Every row
    /// must contain at least one positive.
    pub fn mil_nce(&mut self, logits: Var, pos_mask: Array2<f64>) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.shape() != pos_mask.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "mil_nce: logits {:?} vs mask {:?}",
                v.shape(),
                pos_mask.shape()
            )));
        }
        if pos_mask
            .rows()
            .into_iter()
            .any(|r| r.iter().all(|&m| m == 0.0))
        {
            return Err(AutodiffError::InvalidOp(
                "mil_nce: a row has no positives".into(),
            ));
        }
        let rows = rows_view(v);
        let b = rows.nrows();
        let mut total = 0.0;
        for (row, mask) in rows.rows().into_iter().zip(pos_mask.rows()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse_all = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let pos_sum: f64 = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m != 0.0)
                .map(|(x, _)| (x - max).exp())
                .sum();
            let lse_pos = max + pos_sum.ln();
            total += lse_all - lse_pos;
        }
        let loss = total / b as f64;
        let ng = self.needs(logits.id);
        Ok(self.push(
            Array1::from_elem(1, loss).into_dyn(),
            Op::MilNce {
                logits: logits.id,
                pos_mask,
            },
            ng,
        ))
    }

    /// Depthwise temporal convolution with same padding: input [T, V, F],
    /// kernel [F, K] with K odd.
    pub fn depthwise_conv1d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        if x.ndim() != 3 || k.ndim() != 2 || x.shape()[2] != k.shape()[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "depthwise_conv1d: input {:?} kernel {:?}",
                x.shape(),
                k.shape()
            )));
        }
        let (t_len, v_len, f_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let width = k.shape()[1];
        if width % 2 == 0 {
            return Err(AutodiffError::InvalidOp(
                "depthwise_conv1d: kernel width must be odd".into(),
            ));
        }
        let half = width / 2;
        let mut out = ArrayD::zeros(IxDyn(&[t_len, v_len, f_len]));
        {
            let xs = x.as_slice().expect("standard layout");
            let ks = k.as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            let frame = v_len * f_len;
            for t in 0..t_len {
                for j in 0..width {
                    let src = t as isize + j as isize - half as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let x_base = src as usize * frame;
                    let o_base = t * frame;
                    for v in 0..v_len {
                        let xrow = &xs[x_base + v * f_len..x_base + (v + 1) * f_len];
                        let orow = &mut os[o_base + v * f_len..o_base + (v + 1) * f_len];
                        for f in 0..f_len {
                            orow[f] += ks[f * width + j] * xrow[f];
                        }
                    }
                }
            }
        }
        let ng = self.needs(input.id) || self.needs(kernel.id);
        Ok(self.push(
            out,
            Op::DepthwiseConv1d {
                input: input.id,
                kernel: kernel.id,
            },
            ng,
        ))
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "gather: table {:?}",
                t.shape()
            )));
        }
        let (p, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&i) = indices.iter().find(|&&i| i >= p) {
            return Err(AutodiffError::InvalidOp(format!(
                "gather: index {i} out of {p} rows"
            )));
        }
        let mut out = ArrayD::zeros(IxDyn(&[indices.len(), d]));
        for (r, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), r)
                .assign(&t.index_axis(Axis(0), i));
        }
        let ng = self.needs(table.id);
        Ok(self.push(
            out,
            Op::Gather {
                table: table.id,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::InvalidOp(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(ArrayD::ones(IxDyn(self.value(loss).shape())));

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.distribute(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], id: usize, delta: ArrayD<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn distribute(&self, id: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, g * &self.nodes[*b].value);
                self.accum(grads, *b, g * &self.nodes[*a].value);
            }
            Op::ScalarMul(a, c) => {
                self.accum(grads, *a, g * *c);
            }
            Op::AddBias(x, bias) => {
                self.accum(grads, *x, g.clone());
                let flat = rows_view(g);
                let db = flat.sum_axis(Axis(0)).into_dyn();
                self.accum(grads, *bias, db);
            }
            Op::Matmul(a, b) => {
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                self.accum(grads, *a, gv.dot(&bv.t()).into_dyn());
                self.accum(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::BatchMatmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let bs = av.shape()[0];
                let mut da = ArrayD::zeros(IxDyn(av.shape()));
                let mut db = ArrayD::zeros(IxDyn(bv.shape()));
                for i in 0..bs {
                    let ai = av
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let bi = bv
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let da = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                self.accum(grads, *a, da);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let da = g
                    .view()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("standard layout reshape")
                    .to_owned();
                self.accum(grads, *a, da);
            }
            Op::Concat { axis, parts } => {
                let mut offset = 0usize;
                for &p in parts {
                    let span = self.nodes[p].value.shape()[*axis];
                    let dp = g
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + span))
                        .as_standard_layout()
                        .to_owned();
                    self.accum(grads, p, dp);
                    offset += span;
                }
            }
            Op::Slice { input, axis, start } => {
                let mut da = ArrayD::zeros(IxDyn(self.nodes[*input].value.shape()));
                let len = g.shape()[*axis];
                da.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(g);
                self.accum(grads, *input, da);
            }
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g * &mask);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[id].value;
                let n = *y.shape().last().unwrap();
                let mut da = ArrayD::zeros(IxDyn(y.shape()));
                {
                    let rows = y.len() / n;
                    let yv = rows_view(y);
                    let gv = rows_view(g);
                    let mut dv = da
                        .view_mut()
                        .into_shape_with_order((rows, n))
                        .expect("standard layout reshape");
                    for r in 0..rows {
                        let dot: f64 = yv
                            .row(r)
                            .iter()
                            .zip(gv.row(r).iter())
                            .map(|(y, g)| y * g)
                            .sum();
                        for j in 0..n {
                            dv[[r, j]] = yv[[r, j]] * (gv[[r, j]] - dot);
                        }
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = &self.nodes[*input].value;
                let gamma_v = &self.nodes[*gamma].value;
                let n = *x.shape().last().unwrap();
                let rows = x.len() / n;
                let xv = rows_view(x);
                let gv = rows_view(g);
                let mut dx = ArrayD::zeros(IxDyn(x.shape()));
                let mut dgamma = ArrayD::zeros(IxDyn(&[n]));
                let mut dbeta = ArrayD::zeros(IxDyn(&[n]));
                {
                    let mut dxv = dx
                        .view_mut()
                        .into_shape_with_order((rows, n))
                        .expect("standard layout reshape");
                    for r in 0..rows {
                        let row = xv.row(r);
                        let mu = row.mean().unwrap();
                        let var =
                            row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mu) * inv).collect();
                        let grow = gv.row(r);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let dxh = grow[j] * gamma_v[[j]];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[j];
                            dgamma[[j]] += grow[j] * xhat[j];
                            dbeta[[j]] += grow[j];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            let dxh = grow[j] * gamma_v[[j]];
                            dxv[[r, j]] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
                self.accum(grads, *input, dx);
                self.accum(grads, *gamma, dgamma);
                self.accum(grads, *beta, dbeta);
            }
            Op::L2NormalizeRows { input, eps } => {
                let x = &self.nodes[*input].value;
                let y = &self.nodes[id].value;
                let n = *x.shape().last().unwrap();
                let rows = x.len() / n;
                let xv = rows_view(x);
                let yv = rows_view(y);
                let gv = rows_view(g);
                let mut dx = ArrayD::zeros(IxDyn(x.shape()));
                {
                    let mut dxv = dx
                        .view_mut()
                        .into_shape_with_order((rows, n))
                        .expect("standard layout reshape");
                    for r in 0..rows {
                        let norm = xv.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm < *eps {
                            continue; // guarded rows pass no gradient
                        }
                        let dot: f64 = gv
                            .row(r)
                            .iter()
                            .zip(yv.row(r).iter())
                            .map(|(g, y)| g * y)
                            .sum();
                        for j in 0..n {
                            dxv[[r, j]] = (gv[[r, j]] - dot * yv[[r, j]]) / norm;
                        }
                    }
                }
                self.accum(grads, *input, dx);
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let len = shape[*axis] as f64;
                let mut da = ArrayD::zeros(IxDyn(&shape));
                for mut lane in da.axis_iter_mut(Axis(*axis)) {
                    lane += &(g / len);
                }
                self.accum(grads, *a, da);
            }
            Op::Mean(a) => {
                let shape = self.nodes[*a].value.shape();
                let scale = g[[0]] / self.nodes[*a].value.len() as f64;
                self.accum(grads, *a, ArrayD::from_elem(IxDyn(shape), scale));
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape();
                self.accum(grads, *a, ArrayD::from_elem(IxDyn(shape), g[[0]]));
            }
            Op::CrossEntropy { logits, targets } => {
                let x = &self.nodes[*logits].value;
                let mut da = softmax_rows(x);
                let m = targets.len() as f64;
                {
                    let n = *x.shape().last().unwrap();
                    let mut dv = da
                        .view_mut()
                        .into_shape_with_order((targets.len(), n))
                        .expect("standard layout reshape");
                    for (r, &t) in targets.iter().enumerate() {
                        dv[[r, t]] -= 1.0;
                    }
                    dv.mapv_inplace(|x| x / m);
                }
                self.accum(grads, *logits, da * g[[0]]);
            }
            Op::MilNce { logits, pos_mask } => {
                let x = &self.nodes[*logits].value;
                let b = x.shape()[0];
                let n = x.shape()[1];
                let xv = rows_view(x);
                let mut da = ArrayD::zeros(IxDyn(x.shape()));
                {
                    let mut dv = da
                        .view_mut()
                        .into_shape_with_order((b, n))
                        .expect("standard layout reshape");
                    for r in 0..b {
                        let row = xv.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let sum_all: f64 = exps.iter().sum();
                        let sum_pos: f64 = exps
                            .iter()
                            .zip(pos_mask.row(r).iter())
                            .filter(|(_, &m)| m != 0.0)
                            .map(|(e, _)| e)
                            .sum();
                        for j in 0..n {
                            let p_all = exps[j] / sum_all;
                            let p_pos = if pos_mask[[r, j]] != 0.0 {
                                exps[j] / sum_pos
                            } else {
                                0.0
                            };
                            dv[[r, j]] = (p_all - p_pos) / b as f64;
                        }
                    }
                }
                self.accum(grads, *logits, da * g[[0]]);
            }
            Op::DepthwiseConv1d { input, kernel } => {
                let x = &self.nodes[*input].value;
                let k = &self.nodes[*kernel].value;
                let (t_len, v_len, f_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let width = k.shape()[1];
                let half = width / 2;
                let mut dx = ArrayD::zeros(IxDyn(x.shape()));
                let mut dk = ArrayD::zeros(IxDyn(k.shape()));
                {
                    let xs = x.as_slice().expect("standard layout");
                    let ks = k.as_slice().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    let dxs = dx.as_slice_mut().expect("standard layout");
                    let dks = dk.as_slice_mut().expect("standard layout");
                    let frame = v_len * f_len;
                    for t in 0..t_len {
                        for j in 0..width {
                            let src = t as isize + j as isize - half as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let x_base = src as usize * frame;
                            let g_base = t * frame;
                            for v in 0..v_len {
                                let xrow = &xs[x_base + v * f_len..x_base + (v + 1) * f_len];
                                let grow = &gs[g_base + v * f_len..g_base + (v + 1) * f_len];
                                let dxrow =
                                    &mut dxs[x_base + v * f_len..x_base + (v + 1) * f_len];
                                for f in 0..f_len {
                                    let go = grow[f];
                                    dxrow[f] += ks[f * width + j] * go;
                                    dks[f * width + j] += xrow[f] * go;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *input, dx);
                self.accum(grads, *kernel, dk);
            }
            Op::Gather { table, indices } => {
                let shape = self.nodes[*table].value.shape().to_vec();
                let mut dt = ArrayD::zeros(IxDyn(&shape));
                for (r, &i) in indices.iter().enumerate() {
                    let mut row = dt.index_axis_mut(Axis(0), i);
                    row += &g.index_axis(Axis(0), r);
                }
                self.accum(grads, *table, dt);
            }
        }
    }
}
