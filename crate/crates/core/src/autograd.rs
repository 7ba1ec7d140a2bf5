//! Reverse-mode gradients over [`Tensor`] primitives.
//!
//! A [`GradTape`] records every operation whose inputs need gradients. Tensors created by
//! [`GradTape::stop_gradient`] sit in the tape's barrier set: the backward pass never
//! propagates through them and reports an exactly-zero gradient for them. A tape created
//! with [`GradTape::no_grad`] records nothing and is used for inference.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{col2im, count_macs, dropout_mask, im2col, padding_split, row_moments, Padding, Tensor};

pub type TensorId = usize;

/// A tensor value registered on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    id: TensorId,
    value: Arc<Tensor>,
    tracked: bool,
}

impl Var {
    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients flow to this value.
    pub fn tracked(&self) -> bool {
        self.tracked
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

struct Record {
    op: &'static str,
    inputs: Vec<TensorId>,
    output: TensorId,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct GradTape {
    records: Vec<Record>,
    barriers: HashSet<TensorId>,
    tracked: BTreeMap<TensorId, Vec<usize>>,
    next_id: TensorId,
    disabled: bool,
}

/// Gradients keyed by tensor id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn by_id(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never records; every op just computes its value.
    pub fn no_grad() -> Self {
        GradTape {
            disabled: true,
            ..Self::default()
        }
    }

    pub fn is_recording(&self) -> bool {
        !self.disabled
    }

    fn fresh_id(&mut self) -> TensorId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn register(&mut self, value: Arc<Tensor>, tracked: bool) -> Var {
        let id = self.fresh_id();
        let tracked = tracked && !self.disabled;
        if tracked {
            self.tracked.insert(id, value.shape().to_vec());
        }
        Var { id, value, tracked }
    }

    /// Registers an input. It is tracked when the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.register(Arc::new(t), tracked)
    }

    /// Registers a tracked input regardless of its flag.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.register(Arc::new(t.with_requires_grad(true)), true)
    }

    /// Registers a value that never receives gradients. Shares storage with `t`.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.register(t.into(), false)
    }

    /// `SG(x)`: same value, but the result is a barrier and no gradient reaches `x` through it.
    pub fn stop_gradient(&mut self, x: &Var) -> Var {
        let out = self.register(x.shared(), x.tracked);
        if out.tracked {
            self.barriers.insert(out.id);
            self.records.push(Record {
                op: "stop_gradient",
                inputs: vec![x.id],
                output: out.id,
                backward: Box::new(|g| Ok(vec![Tensor::zeros(g.shape())])),
            });
        }
        out
    }

    pub fn is_barrier(&self, var: &Var) -> bool {
        self.barriers.contains(&var.id)
    }

    /// `(op name, input ids, output id)` for every recorded operation, in order.
    pub fn ops(&self) -> impl Iterator<Item = (&'static str, &[TensorId], TensorId)> {
        self.records.iter().map(|r| (r.op, r.inputs.as_slice(), r.output))
    }

    fn record(
        &mut self,
        op: &'static str,
        inputs: &[&Var],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Result<Vec<Tensor>> + 'static,
    ) -> Var {
        let tracked = inputs.iter().any(|v| v.tracked);
        let out = self.register(Arc::new(value), tracked);
        if out.tracked {
            self.records.push(Record {
                op,
                inputs: inputs.iter().map(|v| v.id).collect(),
                output: out.id,
                backward: Box::new(backward),
            });
        }
        out
    }

    /// Gradients of the scalar `loss` for every tracked tensor on the tape. Tensors that do
    /// not influence the loss, and all barrier tensors, get an all-zero gradient.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.tracked {
            return Err(Error::Contract("loss is not reachable from any tracked tensor".into()));
        }
        let mut grads: HashMap<TensorId, Tensor> = HashMap::new();
        grads.insert(loss.id, Tensor::ones(loss.shape()));
        for rec in self.records.iter().rev() {
            if self.barriers.contains(&rec.output) {
                continue;
            }
            let Some(g) = grads.get(&rec.output) else {
                continue;
            };
            let input_grads = (rec.backward)(g)?;
            debug_assert_eq!(input_grads.len(), rec.inputs.len(), "{}", rec.op);
            for (&id, ig) in rec.inputs.iter().zip(input_grads) {
                if !self.tracked.contains_key(&id) {
                    continue;
                }
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&ig)?,
                    None => {
                        grads.insert(id, ig);
                    }
                }
            }
        }
        for (id, shape) in &self.tracked {
            if self.barriers.contains(id) || !grads.contains_key(id) {
                grads.insert(*id, Tensor::zeros(shape));
            }
        }
        Ok(Gradients { grads })
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.add(&b.value)?;
        Ok(self.record("add", &[a, b], value, |g| Ok(vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.sub(&b.value)?;
        Ok(self.record("sub", &[a, b], value, |g| Ok(vec![g.clone(), g.scale(-1.0)])))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.mul(&b.value)?;
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record("mul", &[a, b], value, move |g| Ok(vec![g.mul(&bv)?, g.mul(&av)?])))
    }

    pub fn scale(&mut self, a: &Var, s: f64) -> Var {
        let value = a.value.scale(s);
        self.record("scale", &[a], value, move |g| Ok(vec![g.scale(s)]))
    }

    /// Row-broadcast bias add.
    pub fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let value = x.value.broadcast_add(&bias.value)?;
        let bias_shape = bias.shape().to_vec();
        Ok(self.record("add_bias", &[x, bias], value, move |g| {
            Ok(vec![g.clone(), g.sum_rows()?.reshape(&bias_shape)?])
        }))
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.matmul(&b.value)?;
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record("matmul", &[a, b], value, move |g| {
            Ok(vec![g.matmul(&bv.transpose()?)?, av.transpose()?.matmul(g)?])
        }))
    }

    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        let value = a.value.transpose()?;
        Ok(self.record("transpose", &[a], value, |g| Ok(vec![g.transpose()?])))
    }

    pub fn elu_plus_one(&mut self, x: &Var) -> Var {
        let value = x.value.elu_plus_one();
        let xv = x.shared();
        self.record("elu_plus_one", &[x], value, move |g| {
            let d = xv.map(|v| if v > 0.0 { 1.0 } else { v.exp() });
            Ok(vec![g.mul(&d)?])
        })
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        let value = x.value.relu();
        let xv = x.shared();
        self.record("relu", &[x], value, move |g| {
            Ok(vec![g.zip_map(&xv, "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })?])
        })
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let y = Arc::new(x.value.sigmoid());
        let yv = Arc::clone(&y);
        self.record("sigmoid", &[x], (*y).clone(), move |g| {
            Ok(vec![g.zip_map(&yv, "sigmoid_backward", |g, y| g * y * (1.0 - y))?])
        })
    }

    pub fn tanh(&mut self, x: &Var) -> Var {
        let y = Arc::new(x.value.tanh());
        let yv = Arc::clone(&y);
        self.record("tanh", &[x], (*y).clone(), move |g| {
            Ok(vec![g.zip_map(&yv, "tanh_backward", |g, y| g * (1.0 - y * y))?])
        })
    }

    pub fn glu(&mut self, x: &Var) -> Result<Var> {
        let value = x.value.glu()?;
        let xv = x.shared();
        Ok(self.record("glu", &[x], value, move |g| {
            let c = xv.cols();
            let h = c / 2;
            let mut out = vec![0.0; xv.numel()];
            for ((orow, xrow), grow) in out.chunks_exact_mut(c).zip(xv.data().chunks_exact(c)).zip(g.data().chunks_exact(h)) {
                for j in 0..h {
                    let (a, s) = (xrow[j], crate::tensor::sigmoid(xrow[h + j]));
                    orow[j] = grow[j] * s;
                    orow[h + j] = grow[j] * a * s * (1.0 - s);
                }
            }
            Ok(vec![Tensor::new(xv.shape().to_vec(), out)?])
        }))
    }

    pub fn softmax_last(&mut self, x: &Var) -> Var {
        let y = Arc::new(x.value.softmax_last());
        let yv = Arc::clone(&y);
        self.record("softmax", &[x], (*y).clone(), move |g| {
            let c = yv.cols().max(1);
            let mut out = vec![0.0; yv.numel()];
            for ((orow, yrow), grow) in out.chunks_exact_mut(c).zip(yv.data().chunks_exact(c)).zip(g.data().chunks_exact(c)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for ((o, y), g) in orow.iter_mut().zip(yrow).zip(grow) {
                    *o = y * (g - dot);
                }
            }
            Ok(vec![Tensor::new(yv.shape().to_vec(), out)?])
        })
    }

    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let value = x.value.layer_norm(&gamma.value, &beta.value, eps)?;
        let (xv, gv) = (x.shared(), gamma.shared());
        let (gshape, bshape) = (gamma.shape().to_vec(), beta.shape().to_vec());
        Ok(self.record("layer_norm", &[x, gamma, beta], value, move |g| {
            let c = xv.cols();
            let n = c as f64;
            let mut dx = vec![0.0; xv.numel()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for ((xrow, grow), dxrow) in xv.data().chunks_exact(c).zip(g.data().chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                let (mean, inv) = row_moments(xrow, eps);
                for j in 0..c {
                    xhat[j] = (xrow[j] - mean) * inv;
                    dxhat[j] = grow[j] * gv.data()[j];
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                }
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum();
                for j in 0..c {
                    dxrow[j] = inv / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
                }
            }
            Ok(vec![
                Tensor::new(xv.shape().to_vec(), dx)?,
                Tensor::new(gshape.clone(), dgamma)?,
                Tensor::new(bshape.clone(), dbeta)?,
            ])
        }))
    }

    pub fn conv1d(&mut self, x: &Var, weight: &Var, bias: Option<&Var>, padding: Padding) -> Result<Var> {
        let value = x.value.conv1d(&weight.value, bias.map(|b| b.value()), padding)?;
        let (xv, wv) = (x.shared(), weight.shared());
        let bias_shape = bias.map(|b| b.shape().to_vec());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record("conv1d", &inputs, value, move |g| {
            let (l, cin) = (xv.rows(), xv.cols());
            let (k, cout) = (wv.shape()[0], wv.shape()[2]);
            let (left, right) = padding_split(padding, k);
            let cols = im2col(&xv, k, left, right);
            let w2 = wv.reshape(&[k * cin, cout])?;
            let dcols = g.matmul(&w2.transpose()?)?;
            let dx = col2im(&dcols, l, cin, k, left);
            let dw = cols.transpose()?.matmul(g)?.reshape(wv.shape())?;
            let mut out = vec![dx, dw];
            if let Some(shape) = &bias_shape {
                out.push(g.sum_rows()?.reshape(shape)?);
            }
            Ok(out)
        }))
    }

    pub fn depthwise_conv1d(&mut self, x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let value = x.value.depthwise_conv1d(&weight.value, bias.map(|b| b.value()))?;
        let (xv, wv) = (x.shared(), weight.shared());
        let bias_shape = bias.map(|b| b.shape().to_vec());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record("depthwise_conv1d", &inputs, value, move |g| {
            let (l, c) = (xv.rows(), xv.cols());
            let k = wv.shape()[0];
            let (left, _) = padding_split(Padding::Same, k);
            let mut dx = vec![0.0; l * c];
            let mut dw = vec![0.0; k * c];
            for t in 0..l {
                for kk in 0..k {
                    let Some(src) = (t + kk).checked_sub(left).filter(|&s| s < l) else {
                        continue;
                    };
                    for ch in 0..c {
                        let gv = g.data()[t * c + ch];
                        dx[src * c + ch] += gv * wv.data()[kk * c + ch];
                        dw[kk * c + ch] += gv * xv.data()[src * c + ch];
                    }
                }
            }
            count_macs(2 * l * c * k);
            let mut out = vec![Tensor::new(vec![l, c], dx)?, Tensor::new(wv.shape().to_vec(), dw)?];
            if let Some(shape) = &bias_shape {
                out.push(g.sum_rows()?.reshape(shape)?);
            }
            Ok(out)
        }))
    }

    pub fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| v.value()).collect();
        let value = Tensor::concat(&values, axis)?;
        let extents: Vec<usize> = parts
            .iter()
            .map(|v| if axis == 0 { v.value.rows() } else { v.value.cols() })
            .collect();
        Ok(self.record("concat", parts, value, move |g| {
            let mut start = 0;
            extents
                .iter()
                .map(|&n| {
                    let piece = g.slice(axis, start..start + n);
                    start += n;
                    piece
                })
                .collect()
        }))
    }

    pub fn slice(&mut self, x: &Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let value = x.value.slice(axis, range.clone())?;
        let shape = x.shape().to_vec();
        Ok(self.record("slice", &[x], value, move |g| {
            let (r, c) = (shape[0], shape[1]);
            let mut out = Tensor::zeros(&[r, c]);
            let gc = g.cols();
            for i in 0..g.rows() {
                for j in 0..gc {
                    let (oi, oj) = if axis == 0 { (range.start + i, j) } else { (i, range.start + j) };
                    out.data_mut()[oi * c + oj] = g.data()[i * gc + j];
                }
            }
            Ok(vec![out])
        }))
    }

    pub fn slice_rows(&mut self, x: &Var, range: Range<usize>) -> Result<Var> {
        self.slice(x, 0, range)
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, x: &Var) -> Var {
        let value = Tensor::scalar(x.value.sum());
        let shape = x.shape().to_vec();
        self.record("sum", &[x], value, move |g| Ok(vec![Tensor::full(&shape, g.data()[0])]))
    }

    /// Column sums as `[1 × cols]`.
    pub fn sum_rows(&mut self, x: &Var) -> Result<Var> {
        let value = x.value.sum_rows()?;
        let rows = x.value.rows();
        Ok(self.record("sum_rows", &[x], value, move |g| Ok(vec![g.repeat_rows(&[rows])?])))
    }

    /// `x[i, :] / den[i]` for `x: [L × n]`, `den: [L × 1]`.
    pub fn div_rows(&mut self, x: &Var, den: &Var) -> Result<Var> {
        let (l, n) = x.value.expect_matrix("div_rows")?;
        if den.value.numel() != l {
            return Err(Error::dim("div_rows", x.shape(), den.shape()));
        }
        let mut out = x.value.data().to_vec();
        for (row, &d) in out.chunks_exact_mut(n.max(1)).zip(den.value.data()) {
            for v in row {
                *v /= d;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let (xv, dv) = (x.shared(), den.shared());
        Ok(self.record("div_rows", &[x, den], value, move |g| {
            let mut dx = g.data().to_vec();
            let mut dd = vec![0.0; l];
            for i in 0..l {
                let d = dv.data()[i];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += g.data()[i * n + j] * xv.data()[i * n + j];
                    dx[i * n + j] /= d;
                }
                dd[i] = -acc / (d * d);
            }
            Ok(vec![Tensor::new(xv.shape().to_vec(), dx)?, Tensor::new(dv.shape().to_vec(), dd)?])
        }))
    }

    /// Per-row feature gather with scaling: `out[i][c] = scales[i] * x[i][index[i][c]]`.
    pub fn gather_features(&mut self, x: &Var, index: Arc<Vec<Vec<usize>>>, scales: Arc<Vec<f64>>) -> Result<Var> {
        let (l, d) = x.value.expect_matrix("gather_features")?;
        if index.len() != l || scales.len() != l || index.iter().any(|ix| ix.len() != d) {
            return Err(Error::dim("gather_features", x.shape(), &[index.len(), scales.len()]));
        }
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            let row = x.value.row(i);
            for (o, &src) in out[i * d..(i + 1) * d].iter_mut().zip(&index[i]) {
                *o = scales[i] * row[src];
            }
        }
        let value = Tensor::new(vec![l, d], out)?;
        Ok(self.record("gather_features", &[x], value, move |g| {
            let mut dx = vec![0.0; l * d];
            for i in 0..l {
                for (c, &src) in index[i].iter().enumerate() {
                    dx[i * d + src] += scales[i] * g.data()[i * d + c];
                }
            }
            Ok(vec![Tensor::new(vec![l, d], dx)?])
        }))
    }

    pub fn dropout(&mut self, x: &Var, rate: f64, seed: u64) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x.clone());
        }
        let value = x.value.dropout(rate, seed)?;
        let mask = dropout_mask(x.shape(), rate, seed);
        Ok(self.record("dropout", &[x], value, move |g| Ok(vec![g.mul(&mask)?])))
    }
}
