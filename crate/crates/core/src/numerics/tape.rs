//! Reverse-mode differentiation over an explicitly recorded operation list.
//!
//! Every operation pushes a node holding its forward value and enough
//! context to apply its analytic backward rule. [`Tape::backward`] walks the
//! list once in reverse, accumulating gradients into every node that depends
//! on a leaf created with [`Tape::leaf`].

use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::response::AnchorTargets;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed many-to-one averaging map from input pixels to output cells.
///
/// Used to lift image-space features onto a bird's-eye-view grid. Cells that
/// receive no input hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterMean {
    targets: Vec<Option<usize>>,
    counts: Vec<usize>,
    out_height: usize,
    out_width: usize,
}

impl ScatterMean {
    pub fn new(targets: Vec<Option<usize>>, out_height: usize, out_width: usize) -> Result<Self> {
        let cells = out_height * out_width;
        let mut counts = vec![0; cells];
        for t in targets.iter().flatten() {
            if *t >= cells {
                return Err(Error::invalid(format!(
                    "scatter target {t} outside {out_height}x{out_width} grid"
                )));
            }
            counts[*t] += 1;
        }
        Ok(Self {
            targets,
            counts,
            out_height,
            out_width,
        })
    }

    pub fn input_pixels(&self) -> usize {
        self.targets.len()
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_height, self.out_width)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn forward(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let n_in = self.targets.len();
        let cells = self.counts.len();
        let mut out = vec![0.0; channels * cells];
        for c in 0..channels {
            for (p, t) in self.targets.iter().enumerate() {
                if let Some(cell) = *t {
                    out[c * cells + cell] += x[c * n_in + p];
                }
            }
            for (cell, &n) in self.counts.iter().enumerate() {
                if n > 0 {
                    out[c * cells + cell] /= n as f64;
                }
            }
        }
        out
    }

    fn backward(&self, d_out: &[f64], channels: usize) -> Vec<f64> {
        let n_in = self.targets.len();
        let cells = self.counts.len();
        let mut d = vec![0.0; channels * n_in];
        for c in 0..channels {
            for (p, t) in self.targets.iter().enumerate() {
                if let Some(cell) = *t {
                    d[c * n_in + p] = d_out[c * cells + cell] / self.counts[cell] as f64;
                }
            }
        }
        d
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
    },
    Relu(Var),
    Normalize {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaskedL1 {
        student: Var,
        teacher: Vec<f64>,
        mask: Vec<bool>,
    },
    AvgPool {
        input: Var,
    },
    Scatter {
        input: Var,
        map: Rc<ScatterMean>,
    },
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    DotConst {
        input: Var,
        weights: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Fuse {
        global: Var,
        local: Var,
        raw: Var,
    },
    Response {
        residuals: Var,
        objectness: Var,
        targets: Rc<AnchorTargets>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded sequence of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of the given length if none flowed there.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn chw(&self, var: Var, context: &'static str) -> Result<(usize, usize, usize)> {
        match *self.value(var).shape() {
            [c, h, w] => Ok((c, h, w)),
            ref other => Err(Error::shape(context, "[C, H, W]", other)),
        }
    }

    /// Same-padded stride-1 convolution. `weight` is `[C_out, C_in, k, k]`
    /// with odd `k`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (c_in, h, w) = self.chw(input, "conv2d input")?;
        let (c_out, k) = match *self.value(weight).shape() {
            [o, i, k1, k2] if i == c_in && k1 == k2 && k1 % 2 == 1 => (o, k1),
            ref other => return Err(Error::shape("conv2d weight", ("C_out", c_in, "k", "k"), other)),
        };
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape("conv2d bias", [c_out], self.value(bias).shape()));
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            (c_in, h, w),
            self.value(weight).data(),
            self.value(bias).data(),
            c_out,
            k,
        );
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![c_out, h, w], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel: k,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(value, Op::Relu(input), needs)
    }

    /// Per-channel normalization followed by a learned scale and shift.
    ///
    /// `mean`/`var` are the statistics to normalize with. With
    /// `batch_stats = true` they must be the statistics of `input` itself and
    /// the backward rule differentiates through them.
    pub fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let (c, h, w) = self.chw(input, "normalize input")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    if name == "gamma" { "normalize gamma" } else { "normalize beta" },
                    [c],
                    self.value(v).shape(),
                ));
            }
        }
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("normalize statistics", c, (mean.len(), var.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + kernels::NORM_EPS).sqrt()).collect();
        let (y, normalized) = kernels::normalize_forward(
            self.value(input).data(),
            c,
            mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let needs = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![c, h, w], y)?,
            Op::Normalize {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// Masked L1 imitation loss against a constant target.
    pub fn masked_l1(&mut self, student: Var, teacher: &Tensor, mask: &[bool]) -> Result<Var> {
        let (c, h, w) = self.chw(student, "masked_l1 student")?;
        if teacher.shape() != [c, h, w] {
            return Err(Error::shape("masked_l1 teacher", [c, h, w], teacher.shape()));
        }
        if mask.len() != h * w {
            return Err(Error::shape("masked_l1 mask", h * w, mask.len()));
        }
        let loss =
            kernels::masked_l1_forward(self.value(student).data(), teacher.data(), mask, c);
        let needs = self.needs(&[student]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedL1 {
                student,
                teacher: teacher.data().to_vec(),
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = self.chw(input, "adaptive_avg_pool input")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("adaptive_avg_pool output size must be positive"));
        }
        let out = kernels::adaptive_avg_pool_forward(self.value(input).data(), dims, out_h, out_w);
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![dims.0, out_h, out_w], out)?,
            Op::AvgPool { input },
            needs,
        ))
    }

    pub fn scatter_mean(&mut self, input: Var, map: Rc<ScatterMean>) -> Result<Var> {
        let (c, h, w) = self.chw(input, "scatter_mean input")?;
        if h * w != map.input_pixels() {
            return Err(Error::shape("scatter_mean input pixels", map.input_pixels(), h * w));
        }
        let out = map.forward(self.value(input).data(), c);
        let (oh, ow) = map.out_dims();
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::Scatter { input, map },
            needs,
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(value, Op::Sigmoid(input), needs)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(value, Op::Square(input), needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let needs = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), needs)
    }

    /// Scalar `Σ weights ⊙ input` with constant weights.
    pub fn dot_const(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let src = self.value(input);
        if src.len() != weights.len() {
            return Err(Error::shape("dot_const", src.len(), weights.len()));
        }
        let total = src.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let needs = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::DotConst {
                input,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    /// `Σ coefficient · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, coef) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum term", 1, self.value(v).len()));
            }
            total += coef * self.scalar(v);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs))
    }

    /// `σ(raw)·global + (1 − σ(raw))·local` over scalars.
    pub fn fuse(&mut self, global: Var, local: Var, raw: Var) -> Result<Var> {
        for v in [global, local, raw] {
            if self.value(v).len() != 1 {
                return Err(Error::shape("fuse operand", 1, self.value(v).len()));
            }
        }
        let w = kernels::sigmoid(self.scalar(raw));
        let out = w * self.scalar(global) + (1.0 - w) * self.scalar(local);
        let needs = self.needs(&[global, local, raw]);
        Ok(self.push(Tensor::scalar(out), Op::Fuse { global, local, raw }, needs))
    }

    /// Anchor-based detection loss; see [`AnchorTargets`].
    pub fn response_loss(
        &mut self,
        residuals: Var,
        objectness: Var,
        targets: Rc<AnchorTargets>,
    ) -> Result<Var> {
        let loss = targets.loss(self.value(residuals), self.value(objectness))?;
        let needs = self.needs(&[residuals, objectness]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Response {
                residuals,
                objectness,
                targets,
            },
            needs,
        ))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, d: Vec<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    kernel,
                } => {
                    let x = self.value(*input);
                    let dims = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let wt = self.value(*weight);
                    let (d_in, d_w, d_b) = kernels::conv2d_backward(
                        x.data(),
                        dims,
                        wt.data(),
                        wt.shape()[0],
                        *kernel,
                        &g,
                    );
                    send(&mut grads, *input, d_in);
                    send(&mut grads, *weight, d_w);
                    send(&mut grads, *bias, d_b);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    send(&mut grads, *input, d);
                }
                Op::Normalize {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    batch_stats,
                } => {
                    let c = inv_std.len();
                    let (d_x, d_gamma, d_beta) = kernels::normalize_backward(
                        normalized,
                        c,
                        inv_std,
                        self.value(*gamma).data(),
                        &g,
                        *batch_stats,
                    );
                    send(&mut grads, *input, d_x);
                    send(&mut grads, *gamma, d_gamma);
                    send(&mut grads, *beta, d_beta);
                }
                Op::MaskedL1 {
                    student,
                    teacher,
                    mask,
                } => {
                    let s = self.value(*student);
                    let d = kernels::masked_l1_backward(
                        s.data(),
                        teacher,
                        mask,
                        s.shape()[0],
                        g[0],
                    );
                    send(&mut grads, *student, d);
                }
                Op::AvgPool { input } => {
                    let shape = self.value(*input).shape();
                    let out_shape = node.value.shape();
                    let d = kernels::adaptive_avg_pool_backward(
                        (shape[0], shape[1], shape[2]),
                        out_shape[1],
                        out_shape[2],
                        &g,
                    );
                    send(&mut grads, *input, d);
                }
                Op::Scatter { input, map } => {
                    let c = self.value(*input).shape()[0];
                    send(&mut grads, *input, map.backward(&g, c));
                }
                Op::Sigmoid(input) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                    send(&mut grads, *input, d);
                }
                Op::Square(input) => {
                    let x = self.value(*input).data();
                    let d = g.iter().zip(x).map(|(gv, xv)| 2.0 * xv * gv).collect();
                    send(&mut grads, *input, d);
                }
                Op::Sum(input) => {
                    let n = self.value(*input).len();
                    send(&mut grads, *input, vec![g[0]; n]);
                }
                Op::DotConst { input, weights } => {
                    send(&mut grads, *input, weights.iter().map(|w| w * g[0]).collect());
                }
                Op::WeightedSum(terms) => {
                    for &(v, coef) in terms {
                        send(&mut grads, v, vec![coef * g[0]]);
                    }
                }
                Op::Fuse { global, local, raw } => {
                    let w = kernels::sigmoid(self.scalar(*raw));
                    let diff = self.scalar(*global) - self.scalar(*local);
                    send(&mut grads, *global, vec![w * g[0]]);
                    send(&mut grads, *local, vec![(1.0 - w) * g[0]]);
                    send(&mut grads, *raw, vec![w * (1.0 - w) * diff * g[0]]);
                }
                Op::Response {
                    residuals,
                    objectness,
                    targets,
                } => {
                    let (d_res, d_obj) =
                        targets.gradient(self.value(*residuals), self.value(*objectness), g[0]);
                    send(&mut grads, *residuals, d_res);
                    send(&mut grads, *objectness, d_obj);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.square(x);
        let s = tape.sum(sq);
        assert_eq!(tape.scalar(s), 10.0);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(5.0));
        let out = tape.weighted_sum(&[(c, 3.0), (x, 4.0)]).unwrap();
        let grads = tape.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let out = tape.weighted_sum(&[(x, 1.0), (x, 2.5)]).unwrap();
        let grads = tape.backward(out);
        assert_eq!(grads.get(x).unwrap(), &[3.5]);
    }

    #[test]
    fn scatter_mean_averages_and_leaves_empty_cells_zero() {
        let map = ScatterMean::new(vec![Some(0), Some(0), None, Some(2)], 1, 3).unwrap();
        let out = map.forward(&[1.0, 3.0, 100.0, 5.0], 1);
        assert_eq!(out, vec![2.0, 0.0, 5.0]);
        assert!(ScatterMean::new(vec![Some(3)], 1, 3).is_err());
    }
}
