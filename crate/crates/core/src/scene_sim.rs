//! Channel alignment of student features and the masked L1 scene imitation
//! loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, NORM_EPS};
use crate::numerics::{Bound, FeatureMap, ParameterSet, Tape, Tensor, Var};
use crate::projection::ValidityMask;

const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// Normalize with statistics of the current input and update running
    /// statistics.
    Training,
    /// Normalize with running statistics.
    Evaluation,
}

/// 1×1 convolution → channel normalization → rectifier, mapping student
/// channels onto the teacher's channel width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHead {
    c_in: usize,
    c_out: usize,
    params: ParameterSet,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    mode: HeadMode,
}

impl AlignmentHead {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let mut params = ParameterSet::new();
        params.insert_fan_in_uniform("weight", vec![c_out, c_in, 1, 1], c_in, rng);
        params.insert("bias", Tensor::zeros(vec![c_out]));
        params.insert("scale", Tensor::filled(vec![c_out], 1.0));
        params.insert("shift", Tensor::zeros(vec![c_out]));
        Self {
            c_in,
            c_out,
            params,
            running_mean: vec![0.0; c_out],
            running_var: vec![1.0; c_out],
            mode: HeadMode::Training,
        }
    }

    /// Builds a head from explicit values. `weight` is `c_out × c_in`
    /// row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        c_in: usize,
        c_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        scale: Vec<f64>,
        shift: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        mode: HeadMode,
    ) -> Result<Self> {
        if weight.len() != c_in * c_out {
            return Err(Error::shape("AlignmentHead weight", c_in * c_out, weight.len()));
        }
        for (name, v) in [
            ("bias", &bias),
            ("scale", &scale),
            ("shift", &shift),
            ("running_mean", &running_mean),
            ("running_var", &running_var),
        ] {
            if v.len() != c_out {
                return Err(Error::invalid(format!(
                    "alignment head {name} has length {}, expected {c_out}",
                    v.len()
                )));
            }
        }
        if running_var.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("running variance must be non-negative"));
        }
        let mut params = ParameterSet::new();
        params.insert("weight", Tensor::new(vec![c_out, c_in, 1, 1], weight)?);
        params.insert("bias", Tensor::new(vec![c_out], bias)?);
        params.insert("scale", Tensor::new(vec![c_out], scale)?);
        params.insert("shift", Tensor::new(vec![c_out], shift)?);
        Ok(Self {
            c_in,
            c_out,
            params,
            running_mean,
            running_var,
            mode,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: HeadMode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Records the head on `tape`. In training mode the running statistics
    /// are updated from the input's spatial statistics.
    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(Error::shape("align_channels input", ("C_in", self.c_in), shape));
        }
        let linear = tape.conv2d(input, bound.var("weight"), bound.var("bias"))?;
        let normalized = match self.mode {
            HeadMode::Training => {
                let (mean, var) = kernels::channel_stats(tape.value(linear).data(), self.c_out);
                let n = (shape[1] * shape[2]) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for c in 0..self.c_out {
                    self.running_mean[c] = (1.0 - MOMENTUM) * self.running_mean[c] + MOMENTUM * mean[c];
                    self.running_var[c] =
                        (1.0 - MOMENTUM) * self.running_var[c] + MOMENTUM * var[c] * unbiased;
                }
                tape.normalize(linear, bound.var("scale"), bound.var("shift"), &mean, &var, true)?
            }
            HeadMode::Evaluation => tape.normalize(
                linear,
                bound.var("scale"),
                bound.var("shift"),
                &self.running_mean,
                &self.running_var,
                false,
            )?,
        };
        Ok(tape.relu(normalized))
    }
}

/// Applies `head` to a feature map outside of any training graph.
pub fn align_channels(head: &mut AlignmentHead, input: &FeatureMap) -> Result<FeatureMap> {
    if input.channels() != head.c_in {
        return Err(Error::shape("align_channels input channels", head.c_in, input.channels()));
    }
    let mut tape = Tape::new();
    let bound = head.params.bind_frozen(&mut tape);
    let x = tape.constant(input.to_tensor());
    let y = head.forward(&mut tape, &bound, x)?;
    FeatureMap::from_tensor(tape.value(y).clone())
}

/// Epsilon used inside normalization, exposed for oracles.
pub const NORMALIZATION_EPS: f64 = NORM_EPS;

fn check_loss_shapes(
    student: (usize, usize, usize),
    teacher: (usize, usize, usize),
    mask: &ValidityMask,
) -> Result<()> {
    if student != teacher {
        return Err(Error::shape("imitation loss teacher", student, teacher));
    }
    if (mask.height(), mask.width()) != (student.1, student.2) {
        return Err(Error::shape(
            "imitation loss mask",
            (student.1, student.2),
            (mask.height(), mask.width()),
        ));
    }
    Ok(())
}

/// `Σ_valid |student − teacher| / n_valid`, or 0 when nothing is valid.
pub fn masked_l1_loss(student: &FeatureMap, teacher: &FeatureMap, mask: &ValidityMask) -> Result<f64> {
    check_loss_shapes(student.dims(), teacher.dims(), mask)?;
    Ok(kernels::masked_l1_forward(
        student.data(),
        teacher.data(),
        mask.as_slice(),
        student.channels(),
    ))
}

/// Records the masked L1 loss on a tape; the gradient flows into `student`
/// only.
pub fn masked_l1_on_tape(
    tape: &mut Tape,
    student: Var,
    teacher: &FeatureMap,
    mask: &ValidityMask,
) -> Result<Var> {
    let shape = tape.value(student).shape();
    let dims = match *shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("imitation loss student", "[C, H, W]", shape)),
    };
    check_loss_shapes(dims, teacher.dims(), mask)?;
    tape.masked_l1(student, &teacher.to_tensor(), mask.as_slice())
}

/// Scene-level imitation loss over the rendered-feature mask.
pub fn scene_loss(student: &FeatureMap, teacher: &FeatureMap, mask: &ValidityMask) -> Result<f64> {
    masked_l1_loss(student, teacher, mask)
}
