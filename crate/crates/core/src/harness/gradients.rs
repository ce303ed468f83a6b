//! Finite-difference gradient checks of every differentiable building block
//! used in training.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::numerics::gradcheck::finite_difference_check;
use crate::numerics::{seeded_rng, Bound, GradCheckReport, ScatterMean, SeededRng, Tensor, Var};
use crate::response::{Anchor, AnchorTargets, Assignment, DetectionBox, ObjectClass};
use crate::scene_sim::{AlignmentHead, HeadMode};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Independent random inputs checked per operation.
pub const TRIALS: usize = 3;

/// Outcome of one named check on one random input.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub name: &'static str,
    pub trial: usize,
    pub report: GradCheckReport,
}

fn random(rng: &mut SeededRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("length from shape")
}

fn random_weights(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn align_case(mode: HeadMode, rng: &mut SeededRng, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (c_in, c_out, h, w) = (3, 4, 4, 5);
    let inputs = [
        random(rng, vec![c_in, h, w], -1.0, 1.0),
        random(rng, vec![c_out, c_in, 1, 1], -1.0, 1.0),
        random(rng, vec![c_out], -0.5, 0.5),
        random(rng, vec![c_out], 0.5, 1.5),
        random(rng, vec![c_out], -0.2, 0.8),
    ];
    let running_mean: Vec<f64> = (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect();
    let running_var: Vec<f64> = (0..c_out).map(|_| rng.random_range(0.5..2.0)).collect();
    let probe = random_weights(rng, c_out * h * w);
    finite_difference_check(&inputs, epsilon, tolerance, |tape, v| {
        let zeros = vec![0.0; c_out];
        let mut head = AlignmentHead::from_parts(
            c_in,
            c_out,
            vec![0.0; c_in * c_out],
            zeros.clone(),
            zeros.clone(),
            zeros,
            running_mean.clone(),
            running_var.clone(),
            mode,
        )?;
        let bound = Bound::from_vars([("weight", v[1]), ("bias", v[2]), ("scale", v[3]), ("shift", v[4])]);
        let y = head.forward(tape, &bound, v[0])?;
        tape.dot_const(y, &probe)
    })
}

fn mask(rng: &mut SeededRng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    m[0] = true;
    m
}

fn response_targets() -> Result<AnchorTargets> {
    let anchor = |x: f64, z: f64| Anchor {
        location: [x, 1.65, z],
        dimensions: [1.5, 1.6, 3.9],
        yaw: 0.0,
    };
    let anchors: Vec<Anchor> = (0..6).map(|i| anchor(i as f64 * 5.0, 10.0 + i as f64)).collect();
    let labels = vec![
        DetectionBox::new(ObjectClass::Car, [0.3, 1.6, 10.2], [1.45, 1.7, 4.0], 0.05, 0.9)?,
        DetectionBox::new(ObjectClass::Car, [5.2, 1.7, 10.9], [1.55, 1.62, 3.8], -0.1, 0.8)?,
    ];
    let assignment = [
        Assignment::Positive(0),
        Assignment::Positive(1),
        Assignment::Negative,
        Assignment::Ignored,
        Assignment::Negative,
        Assignment::Positive(0),
    ];
    AnchorTargets::new(&anchors, &labels, &assignment)
}

/// Runs every check on [`TRIALS`] seed-fixed random inputs each.
pub fn gradient_suite(epsilon: f64, tolerance: f64) -> Result<Vec<GradientCase>> {
    let mut rng = seeded_rng(0x6772_6164);
    let mut cases = Vec::new();
    for trial in 0..TRIALS {
        for (name, report) in trial_cases(&mut rng, epsilon, tolerance)? {
            cases.push(GradientCase { name, trial, report });
        }
    }
    Ok(cases)
}

fn trial_cases(rng: &mut SeededRng, epsilon: f64, tolerance: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut cases = Vec::new();
    cases.push(("align_channels (batch statistics)", align_case(HeadMode::Training, rng, epsilon, tolerance)?));
    cases.push(("align_channels (running statistics)", align_case(HeadMode::Evaluation, rng, epsilon, tolerance)?));

    let (c, h, w) = (4, 5, 6);
    let teacher = random(rng, vec![c, h, w], 0.0, 1.0);
    let scene_mask = mask(rng, h * w);
    let student = random(rng, vec![c, h, w], -1.0, 2.0);
    cases.push((
        "scene_loss",
        finite_difference_check(&[student], epsilon, tolerance, |tape, v| {
            tape.masked_l1(v[0], &teacher, &scene_mask)
        })?,
    ));

    // RoI path: image features lifted onto a grid, then compared with the teacher
    let (gh, gw) = (3, 4);
    let targets: Vec<Option<usize>> = (0..h * w)
        .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..gh * gw)))
        .collect();
    let lift = Rc::new(ScatterMean::new(targets, gh, gw)?);
    let roi_teacher = random(rng, vec![c, gh, gw], 0.0, 1.0);
    let roi_mask = mask(rng, gh * gw);
    let roi_student = random(rng, vec![c, h, w], -1.0, 2.0);
    cases.push((
        "roi_loss",
        finite_difference_check(&[roi_student], epsilon, tolerance, |tape, v| {
            let bev = tape.scatter_mean(v[0], Rc::clone(&lift))?;
            tape.masked_l1(bev, &roi_teacher, &roi_mask)
        })?,
    ));

    let pool_in = random(rng, vec![3, 7, 9], -1.0, 1.0);
    let pool_probe = random_weights(rng, 3 * 3 * 4);
    cases.push((
        "adaptive_avg_pool",
        finite_difference_check(&[pool_in], epsilon, tolerance, |tape, v| {
            let y = tape.adaptive_avg_pool(v[0], 3, 4)?;
            tape.dot_const(y, &pool_probe)
        })?,
    ));

    let anchor_targets = Rc::new(response_targets()?);
    let residuals = random(rng, vec![7, 6], -0.4, 0.4);
    let logits = random(rng, vec![6], -2.0, 2.0);
    cases.push((
        "response_loss",
        finite_difference_check(&[residuals, logits], epsilon, tolerance, |tape, v| {
            let p = tape.sigmoid(v[1]);
            tape.response_loss(v[0], p, Rc::clone(&anchor_targets))
        })?,
    ));

    let terms: Vec<Tensor> = (0..3).map(|_| Tensor::scalar(rng.random_range(0.1..3.0))).collect();
    let coeffs = [1.0, rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
    cases.push((
        "total_loss",
        finite_difference_check(&terms, epsilon, tolerance, |tape, v| {
            tape.weighted_sum(&[(v[0], coeffs[0]), (v[1], coeffs[1]), (v[2], coeffs[2])])
        })?,
    ));

    let fuse_inputs = [
        Tensor::scalar(rng.random_range(0.0..3.0)),
        Tensor::scalar(rng.random_range(0.0..3.0)),
        Tensor::scalar(rng.random_range(-2.0..2.0)),
    ];
    cases.push((
        "fuse_global_local",
        finite_difference_check(&fuse_inputs, epsilon, tolerance, |tape, v| tape.fuse(v[0], v[1], v[2]))?,
    ));

    let conv_inputs = [
        random(rng, vec![2, 5, 4], -1.0, 1.0),
        random(rng, vec![3, 2, 3, 3], -1.0, 1.0),
        random(rng, vec![3], -1.0, 1.0),
    ];
    let conv_probe = random_weights(rng, 3 * 5 * 4);
    cases.push((
        "conv2d",
        finite_difference_check(&conv_inputs, epsilon, tolerance, |tape, v: &[Var]| {
            let y = tape.conv2d(v[0], v[1], v[2])?;
            tape.dot_const(y, &conv_probe)
        })?,
    ));

    // elementwise ops, kept away from the ReLU kink
    let elementwise: Vec<f64> = (0..12)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    let elementwise = Tensor::new(vec![12], elementwise)?;
    let elementwise_probe = random_weights(rng, 12);
    cases.push((
        "relu, sigmoid, square, sum",
        finite_difference_check(&[elementwise], epsilon, tolerance, |tape, v| {
            let r = tape.relu(v[0]);
            let s = tape.sigmoid(v[0]);
            let q = tape.square(v[0]);
            let a = tape.dot_const(r, &elementwise_probe)?;
            let b = tape.dot_const(s, &elementwise_probe)?;
            let c = tape.sum(q);
            tape.weighted_sum(&[(a, 1.0), (b, 1.0), (c, 0.5)])
        })?,
    ));
    Ok(cases)
}
