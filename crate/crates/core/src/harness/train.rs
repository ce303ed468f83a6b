//! Distillation training: response supervision from filtered teacher
//! predictions plus scene- and RoI-level feature imitation.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::config::HarnessConfig;
use super::scene::{generate_scene, SceneConfig, SyntheticScene};
use super::student::{AlignmentHeads, BevGrid, Pass, StudentModel};
use super::teacher::{teacher_checksum, teacher_forward, TeacherOutput};
use crate::error::{Error, Result};
use crate::metrics::{total_loss_on_tape, LossWeights};
use crate::numerics::{derive_seed, seeded_rng, Bound, ScatterMean, Tape, Tensor, Var};
use crate::projection::{compute_validity_mask, render_points};
use crate::response::{filter_soft_labels, AnchorTargets, MatchingConfig, SoftLabelSet, ThresholdPolicy};
use crate::scene_sim::AlignmentHead;

const TRAIN_STREAM: u64 = 0x7261;
const EVAL_STREAM: u64 = 0x6576;
const STUDENT_STREAM: u64 = 0x5354;

/// Loss values after one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub response: f64,
    pub scene: f64,
    pub roi: f64,
    /// Fusion weights in effect for this step; 1 when the branch pair is
    /// disabled.
    pub alpha: f64,
    pub beta: f64,
    pub branches: BranchLosses,
}

/// Imitation losses of each branch before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchLosses {
    pub scene_global: f64,
    pub scene_local: Option<f64>,
    pub roi_global: f64,
    pub roi_local: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,L,L_response,L_scene,L_RoI,alpha,beta";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.total, self.response, self.scene, self.roi, self.alpha, self.beta
        )
    }
}

pub fn metrics_csv(reports: &[LossReport]) -> String {
    let mut out = format!("{}\n", LossReport::CSV_HEADER);
    for r in reports {
        writeln!(out, "{}", r.csv_row()).expect("writing to a String");
    }
    out
}

/// A scene with every teacher-side target precomputed.
pub struct TrainingSample {
    pub scene: SyntheticScene,
    pub teacher: TeacherOutput,
    pub soft_labels: SoftLabelSet,
    image: Tensor,
    lift: Rc<ScatterMean>,
    scene_target: Tensor,
    scene_mask: Vec<bool>,
    roi_target: Tensor,
    roi_mask: Vec<bool>,
    targets: Rc<AnchorTargets>,
}

impl TrainingSample {
    pub fn new(
        scene: SyntheticScene,
        teacher: TeacherOutput,
        grid: &BevGrid,
        policy: &ThresholdPolicy,
    ) -> Result<Self> {
        let rendered = render_points(&teacher.scene, &scene.camera, scene.height(), scene.width())?;
        let scene_mask = compute_validity_mask(&rendered);
        let (roi_map, roi_mask) = grid.teacher_roi_map(&teacher)?;
        let soft_labels = filter_soft_labels(&teacher.predictions, policy)?;
        let targets = AnchorTargets::from_labels(&grid.anchors(), &soft_labels.boxes, &MatchingConfig::default())?;
        Ok(Self {
            image: scene.image.to_tensor(),
            lift: Rc::new(grid.lift(&scene)?),
            scene_target: rendered.into_tensor(),
            scene_mask: scene_mask.as_slice().to_vec(),
            roi_target: roi_map.into_tensor(),
            roi_mask: roi_mask.as_slice().to_vec(),
            targets: Rc::new(targets),
            scene,
            teacher,
            soft_labels,
        })
    }

    pub fn scene_valid_pixels(&self) -> usize {
        self.scene_mask.iter().filter(|&&m| m).count()
    }

    pub fn roi_valid_cells(&self) -> usize {
        self.roi_mask.iter().filter(|&&m| m).count()
    }

    pub fn positive_anchors(&self) -> usize {
        self.targets.positives()
    }
}

struct Recorded {
    total: Var,
    response: Var,
    scene: Var,
    roi: Var,
    branches: [Option<Var>; 4],
    detector: Bound,
    heads: Vec<Bound>,
    fusion: Bound,
}

fn imitation(
    tape: &mut Tape,
    head: &mut AlignmentHead,
    features: Var,
    target: &Tensor,
    mask: &[bool],
) -> Result<(Var, Bound)> {
    let bound = head.bind(tape);
    let aligned = head.forward(tape, &bound, features)?;
    Ok((tape.masked_l1(aligned, target, mask)?, bound))
}

fn record(tape: &mut Tape, student: &mut StudentModel, sample: &TrainingSample, weights: LossWeights) -> Result<Recorded> {
    let detector = student.detector.params().bind(tape);
    let fusion = student.fusion.bind(tape);
    let image = tape.constant(sample.image.clone());
    let out = student.detector.forward(tape, &detector, image, &sample.lift, Pass::Training)?;
    let response = tape.response_loss(out.residuals, out.objectness, Rc::clone(&sample.targets))?;

    let heads: &mut AlignmentHeads = student
        .alignment
        .as_mut()
        .ok_or_else(|| Error::invalid("training needs alignment heads"))?;
    let mut bounds = Vec::new();
    let scene_global = out.scene_global.expect("training pass records scene features");
    let (l_sg, b) = imitation(tape, &mut heads.scene_global, scene_global, &sample.scene_target, &sample.scene_mask)?;
    bounds.push(b);
    let (l_rg, b) = imitation(tape, &mut heads.roi_global, out.roi_global, &sample.roi_target, &sample.roi_mask)?;
    bounds.push(b);

    let mut branches = [Some(l_sg), None, Some(l_rg), None];
    let (scene, roi) = match (out.scene_local, out.roi_local, heads.scene_local.as_mut(), heads.roi_local.as_mut()) {
        (Some(sl), Some(rl), Some(scene_head), Some(roi_head)) => {
            let (l_sl, b) = imitation(tape, scene_head, sl, &sample.scene_target, &sample.scene_mask)?;
            bounds.push(b);
            let (l_rl, b) = imitation(tape, roi_head, rl, &sample.roi_target, &sample.roi_mask)?;
            bounds.push(b);
            branches[1] = Some(l_sl);
            branches[3] = Some(l_rl);
            (
                tape.fuse(l_sg, l_sl, fusion.var("raw_alpha"))?,
                tape.fuse(l_rg, l_rl, fusion.var("raw_beta"))?,
            )
        }
        (None, None, _, _) => (l_sg, l_rg),
        _ => return Err(Error::invalid("alignment heads do not match the detector's branch layout")),
    };
    let total = total_loss_on_tape(tape, response, scene, roi, weights)?;
    Ok(Recorded {
        total,
        response,
        scene,
        roi,
        branches,
        detector,
        heads: bounds,
        fusion,
    })
}

fn report(tape: &Tape, rec: &Recorded, student: &StudentModel, step: usize) -> Result<LossReport> {
    for (name, var) in [
        ("L_response", rec.response),
        ("L_scene", rec.scene),
        ("L_RoI", rec.roi),
        ("L", rec.total),
    ] {
        if !tape.scalar(var).is_finite() {
            return Err(Error::NonFinite {
                component: format!("{name} at step {step} = {}", tape.scalar(var)),
            });
        }
    }
    let fusion = student.fusion_weights();
    let (alpha, beta) = if student.detector.branch_pair() {
        (fusion.alpha(), fusion.beta())
    } else {
        (1.0, 1.0)
    };
    let branch = |i: usize| rec.branches[i].map(|v| tape.scalar(v));
    Ok(LossReport {
        step,
        branches: BranchLosses {
            scene_global: branch(0).expect("always recorded"),
            scene_local: branch(1),
            roi_global: branch(2).expect("always recorded"),
            roi_local: branch(3),
        },
        total: tape.scalar(rec.total),
        response: tape.scalar(rec.response),
        scene: tape.scalar(rec.scene),
        roi: tape.scalar(rec.roi),
        alpha,
        beta,
    })
}

/// One plain gradient-descent update of the detector, alignment heads and
/// fusion weights. The teacher-side targets in `sample` are read only.
pub fn train_step(
    student: &mut StudentModel,
    sample: &TrainingSample,
    weights: LossWeights,
    learning_rate: f64,
    step: usize,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let rec = record(&mut tape, student, sample, weights)?;
    let loss = report(&tape, &rec, student, step)?;
    let grads = tape.backward(rec.total);

    let detector = student.detector.params_mut();
    detector.zero_grad();
    detector.accumulate(&rec.detector, &grads);
    detector.descend(learning_rate);
    student.fusion.zero_grad();
    student.fusion.accumulate(&rec.fusion, &grads);
    student.fusion.descend(learning_rate);
    let heads = student.alignment.as_mut().expect("checked while recording");
    for (head, bound) in heads.iter_mut().zip(&rec.heads) {
        let p = head.params_mut();
        p.zero_grad();
        p.accumulate(bound, &grads);
        p.descend(learning_rate);
    }
    if !student.detector.params().is_finite() {
        return Err(Error::NonFinite {
            component: format!("detector parameters after step {step}"),
        });
    }
    Ok(loss)
}

/// Losses of `student` on `sample` without changing it.
pub fn probe_losses(student: &StudentModel, sample: &TrainingSample, weights: LossWeights, step: usize) -> Result<LossReport> {
    let mut scratch = student.clone();
    let mut tape = Tape::new();
    let rec = record(&mut tape, &mut scratch, sample, weights)?;
    report(&tape, &rec, &scratch, step)
}

fn scenes(cfg: &HarnessConfig, stream: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    let scene_cfg = SceneConfig::from(cfg);
    let base = derive_seed(cfg.seed, stream);
    (0..count)
        .map(|i| generate_scene(derive_seed(base, i as u64), i as u32, &scene_cfg))
        .collect()
}

pub fn training_scenes(cfg: &HarnessConfig) -> Result<Vec<SyntheticScene>> {
    scenes(cfg, TRAIN_STREAM, cfg.train_scenes)
}

/// Held-out scenes drawn from a stream disjoint from the training scenes.
pub fn evaluation_scenes(cfg: &HarnessConfig) -> Result<Vec<SyntheticScene>> {
    scenes(cfg, EVAL_STREAM, cfg.eval_scenes)
}

pub fn initial_student(cfg: &HarnessConfig) -> Result<StudentModel> {
    StudentModel::new(cfg, &mut seeded_rng(derive_seed(cfg.seed, STUDENT_STREAM)))
}

pub fn prepare_samples(cfg: &HarnessConfig, scenes: Vec<SyntheticScene>) -> Result<Vec<TrainingSample>> {
    let grid = BevGrid::from_config(cfg)?;
    let policy = cfg.threshold_policy()?;
    scenes
        .into_iter()
        .map(|scene| {
            let teacher = teacher_forward(&scene, cfg.teacher_noise)?;
            TrainingSample::new(scene, teacher, &grid, &policy)
        })
        .collect()
}

/// Everything a finished run produced.
pub struct TrainingRun {
    pub student: StudentModel,
    pub reports: Vec<LossReport>,
    /// Losses of the trained student on the step-0 sample.
    pub final_probe: LossReport,
    pub teacher_checksum_before: String,
    pub teacher_checksum_after: String,
}

impl TrainingRun {
    pub fn teacher_unchanged(&self) -> bool {
        self.teacher_checksum_before == self.teacher_checksum_after
    }
}

fn checksum(samples: &[TrainingSample]) -> Result<String> {
    let outputs: Vec<TeacherOutput> = samples.iter().map(|s| s.teacher.clone()).collect();
    teacher_checksum(&outputs)
}

/// Trains `student` for `cfg.steps` steps over `samples`, visiting them in
/// order and wrapping around. `on_step` sees each report as it is made.
pub fn train_with(
    cfg: &HarnessConfig,
    mut student: StudentModel,
    samples: &[TrainingSample],
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainingRun> {
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    let weights = LossWeights::new(cfg.lambda_scene, cfg.lambda_roi)?;
    let before = checksum(samples)?;
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let r = train_step(&mut student, &samples[step % samples.len()], weights, cfg.learning_rate, step)?;
        on_step(&r);
        reports.push(r);
    }
    let final_probe = probe_losses(&student, &samples[0], weights, cfg.steps)?;
    Ok(TrainingRun {
        student,
        reports,
        final_probe,
        teacher_checksum_before: before,
        teacher_checksum_after: checksum(samples)?,
    })
}

/// Generates the training scenes and student for `cfg.seed` and trains.
pub fn train(cfg: &HarnessConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let samples = prepare_samples(cfg, training_scenes(cfg)?)?;
    train_with(cfg, initial_student(cfg)?, &samples, |_| {})
}
