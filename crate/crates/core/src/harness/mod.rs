//! End-to-end demonstration on synthetic scenes: scene generation, a
//! frozen analytic teacher, a small trainable student, the training loop
//! and evaluation.

pub mod config;
pub mod eval;
pub mod gradients;
pub mod io;
pub mod scene;
pub mod student;
pub mod teacher;
pub mod train;

pub use config::HarnessConfig;
pub use eval::{class_ap, evaluate, evaluate_predictions};
pub use gradients::{gradient_suite, GradientCase};
pub use io::{read_scenes, write_scene, Checkpoint};
pub use scene::{generate_scene, SceneConfig, ScenePoint, Surface, SyntheticScene};
pub use student::{BevGrid, Detector, OracleDetector, StudentModel};
pub use teacher::{teacher_checksum, teacher_forward, TeacherOutput};
pub use train::{
    evaluation_scenes, initial_student, metrics_csv, prepare_samples, probe_losses, train, train_step, train_with,
    training_scenes, LossReport, TrainingRun, TrainingSample,
};
