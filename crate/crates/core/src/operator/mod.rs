//! Neural operator from boundary codes to density paths, its training loop
//! against fixed-coefficient solves, and lattice inference.

mod infer;
mod model;
mod train;

pub use infer::{infer_equilibrium, Inference};
pub use model::{OperatorArch, OperatorModel};
pub use train::{
    held_out_loss, held_out_samples, loss_pino, loss_pino_grad, oracle_l1, train_pionm, train_pionm_with, warm_start_from, NfTeacher,
    OperatorSession, OperatorTrainConfig, OracleTeacher, SessionRecord, SessionReport, Teacher, TeacherOutput,
    TrainSample,
};
