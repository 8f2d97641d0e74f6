//! General mellowmax (GM) operators for tree-structured compositional
//! generation: closed-form regularized backups, exact backward-recursion
//! solving, trajectory-consistency (VarGrad) training of tabular Q-functions,
//! the reward-uncertainty sets dual to each regularizer, and benchmark tasks
//! with diversity-aware evaluation.

pub mod error;
pub mod output;
pub mod regularizers;
pub mod solver;
pub mod space;
pub mod tasks;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use regularizers::{GmParams, RegularizerKind};
pub use solver::{solve_backward, terminal_distribution, QValues, Solution};
pub use space::{RewardModel, SequenceSpace, State, Token, Trajectory};
pub use tasks::{BitSequenceTask, EvalProtocol, EvalReport, RewardTable};
pub use train::{train, QFunction, TrainConfig, TrainLog};
pub use uncertainty::{Membership, Region, UncertaintySetSpec};
