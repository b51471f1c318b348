//! Active-learning laboratory for CTC sequence models.
//!
//! Query strategies (random, per-frame entropy, predicted-CTC confidence and
//! expected gradient length) score an unlabeled pool with a small frame
//! classifier; the harness selects, labels, retrains and evaluates, and the
//! `fisher` module checks numerically that the gradient-length score is the
//! trace of the per-candidate Fisher information.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`). Experiments run
//! in `f64`; the aliases below name the concrete types they use.

pub mod ctc;
pub mod dataio;
pub mod decode;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod scalar;
pub mod seqmodel;
pub mod strategies;

pub use ctc::{collapse, ctc_brute_force, ctc_loss, marginal_over_labels, CtcResult, LabelSeq, BLANK};
pub use decode::{beam_search, greedy_decode, top1, Hypothesis};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use seqmodel::{
    forward, loss_and_grad, softmax_rows, train, Alphabet, LogitLattice, ModelParams, ParamGroup, Shape,
    TrainConfig, Utterance,
};
pub use strategies::{ScoreRecord, StrategyConfig, StrategyKind};

/// Scalar type of every experiment.
pub type Real = f64;
pub type Params = ModelParams<Real>;
pub type Utt = Utterance<Real>;
pub type Lattice = LogitLattice<Real>;
pub type ProbMatrix = Matrix<Real>;
pub type Hyp = Hypothesis<Real>;
