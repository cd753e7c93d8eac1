//! Minimal reverse-mode differentiation and the Adam optimizer.

mod fd;
mod params;
mod real;
mod tape;

pub use fd::{finite_diff_grad, fraction_within, relative_error};
pub use params::{adam_step, AdamHyper, GroupGrads, GroupId, ParamGroup, ParamStore};
pub use real::{Mat, Real};
pub use tape::{huber, softplus, BackwardCtx, CustomOp, NodeId, Tape, TapeGrads};
