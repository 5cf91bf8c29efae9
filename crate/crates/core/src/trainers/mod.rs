//! Training loops composed from the lattices and estimators: generalized EM
//! on lattice models, the variational content-selection step and iterative
//! back-translation on a toy transduction task.

mod bt;
mod em;
mod vrs;

pub use bt::{
    bt_backward_phase, bt_forward_phase, bt_init, bt_train, pseudo_pairs, write_bt_log, BtConfig, BtData, BtLogRow,
    BtModel, BtState, BtTask, Direction, SeqPair, SHIPPED_INIT_STEPS,
};
pub use em::{em_fit, em_loss_grad, EmFit, GradRoute, LatticeValues};
pub use vrs::{
    draw_nonempty_mask, overlap_labels, vrs_objective, vrs_objective_exact, vrs_surrogate, vrs_train_step, VrsConfig,
    VrsStepLog, VrsSurrogate, EPS_RATE_GIGAWORD, EPS_RATE_WIKIBIO, MAX_MASK_REDRAWS,
};
