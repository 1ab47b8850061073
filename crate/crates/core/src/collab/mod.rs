//! Single-task models and the phase schedule that trains them as
//! collaborators.
//!
//! In the preparation phase every model trains alone with a zero
//! collaborator slot. In each later phase every model in turn trains one
//! epoch as the target while the others, frozen at their previous-phase
//! state, supply encoder states that are pooled into its slot.

mod model;
mod phase;

pub use model::{aggregate, AggregatedSignal, Forward, ModelDims, RowDropout, RowInput, Slot, Stm, ALPHA};
pub use phase::{
    collaborator_signals, continue_collabonet, evaluate_split, other_type_spans, predict_split,
    run_collab_phase, run_preparation_phase, train_collabonet, train_epoch, CollaboState, EpochRecord, MetricsRecord,
    PrepOutcome, TrainOutcome,
};
