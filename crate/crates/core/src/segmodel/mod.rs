//! A small neural segmental data-to-text model: record encoder, record-masked
//! pointer decoder, transition scorer, granularity-regularized training loss
//! and constrained segment-by-segment decoding.

mod align;
mod checkpoint;
mod data;
mod decode;
mod model;
mod train;

pub use align::{boundary_counts, boundary_f1, reference_boundaries, trace_alignment, SegmentTrace, TokenAlignment};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry};
pub use data::{
    is_copy_slot, is_punct, read_jsonl, segment_faithful, slot_token, synth_data, write_jsonl, Example, SynthSpec,
    Vocab, EOS, SEG_END, SLOTS, UNK,
};
pub use decode::{
    constrained_decode, prior_logits, select_attention, select_loglik, selector_logits, vrs_select_decode, DecodeOptions, Decoded,
};
pub use model::{
    score_tables, train_loss, Encoded, LossParts, Record, RecordSet, SegModel, SegModelConfig, StepDist, MAX_RECORDS,
};
pub(crate) use model::GruIds;
pub use train::{evaluate, fit, fit_select, prepare, EpochLog, EvalReport, Pair, Selection, TrainConfig};

#[cfg(test)]
mod tests;
