//! CTC objective, decoding with shallow fusion, WER and supervised training.

pub mod ctc;
pub mod decode;
pub mod fusion;
pub mod lm;
pub mod train;
pub mod wer;

pub use ctc::{ctc_loss, ctc_loss_and_grad, ctc_loss_var, log_likelihood, min_frames, CtcResult};
pub use decode::{
    beam_decode_fused, decode_records_from_jsonl, decode_records_to_jsonl, fused_score, greedy_decode, DecodeRecord,
    FusionParams,
};
pub use fusion::{dev_wer, tune_fusion, DevLogits, FusionSearch, FusionSearchConfig, FusionTrial};
pub use lm::CharNgramLm;
pub use train::{
    ctc_logits, evaluate_wer, infer_logits, train_supervised, train_with_batches, transcribe, AsrModel, InitMode, SupervisedConfig,
    TrainLog,
};
pub use wer::{edit_distance, wer, wer_stats, WerStats};
