//! Region-level table filling with mean-teacher domain adaptation for
//! aspect sentiment triplet extraction, at desk scale.
//!
//! Pipeline: [`corpus`] sentences are encoded into an `n × n` relation table
//! by [`encoder`], corner cells are scored and paired into rectangles by
//! [`detector`], and [`trainer`] fits a student/teacher pair with the
//! objectives in [`losses`]. [`eval`] scores predictions at sentence level.

pub mod corpus;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tagging;
pub mod tensor;
pub mod trainer;

pub use corpus::{
    load_dataset, parse_aste_line, serialize_aste_line, synth_corpus, write_dataset, Domain,
    DomainLexicon, LabeledSentence, Polarity, Sentence, Span, SynthConfig, SynthCorpus, Triplet,
};
pub use detector::{DetectorParams, RegionProposal, TaskMode};
pub use encoder::{EncoderConfig, EncoderParams, FeatureMap};
pub use error::{Error, Result};
pub use eval::{audit_pseudo_labels, sentence_f1, triplet_prf, AuditCounts, ErrorCategory, Prf};
pub use losses::{LossBreakdown, MmdConfig};
pub use model::{Checkpoint, ModelParams};
pub use tagging::{CellLabel, CellTable, GoldRegion, Rect, RegionClass};
pub use tensor::Tensor;
pub use trainer::{Ablations, EmaCadence, EpochRecord, FitOutput, PseudoLabel, TrainConfig, Variant};
