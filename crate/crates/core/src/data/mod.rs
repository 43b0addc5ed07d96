//! Synthetic motion corpus: generators, the rule-based oracle, normalization,
//! annotation merging and on-disk formats.

pub mod corpus;
pub mod generator;
pub mod io;
pub mod merge;
pub mod normalize;
pub mod oracle;
pub mod types;

pub use corpus::{generate_split, CorpusConfig, SPLITS};
pub use generator::{generate_sequence, global_text, parse_script, Action, GeneratorConfig, ScriptSampler};
pub use merge::{merge_annotations, MergeReport};
pub use normalize::{denormalize, fit_normalization, normalize, NormalizationStats};
pub use oracle::{oracle_label, OracleConfig};
pub use types::{feature, DatasetRecord, FrameLabelTrack, GlobalCondition, MotionSequence, Segment};
