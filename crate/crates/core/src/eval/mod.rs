mod embedder;
mod metrics;
mod report;

pub use embedder::{crop_features, labeled_crops, train_joint_embedder, EmbedderConfig, JointEmbedder, FEATURES};
pub use metrics::{cosine, diversity, fid, frame_accuracy, m2m_score, m2t_score, r_precision, r_precision_against, Interval, POOL};
pub use report::{evaluate_model, EvalConfig, MetricReport, MetricRow, MetricSample, Sampled, REPORT_SCHEMA_VERSION};
