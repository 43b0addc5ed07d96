//! Text side of the model: label embedding, PCA compression and decoding.

pub mod database;
pub mod encoder;
pub mod pca;

pub use database::{build_database, embeddings_to_track, knn_decode, track_to_embeddings, EmbeddingDatabase};
pub use encoder::{embed_label, embed_texts, EncoderSpec, HashEncoder, TextEncoder};
pub use pca::{fit_pca, PcaModel};
