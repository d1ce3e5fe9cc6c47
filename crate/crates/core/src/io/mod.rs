//! On-disk formats shared by the library and the CLI.

pub mod container;
pub mod records;

pub use records::{
    decode_records, encode_records, read_embeddings_csv, read_ensemble_manifest, read_records_csv,
    write_embeddings_csv, write_ensemble_manifest, write_records_csv, write_scores_csv, ManifestEntry, RecordSet,
    ScoreRow,
};
