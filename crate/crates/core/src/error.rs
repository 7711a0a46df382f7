use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("world generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("record {record}: bad magic bytes")]
    BadMagic { record: String },

    #[error("record {record}: format version {found}, expected {expected}")]
    Version { record: String, found: u32, expected: u32 },

    #[error("record {record}: truncated")]
    Truncated { record: String },

    #[error("record {record}: {reason}")]
    Corrupt { record: String, reason: String },

    #[error("manifest lists {expected} records but {found} were found")]
    CountMismatch { expected: usize, found: usize },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Contract(_) => "E_CONTRACT",
            Error::Shape(_) => "E_SHAPE",
            Error::Generation { .. } => "E_GENERATION",
            Error::BadMagic { .. } => "E_BAD_MAGIC",
            Error::Version { .. } => "E_VERSION",
            Error::Truncated { .. } => "E_TRUNCATED",
            Error::Corrupt { .. } => "E_CORRUPT",
            Error::CountMismatch { .. } => "E_COUNT_MISMATCH",
            Error::Manifest(_) => "E_MANIFEST",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::MissingCheckpoint(_) => "E_MISSING_CHECKPOINT",
            Error::Config(_) => "E_CONFIG",
            Error::EmptyDataset => "E_EMPTY_DATASET",
            Error::MissingFile(_) => "E_MISSING_FILE",
            Error::Stage { source, .. } => source.code(),
            Error::Io(_) => "E_IO",
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Error {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}
