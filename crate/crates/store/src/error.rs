use std::io;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("conflict on {table}/{key}: {reason}")]
    Conflict { table: String, key: String, reason: String },
    #[error("integrity violation: {0}")]
    IntegrityViolation(String),
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("store is unavailable after a failed write; reopen it")]
    Poisoned,
    #[error("injected crash")]
    InjectedCrash,
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;
