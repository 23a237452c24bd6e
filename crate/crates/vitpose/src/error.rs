use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vitpose_core::Error),
    #[error("JSON parse error at byte {offset}: {msg}")]
    Json { offset: usize, msg: String },
    #[error("not a checkpoint: expected magic \"VPCK\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated checkpoint: need {expected} bytes, file has {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("annotation {annotation_id}: expected {expected} keypoint values, found {found}")]
    Arity {
        annotation_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Converts a `serde_json` error into one that carries the byte offset
    /// into `text`.
    pub(crate) fn json(text: &str, e: serde_json::Error) -> Error {
        Error::Json {
            offset: byte_offset(text, e.line(), e.column()),
            msg: e.to_string(),
        }
    }
}

/// Byte offset of a 1-based `(line, column)` position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_count_bytes_across_lines() {
        let text = "{\n  \"a\": 1,\n  oops\n}";
        let e = serde_json::from_str::<serde_json::Value>(text).unwrap_err();
        let Error::Json { offset, .. } = Error::json(text, e) else { panic!() };
        assert_eq!(&text[offset..offset + 1], "o");
    }
}
