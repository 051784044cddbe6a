use std::path::PathBuf;

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// Failures reading or writing on-disk artifacts.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{what} at byte offset {offset}: {msg}")]
    Bytes {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("{what} line {line}: {msg}")]
    Line {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("unsupported {what} version {found} (this build reads version {supported})")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error(transparent)]
    Core(#[from] ftp_core::Error),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
