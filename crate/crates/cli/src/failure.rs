use std::path::{Path, PathBuf};
use std::process::ExitCode;

use dse_core::Error;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Malformed(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Failure::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Folds clap's multi-line message into one line, dropping usage hints.
    pub fn usage_from_clap(e: &clap::Error) -> Self {
        let text = e.render().to_string();
        let msg = text
            .lines()
            .map(str::trim)
            .filter(|l| {
                !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information")
            })
            .collect::<Vec<_>>()
            .join(" ");
        Failure::Usage(msg.trim_start_matches("error: ").to_string())
    }

    pub fn kind(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 2),
            Failure::Io { .. } => ("io", 3),
            Failure::Malformed(_) => ("format", 4),
            Failure::Core(e) => match e {
                Error::Io { .. } => ("io", 3),
                Error::Parse { .. } => ("parse", 4),
                Error::Image { .. } => ("image", 4),
                Error::Format(_) => ("format", 4),
                Error::Config(_) => ("config", 5),
                Error::Dimension { .. } => ("dimension", 5),
                Error::Validation(_) => ("validation", 6),
                Error::UnknownId(_) => ("unknown_id", 6),
                Error::Divergence { .. } => ("divergence", 7),
            },
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Malformed(m) => m.clone(),
            Failure::Io { path, source } => format!("{}: {source}", path.display()),
            Failure::Core(e) => e.to_string(),
        }
    }

    pub fn report(&self) -> ExitCode {
        let (kind, code) = self.kind();
        let msg = self.message().replace('\n', " ");
        eprintln!("error kind={kind} code={code} msg={msg:?}");
        ExitCode::from(code)
    }
}
