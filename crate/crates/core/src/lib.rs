//! Word-adaptive frequency cepstral coefficients.
//!
//! The crate warps the short-time frequency axis with a single-knot monotone
//! cubic, extracts cepstra over the warped filterbank, scores utterances with
//! per-word left-to-right HMMs and measures how well native and non-native
//! score distributions separate. A shrinking-circle search over the knot
//! position finds the warp with the best separation.

use std::path::PathBuf;

pub mod config;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod hmm;
pub mod pipeline;
pub mod scales;
pub mod search;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Scales(#[from] scales::ScalesError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Hmm(#[from] hmm::HmmError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Search(#[from] search::SearchError),
    #[error("word {0:?} not found in corpus")]
    MissingWord(String),
    #[error("missing runs: {}", .0.join(", "))]
    MissingRuns(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Failure classes, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use eval::EvalError as E;
        use features::FeatureError as F;
        match self {
            Error::Usage(_) => ErrorClass::Usage,
            Error::Features(F::DegenerateFilter { .. })
            | Error::Hmm(_)
            | Error::Eval(E::Degenerate(_) | E::Orientation { .. } | E::Numerical(_) | E::Hmm { .. })
            | Error::Search(search::SearchError::AllCandidatesFailed { .. } | search::SearchError::Terminated) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }
}

/// Mixes `parts` into `base` with SplitMix64 steps. Used everywhere a
/// sub-seed is needed so that every random stream flows from one run seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
