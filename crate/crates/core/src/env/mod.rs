//! Conditional sequence-generation environment: prefix-tree states, synthetic
//! reference models and rewards, and the exact enumeration oracle.

mod enumerate;
pub mod presets;
mod sequence;
mod task;

pub use enumerate::{
    enumerate, enumerate_with_limit, EnumerationExport, EnumerationResult, PrefixFlow, TerminalEntry,
    DEFAULT_ENUMERATION_LIMIT,
};
pub(crate) use enumerate::check_budget;
pub use sequence::{Condition, EosRule, Token, TokenSequence, Vocabulary};
pub(crate) use task::sample_index;
pub use task::{BigramRows, ModePattern, RefModelSpec, RewardSpec, SyntheticTask, TaskSpec};
