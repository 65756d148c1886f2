//! Named, reproducible task instances.

use super::sequence::{Condition, EosRule};
use super::task::{ModePattern, RefModelSpec, RewardSpec, TaskSpec};
use crate::error::{Error, Result};

pub const PRESET_NAMES: &[&str] = &["eight-modes", "single-mode", "count", "zero-reward", "two-token"];

pub fn by_name(name: &str) -> Result<TaskSpec> {
    match name {
        "eight-modes" => Ok(eight_modes()),
        "single-mode" => Ok(single_mode()),
        "count" => Ok(count()),
        "zero-reward" => Ok(zero_reward()),
        "two-token" => Ok(two_token()),
        other => Err(Error::Config(format!(
            "unknown task preset `{other}` (known: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

fn conditions(n: usize, size: u32) -> Vec<Condition> {
    (0..n).map(|id| Condition { id, tokens: vec![(2 * id) as u32 % size, (2 * id + 1) as u32 % size] }).collect()
}

/// The eight trigram modes used by `eight-modes`.
pub fn eight_mode_patterns() -> Vec<ModePattern> {
    [[0, 1, 2], [2, 3, 4], [4, 5, 0], [1, 3, 5], [5, 2, 0], [3, 0, 4], [1, 4, 2], [5, 3, 1]]
        .into_iter()
        .map(|p| ModePattern::new(p.to_vec()))
        .collect()
}

/// V=6, T=6, eight trigram modes, beta = 0.05.
pub fn eight_modes() -> TaskSpec {
    TaskSpec {
        name: "eight-modes".into(),
        vocab_size: 6,
        max_len: 6,
        eos: EosRule::Anywhere,
        beta: 0.05,
        conditions: conditions(2, 6),
        ref_model: RefModelSpec::Seeded { seed: 7, spread: 1.0 },
        reward: RewardSpec::Mode { patterns: eight_mode_patterns(), r_hi: 0.1, r_lo: 0.0 },
    }
}

/// Same space as `eight-modes` with a single rewarded trigram.
pub fn single_mode() -> TaskSpec {
    TaskSpec {
        name: "single-mode".into(),
        reward: RewardSpec::Mode { patterns: vec![ModePattern::new(vec![0, 1, 2])], r_hi: 1.0, r_lo: 0.0 },
        ..eight_modes()
    }
}

pub fn count() -> TaskSpec {
    TaskSpec {
        name: "count".into(),
        vocab_size: 3,
        max_len: 4,
        eos: EosRule::Anywhere,
        beta: 1.0,
        conditions: conditions(2, 3),
        ref_model: RefModelSpec::Seeded { seed: 11, spread: 1.0 },
        reward: RewardSpec::Count { alpha: 0.5, token: 1, cap: 2 },
    }
}

pub fn zero_reward() -> TaskSpec {
    TaskSpec {
        name: "zero-reward".into(),
        vocab_size: 3,
        max_len: 3,
        eos: EosRule::Anywhere,
        beta: 1.0,
        conditions: conditions(1, 3),
        ref_model: RefModelSpec::Seeded { seed: 3, spread: 1.0 },
        reward: RewardSpec::Count { alpha: 0.0, token: 0, cap: 1 },
    }
}

/// V=2, fixed length 2, uniform reference, `r(aa) = ln 3`.
pub fn two_token() -> TaskSpec {
    TaskSpec {
        name: "two-token".into(),
        vocab_size: 2,
        max_len: 2,
        eos: EosRule::Never,
        beta: 1.0,
        conditions: vec![Condition { id: 0, tokens: vec![] }],
        ref_model: RefModelSpec::Uniform,
        reward: RewardSpec::Mode { patterns: vec![ModePattern::new(vec![0, 0])], r_hi: 3f64.ln(), r_lo: 0.0 },
    }
}
