use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Where the end-of-sequence token may be emitted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EosRule {
    /// At any step, including the first (empty outputs are legal).
    #[default]
    Anywhere,
    /// At any step except the first.
    NotFirst,
    /// Never; every sequence runs to `max_len`.
    Never,
}

/// Ordinary tokens `0..size` plus an end-of-sequence token with id `size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
    max_len: usize,
    eos_rule: EosRule,
}

impl Vocabulary {
    pub fn new(size: u32, max_len: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidTask("vocabulary size must be at least 1".into()));
        }
        if max_len == 0 {
            return Err(Error::InvalidTask("max_len must be at least 1".into()));
        }
        Ok(Self { size, max_len, eos_rule: EosRule::Anywhere })
    }

    pub fn with_eos_rule(mut self, rule: EosRule) -> Self {
        self.eos_rule = rule;
        self
    }

    pub fn eos_rule(&self) -> EosRule {
        self.eos_rule
    }

    /// Whether eos is a legal next token after a non-terminal prefix of this length.
    pub fn eos_allowed(&self, prefix_len: usize) -> bool {
        match self.eos_rule {
            EosRule::Anywhere => true,
            EosRule::NotFirst => prefix_len > 0,
            EosRule::Never => false,
        }
    }

    /// Number of ordinary tokens.
    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.size
    }

    /// Maximum number of ordinary tokens in a sequence.
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Ordinary tokens plus eos.
    pub fn alphabet(&self) -> usize {
        self.size as usize + 1
    }

    /// Whether a sequence with these tokens has no outgoing edges.
    pub fn is_terminal(&self, tokens: &[Token]) -> bool {
        tokens.last() == Some(&self.eos()) || tokens.len() >= self.max_len
    }

    /// Number of terminal sequences.
    pub fn terminal_count(&self) -> u128 {
        let v = self.size as u128;
        let mut total = 0u128;
        let mut pow = 1u128;
        for len in 0..self.max_len {
            if self.eos_allowed(len) {
                total = total.saturating_add(pow);
            }
            pow = pow.saturating_mul(v);
        }
        total.saturating_add(pow)
    }
}

/// A conditioning input: an id into the task's condition set plus descriptive tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub id: usize,
    #[serde(default)]
    pub tokens: Vec<Token>,
}

/// A generated prefix or complete output.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    terminal: bool,
}

impl TokenSequence {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates `tokens` against `vocab`: eos may only appear last, length is capped.
    pub fn from_tokens(vocab: &Vocabulary, tokens: Vec<Token>) -> Result<Self> {
        let eos = vocab.eos();
        for (i, &t) in tokens.iter().enumerate() {
            if t > eos {
                return Err(Error::Contract(format!("token {t} outside alphabet of {}", vocab.alphabet())));
            }
            if t == eos && i + 1 != tokens.len() {
                return Err(Error::Contract("eos must be the final token".into()));
            }
            if t == eos && !vocab.eos_allowed(i) {
                return Err(Error::Contract(format!("eos not allowed after {i} tokens")));
            }
        }
        let ordinary = tokens.iter().filter(|&&t| t != eos).count();
        if ordinary > vocab.max_len() {
            return Err(Error::Contract(format!(
                "{ordinary} ordinary tokens exceed max_len {}",
                vocab.max_len()
            )));
        }
        if ordinary == vocab.max_len() && tokens.last() == Some(&eos) {
            return Err(Error::Contract("sequence at max_len is already terminal; eos cannot follow".into()));
        }
        let terminal = vocab.is_terminal(&tokens);
        Ok(Self { tokens, terminal })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens without a trailing eos.
    pub fn body(&self, vocab: &Vocabulary) -> &[Token] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == vocab.eos() => rest,
            _ => &self.tokens,
        }
    }

    /// Appends one token, producing the child state.
    pub fn extend(&self, vocab: &Vocabulary, token: Token) -> Result<Self> {
        let mut next = self.clone();
        next.push(vocab, token)?;
        Ok(next)
    }

    pub fn push(&mut self, vocab: &Vocabulary, token: Token) -> Result<()> {
        if self.terminal {
            return Err(Error::Contract(format!("cannot extend terminal sequence {:?}", self.tokens)));
        }
        if token > vocab.eos() {
            return Err(Error::Contract(format!("token {token} outside alphabet of {}", vocab.alphabet())));
        }
        if token == vocab.eos() && !vocab.eos_allowed(self.tokens.len()) {
            return Err(Error::Contract(format!("eos not allowed after {} tokens", self.tokens.len())));
        }
        self.tokens.push(token);
        self.terminal = vocab.is_terminal(&self.tokens);
        Ok(())
    }

    /// Every state on the trajectory from the empty prefix to this sequence, inclusive.
    pub fn states(&self, vocab: &Vocabulary) -> Vec<TokenSequence> {
        (0..=self.tokens.len())
            .map(|n| {
                let tokens = self.tokens[..n].to_vec();
                let terminal = vocab.is_terminal(&tokens);
                TokenSequence { tokens, terminal }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(3, 3).unwrap()
    }

    #[test]
    fn extend_appends_and_flags_terminal() {
        let v = vocab();
        let a = TokenSequence::empty().extend(&v, 0).unwrap();
        assert_eq!(a.tokens(), &[0]);
        assert!(!a.is_terminal());

        let ab = a.extend(&v, 1).unwrap();
        let abe = ab.extend(&v, v.eos()).unwrap();
        assert_eq!(abe.tokens(), &[0, 1, 3]);
        assert!(abe.is_terminal());
    }

    #[test]
    fn extending_full_length_sequence_is_an_error() {
        let v = vocab();
        let abc = TokenSequence::from_tokens(&v, vec![0, 1, 2]).unwrap();
        assert!(abc.is_terminal());
        assert!(matches!(abc.extend(&v, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_malformed_sequences() {
        let v = vocab();
        assert!(TokenSequence::from_tokens(&v, vec![3, 0]).is_err());
        assert!(TokenSequence::from_tokens(&v, vec![0, 1, 2, 3]).is_err());
        assert!(TokenSequence::from_tokens(&v, vec![7]).is_err());
        assert!(TokenSequence::empty().extend(&v, 4).is_err());
        let never = v.with_eos_rule(EosRule::Never);
        assert!(TokenSequence::empty().extend(&never, 0).unwrap().extend(&never, 3).is_err());
    }

    #[test]
    fn terminal_count_matches_formula() {
        // lengths 0,1,2 with eos plus length 3 without: 1 + 3 + 9 + 27
        assert_eq!(vocab().terminal_count(), 40);
        assert_eq!(vocab().with_eos_rule(EosRule::NotFirst).terminal_count(), 39);
        assert_eq!(vocab().with_eos_rule(EosRule::Never).terminal_count(), 27);
    }

    #[test]
    fn states_walk_the_trajectory() {
        let v = vocab();
        let y = TokenSequence::from_tokens(&v, vec![2, 3]).unwrap();
        let states = y.states(&v);
        assert_eq!(states.len(), 3);
        assert!(states[..2].iter().all(|s| !s.is_terminal()));
        assert!(states[2].is_terminal());
        assert_eq!(y.body(&v), &[2]);
    }
}
