//! Fixed-length samplers, recognizers and completion enumeration for the
//! three symbolic languages: `WW` (copy), k-Dyck (well-nested brackets) and
//! k-Dyck Shuffle (per-type balance with crossing allowed).
//!
//! Symbol layout for the bracket languages: ids `[0, k)` are openers, ids
//! `[k, 2k)` are closers, and opener `i` pairs with closer `k + i`. `WW` uses
//! the whole alphabet `[0, vocab_size)`. The id `vocab_size` is reserved for
//! the mask symbol.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Symbol id. Corpora serialize ids as little-endian `u16`.
pub type Symbol = u16;

/// Largest supported masked-position count for completion enumeration.
pub const MAX_ENUMERATED_MASKS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("invalid grammar spec: {0}")]
    InvalidSpec(String),
    #[error("sequence length {0} is odd; every language needs an even length")]
    OddLength(usize),
    #[error("sequence has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("symbol {symbol} at position {position} is outside the alphabet")]
    SymbolOutOfRange { position: usize, symbol: Symbol },
    #[error("sequence has no maskable positions")]
    NothingToMask,
    #[error("mask ratio {0} is outside (0, 1]")]
    InvalidMaskRatio(f64),
    #[error("instance too large: {masked} masked positions exceed the limit of {limit}")]
    InstanceTooLarge { masked: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Language {
    WW,
    Dyck,
    DyckShuffle,
}

impl Language {
    pub fn name(self) -> &'static str {
        match self {
            Language::WW => "ww",
            Language::Dyck => "dyck",
            Language::DyckShuffle => "dyck-shuffle",
        }
    }

    pub fn is_bracket(self) -> bool {
        !matches!(self, Language::WW)
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Language {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ww" => Ok(Language::WW),
            "dyck" | "k-dyck" => Ok(Language::Dyck),
            "dyck-shuffle" | "shuffle" | "k-dyck-shuffle" => Ok(Language::DyckShuffle),
            other => Err(GrammarError::InvalidSpec(format!(
                "unknown language `{other}`"
            ))),
        }
    }
}

/// Which language to generate and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub language: Language,
    /// Bracket-pair count; ignored by `WW`.
    pub k: usize,
    /// Alphabet size, excluding the mask symbol.
    pub vocab_size: usize,
    pub p_open: f64,
    pub seq_len: usize,
}

impl GrammarSpec {
    pub const DEFAULT_K: usize = 64;
    pub const DEFAULT_VOCAB: usize = 128;
    pub const DEFAULT_P_OPEN: f64 = 0.6;

    /// k-Dyck over `k` pairs with the default opening probability.
    pub fn dyck(k: usize, seq_len: usize) -> Self {
        GrammarSpec {
            language: Language::Dyck,
            k,
            vocab_size: 2 * k,
            p_open: Self::DEFAULT_P_OPEN,
            seq_len,
        }
    }

    pub fn dyck_shuffle(k: usize, seq_len: usize) -> Self {
        GrammarSpec {
            language: Language::DyckShuffle,
            ..Self::dyck(k, seq_len)
        }
    }

    pub fn ww(vocab_size: usize, seq_len: usize) -> Self {
        GrammarSpec {
            language: Language::WW,
            k: vocab_size / 2,
            vocab_size,
            p_open: Self::DEFAULT_P_OPEN,
            seq_len,
        }
    }

    /// The default configuration for `language` at length `seq_len`.
    pub fn default_for(language: Language, seq_len: usize) -> Self {
        match language {
            Language::WW => Self::ww(Self::DEFAULT_VOCAB, seq_len),
            Language::Dyck => Self::dyck(Self::DEFAULT_K, seq_len),
            Language::DyckShuffle => Self::dyck_shuffle(Self::DEFAULT_K, seq_len),
        }
    }

    /// The reserved mask id.
    pub fn mask_id(&self) -> Symbol {
        self.vocab_size as Symbol
    }

    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.seq_len == 0 {
            return Err(GrammarError::InvalidSpec("seq_len must be positive".into()));
        }
        if self.seq_len % 2 == 1 {
            return Err(GrammarError::OddLength(self.seq_len));
        }
        if self.vocab_size == 0 || self.vocab_size >= Symbol::MAX as usize {
            return Err(GrammarError::InvalidSpec(format!(
                "vocab_size {} must be in [1, {})",
                self.vocab_size,
                Symbol::MAX
            )));
        }
        if self.language.is_bracket() {
            if self.k == 0 {
                return Err(GrammarError::InvalidSpec("k must be positive".into()));
            }
            if self.vocab_size != 2 * self.k {
                return Err(GrammarError::InvalidSpec(format!(
                    "{} needs vocab_size = 2k, got vocab_size {} with k {}",
                    self.language, self.vocab_size, self.k
                )));
            }
            if !(self.p_open > 0.0 && self.p_open < 1.0) {
                return Err(GrammarError::InvalidSpec(format!(
                    "p_open {} must be in (0, 1)",
                    self.p_open
                )));
            }
        }
        Ok(())
    }

    pub fn is_opener(&self, s: Symbol) -> bool {
        (s as usize) < self.k
    }

    pub fn is_closer(&self, s: Symbol) -> bool {
        let s = s as usize;
        s >= self.k && s < 2 * self.k
    }

    /// Bracket type of an opener or closer.
    pub fn bracket_type(&self, s: Symbol) -> usize {
        (s as usize) % self.k
    }

    /// Symbols that may fill a masked position.
    pub fn maskable_alphabet(&self) -> std::ops::Range<Symbol> {
        match self.language {
            Language::WW => 0..self.vocab_size as Symbol,
            _ => self.k as Symbol..(2 * self.k) as Symbol,
        }
    }
}

/// A fixed-length symbol sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<Symbol>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Symbol] {
        &self.0
    }
}

impl From<Vec<Symbol>> for TokenSequence {
    fn from(v: Vec<Symbol>) -> Self {
        TokenSequence(v)
    }
}

/// A sequence with some positions replaced by the mask symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub input_tokens: Vec<Symbol>,
    /// `(position, original symbol)`, strictly increasing by position.
    pub targets: Vec<(usize, Symbol)>,
    pub source: TokenSequence,
}

impl MaskedExample {
    /// Build from a source and a sorted, deduplicated position list.
    pub fn from_positions(source: TokenSequence, positions: &[usize], mask_id: Symbol) -> Self {
        let mut input_tokens = source.0.clone();
        let targets = positions
            .iter()
            .map(|&p| {
                input_tokens[p] = mask_id;
                (p, source.0[p])
            })
            .collect();
        MaskedExample {
            input_tokens,
            targets,
            source,
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets.iter().map(|&(p, _)| p)
    }

    /// Check the structural invariants against a mask id.
    pub fn is_consistent(&self, mask_id: Symbol) -> bool {
        if self.input_tokens.len() != self.source.len() {
            return false;
        }
        if self.targets.windows(2).any(|w| w[0].0 >= w[1].0) {
            return false;
        }
        let mut t = self.targets.iter().peekable();
        for (i, (&inp, &src)) in self.input_tokens.iter().zip(&self.source.0).enumerate() {
            match t.peek() {
                Some(&&(p, s)) if p == i => {
                    if inp != mask_id || s != src {
                        return false;
                    }
                    t.next();
                }
                _ => {
                    if inp != src {
                        return false;
                    }
                }
            }
        }
        t.next().is_none()
    }
}

fn check_len(spec: &GrammarSpec, seq: &[Symbol]) -> Result<(), GrammarError> {
    if seq.len() != spec.seq_len {
        return Err(GrammarError::LengthMismatch {
            expected: spec.seq_len,
            got: seq.len(),
        });
    }
    Ok(())
}

/// Draw one sequence of exactly `spec.seq_len` symbols.
pub fn sample_sequence(spec: &GrammarSpec, seed: u64) -> Result<TokenSequence, GrammarError> {
    spec.validate()?;
    let mut rng = rng::stream(seed);
    let n = spec.seq_len;
    let mut out = Vec::with_capacity(n);
    match spec.language {
        Language::WW => {
            let half = n / 2;
            for _ in 0..half {
                out.push(rng.random_range(0..spec.vocab_size) as Symbol);
            }
            out.extend_from_within(..half);
        }
        Language::Dyck => {
            let mut stack: Vec<usize> = Vec::with_capacity(n / 2);
            for i in 0..n {
                let remaining = n - i;
                let open = if stack.is_empty() {
                    true
                } else if stack.len() == remaining {
                    false
                } else {
                    rng.random_bool(spec.p_open)
                };
                if open {
                    let t = rng.random_range(0..spec.k);
                    stack.push(t);
                    out.push(t as Symbol);
                } else {
                    let t = stack.pop().expect("close on nonempty stack");
                    out.push((spec.k + t) as Symbol);
                }
            }
        }
        Language::DyckShuffle => {
            let mut outstanding = vec![0usize; spec.k];
            // Types with a nonzero outstanding count, kept in insertion order.
            let mut open_types: Vec<usize> = Vec::new();
            let mut depth = 0usize;
            for i in 0..n {
                let remaining = n - i;
                let open = if depth == 0 {
                    true
                } else if depth == remaining {
                    false
                } else {
                    rng.random_bool(spec.p_open)
                };
                if open {
                    let t = rng.random_range(0..spec.k);
                    if outstanding[t] == 0 {
                        open_types.push(t);
                    }
                    outstanding[t] += 1;
                    depth += 1;
                    out.push(t as Symbol);
                } else {
                    let j = rng.random_range(0..open_types.len());
                    let t = open_types[j];
                    outstanding[t] -= 1;
                    if outstanding[t] == 0 {
                        open_types.remove(j);
                    }
                    depth -= 1;
                    out.push((spec.k + t) as Symbol);
                }
            }
        }
    }
    Ok(TokenSequence(out))
}

/// Membership test. Symbols outside the alphabet are rejected.
pub fn recognize(spec: &GrammarSpec, seq: &TokenSequence) -> bool {
    recognize_slice(spec, &seq.0)
}

pub fn recognize_slice(spec: &GrammarSpec, seq: &[Symbol]) -> bool {
    if seq.len() != spec.seq_len || seq.iter().any(|&s| s as usize >= spec.vocab_size) {
        return false;
    }
    match spec.language {
        Language::WW => {
            if seq.len() % 2 == 1 {
                return false;
            }
            let (a, b) = seq.split_at(seq.len() / 2);
            a == b
        }
        Language::Dyck => {
            let mut stack = Vec::with_capacity(seq.len());
            for &s in seq {
                if spec.is_opener(s) {
                    stack.push(spec.bracket_type(s));
                } else if stack.pop() != Some(spec.bracket_type(s)) {
                    return false;
                }
            }
            stack.is_empty()
        }
        Language::DyckShuffle => {
            let mut counts = vec![0usize; spec.k];
            for &s in seq {
                let t = spec.bracket_type(s);
                if spec.is_opener(s) {
                    counts[t] += 1;
                } else if counts[t] == 0 {
                    return false;
                } else {
                    counts[t] -= 1;
                }
            }
            counts.iter().all(|&c| c == 0)
        }
    }
}

/// Positions eligible for masking under the close-only rule.
pub fn closer_positions(spec: &GrammarSpec, seq: &[Symbol]) -> Vec<usize> {
    seq.iter()
        .enumerate()
        .filter(|&(_, &s)| spec.is_closer(s))
        .map(|(i, _)| i)
        .collect()
}

/// Choose `ceil(ratio * candidates.len())` of `candidates` uniformly without
/// replacement; returned sorted.
pub fn choose_fraction(candidates: &[usize], ratio: f64, seed: u64) -> Vec<usize> {
    let count = ((ratio * candidates.len() as f64).ceil() as usize).min(candidates.len());
    let mut rng = rng::stream(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Mask a sequence for the masked-token objective.
///
/// Bracket languages mask `ceil(mask_ratio * #closers)` closing symbols.
/// `WW` masks the entire second half regardless of `mask_ratio`. The
/// sequence is not required to be valid, only well-formed, so shuffled
/// sequences can be masked with the same close-only rule.
pub fn build_mask(
    spec: &GrammarSpec,
    seq: &TokenSequence,
    mask_ratio: f64,
    seed: u64,
) -> Result<MaskedExample, GrammarError> {
    check_len(spec, &seq.0)?;
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(GrammarError::InvalidMaskRatio(mask_ratio));
    }
    let positions: Vec<usize> = match spec.language {
        Language::WW => (spec.seq_len / 2..spec.seq_len).collect(),
        _ => choose_fraction(&closer_positions(spec, &seq.0), mask_ratio, seed),
    };
    if positions.is_empty() {
        return Err(GrammarError::NothingToMask);
    }
    Ok(MaskedExample::from_positions(
        seq.clone(),
        &positions,
        spec.mask_id(),
    ))
}

/// Mask a uniformly random `ratio` of all positions.
pub fn build_random_mask(
    spec: &GrammarSpec,
    seq: &TokenSequence,
    ratio: f64,
    seed: u64,
) -> Result<MaskedExample, GrammarError> {
    check_len(spec, &seq.0)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(GrammarError::InvalidMaskRatio(ratio));
    }
    let all: Vec<usize> = (0..seq.len()).collect();
    let positions = choose_fraction(&all, ratio, seed);
    if positions.is_empty() {
        return Err(GrammarError::NothingToMask);
    }
    Ok(MaskedExample::from_positions(
        seq.clone(),
        &positions,
        spec.mask_id(),
    ))
}

/// Incremental validity check over a prefix, used to prune enumeration.
struct PrefixChecker<'a> {
    spec: &'a GrammarSpec,
}

impl PrefixChecker<'_> {
    /// Whether `seq[..upto]` can still be extended to a member.
    fn feasible(&self, seq: &[Symbol], upto: usize) -> bool {
        let spec = self.spec;
        let n = seq.len();
        match spec.language {
            Language::WW => {
                let half = n / 2;
                (half..upto).all(|i| seq[i] == seq[i - half] || seq[i - half] == spec.mask_id())
            }
            Language::Dyck => {
                let mut stack = Vec::new();
                for &s in &seq[..upto] {
                    if spec.is_opener(s) {
                        stack.push(spec.bracket_type(s));
                    } else if stack.pop() != Some(spec.bracket_type(s)) {
                        return false;
                    }
                }
                stack.len() <= n - upto
            }
            Language::DyckShuffle => {
                let mut counts = vec![0usize; spec.k];
                let mut depth = 0usize;
                for &s in &seq[..upto] {
                    let t = spec.bracket_type(s);
                    if spec.is_opener(s) {
                        counts[t] += 1;
                        depth += 1;
                    } else if counts[t] == 0 {
                        return false;
                    } else {
                        counts[t] -= 1;
                        depth -= 1;
                    }
                }
                depth <= n - upto
            }
        }
    }
}

/// All valid fillings of the masked positions, up to `limit`, in
/// lexicographic order.
pub fn enumerate_completions(
    spec: &GrammarSpec,
    ex: &MaskedExample,
    limit: usize,
) -> Result<Vec<TokenSequence>, GrammarError> {
    check_len(spec, &ex.input_tokens)?;
    let positions: Vec<usize> = ex.positions().collect();
    if positions.len() > MAX_ENUMERATED_MASKS {
        return Err(GrammarError::InstanceTooLarge {
            masked: positions.len(),
            limit: MAX_ENUMERATED_MASKS,
        });
    }
    let checker = PrefixChecker { spec };
    let alphabet = spec.maskable_alphabet();
    let mut work = ex.input_tokens.clone();
    let mut out = Vec::new();

    // Depth-first over masked positions in increasing order, symbols in
    // increasing order: emits completions already sorted.
    fn dfs(
        idx: usize,
        positions: &[usize],
        work: &mut Vec<Symbol>,
        alphabet: &std::ops::Range<Symbol>,
        checker: &PrefixChecker<'_>,
        limit: usize,
        out: &mut Vec<TokenSequence>,
    ) {
        if out.len() >= limit {
            return;
        }
        if idx == positions.len() {
            if recognize_slice(checker.spec, work) {
                out.push(TokenSequence(work.clone()));
            }
            return;
        }
        let p = positions[idx];
        let next = positions.get(idx + 1).copied().unwrap_or(work.len());
        for s in alphabet.clone() {
            work[p] = s;
            if checker.feasible(work, next) {
                dfs(idx + 1, positions, work, alphabet, checker, limit, out);
                if out.len() >= limit {
                    break;
                }
            }
        }
        work[p] = checker.spec.mask_id();
    }

    if positions.is_empty() {
        if recognize_slice(spec, &work) {
            out.push(TokenSequence(work));
        }
        return Ok(out);
    }
    let first = positions[0];
    if checker.feasible(&work, first) {
        dfs(
            0, &positions, &mut work, &alphabet, &checker, limit, &mut out,
        );
    }
    out.sort();
    Ok(out)
}

/// A uniformly random permutation of `seq`.
pub fn shuffle_within_sequence(seq: &TokenSequence, seed: u64) -> TokenSequence {
    let mut v = seq.0.clone();
    v.shuffle(&mut rng::stream(seed));
    TokenSequence(v)
}

/// Maximum nesting depth of a bracket sequence (count of currently open
/// brackets), or `None` if the depth ever goes negative.
pub fn max_depth(spec: &GrammarSpec, seq: &[Symbol]) -> Option<usize> {
    let mut depth = 0usize;
    let mut best = 0usize;
    for &s in seq {
        if spec.is_opener(s) {
            depth += 1;
            best = best.max(depth);
        } else {
            depth = depth.checked_sub(1)?;
        }
    }
    Some(best)
}
