//! Corpora of masked examples: generation, the sequence-shuffle ablation,
//! summary statistics and the on-disk format.
//!
//! A corpus directory holds three files:
//!
//! * `manifest.txt`: `key = value` lines recording the grammar spec, mask
//!   ratio, global seed, count, ablation, payload sizes and a config hash.
//! * `tokens.u16`: source symbols, little-endian `u16`, row-major
//!   `count × seq_len`.
//! * `masks.u16`: per example, a little-endian `u16` position count followed
//!   by that many `u16` positions.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic;
use crate::exec::Exec;
use crate::grammar::{
    self, build_mask, build_random_mask, recognize_slice, sample_sequence, shuffle_within_sequence,
    GrammarError, GrammarSpec, Language, MaskedExample, Symbol, TokenSequence,
};
use crate::kv::{short_hash, KvDoc, KvError};
use crate::rng::{self, Lane};

pub const FORMAT: &str = "procwarm-corpus";
pub const VERSION: u32 = 1;
pub const DEFAULT_MASK_RATIO: f64 = 0.5;

const MANIFEST: &str = "manifest.txt";
const TOKENS: &str = "tokens.u16";
const MASKS: &str = "masks.u16";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("corpus must contain at least one example")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] KvError),
    #[error("not a corpus manifest (format `{0}`)")]
    WrongFormat(String),
    #[error("version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("payload size mismatch in {file}: expected {expected} bytes, found {actual}")]
    PayloadSizeMismatch {
        file: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("truncated payload in {file}")]
    TruncatedPayload { file: &'static str },
    #[error("validation error: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    None,
    /// Tokens permuted within each sequence before masking.
    SequenceShuffled,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::SequenceShuffled => "shuffled",
        })
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Ablation::None),
            "shuffled" | "sequence-shuffled" => Ok(Ablation::SequenceShuffled),
            _ => Err(format!("unknown ablation `{s}`")),
        }
    }
}

/// Everything needed to regenerate any example of a corpus by index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecipe {
    pub spec: GrammarSpec,
    pub mask_ratio: f64,
    pub global_seed: u64,
    pub ablation: Ablation,
}

impl CorpusRecipe {
    pub fn new(spec: GrammarSpec, global_seed: u64) -> Self {
        CorpusRecipe {
            spec,
            mask_ratio: DEFAULT_MASK_RATIO,
            global_seed,
            ablation: Ablation::None,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Example `index`: sample, optionally shuffle, then mask.
    pub fn example(&self, index: u64) -> Result<MaskedExample, GrammarError> {
        let seq = sample_sequence(
            &self.spec,
            rng::derive(self.global_seed, index, Lane::Sample),
        )?;
        let mask_seed = rng::derive(self.global_seed, index, Lane::Mask);
        match self.ablation {
            Ablation::None => build_mask(&self.spec, &seq, self.mask_ratio, mask_seed),
            Ablation::SequenceShuffled => {
                let shuffled = shuffle_within_sequence(
                    &seq,
                    rng::derive(self.global_seed, index, Lane::Shuffle),
                );
                match self.spec.language {
                    Language::WW => build_random_mask(&self.spec, &shuffled, 0.5, mask_seed),
                    _ => build_mask(&self.spec, &shuffled, self.mask_ratio, mask_seed),
                }
            }
        }
    }

    /// Examples `start..start + count`.
    pub fn examples(
        &self,
        start: u64,
        count: usize,
        exec: Exec,
    ) -> Result<Vec<MaskedExample>, GrammarError> {
        self.spec.validate()?;
        exec.map_indexed(count, |i| self.example(start + i as u64))
            .into_iter()
            .collect()
    }

    /// Lazy, unbounded iterator over examples `0, 1, 2, ...`.
    pub fn stream(&self) -> CorpusStream {
        CorpusStream {
            recipe: *self,
            next: 0,
        }
    }

    fn manifest_head(&self, count: usize) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("format", FORMAT)
            .push("version", VERSION)
            .push("language", self.spec.language)
            .push("k", self.spec.k)
            .push("vocab_size", self.spec.vocab_size)
            .push("p_open", self.spec.p_open)
            .push("seq_len", self.spec.seq_len)
            .push("mask_ratio", self.mask_ratio)
            .push("global_seed", self.global_seed)
            .push("count", count)
            .push("ablation", self.ablation);
        d
    }

    /// Hash of everything that determines the corpus contents.
    pub fn config_hash(&self, count: usize) -> String {
        short_hash(self.manifest_head(count).render().as_bytes())
    }
}

pub struct CorpusStream {
    recipe: CorpusRecipe,
    next: u64,
}

impl Iterator for CorpusStream {
    type Item = Result<MaskedExample, GrammarError>;

    fn next(&mut self) -> Option<Self::Item> {
        let ex = self.recipe.example(self.next);
        self.next += 1;
        Some(ex)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub recipe: CorpusRecipe,
    pub examples: Vec<MaskedExample>,
}

impl Corpus {
    pub fn spec(&self) -> &GrammarSpec {
        &self.recipe.spec
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn config_hash(&self) -> String {
        self.recipe.config_hash(self.examples.len())
    }
}

pub fn build_corpus(
    spec: GrammarSpec,
    count: usize,
    mask_ratio: f64,
    global_seed: u64,
    ablation: Ablation,
    exec: Exec,
) -> Result<Corpus, CorpusError> {
    if count == 0 {
        return Err(CorpusError::Empty);
    }
    let recipe = CorpusRecipe {
        spec,
        mask_ratio,
        global_seed,
        ablation,
    };
    let examples = recipe.examples(0, count, exec)?;
    Ok(Corpus { recipe, examples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub count: usize,
    pub seq_len: usize,
    pub language: Language,
    /// Counts per symbol over all source tokens.
    pub histogram: Vec<u64>,
    pub first_half_histogram: Vec<u64>,
    pub second_half_histogram: Vec<u64>,
    /// Mean over sequences of the per-sequence maximum nesting depth.
    pub mean_max_depth: Option<f64>,
    pub max_depth: Option<usize>,
    pub validity_rate: f64,
    /// Shannon entropy (bits) of the symbol distribution at each position.
    pub position_entropy: Vec<f64>,
    pub mean_masked_per_example: f64,
}

pub fn corpus_stats(c: &Corpus) -> Result<CorpusStats, CorpusError> {
    if c.is_empty() {
        return Err(CorpusError::Empty);
    }
    let spec = c.spec();
    let v = spec.vocab_size;
    let n = spec.seq_len;
    let mut histogram = vec![0u64; v];
    let mut first = vec![0u64; v];
    let mut second = vec![0u64; v];
    let mut per_pos = vec![0u64; n * v];
    let mut valid = 0usize;
    let mut depth_sum = 0usize;
    let mut depth_max = 0usize;
    let mut depth_seen = 0usize;
    let mut masked = 0usize;
    for ex in &c.examples {
        let src = ex.source.as_slice();
        for (i, &s) in src.iter().enumerate() {
            let s = s as usize;
            histogram[s] += 1;
            if i < n / 2 {
                first[s] += 1;
            } else {
                second[s] += 1;
            }
            per_pos[i * v + s] += 1;
        }
        if recognize_slice(spec, src) {
            valid += 1;
        }
        if spec.language.is_bracket() {
            // Shuffled sequences can dip below zero; depth is then measured
            // on the valid prefix only.
            let mut d = 0usize;
            let mut m = 0usize;
            for &s in src {
                if spec.is_opener(s) {
                    d += 1;
                    m = m.max(d);
                } else if d == 0 {
                    continue;
                } else {
                    d -= 1;
                }
            }
            depth_sum += m;
            depth_max = depth_max.max(m);
            depth_seen += 1;
        }
        masked += ex.targets.len();
    }
    let count = c.len();
    let position_entropy = (0..n)
        .map(|i| {
            per_pos[i * v..(i + 1) * v]
                .iter()
                .filter(|&&x| x > 0)
                .map(|&x| {
                    let p = x as f64 / count as f64;
                    p * (1.0 / p).log2()
                })
                .sum()
        })
        .collect();
    Ok(CorpusStats {
        count,
        seq_len: n,
        language: spec.language,
        histogram,
        first_half_histogram: first,
        second_half_histogram: second,
        mean_max_depth: (depth_seen > 0).then(|| depth_sum as f64 / depth_seen as f64),
        max_depth: (depth_seen > 0).then_some(depth_max),
        validity_rate: valid as f64 / count as f64,
        position_entropy,
        mean_masked_per_example: masked as f64 / count as f64,
    })
}

impl CorpusStats {
    pub fn total_tokens(&self) -> u64 {
        self.histogram.iter().sum()
    }

    pub fn frequency(&self, symbol: Symbol) -> f64 {
        self.histogram[symbol as usize] as f64 / self.total_tokens() as f64
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("count", self.count)
            .push("seq_len", self.seq_len)
            .push("language", self.language)
            .push("total_tokens", self.total_tokens())
            .push("validity_rate", self.validity_rate)
            .push("mean_masked_per_example", self.mean_masked_per_example);
        if let Some(m) = self.mean_max_depth {
            d.push("mean_max_depth", m);
        }
        if let Some(m) = self.max_depth {
            d.push("max_depth", m);
        }
        let mean_entropy =
            self.position_entropy.iter().sum::<f64>() / self.position_entropy.len() as f64;
        d.push("mean_position_entropy_bits", mean_entropy);
        for (s, &n) in self.histogram.iter().enumerate() {
            d.push(&format!("hist.{s}"), n);
        }
        for (i, e) in self.position_entropy.iter().enumerate() {
            d.push(&format!("entropy.{i}"), e);
        }
        d
    }

    /// Human-readable summary.
    pub fn report(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let total = self.total_tokens();
        let _ = writeln!(
            s,
            "corpus: {} x {} ({})",
            self.count, self.seq_len, self.language
        );
        let _ = writeln!(s, "validity rate: {:.4}", self.validity_rate);
        let _ = writeln!(s, "masked per example: {:.2}", self.mean_masked_per_example);
        if let (Some(mean), Some(max)) = (self.mean_max_depth, self.max_depth) {
            let _ = writeln!(s, "nesting depth: mean of max {mean:.3}, max {max}");
        }
        let mean_entropy =
            self.position_entropy.iter().sum::<f64>() / self.position_entropy.len() as f64;
        let _ = writeln!(s, "mean per-position entropy: {mean_entropy:.3} bits");
        let _ = writeln!(s, "symbol histogram:");
        for (sym, &n) in self.histogram.iter().enumerate() {
            if n > 0 {
                let _ = writeln!(
                    s,
                    "  {sym:>5}  {n:>10}  {:>6.2}%",
                    100.0 * n as f64 / total as f64
                );
            }
        }
        s
    }
}

fn manifest_for(c: &Corpus, tokens_bytes: usize, masks_bytes: usize) -> KvDoc {
    let mut d = c.recipe.manifest_head(c.len());
    d.push("tokens_bytes", tokens_bytes)
        .push("masks_bytes", masks_bytes)
        .push("config_hash", c.config_hash());
    d
}

fn encode_payloads(c: &Corpus) -> (Vec<u8>, Vec<u8>) {
    let n = c.spec().seq_len;
    let mut tokens = Vec::with_capacity(c.len() * n * 2);
    let mut masks = Vec::new();
    for ex in &c.examples {
        for &s in ex.source.as_slice() {
            tokens.extend_from_slice(&s.to_le_bytes());
        }
        masks.extend_from_slice(&(ex.targets.len() as u16).to_le_bytes());
        for p in ex.positions() {
            masks.extend_from_slice(&(p as u16).to_le_bytes());
        }
    }
    (tokens, masks)
}

/// Serialized file contents, in write order.
pub fn encode_corpus(c: &Corpus) -> Vec<(&'static str, Vec<u8>)> {
    let (tokens, masks) = encode_payloads(c);
    let manifest = manifest_for(c, tokens.len(), masks.len()).render();
    vec![
        (MANIFEST, manifest.into_bytes()),
        (TOKENS, tokens),
        (MASKS, masks),
    ]
}

pub fn write_corpus(c: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    if c.spec().seq_len > u16::MAX as usize {
        return Err(CorpusError::Validation(format!(
            "seq_len {} does not fit mask positions",
            c.spec().seq_len
        )));
    }
    let files = encode_corpus(c);
    let refs: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (*n, b.as_slice())).collect();
    atomic::write_dir(dir, &refs)?;
    Ok(())
}

fn read_u16s(bytes: &[u8]) -> impl Iterator<Item = u16> + '_ {
    bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let manifest = KvDoc::parse(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let format = manifest.require("format")?;
    if format != FORMAT {
        return Err(CorpusError::WrongFormat(format.to_string()));
    }
    let version: u32 = manifest.parse_key("version")?;
    if version != VERSION {
        return Err(CorpusError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let language: Language = manifest.parse_key::<String>("language").and_then(|s| {
        s.parse().map_err(|_| KvError::BadValue {
            key: "language".into(),
            value: s,
        })
    })?;
    let spec = GrammarSpec {
        language,
        k: manifest.parse_key("k")?,
        vocab_size: manifest.parse_key("vocab_size")?,
        p_open: manifest.parse_key("p_open")?,
        seq_len: manifest.parse_key("seq_len")?,
    };
    spec.validate()
        .map_err(|e| CorpusError::Validation(e.to_string()))?;
    let ablation: Ablation = manifest.parse_key::<String>("ablation").and_then(|s| {
        s.parse().map_err(|_| KvError::BadValue {
            key: "ablation".into(),
            value: s,
        })
    })?;
    let recipe = CorpusRecipe {
        spec,
        mask_ratio: manifest.parse_key("mask_ratio")?,
        global_seed: manifest.parse_key("global_seed")?,
        ablation,
    };
    let count: usize = manifest.parse_key("count")?;
    if count == 0 {
        return Err(CorpusError::Empty);
    }
    let tokens_bytes: u64 = manifest.parse_key("tokens_bytes")?;
    let masks_bytes: u64 = manifest.parse_key("masks_bytes")?;
    let expected_tokens = (count * spec.seq_len * 2) as u64;
    if tokens_bytes != expected_tokens {
        return Err(CorpusError::PayloadSizeMismatch {
            file: "manifest",
            expected: expected_tokens,
            actual: tokens_bytes,
        });
    }

    let tokens = fs::read(dir.join(TOKENS))?;
    if (tokens.len() as u64) < tokens_bytes {
        return Err(CorpusError::TruncatedPayload { file: TOKENS });
    }
    if tokens.len() as u64 != tokens_bytes {
        return Err(CorpusError::PayloadSizeMismatch {
            file: TOKENS,
            expected: tokens_bytes,
            actual: tokens.len() as u64,
        });
    }
    let masks = fs::read(dir.join(MASKS))?;
    if masks.len() as u64 != masks_bytes {
        return Err(CorpusError::PayloadSizeMismatch {
            file: MASKS,
            expected: masks_bytes,
            actual: masks.len() as u64,
        });
    }

    let symbols: Vec<Symbol> = read_u16s(&tokens).collect();
    let mut mask_words = read_u16s(&masks);
    let mut examples = Vec::with_capacity(count);
    for row in symbols.chunks_exact(spec.seq_len) {
        if let Some(&bad) = row.iter().find(|&&s| s as usize >= spec.vocab_size) {
            return Err(CorpusError::Validation(format!(
                "symbol {bad} outside alphabet"
            )));
        }
        let m = mask_words
            .next()
            .ok_or(CorpusError::TruncatedPayload { file: MASKS })? as usize;
        let mut positions = Vec::with_capacity(m);
        for _ in 0..m {
            let p = mask_words
                .next()
                .ok_or(CorpusError::TruncatedPayload { file: MASKS })? as usize;
            if p >= spec.seq_len || positions.last().is_some_and(|&q| q >= p) {
                return Err(CorpusError::Validation(format!("bad mask position {p}")));
            }
            positions.push(p);
        }
        examples.push(MaskedExample::from_positions(
            TokenSequence(row.to_vec()),
            &positions,
            spec.mask_id(),
        ));
    }
    if masks.len() % 2 == 1 || mask_words.next().is_some() {
        return Err(CorpusError::PayloadSizeMismatch {
            file: MASKS,
            expected: masks_bytes,
            actual: masks.len() as u64,
        });
    }
    let c = Corpus { recipe, examples };
    if let Some(h) = manifest.get("config_hash") {
        if h != c.config_hash() {
            return Err(CorpusError::Validation(format!(
                "config hash {h} does not match contents {}",
                c.config_hash()
            )));
        }
    }
    Ok(c)
}

/// Fraction of sequences the recognizer accepts.
pub fn validity_rate(spec: &GrammarSpec, examples: &[MaskedExample]) -> f64 {
    let ok = examples
        .iter()
        .filter(|e| grammar::recognize(spec, &e.source))
        .count();
    ok as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(ablation: Ablation) -> Corpus {
        build_corpus(
            GrammarSpec::dyck(2, 12),
            40,
            0.5,
            3,
            ablation,
            Exec::Reference,
        )
        .unwrap()
    }

    #[test]
    fn streaming_matches_materialized() {
        let c = small(Ablation::None);
        let streamed: Vec<_> = c
            .recipe
            .stream()
            .take(c.len())
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(c.examples, streamed);
        let par = build_corpus(*c.spec(), 40, 0.5, 3, Ablation::None, Exec::Parallel).unwrap();
        assert_eq!(c, par);
    }

    #[test]
    fn forced_string_histogram() {
        let c = build_corpus(
            GrammarSpec::dyck(1, 2),
            10,
            0.5,
            0,
            Ablation::None,
            Exec::Reference,
        )
        .unwrap();
        let s = corpus_stats(&c).unwrap();
        assert_eq!(s.frequency(0), 0.5);
        assert_eq!(s.frequency(1), 0.5);
        assert_eq!(s.total_tokens(), 20);
        assert_eq!(s.validity_rate, 1.0);
    }

    #[test]
    fn ww_halves_match() {
        let c = build_corpus(
            GrammarSpec::ww(16, 10),
            200,
            0.5,
            1,
            Ablation::None,
            Exec::Reference,
        )
        .unwrap();
        let s = corpus_stats(&c).unwrap();
        assert_eq!(s.first_half_histogram, s.second_half_histogram);
    }

    #[test]
    fn shuffled_ablation_keeps_multiset_and_closer_masks() {
        let plain = small(Ablation::None);
        let shuf = small(Ablation::SequenceShuffled);
        let spec = *plain.spec();
        for (a, b) in plain.examples.iter().zip(&shuf.examples) {
            let mut x = a.source.0.clone();
            let mut y = b.source.0.clone();
            x.sort();
            y.sort();
            assert_eq!(x, y);
            assert!(b.targets.iter().all(|&(_, s)| spec.is_closer(s)));
            assert!(b.is_consistent(spec.mask_id()));
        }
        let sp = corpus_stats(&plain).unwrap();
        let ss = corpus_stats(&shuf).unwrap();
        assert_eq!(sp.histogram, ss.histogram);
        assert!(ss.validity_rate < 1.0);
    }

    #[test]
    fn shuffled_ww_masks_half_of_positions() {
        let c = build_corpus(
            GrammarSpec::ww(8, 10),
            20,
            0.5,
            2,
            Ablation::SequenceShuffled,
            Exec::Reference,
        )
        .unwrap();
        assert!(c.examples.iter().all(|e| e.targets.len() == 5));
        let second_half_only = c
            .examples
            .iter()
            .all(|e| e.positions().collect::<Vec<_>>() == vec![5, 6, 7, 8, 9]);
        assert!(!second_half_only);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for ablation in [Ablation::None, Ablation::SequenceShuffled] {
            let c = small(ablation);
            let path = dir.path().join(format!("c-{ablation}"));
            write_corpus(&c, &path).unwrap();
            assert_eq!(read_corpus(&path).unwrap(), c);
        }
    }

    #[test]
    fn corrupt_payloads_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        let c = small(Ablation::None);
        write_corpus(&c, &path).unwrap();

        let tokens = fs::read(path.join(TOKENS)).unwrap();
        let mut longer = tokens.clone();
        longer.extend_from_slice(&[0, 0]);
        fs::write(path.join(TOKENS), &longer).unwrap();
        assert!(matches!(
            read_corpus(&path),
            Err(CorpusError::PayloadSizeMismatch { file: TOKENS, .. })
        ));
        fs::write(path.join(TOKENS), &tokens[..tokens.len() - 2]).unwrap();
        assert!(matches!(
            read_corpus(&path),
            Err(CorpusError::TruncatedPayload { file: TOKENS })
        ));
        fs::write(path.join(TOKENS), &tokens).unwrap();

        let manifest = fs::read_to_string(path.join(MANIFEST)).unwrap();
        fs::write(
            path.join(MANIFEST),
            manifest.replace("version = 1", "version = 9"),
        )
        .unwrap();
        assert!(matches!(
            read_corpus(&path),
            Err(CorpusError::VersionMismatch {
                found: 9,
                expected: 1
            })
        ));
        fs::write(
            path.join(MANIFEST),
            manifest.replace("vocab_size = 4", "vocab_size = 5"),
        )
        .unwrap();
        assert!(matches!(
            read_corpus(&path),
            Err(CorpusError::Validation(_))
        ));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            build_corpus(
                GrammarSpec::dyck(1, 2),
                0,
                0.5,
                0,
                Ablation::None,
                Exec::Reference
            ),
            Err(CorpusError::Empty)
        ));
    }
}
