//! Grammar and initialization checks against independently computed values:
//! exhaustive enumeration, closed-form counts and exact Markov-chain
//! expectations.

use procwarm::corpus::{build_corpus, corpus_stats, Ablation};
use procwarm::exec::Exec;
use procwarm::grammar::{recognize_slice, GrammarSpec, Symbol};
use procwarm::model::{init_model, ModelConfig};

/// Every string of length `n` over `0..alphabet`.
fn all_strings(alphabet: u16, n: usize) -> Vec<Vec<Symbol>> {
    let total = (alphabet as usize).pow(n as u32);
    (0..total)
        .map(|mut x| {
            (0..n)
                .map(|_| {
                    let s = (x % alphabet as usize) as Symbol;
                    x /= alphabet as usize;
                    s
                })
                .collect()
        })
        .collect()
}

/// Single-pair balance via a running counter.
fn balanced_counter(s: &[Symbol]) -> bool {
    let mut depth = 0i32;
    for &c in s {
        depth += if c == 0 { 1 } else { -1 };
        if depth < 0 {
            return false;
        }
    }
    depth == 0
}

/// Recursive definition: empty, or `( A ) B` with `A` and `B` balanced and
/// the bracket pair of matching type.
fn dyck_recursive(s: &[Symbol], k: u16) -> bool {
    if s.is_empty() {
        return true;
    }
    let open = s[0];
    if open >= k {
        return false;
    }
    let mut depth = 0i32;
    for (i, &c) in s.iter().enumerate() {
        depth += if c < k { 1 } else { -1 };
        if depth == 0 {
            return s[i] == open + k
                && dyck_recursive(&s[1..i], k)
                && dyck_recursive(&s[i + 1..], k);
        }
    }
    false
}

/// Per-type counters that never go negative and end at zero.
fn shuffle_counters(s: &[Symbol], k: u16) -> bool {
    let mut c = vec![0i32; k as usize];
    for &x in s {
        let t = (x % k) as usize;
        c[t] += if x < k { 1 } else { -1 };
        if c[t] < 0 {
            return false;
        }
    }
    c.iter().all(|&v| v == 0)
}

fn binomial(n: u64, r: u64) -> u64 {
    (0..r).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn catalan(n: u64) -> u64 {
    binomial(2 * n, n) / (n + 1)
}

#[test]
fn one_pair_dyck_length_eight() {
    let spec = GrammarSpec::dyck(1, 8);
    let strings = all_strings(2, 8);
    assert_eq!(strings.len(), 256);
    let mut valid = 0;
    for s in &strings {
        let oracle = balanced_counter(s);
        assert_eq!(recognize_slice(&spec, s), oracle, "{s:?}");
        valid += usize::from(oracle);
    }
    assert_eq!(valid as u64, catalan(4));
    assert_eq!(valid, 14);
}

#[test]
fn two_pair_dyck_matches_recursive_definition() {
    // Catalan(3) shapes, each with 2^3 type assignments.
    let spec = GrammarSpec::dyck(2, 6);
    let mut valid = 0u64;
    for s in all_strings(4, 6) {
        let oracle = dyck_recursive(&s, 2);
        assert_eq!(recognize_slice(&spec, &s), oracle, "{s:?}");
        valid += u64::from(oracle);
    }
    assert_eq!(valid, catalan(3) * 8);
}

#[test]
fn two_pair_shuffle_matches_per_type_counters() {
    // Length 6 over 2 independent pairs: choose which positions carry each
    // type, then a balanced string of each type.
    // sum over a+b=3 of C(6, 2a) * Catalan(a) * Catalan(b).
    let spec = GrammarSpec::dyck_shuffle(2, 6);
    let mut valid = 0u64;
    for s in all_strings(4, 6) {
        let oracle = shuffle_counters(&s, 2);
        assert_eq!(recognize_slice(&spec, &s), oracle, "{s:?}");
        valid += u64::from(oracle);
    }
    let expected: u64 = (0..=3)
        .map(|a| binomial(6, 2 * a) * catalan(a) * catalan(3 - a))
        .sum();
    assert_eq!(valid, expected);
    // Shuffle admits every Dyck string and more.
    assert!(expected > catalan(3) * 8);
}

#[test]
fn ww_count_over_three_symbols() {
    let spec = GrammarSpec::ww(3, 4);
    let valid = all_strings(3, 4)
        .iter()
        .filter(|s| recognize_slice(&spec, s))
        .count();
    assert_eq!(valid, 9);
}

/// Exact `E[max depth]` of the sampler at length `n` by dynamic programming
/// over `(depth, running max)`.
fn exact_mean_max_depth(n: usize, p_open: f64) -> f64 {
    let mut dist = vec![vec![0.0f64; n + 1]; n + 1];
    dist[0][0] = 1.0;
    for i in 0..n {
        let remaining = n - i;
        let mut next = vec![vec![0.0f64; n + 1]; n + 1];
        for d in 0..=n {
            for m in 0..=n {
                let p = dist[d][m];
                if p == 0.0 {
                    continue;
                }
                let po = if d == 0 {
                    1.0
                } else if d == remaining {
                    0.0
                } else {
                    p_open
                };
                if po > 0.0 {
                    next[d + 1][m.max(d + 1)] += p * po;
                }
                if po < 1.0 {
                    next[d - 1][m] += p * (1.0 - po);
                }
            }
        }
        dist = next;
    }
    (0..=n).map(|m| m as f64 * dist[0][m]).sum()
}

#[test]
fn mean_max_depth_matches_markov_chain() {
    let n = 8;
    let exact = exact_mean_max_depth(n, 0.6);
    let c = build_corpus(
        GrammarSpec::dyck(1, n),
        100_000,
        0.5,
        11,
        Ablation::None,
        Exec::Parallel,
    )
    .unwrap();
    let s = corpus_stats(&c).unwrap();
    let mean = s.mean_max_depth.unwrap();
    assert!(
        (mean - exact).abs() < 0.02 * exact,
        "sampled {mean}, exact {exact}"
    );
    assert_eq!(s.validity_rate, 1.0);
}

/// Fraction of distinct arrangements of `n/2` opens and `n/2` closes that
/// are balanced.
fn balanced_arrangement_fraction(n: usize) -> f64 {
    let all: Vec<Vec<Symbol>> = all_strings(2, n)
        .into_iter()
        .filter(|s| s.iter().filter(|&&c| c == 0).count() == n / 2)
        .collect();
    let ok = all.iter().filter(|s| balanced_counter(s)).count();
    ok as f64 / all.len() as f64
}

#[test]
fn shuffled_validity_matches_permutation_count() {
    let expected = balanced_arrangement_fraction(8);
    assert!((expected - 14.0 / 70.0).abs() < 1e-12);
    let c = build_corpus(
        GrammarSpec::dyck(1, 8),
        10_000,
        0.5,
        3,
        Ablation::SequenceShuffled,
        Exec::Parallel,
    )
    .unwrap();
    let s = corpus_stats(&c).unwrap();
    // Binomial std at p = 0.2 and n = 10000 is 0.004.
    assert!(
        (s.validity_rate - expected).abs() < 0.016,
        "{}",
        s.validity_rate
    );
}

#[test]
fn opener_types_are_uniform() {
    let k = 4;
    let count = 40_000;
    let c = build_corpus(
        GrammarSpec::dyck(k, 2),
        count,
        1.0,
        5,
        Ablation::None,
        Exec::Parallel,
    )
    .unwrap();
    let s = corpus_stats(&c).unwrap();
    for t in 0..k {
        let f = s.histogram[t] as f64 / count as f64;
        // Binomial std at p = 1/4 and n = 40000 is about 0.0022.
        assert!((f - 0.25).abs() < 0.01, "type {t}: {f}");
        assert_eq!(s.histogram[t], s.histogram[t + k]);
    }
}

#[test]
fn token_rows_are_nearly_orthogonal() {
    let mut cfg = ModelConfig::vit_t();
    cfg.vocab_size = 128;
    let mut worst = 0.0f32;
    for seed in 0..100 {
        let c = init_model(&cfg, seed).unwrap();
        let t = c.get("tok_embed").unwrap();
        let d = t.shape[1];
        let rows: Vec<&[f32]> = t.data.chunks(d).collect();
        assert_eq!(rows.len(), 129);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dot: f32 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                worst = worst.max(dot.abs());
            }
        }
    }
    assert!(worst < 0.5, "max |cosine| {worst}");
}
