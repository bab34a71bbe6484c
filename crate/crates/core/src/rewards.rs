//! Outcome reward system with deterministic answer parsing.
//!
//! Five components: answer accuracy, boxed-format bonus, latent-segment
//! shaping, a soft length penalty, and repetition penalties from n-gram
//! duplication ratios and token runs. All functions are pure; the total is
//! always the exact sum of the components.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// How the two repetition penalty terms combine.
///
/// The `Sum` convention adds the n-gram and run terms before flooring at
/// `-r_max`; `LiteralMax` takes the pointwise max of the three bracketed
/// terms instead, which zeroes the penalty whenever either term is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepCombination {
    Sum,
    LiteralMax,
}

/// Where the length penalty starts rising.
///
/// `Literal` applies the published form with onset `0.81 * l_t` (about
/// `0.656 * L_max`); `TargetLength` starts the ramp at `l_t` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LenOnset {
    Literal,
    TargetLength,
}

/// Reward constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_len: f64,
    pub lambda_rep: f64,
    pub tau3: f64,
    pub tau4: f64,
    pub m0: usize,
    pub r_max: f64,
    pub numeric_tol: f64,
    pub l_max: usize,
    pub rep_combination: RepCombination,
    pub len_onset: LenOnset,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_len: 0.2,
            lambda_rep: 1.2,
            tau3: 0.18,
            tau4: 0.12,
            m0: 6,
            r_max: 2.0,
            numeric_tol: 0.02,
            l_max: 2048,
            rep_combination: RepCombination::Sum,
            len_onset: LenOnset::Literal,
        }
    }
}

impl RewardConfig {
    /// Target length `l_t = 0.81 * L_max`.
    pub fn target_len(&self) -> f64 {
        0.81 * self.l_max as f64
    }
}

/// Per-component rewards and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub fmt: f64,
    pub lat: f64,
    pub len: f64,
    pub rep: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn component(&self, k: usize) -> f64 {
        match k {
            0 => self.acc,
            1 => self.fmt,
            2 => self.lat,
            3 => self.len,
            _ => self.rep,
        }
    }
}

pub const N_REWARD_COMPONENTS: usize = 5;

/// Latent boundary/pad ids inside a token stream.
#[derive(Debug, Clone, Copy)]
pub struct LatentMarkers {
    pub start: u32,
    pub pad: u32,
    pub end: u32,
}

/// One scored response: generated tokens (prompt excluded) plus their
/// decoded text.
#[derive(Debug, Clone)]
pub struct Response {
    pub tokens: Vec<u32>,
    pub text: String,
    pub markers: LatentMarkers,
}

impl Response {
    /// Response token length `l(y)`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Count of well-formed `start, pad*, end` segments.
    pub fn n_lat(&self) -> usize {
        count_latent_segments(&self.tokens, self.markers)
    }

    /// Build a response from plain text: tokens are whitespace-separated
    /// words, interned in order of first appearance; latent markers are the
    /// literal marker words.
    pub fn from_text(text: &str) -> Response {
        let mut intern: HashMap<&str, u32> = HashMap::new();
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            let next = intern.len() as u32 + 3;
            let id = *intern.entry(word).or_insert(next);
            tokens.push(id);
        }
        let markers = LatentMarkers {
            start: intern.get("<|latent_start|>").copied().unwrap_or(0),
            pad: intern.get("<|latent_pad|>").copied().unwrap_or(1),
            end: intern.get("<|latent_end|>").copied().unwrap_or(2),
        };
        Response {
            tokens,
            text: text.to_string(),
            markers,
        }
    }
}

/// Count well-formed latent segments in a token stream.
pub fn count_latent_segments(tokens: &[u32], markers: LatentMarkers) -> usize {
    let mut count = 0;
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == markers.start {
            let mut j = i + 1;
            while j < tokens.len() && tokens[j] == markers.pad {
                j += 1;
            }
            if j < tokens.len() && tokens[j] == markers.end {
                count += 1;
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    count
}

/// All balanced `\boxed{...}` regions in order of appearance.
fn boxed_regions(text: &str) -> Vec<String> {
    const OPEN: &str = "\\boxed{";
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut at = 0;
    while let Some(found) = text[at..].find(OPEN) {
        let start = at + found + OPEN.len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, &b) in bytes[start..].iter().enumerate() {
            match b {
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(e) => {
                out.push(text[start..e].to_string());
                at = e + 1;
            }
            None => break, // unbalanced region; no further closed boxes
        }
    }
    out
}

/// Whether the text contains at least one syntactically closed boxed
/// region (the format bonus requires closure, not the mere marker).
pub fn has_closed_box(text: &str) -> bool {
    !boxed_regions(text).is_empty()
}

/// Extract the predicted answer: content of the last balanced boxed
/// region; otherwise a trailing option letter or the final number; `None`
/// when nothing matches.
pub fn parse_answer(text: &str) -> Option<String> {
    if let Some(last) = boxed_regions(text).pop() {
        return Some(last);
    }
    if let Some(word) = text.split_whitespace().last() {
        let stripped = word.trim_matches(|c: char| !c.is_ascii_alphanumeric());
        if stripped.len() == 1 {
            let c = stripped.chars().next().unwrap();
            if ('A'..='E').contains(&c.to_ascii_uppercase()) && c.is_ascii_alphabetic() {
                return Some(c.to_ascii_uppercase().to_string());
            }
        }
    }
    final_number(text)
}

fn final_number(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let mut start = i;
            if start > 0 && bytes[start - 1] == b'-' {
                start -= 1;
            }
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'.' && j + 1 < bytes.len() && bytes[j + 1].is_ascii_digit() {
                j += 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
            }
            best = Some((start, j));
            i = j;
        } else {
            i += 1;
        }
    }
    best.map(|(s, e)| text[s..e].to_string())
}

/// Evaluate a simple symbolic answer to a real number: plain numbers,
/// fractions `a/b`, and radicals `c\sqrt{n}` (or `c√n`), with degree
/// markers stripped.
pub fn evaluate_answer(expr: &str) -> Option<f64> {
    let mut s: String = expr.chars().filter(|c| !c.is_whitespace()).collect();
    for suffix in ["^{\\circ}", "^\\circ", "\\circ", "°", "deg"] {
        if let Some(stripped) = s.strip_suffix(suffix) {
            s = stripped.to_string();
            break;
        }
    }
    if s.is_empty() {
        return None;
    }
    if let Some(at) = s.find("\\sqrt{") {
        let coeff = coefficient(&s[..at])?;
        let rest = &s[at + "\\sqrt{".len()..];
        let close = rest.find('}')?;
        if !rest[close + 1..].is_empty() {
            return None;
        }
        let radicand: f64 = rest[..close].parse().ok()?;
        return (radicand >= 0.0).then(|| coeff * radicand.sqrt());
    }
    if let Some(at) = s.find('√') {
        let coeff = coefficient(&s[..at])?;
        let radicand: f64 = s[at + '√'.len_utf8()..].parse().ok()?;
        return (radicand >= 0.0).then(|| coeff * radicand.sqrt());
    }
    if let Some(at) = s.find('/') {
        let num: f64 = s[..at].parse().ok()?;
        let den: f64 = s[at + 1..].parse().ok()?;
        return (den != 0.0).then(|| num / den);
    }
    s.parse().ok()
}

fn coefficient(s: &str) -> Option<f64> {
    match s {
        "" => Some(1.0),
        "-" => Some(-1.0),
        other => other.parse().ok(),
    }
}

fn single_letter(s: &str) -> Option<char> {
    let t = s.trim().trim_matches(|c: char| !c.is_ascii_alphanumeric());
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() && ('A'..='E').contains(&c.to_ascii_uppercase()) => {
            Some(c.to_ascii_uppercase())
        }
        _ => None,
    }
}

/// Equivalence judgment: case-insensitive letters for multiple choice,
/// relative tolerance for numerics, simple symbolic forms evaluated first.
/// Unparseable predictions score 0.
pub fn answer_equivalent(pred: &str, truth: &str, tol: f64) -> bool {
    debug_assert!(!truth.is_empty(), "truth must be non-empty");
    if let Some(t) = single_letter(truth) {
        return single_letter(pred) == Some(t);
    }
    let (Some(p), Some(t)) = (evaluate_answer(pred), evaluate_answer(truth)) else {
        // non-numeric truths fall back to whitespace-normalized equality
        let norm = |s: &str| s.split_whitespace().collect::<String>();
        return norm(pred) == norm(truth);
    };
    if t != 0.0 {
        (p - t).abs() <= tol * t.abs()
    } else {
        p.abs() <= tol
    }
}

/// Latent-segment shaping: `0.5` for exactly one well-formed segment,
/// `-0.2` otherwise.
pub fn r_lat(n_lat: usize) -> f64 {
    if n_lat == 1 {
        0.5
    } else {
        -0.2
    }
}

/// Soft length penalty over the response token length.
pub fn r_len(len: usize, cfg: &RewardConfig) -> f64 {
    let lt = cfg.target_len();
    let onset = match cfg.len_onset {
        LenOnset::Literal => 0.81 * lt,
        LenOnset::TargetLength => lt,
    };
    let ramp = (len as f64 - onset) / (0.1 * lt);
    -cfg.lambda_len * ramp.clamp(0.0, 1.0)
}

/// Duplication ratio of `n`-grams: repeated over total, `0` when the
/// stream is shorter than `n`.
pub fn ngram_duplication_ratio(tokens: &[u32], n: usize) -> f64 {
    if tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let mut seen: HashSet<&[u32]> = HashSet::with_capacity(total);
    for w in tokens.windows(n) {
        seen.insert(w);
    }
    (total - seen.len()) as f64 / total as f64
}

/// Longest run of consecutive identical tokens.
pub fn max_token_run(tokens: &[u32]) -> usize {
    let mut best = 0;
    let mut cur = 0;
    let mut prev: Option<u32> = None;
    for &t in tokens {
        cur = if prev == Some(t) { cur + 1 } else { 1 };
        best = best.max(cur);
        prev = Some(t);
    }
    best
}

/// Eq-level repetition penalty from precomputed statistics.
pub fn rep_penalty_from_stats(rho3: f64, rho4: f64, max_run: usize, cfg: &RewardConfig) -> f64 {
    let ngram_term = -cfg.lambda_rep
        * (((rho3 - cfg.tau3) / (1.0 - cfg.tau3)).clamp(0.0, 1.0)
            + ((rho4 - cfg.tau4) / (1.0 - cfg.tau4)).clamp(0.0, 1.0));
    let run_term = -cfg.lambda_rep
        * (((max_run as f64 - cfg.m0 as f64 + 1.0) / cfg.m0 as f64).clamp(0.0, 1.0));
    match cfg.rep_combination {
        RepCombination::Sum => (ngram_term + run_term).max(-cfg.r_max),
        RepCombination::LiteralMax => (-cfg.r_max).max(ngram_term).max(run_term),
    }
}

/// Repetition penalty of a token stream.
pub fn r_rep(tokens: &[u32], cfg: &RewardConfig) -> f64 {
    let rho3 = ngram_duplication_ratio(tokens, 3);
    let rho4 = ngram_duplication_ratio(tokens, 4);
    rep_penalty_from_stats(rho3, rho4, max_token_run(tokens), cfg)
}

/// Score one response against the ground truth.
pub fn total_reward(response: &Response, truth: &str, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("ground-truth answer must be non-empty".into()));
    }
    let acc = match parse_answer(&response.text) {
        Some(pred) => f64::from(answer_equivalent(&pred, truth, cfg.numeric_tol)),
        None => 0.0,
    };
    let fmt = if has_closed_box(&response.text) { 0.2 } else { 0.0 };
    let lat = r_lat(response.n_lat());
    let len = r_len(response.len(), cfg);
    let rep = r_rep(&response.tokens, cfg);
    Ok(RewardBreakdown {
        acc,
        fmt,
        lat,
        len,
        rep,
        total: acc + fmt + lat + len + rep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with_lmax(l_max: usize) -> RewardConfig {
        RewardConfig {
            l_max,
            ..Default::default()
        }
    }

    #[test]
    fn parse_boxed_radical() {
        assert_eq!(
            parse_answer("the answer is \\boxed{40\\sqrt{5}}").as_deref(),
            Some("40\\sqrt{5}")
        );
    }

    #[test]
    fn parse_empty_is_absent() {
        assert_eq!(parse_answer(""), None);
    }

    #[test]
    fn parse_takes_last_region() {
        assert_eq!(parse_answer("\\boxed{A} and \\boxed{B}").as_deref(), Some("B"));
    }

    #[test]
    fn parse_fallbacks() {
        assert_eq!(parse_answer("so the result is 42.").as_deref(), Some("42"));
        assert_eq!(parse_answer("the option is B").as_deref(), Some("B"));
        assert_eq!(parse_answer("first 3 then 7 end").as_deref(), Some("7"));
        assert_eq!(parse_answer("no numbers here at all"), None);
    }

    #[test]
    fn unbalanced_box_is_not_closed() {
        assert!(!has_closed_box("\\boxed{42"));
        assert!(has_closed_box("\\boxed{4\\sqrt{2}}"));
        // fallback still extracts the number
        assert_eq!(parse_answer("\\boxed{42").as_deref(), Some("42"));
    }

    #[test]
    fn equivalence_tolerance() {
        assert!(answer_equivalent("101", "100", 0.02));
        assert!(!answer_equivalent("103", "100", 0.02));
        assert!(answer_equivalent("B", "b", 0.02));
        assert!(!answer_equivalent("A", "b", 0.02));
        assert!(answer_equivalent("0.01", "0", 0.02));
        assert!(answer_equivalent("nonsense", "junk{", 0.02) == false);
    }

    #[test]
    fn equivalence_radicals_and_decimals() {
        assert!(answer_equivalent("4\\sqrt{2}", "4\\sqrt{2}", 0.02));
        // radical vs decimal within 2%
        assert!(answer_equivalent("5.65", "4\\sqrt{2}", 0.02));
        assert!(answer_equivalent("40\\sqrt{5}", "89.44", 0.02));
        assert!(!answer_equivalent("6.5", "4\\sqrt{2}", 0.02));
        assert!(answer_equivalent("3/2", "1.5", 0.02));
        assert!(answer_equivalent("45^\\circ", "45", 0.02));
    }

    #[test]
    fn latent_reward_cases() {
        assert_eq!(r_lat(1), 0.5);
        assert_eq!(r_lat(0), -0.2);
        assert_eq!(r_lat(3), -0.2);
    }

    #[test]
    fn latent_segment_counting() {
        let m = LatentMarkers { start: 10, pad: 11, end: 12 };
        assert_eq!(count_latent_segments(&[1, 10, 11, 11, 12, 2], m), 1);
        assert_eq!(count_latent_segments(&[10, 12], m), 1); // zero pads
        assert_eq!(count_latent_segments(&[10, 11, 11], m), 0); // unclosed
        assert_eq!(count_latent_segments(&[10, 1, 12], m), 0); // interrupted
        assert_eq!(count_latent_segments(&[10, 11, 12, 10, 12], m), 2);
        assert_eq!(count_latent_segments(&[11, 12, 12], m), 0);
    }

    #[test]
    fn length_penalty_hand_cases() {
        let cfg = cfg_with_lmax(1000); // l_t = 810
        assert_eq!(r_len(600, &cfg), 0.0);
        assert!((r_len(700, &cfg) - (-0.2 * (700.0 - 656.1) / 81.0)).abs() < 1e-12);
        assert!((r_len(700, &cfg) - (-0.108_395_061_728)).abs() < 1e-9);
        assert_eq!(r_len(800, &cfg), -0.2);
    }

    #[test]
    fn length_penalty_range_invariant() {
        let cfg = cfg_with_lmax(512);
        for len in (0..3000).step_by(7) {
            let r = r_len(len, &cfg);
            assert!(r <= 0.0 && r >= -cfg.lambda_len);
        }
    }

    #[test]
    fn target_length_onset_variant() {
        let cfg = RewardConfig {
            l_max: 1000,
            len_onset: LenOnset::TargetLength,
            ..Default::default()
        };
        assert_eq!(r_len(810, &cfg), 0.0);
        assert!((r_len(850, &cfg) - (-0.2 * 40.0 / 81.0)).abs() < 1e-12);
    }

    #[test]
    fn rep_penalty_hand_cases() {
        let cfg = RewardConfig::default();
        // all distinct, run 1
        assert_eq!(r_rep(&[1, 2, 3, 4, 5, 6, 7], &cfg), 0.0);
        // run of 6 with clean n-grams: B = -1.2 / 6 = -0.2
        assert!((rep_penalty_from_stats(0.0, 0.0, 6, &cfg) - (-0.2)).abs() < 1e-12);
        // rho3 = 0.59 -> -0.6, rho4 = 0, m = 6 -> -0.2; sum -0.8
        assert!((rep_penalty_from_stats(0.59, 0.0, 6, &cfg) - (-0.8)).abs() < 1e-12);
        // floor at -r_max
        assert_eq!(rep_penalty_from_stats(1.0, 1.0, 100, &cfg), -2.0);
    }

    #[test]
    fn literal_max_convention_picks_weakest_penalty() {
        let cfg = RewardConfig {
            rep_combination: RepCombination::LiteralMax,
            ..Default::default()
        };
        // with a zero run term the literal reading yields max(-2, -0.6, -0.2) = -0.2
        assert!((rep_penalty_from_stats(0.59, 0.0, 6, &cfg) - (-0.2)).abs() < 1e-12);
        let zero_run = RewardConfig {
            rep_combination: RepCombination::LiteralMax,
            ..Default::default()
        };
        assert_eq!(rep_penalty_from_stats(0.59, 0.30, 1, &zero_run), 0.0);
    }

    #[test]
    fn duplication_ratio_and_runs() {
        // 12 identical tokens: rho_3 = 9/10
        let run = vec![5u32; 12];
        assert_eq!(ngram_duplication_ratio(&run, 3), 9.0 / 10.0);
        assert_eq!(max_token_run(&run), 12);
        assert_eq!(ngram_duplication_ratio(&[1, 2], 3), 0.0);
        assert_eq!(max_token_run(&[]), 0);
        assert_eq!(max_token_run(&[1, 1, 2, 2, 2, 3]), 3);
    }

    #[test]
    fn total_reward_compositions() {
        let cfg = cfg_with_lmax(1000);
        // correct boxed answer, one latent block, short clean text -> 1.7
        let r = Response::from_text(
            "plan go <|latent_start|> <|latent_pad|> <|latent_end|> \\boxed{5}",
        );
        let b = total_reward(&r, "5", &cfg).unwrap();
        assert!((b.total - 1.7).abs() < 1e-12);
        assert_eq!(b.acc, 1.0);
        assert_eq!(b.fmt, 0.2);
        assert_eq!(b.lat, 0.5);

        // no box, no latent block, wrong answer -> -0.2
        let r2 = Response::from_text("just rambling words");
        let b2 = total_reward(&r2, "5", &cfg).unwrap();
        assert!((b2.total - (-0.2)).abs() < 1e-12);

        // total always equals component sum
        let sum = b.acc + b.fmt + b.lat + b.len + b.rep;
        assert!((b.total - sum).abs() < 1e-12);
    }

    #[test]
    fn text_tokens_count_words() {
        let r = Response::from_text("a b c a b c");
        assert_eq!(r.len(), 6);
        assert_eq!(r.tokens[0], r.tokens[3]);
        assert_ne!(r.tokens[0], r.tokens[1]);
    }
}
