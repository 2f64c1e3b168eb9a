//! Logit lens: reads any hidden-state stream as vocabulary logits.
//!
//! Every stream (full layer output, attention branch, FFN branch) goes through
//! the same path: the model's final RMS norm, then the unembedding. Candidates
//! carry both the raw surface string and a normalized form; dominance is always
//! compared on the normalized form so that `"▁Black"` and `"black"` count as the
//! same token.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rms_norm, topk, Matrix, RMS_EPS};
use crate::trace::{Candidate, TokenId};

pub const DEFAULT_MARKERS: [&str; 3] = ["▁", "Ġ", " "];

/// Lowercasing plus stripping of leading subword/whitespace markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    markers: Vec<String>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new(DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect())
    }
}

impl Normalizer {
    pub fn new(markers: Vec<String>) -> Self {
        let markers = markers.into_iter().filter(|m| !m.is_empty()).collect();
        Self { markers }
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    fn strip_once(&self, s: &str) -> String {
        let mut rest = s;
        'outer: loop {
            for m in &self.markers {
                if let Some(r) = rest.strip_prefix(m.as_str()) {
                    rest = r;
                    continue 'outer;
                }
            }
            return rest.to_lowercase();
        }
    }

    pub fn normalize(&self, surface: &str) -> String {
        // Iterate to a fixed point so user marker sets that only match after
        // lowercasing still give an idempotent result.
        let mut cur = self.strip_once(surface);
        for _ in 0..8 {
            let next = self.strip_once(&cur);
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    }
}

/// Token id → surface table with its normalization rules.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    surfaces: Vec<String>,
    normalized: Vec<String>,
    normalizer: Normalizer,
}

const SYNTHETIC_WORDS: [&str; 48] = [
    "the", "a", "of", "image", "object", "apple", "black", "red", "green", "blue", "white", "dog",
    "cat", "person", "woman", "man", "table", "chair", "brick", "wall", "side", "tile", "standing",
    "sitting", "walk", "run", "away", "behind", "ahead", "towards", "left", "right", "on", "in",
    "with", "is", "and", "there", "small", "large", "tree", "car", "street", "sky", "window",
    "floor", "grass", ".",
];

impl Vocab {
    pub fn new(surfaces: Vec<String>, normalizer: Normalizer) -> Self {
        let normalized = surfaces.iter().map(|s| normalizer.normalize(s)).collect();
        Self {
            surfaces,
            normalized,
            normalizer,
        }
    }

    /// Deterministic vocabulary of `size` entries used by the toy decoder when
    /// no vocab file is supplied. Id 0 is `</s>`; later ids cycle through a word
    /// list with marker and casing variants, so several ids share a normalized form.
    pub fn synthetic(size: usize) -> Self {
        let mut surfaces = Vec::with_capacity(size);
        if size > 0 {
            surfaces.push("</s>".to_string());
        }
        for i in 1..size {
            let w = SYNTHETIC_WORDS[(i - 1) % SYNTHETIC_WORDS.len()];
            let s = match ((i - 1) / SYNTHETIC_WORDS.len()) % 4 {
                0 => format!("▁{w}"),
                1 => w.to_string(),
                2 => {
                    let mut c = w.chars();
                    match c.next() {
                        Some(f) => format!("▁{}{}", f.to_uppercase(), c.as_str()),
                        None => w.to_string(),
                    }
                }
                _ => format!("Ġ{w}"),
            };
            surfaces.push(s);
        }
        Self::new(surfaces, Normalizer::default())
    }

    /// Reads a JSON array of surface strings indexed by id.
    pub fn from_json_file(path: impl AsRef<Path>, normalizer: Normalizer) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let surfaces: Vec<String> = serde_json::from_str(&text)?;
        Ok(Self::new(surfaces, normalizer))
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id).map(String::as_str)
    }

    pub fn normalized(&self, id: TokenId) -> Option<&str> {
        self.normalized.get(id).map(String::as_str)
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn candidate(&self, id: TokenId, score: f64) -> Candidate {
        Candidate {
            token_id: id,
            surface: self.surfaces[id].clone(),
            normalized: self.normalized[id].clone(),
            score,
        }
    }
}

pub fn normalize_token(surface: &str, vocab: &Vocab) -> String {
    vocab.normalizer.normalize(surface)
}

/// Whether intermediate streams pass through the final norm before unembedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensMode {
    #[default]
    FinalNorm,
    Raw,
}

/// `rms_norm(hidden, final_norm_gain) · unembedding`.
pub fn project(hidden: &[f64], final_norm_gain: &[f64], unembedding: &Matrix) -> Result<Vec<f64>> {
    project_with(hidden, final_norm_gain, unembedding, LensMode::FinalNorm)
}

pub fn project_with(
    hidden: &[f64],
    final_norm_gain: &[f64],
    unembedding: &Matrix,
    mode: LensMode,
) -> Result<Vec<f64>> {
    if hidden.len() != unembedding.rows() {
        return Err(Error::Shape(format!(
            "hidden of length {} vs unembedding {}x{}",
            hidden.len(),
            unembedding.rows(),
            unembedding.cols()
        )));
    }
    match mode {
        LensMode::FinalNorm => unembedding.vec_mul(&rms_norm(hidden, final_norm_gain, RMS_EPS)?),
        LensMode::Raw => unembedding.vec_mul(hidden),
    }
}

/// Top-`k` candidates by logit, ties broken by lower token id.
pub fn candidates(logits: &[f64], vocab: &Vocab, k: usize) -> Result<Vec<Candidate>> {
    if logits.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "{} logits for a vocabulary of {}",
            logits.len(),
            vocab.len()
        )));
    }
    Ok(topk(logits, k)?
        .into_iter()
        .map(|(id, score)| vocab.candidate(id, score))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn normalize_examples() {
        let n = Normalizer::default();
        assert_eq!(n.normalize("▁Black"), "black");
        assert_eq!(n.normalize("red"), "red");
        assert_eq!(n.normalize("ĠStanding"), "standing");
        assert_eq!(n.normalize("▁▁ Tile"), "tile");
    }

    #[test]
    fn custom_markers_stay_idempotent() {
        let n = Normalizer::new(vec!["x".into()]);
        let once = n.normalize("XxAb");
        assert_eq!(n.normalize(&once), once);
    }

    #[test]
    fn synthetic_vocab_shares_normalized_forms() {
        let v = Vocab::synthetic(120);
        assert_eq!(v.normalized(0), Some("</s>"));
        assert_eq!(v.surface(1), Some("▁the"));
        assert_eq!(v.normalized(1), v.normalized(49));
        assert_eq!(v.surface(97), Some("▁The"));
        assert_eq!(v.normalized(97), Some("the"));
    }

    #[test]
    fn identity_projection_picks_basis_index() {
        let d = 6;
        let mut hidden = vec![0.0; d];
        hidden[3] = (d as f64).sqrt(); // unit RMS
        let logits = project(&hidden, &vec![1.0; d], &Matrix::identity(d)).unwrap();
        let best = topk(&logits, 1).unwrap()[0].0;
        assert_eq!(best, 3);
    }

    #[test]
    fn zero_hidden_gives_zero_logits() {
        let logits = project(&[0.0; 4], &[1.0; 4], &Matrix::identity(4)).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
        let vocab = Vocab::synthetic(4);
        assert_eq!(candidates(&logits, &vocab, 1).unwrap()[0].token_id, 0);
    }

    #[test]
    fn projection_matches_norm_then_matmul() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
        let (d, v) = (8, 16);
        let hidden: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gain: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        let w = Matrix::from_vec(
            d,
            v,
            (0..d * v).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let rms = (hidden.iter().map(|x| x * x).sum::<f64>() / d as f64 + RMS_EPS).sqrt();
        let normed: Vec<f64> = hidden.iter().zip(&gain).map(|(h, g)| h / rms * g).collect();
        let want: Vec<f64> = (0..v)
            .map(|j| (0..d).map(|i| normed[i] * w.get(i, j)).sum())
            .collect();
        let got = project(&hidden, &gain, &w).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(project(&hidden[..4], &gain, &w).is_err());
    }

    #[test]
    fn candidates_examples() {
        let surfaces: Vec<String> = (0..10)
            .map(|i| {
                if i == 7 {
                    "Black".to_string()
                } else {
                    format!("t{i}")
                }
            })
            .collect();
        let vocab = Vocab::new(surfaces, Normalizer::default());
        let mut logits = vec![0.0; 10];
        logits[7] = 3.0;
        assert_eq!(
            candidates(&logits, &vocab, 1).unwrap()[0].normalized,
            "black"
        );

        let flat = candidates(&[1.0; 10], &vocab, 3).unwrap();
        let ids: Vec<_> = flat.iter().map(|c| c.token_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(candidates(&[1.0; 10], &vocab, 11).is_err());
    }

    #[test]
    fn candidates_match_sort_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let vocab = Vocab::synthetic(40);
        let logits: Vec<f64> = (0..40).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        let got: Vec<usize> = candidates(&logits, &vocab, 5)
            .unwrap()
            .iter()
            .map(|c| c.token_id)
            .collect();
        assert_eq!(got, order[..5].to_vec());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,12}", prefix in prop::sample::select(vec!["", "▁", "Ġ", " ", "▁Ġ "])) {
            let n = Normalizer::default();
            let input = format!("{prefix}{s}");
            let once = n.normalize(&input);
            prop_assert_eq!(n.normalize(&once), once);
        }

        #[test]
        fn candidate_lists_are_sorted_and_unique(logits in prop::collection::vec(-3i32..3, 8..30), k in 1usize..8) {
            let vocab = Vocab::synthetic(logits.len());
            let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
            let c = candidates(&logits, &vocab, k).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0].score >= w[1].score));
            let mut ids: Vec<_> = c.iter().map(|x| x.token_id).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), k);
        }
    }
}
