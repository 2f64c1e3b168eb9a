//! Caption hallucination rates against per-caption ground-truth object sets.
//!
//! `chair_i` = hallucinated mention instances / all mention instances,
//! `chair_s` = captions with at least one hallucinated mention / captions.
//! Object mentions are found by lowercase, word-boundary, longest-match-first
//! matching of the lexicon's synonyms.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectLexicon {
    /// (synonym, canonical), longest synonym first.
    synonyms: Vec<(String, String)>,
    canonical: BTreeSet<String>,
}

impl ObjectLexicon {
    pub fn new(map: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::Lexicon("lexicon is empty".into()));
        }
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        let mut canonical = BTreeSet::new();
        for (obj, syns) in map {
            let obj = obj.to_lowercase();
            if syns.is_empty() {
                return Err(Error::Lexicon(format!("object `{obj}` has no synonyms")));
            }
            for s in syns {
                let s = s.trim().to_lowercase();
                if s.is_empty() {
                    return Err(Error::Lexicon(format!("empty synonym for `{obj}`")));
                }
                match owner.get(&s) {
                    Some(prev) if prev != &obj => {
                        return Err(Error::Lexicon(format!(
                            "synonym `{s}` listed under both `{prev}` and `{obj}`"
                        )))
                    }
                    _ => {
                        owner.insert(s, obj.clone());
                    }
                }
            }
            canonical.insert(obj);
        }
        let mut synonyms: Vec<(String, String)> = owner.into_iter().collect();
        synonyms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(Self {
            synonyms,
            canonical,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn objects(&self) -> &BTreeSet<String> {
        &self.canonical
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Canonical objects mentioned in `caption`, one entry per mention, in order.
pub fn extract_objects(caption: &str, lexicon: &ObjectLexicon) -> Vec<String> {
    let text = caption.to_lowercase();
    let mut out = Vec::new();
    let mut pos = 0;
    let mut prev: Option<char> = None;
    while pos < text.len() {
        let rest = &text[pos..];
        let at_boundary = prev.is_none_or(|c| !is_word_char(c));
        if at_boundary {
            let hit = lexicon.synonyms.iter().find(|(syn, _)| {
                rest.starts_with(syn.as_str())
                    && rest[syn.len()..]
                        .chars()
                        .next()
                        .is_none_or(|c| !is_word_char(c))
            });
            if let Some((syn, obj)) = hit {
                out.push(obj.clone());
                prev = syn.chars().last();
                pos += syn.len();
                continue;
            }
        }
        let c = rest.chars().next().expect("pos < len");
        prev = Some(c);
        pos += c.len_utf8();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionDetail {
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairResult {
    pub chair_s: f64,
    pub chair_i: f64,
    pub captions: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    pub hallucinated_captions: usize,
    pub details: Vec<CaptionDetail>,
}

pub fn chair<S: AsRef<str>>(
    captions: &[S],
    ground_truths: &[BTreeSet<String>],
    lexicon: &ObjectLexicon,
) -> Result<ChairResult> {
    if captions.len() != ground_truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} captions but {} ground-truth sets",
            captions.len(),
            ground_truths.len()
        )));
    }
    if captions.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut details = Vec::with_capacity(captions.len());
    let (mut mentions, mut bad_mentions, mut bad_captions) = (0, 0, 0);
    for (cap, truth) in captions.iter().zip(ground_truths) {
        let truth: BTreeSet<String> = truth.iter().map(|o| o.to_lowercase()).collect();
        let mentioned = extract_objects(cap.as_ref(), lexicon);
        let hallucinated: Vec<String> = mentioned
            .iter()
            .filter(|o| !truth.contains(*o))
            .cloned()
            .collect();
        mentions += mentioned.len();
        bad_mentions += hallucinated.len();
        if !hallucinated.is_empty() {
            bad_captions += 1;
        }
        details.push(CaptionDetail {
            mentioned,
            hallucinated,
        });
    }
    let chair_i = if mentions == 0 {
        0.0
    } else {
        bad_mentions as f64 / mentions as f64
    };
    Ok(ChairResult {
        chair_s: bad_captions as f64 / captions.len() as f64,
        chair_i,
        captions: captions.len(),
        mentions,
        hallucinated_mentions: bad_mentions,
        hallucinated_captions: bad_captions,
        details,
    })
}

/// One line of a caption corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub caption: String,
    pub objects: Vec<String>,
}

pub fn read_corpus<R: BufRead>(source: R) -> Result<Vec<CorpusEntry>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}

pub fn chair_corpus(corpus: &[CorpusEntry], lexicon: &ObjectLexicon) -> Result<ChairResult> {
    let caps: Vec<&str> = corpus.iter().map(|e| e.caption.as_str()).collect();
    let truths: Vec<BTreeSet<String>> = corpus
        .iter()
        .map(|e| e.objects.iter().cloned().collect())
        .collect();
    chair(&caps, &truths, lexicon)
}
