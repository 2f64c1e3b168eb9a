//! Validated dominance correction.
//!
//! For each generated token:
//!
//! 1. the token is *validated* if it is the dominant (rank-1, normalized) token
//!    of some validation-source stream at some considered layer;
//! 2. otherwise it is replaced by the token that is dominant at the most
//!    layers, where a layer counts once if the token is dominant in any
//!    correction-source stream there.
//!
//! Layers `1..=skip_layers` are ignored by both steps. Count ties go to the
//! token whose latest dominant layer is deepest, then to the lower token id of
//! its earliest occurrence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::Vocab;
use crate::model::{GenerateOptions, Prompt, ToyModel};
use crate::sad::{dominant_profile, DominanceProfile};
use crate::trace::{DecodeTrace, StepTrace, StreamKind, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceSet {
    LayerOnly,
    AttnFfn,
    AttnFfnLayer,
}

impl SourceSet {
    pub const ALL: [SourceSet; 3] = [
        SourceSet::LayerOnly,
        SourceSet::AttnFfn,
        SourceSet::AttnFfnLayer,
    ];

    /// Streams in scan order (layer output first).
    pub fn streams(self) -> &'static [StreamKind] {
        match self {
            SourceSet::LayerOnly => &[StreamKind::LayerOut],
            SourceSet::AttnFfn => &[StreamKind::AttnOut, StreamKind::FfnOut],
            SourceSet::AttnFfnLayer => &[
                StreamKind::LayerOut,
                StreamKind::AttnOut,
                StreamKind::FfnOut,
            ],
        }
    }
}

/// Tie-break for the replacement argmax among equal counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Deepest latest-dominant layer, then lower id of the earliest occurrence.
    #[default]
    DeepestThenLowestId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdcConfig {
    pub validation: SourceSet,
    pub correction: SourceSet,
    pub skip_layers: usize,
    pub tie_break: TieBreak,
    /// Online mode only: feed the corrected token back into the context.
    pub feedback: bool,
}

impl Default for VdcConfig {
    fn default() -> Self {
        Self {
            validation: SourceSet::AttnFfn,
            correction: SourceSet::AttnFfnLayer,
            skip_layers: 0,
            tie_break: TieBreak::default(),
            feedback: true,
        }
    }
}

fn considered(profile: &DominanceProfile, skip: usize) -> std::ops::RangeInclusive<usize> {
    skip + 1..=profile.num_layers()
}

/// Layers at which `x` is dominant in a validation stream.
pub fn witness_layers(x: &str, profile: &DominanceProfile, cfg: &VdcConfig) -> Vec<usize> {
    considered(profile, cfg.skip_layers)
        .filter(|&l| {
            cfg.validation
                .streams()
                .iter()
                .any(|&s| profile.dominant(s, l).normalized == x)
        })
        .collect()
}

pub fn validated(x: &str, profile: &DominanceProfile, cfg: &VdcConfig) -> bool {
    considered(profile, cfg.skip_layers).any(|l| {
        cfg.validation
            .streams()
            .iter()
            .any(|&s| profile.dominant(s, l).normalized == x)
    })
}

/// Layer-frequency statistics of one candidate replacement token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTally {
    pub normalized: String,
    pub count: usize,
    pub latest_layer: usize,
    pub earliest_id: TokenId,
    /// Token id, layer, and score of the highest-scoring dominant occurrence.
    pub best_id: TokenId,
    pub best_layer: usize,
    best_score: f64,
}

/// Tallies every token that is dominant in a correction stream at a considered layer.
pub fn tally(profile: &DominanceProfile, cfg: &VdcConfig) -> Vec<TokenTally> {
    let mut out: Vec<TokenTally> = Vec::new();
    for layer in considered(profile, cfg.skip_layers) {
        let mut counted_here: Vec<usize> = Vec::new();
        for &s in cfg.correction.streams() {
            let d = profile.dominant(s, layer);
            let idx = match out.iter().position(|t| t.normalized == d.normalized) {
                Some(i) => i,
                None => {
                    out.push(TokenTally {
                        normalized: d.normalized.clone(),
                        count: 0,
                        latest_layer: layer,
                        earliest_id: d.token_id,
                        best_id: d.token_id,
                        best_layer: layer,
                        best_score: d.score,
                    });
                    out.len() - 1
                }
            };
            let t = &mut out[idx];
            if !counted_here.contains(&idx) {
                t.count += 1;
                counted_here.push(idx);
            }
            t.latest_layer = layer;
            if d.score > t.best_score {
                t.best_id = d.token_id;
                t.best_layer = layer;
                t.best_score = d.score;
            }
        }
    }
    out
}

/// The chosen replacement token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replacement {
    pub id: TokenId,
    pub token: String,
    /// Layer of the occurrence whose token id is emitted.
    pub layer: usize,
    pub count: usize,
}

fn pick(tallies: &[TokenTally], rule: TieBreak) -> Option<&TokenTally> {
    match rule {
        TieBreak::DeepestThenLowestId => tallies.iter().max_by(|a, b| {
            a.count
                .cmp(&b.count)
                .then(a.latest_layer.cmp(&b.latest_layer))
                .then(b.earliest_id.cmp(&a.earliest_id))
        }),
    }
}

/// Most frequent dominant token over the considered layers; `None` only when
/// no layer is considered.
pub fn replacement(profile: &DominanceProfile, cfg: &VdcConfig) -> Option<Replacement> {
    pick(&tally(profile, cfg), cfg.tie_break).map(|t| Replacement {
        id: t.best_id,
        token: t.normalized.clone(),
        layer: t.best_layer,
        count: t.count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenRef {
    pub id: TokenId,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VdcStepReport {
    pub t: usize,
    pub original: TokenRef,
    pub validated: bool,
    pub replacement: Option<Replacement>,
    pub counts: BTreeMap<String, usize>,
    pub witness_layers: Vec<usize>,
}

impl VdcStepReport {
    /// Token id after correction.
    pub fn output_id(&self) -> TokenId {
        self.replacement.as_ref().map_or(self.original.id, |r| r.id)
    }

    pub fn output_token(&self) -> &str {
        self.replacement
            .as_ref()
            .map_or(self.original.token.as_str(), |r| r.token.as_str())
    }
}

fn check_skip(num_layers: usize, cfg: &VdcConfig) -> Result<()> {
    if cfg.skip_layers >= num_layers {
        return Err(Error::InvalidArgument(format!(
            "skip_layers {} must be below the {num_layers} layers",
            cfg.skip_layers
        )));
    }
    Ok(())
}

pub fn correct_profile(
    t: usize,
    original: TokenRef,
    profile: &DominanceProfile,
    cfg: &VdcConfig,
) -> Result<VdcStepReport> {
    check_skip(profile.num_layers(), cfg)?;
    let witnesses = witness_layers(&original.token, profile, cfg);
    let is_valid = !witnesses.is_empty();
    let tallies = tally(profile, cfg);
    let counts = tallies
        .iter()
        .map(|x| (x.normalized.clone(), x.count))
        .collect();
    let replacement = if is_valid {
        None
    } else {
        pick(&tallies, cfg.tie_break).map(|x| Replacement {
            id: x.best_id,
            token: x.normalized.clone(),
            layer: x.best_layer,
            count: x.count,
        })
    };
    Ok(VdcStepReport {
        t,
        original,
        validated: is_valid,
        replacement,
        counts,
        witness_layers: witnesses,
    })
}

pub fn correct_step(step: &StepTrace, cfg: &VdcConfig) -> Result<VdcStepReport> {
    let profile = dominant_profile(step)?;
    let original = TokenRef {
        id: step.emitted.token_id,
        token: step.emitted.normalized.clone(),
    };
    correct_profile(step.t, original, &profile, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VdcOutcome {
    pub corrected_ids: Vec<TokenId>,
    pub corrected_tokens: Vec<String>,
    pub reports: Vec<VdcStepReport>,
}

impl VdcOutcome {
    fn from_reports(reports: Vec<VdcStepReport>) -> Self {
        Self {
            corrected_ids: reports.iter().map(VdcStepReport::output_id).collect(),
            corrected_tokens: reports
                .iter()
                .map(|r| r.output_token().to_string())
                .collect(),
            reports,
        }
    }

    pub fn num_replaced(&self) -> usize {
        self.reports
            .iter()
            .filter(|r| r.replacement.is_some())
            .count()
    }
}

/// Offline correction of a recorded trace. The model cannot be re-conditioned
/// here, so `cfg.feedback` has no effect.
pub fn correct_trace(trace: &DecodeTrace, cfg: &VdcConfig) -> Result<VdcOutcome> {
    check_skip(trace.num_layers, cfg)?;
    let reports = trace
        .steps
        .iter()
        .map(|s| correct_step(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(VdcOutcome::from_reports(reports))
}

/// Histogram over layers (index `layer - 1`) of the occurrence each replacement was taken from.
pub fn correction_layer_histogram(reports: &[VdcStepReport], num_layers: usize) -> Vec<usize> {
    let mut bins = vec![0; num_layers];
    for r in reports {
        if let Some(rep) = &r.replacement {
            bins[rep.layer - 1] += 1;
        }
    }
    bins
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdcDecode {
    /// Instrumented trace; `emitted` holds the model's own greedy choices.
    pub trace: DecodeTrace,
    pub outcome: VdcOutcome,
}

/// Online correction: one forward pass per token, dominants read from that
/// same pass. With `feedback` the corrected token is what the model conditions on next.
pub fn decode_with_vdc(
    model: &ToyModel,
    prompt: &Prompt,
    vocab: &Vocab,
    opts: &GenerateOptions,
    cfg: &VdcConfig,
) -> Result<VdcDecode> {
    check_skip(model.config.num_layers, cfg)?;
    let mut reports = Vec::new();
    let trace = model.decode_loop(prompt, vocab, opts, |step| {
        let report = correct_step(step, cfg)?;
        let next = if cfg.feedback {
            report.output_id()
        } else {
            step.emitted.token_id
        };
        reports.push(report);
        Ok(next)
    })?;
    Ok(VdcDecode {
        trace,
        outcome: VdcOutcome::from_reports(reports),
    })
}
