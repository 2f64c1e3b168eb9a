//! Dominant-token tracking across layers and streams.
//!
//! A stream's dominant token at a layer is the normalized form of its rank-1
//! lens candidate; ranks 2–5 are its subdominant set. A step shows
//! subdominant accumulation when the emitted token is never dominant in the
//! attention or FFN stream at any considered layer.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trace::{DecodeTrace, StepTrace, StreamKind, TokenId};

/// Rank-1 occurrence of a token in one stream at one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dominant {
    pub token_id: TokenId,
    pub normalized: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceProfile {
    pub t: usize,
    num_layers: usize,
    /// Indexed `[stream][layer - 1]`, streams in `StreamKind::ALL` order.
    dominant: [Vec<Dominant>; 3],
    subdominant: [Vec<Vec<String>>; 3],
}

fn sidx(kind: StreamKind) -> usize {
    match kind {
        StreamKind::LayerOut => 0,
        StreamKind::AttnOut => 1,
        StreamKind::FfnOut => 2,
    }
}

impl DominanceProfile {
    /// Builds a profile directly from per-stream dominant lists (layer order).
    /// Used for synthetic profiles; every list must have the same length.
    pub fn from_dominants(
        t: usize,
        layer: Vec<Dominant>,
        attn: Vec<Dominant>,
        ffn: Vec<Dominant>,
    ) -> Result<Self> {
        let n = layer.len();
        if attn.len() != n || ffn.len() != n {
            return Err(Error::Shape("dominant lists differ in length".into()));
        }
        Ok(Self {
            t,
            num_layers: n,
            dominant: [layer, attn, ffn],
            subdominant: std::array::from_fn(|_| vec![Vec::new(); n]),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Dominant token of `kind` at 1-based `layer`.
    pub fn dominant(&self, kind: StreamKind, layer: usize) -> &Dominant {
        &self.dominant[sidx(kind)][layer - 1]
    }

    /// Normalized tokens at ranks 2–5 of `kind` at 1-based `layer`.
    pub fn subdominant(&self, kind: StreamKind, layer: usize) -> &[String] {
        &self.subdominant[sidx(kind)][layer - 1]
    }

    pub fn dominants(&self, kind: StreamKind) -> &[Dominant] {
        &self.dominant[sidx(kind)]
    }
}

pub fn dominance_profile(step: &StepTrace) -> Result<DominanceProfile> {
    build_profile(step, true)
}

/// Profile without subdominant sets, for callers that only read rank-1 tokens.
pub(crate) fn dominant_profile(step: &StepTrace) -> Result<DominanceProfile> {
    build_profile(step, false)
}

fn build_profile(step: &StepTrace, with_subdominant: bool) -> Result<DominanceProfile> {
    let n = step.layers.len();
    let mut dominant: [Vec<Dominant>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    let mut subdominant: [Vec<Vec<String>>; 3] = Default::default();
    for rec in &step.layers {
        for kind in StreamKind::ALL {
            let list = rec.streams.get(kind);
            if list.len() < 5 {
                return Err(Error::InvalidArgument(format!(
                    "step {} layer {} stream {kind}: {} candidates, need at least 5",
                    step.t,
                    rec.layer,
                    list.len()
                )));
            }
            let top = &list[0];
            dominant[sidx(kind)].push(Dominant {
                token_id: top.token_id,
                normalized: top.normalized.clone(),
                score: top.score,
            });
            subdominant[sidx(kind)].push(if with_subdominant {
                list[1..5].iter().map(|c| c.normalized.clone()).collect()
            } else {
                Vec::new()
            });
        }
    }
    Ok(DominanceProfile {
        t: step.t,
        num_layers: n,
        dominant,
        subdominant,
    })
}

/// Per-layer flags: `true` where the stream's dominant differs from the previous layer.
/// Layer 1 is always `true`.
pub fn change_mask(profile: &DominanceProfile, kind: StreamKind) -> Vec<bool> {
    let d = profile.dominants(kind);
    (0..d.len())
        .map(|i| i == 0 || d[i].normalized != d[i - 1].normalized)
        .collect()
}

/// `L×T` change matrix: `result[layer-1][t-1]`.
pub fn rank1_changes(trace: &DecodeTrace, kind: StreamKind) -> Result<Vec<Vec<bool>>> {
    let mut out = vec![Vec::with_capacity(trace.steps.len()); trace.num_layers];
    for step in &trace.steps {
        let mask = change_mask(&dominance_profile(step)?, kind);
        for (row, flag) in out.iter_mut().zip(mask) {
            row.push(flag);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SadReport {
    pub t: usize,
    pub emitted: String,
    pub sad_flag: bool,
    pub attn_dominant_ever: bool,
    pub ffn_dominant_ever: bool,
    pub subdominant_hits: usize,
    pub stabilization_layer: Option<usize>,
    pub rank1_change_mask: Rank1Masks,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rank1Masks {
    pub layer: Vec<bool>,
    pub attn: Vec<bool>,
    pub ffn: Vec<bool>,
}

/// Smallest layer from which the layer-output dominant equals the emitted token
/// at every deeper layer; `None` when even the last layer disagrees.
pub fn stabilization_layer(step: &StepTrace) -> Option<usize> {
    let emitted = &step.emitted.normalized;
    let mut first = None;
    for rec in step.layers.iter().rev() {
        match rec.streams.layer.first() {
            Some(c) if &c.normalized == emitted => first = Some(rec.layer),
            _ => break,
        }
    }
    first
}

pub fn detect_sad(step: &StepTrace, skip_layers: usize) -> Result<SadReport> {
    let profile = dominance_profile(step)?;
    let n = profile.num_layers();
    if skip_layers >= n {
        return Err(Error::InvalidArgument(format!(
            "skip_layers {skip_layers} must be below the {n} layers"
        )));
    }
    let x = &step.emitted.normalized;
    let mut attn_ever = false;
    let mut ffn_ever = false;
    let mut hits = 0;
    for layer in skip_layers + 1..=n {
        attn_ever |= &profile.dominant(StreamKind::AttnOut, layer).normalized == x;
        ffn_ever |= &profile.dominant(StreamKind::FfnOut, layer).normalized == x;
        for kind in [StreamKind::AttnOut, StreamKind::FfnOut] {
            if profile.subdominant(kind, layer).iter().any(|s| s == x) {
                hits += 1;
            }
        }
    }
    Ok(SadReport {
        t: step.t,
        emitted: x.clone(),
        sad_flag: !attn_ever && !ffn_ever,
        attn_dominant_ever: attn_ever,
        ffn_dominant_ever: ffn_ever,
        subdominant_hits: hits,
        stabilization_layer: stabilization_layer(step),
        rank1_change_mask: Rank1Masks {
            layer: change_mask(&profile, StreamKind::LayerOut),
            attn: change_mask(&profile, StreamKind::AttnOut),
            ffn: change_mask(&profile, StreamKind::FfnOut),
        },
    })
}

pub fn detect_sad_trace(trace: &DecodeTrace, skip_layers: usize) -> Result<Vec<SadReport>> {
    trace
        .steps
        .iter()
        .map(|s| detect_sad(s, skip_layers))
        .collect()
}

/// One row of a top-5 table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Top5Row {
    pub layer: usize,
    pub tokens: Vec<(String, f64)>,
}

pub fn top5_table(step: &StepTrace, kind: StreamKind) -> Result<Vec<Top5Row>> {
    step.layers
        .iter()
        .map(|rec| {
            let list = rec.streams.get(kind);
            if list.len() < 5 {
                return Err(Error::InvalidArgument(format!(
                    "layer {} stream {kind} has {} candidates, need 5",
                    rec.layer,
                    list.len()
                )));
            }
            Ok(Top5Row {
                layer: rec.layer,
                tokens: list[..5]
                    .iter()
                    .map(|c| (c.normalized.clone(), c.score))
                    .collect(),
            })
        })
        .collect()
}
