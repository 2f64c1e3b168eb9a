//! Decode traces: the per-step, per-layer record of one generation.
//!
//! On disk a trace is UTF-8 JSON-lines. Line 1 is the header object; every
//! following line is one [`StepTrace`]. Field order is fixed by the struct
//! declarations below and optional fields are omitted rather than written as
//! `null`. Floats use the shortest representation that round-trips exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lens::Normalizer;

pub type TokenId = usize;

pub const TRACE_VERSION: i64 = 1;

/// Meta key under which a non-default normalization marker set is recorded.
pub const META_MARKERS: &str = "markers";

const RATIO_TOL: f64 = 1e-6;

/// Half-open token-index range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub system: Span,
    pub vision: Span,
    pub instruction: Span,
    pub output_start: usize,
}

impl SegmentMap {
    /// Contiguous layout `[system | vision | instruction]` starting at 0.
    pub fn contiguous(system: usize, vision: usize, instruction: usize) -> Self {
        let v0 = system;
        let i0 = v0 + vision;
        let o = i0 + instruction;
        Self {
            system: Span::new(0, v0),
            vision: Span::new(v0, i0),
            instruction: Span::new(i0, o),
            output_start: o,
        }
    }

    /// Token group of a context position: 0 system, 1 vision, 2 instruction, 3 output.
    pub fn group_of(&self, pos: usize) -> Option<usize> {
        if self.system.contains(pos) {
            Some(0)
        } else if self.vision.contains(pos) {
            Some(1)
        } else if self.instruction.contains(pos) {
            Some(2)
        } else if pos >= self.output_start {
            Some(3)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    LayerOut,
    AttnOut,
    FfnOut,
}

impl StreamKind {
    pub const ALL: [StreamKind; 3] = [
        StreamKind::LayerOut,
        StreamKind::AttnOut,
        StreamKind::FfnOut,
    ];

    /// Key used in the trace file and in CSV file names.
    pub fn key(self) -> &'static str {
        match self {
            StreamKind::LayerOut => "layer",
            StreamKind::AttnOut => "attn",
            StreamKind::FfnOut => "ffn",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "id")]
    pub token_id: TokenId,
    pub surface: String,
    pub normalized: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Streams {
    pub layer: Vec<Candidate>,
    pub attn: Vec<Candidate>,
    pub ffn: Vec<Candidate>,
}

impl Streams {
    pub fn get(&self, kind: StreamKind) -> &[Candidate] {
        match kind {
            StreamKind::LayerOut => &self.layer,
            StreamKind::AttnOut => &self.attn,
            StreamKind::FfnOut => &self.ffn,
        }
    }

    pub fn get_mut(&mut self, kind: StreamKind) -> &mut Vec<Candidate> {
        match kind {
            StreamKind::LayerOut => &mut self.layer,
            StreamKind::AttnOut => &mut self.attn,
            StreamKind::FfnOut => &mut self.ffn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// Attention mass of the query position on (system, vision, instruction, output).
    pub group_ratio: [f64; 4],
    /// Row-major `H×W` attention over the vision segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_attn: Option<Vec<f64>>,
    pub streams: Streams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub emitted: Candidate,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub version: i64,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub topk: usize,
    pub grid: Option<Grid>,
    pub segments: SegmentMap,
    pub meta: BTreeMap<String, String>,
    pub steps: Vec<StepTrace>,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    version: i64,
    num_layers: usize,
    vocab_size: usize,
    topk: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<Grid>,
    segments: &'a SegmentMap,
    meta: &'a BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct HeaderIn {
    version: i64,
    num_layers: usize,
    vocab_size: usize,
    topk: usize,
    #[serde(default)]
    grid: Option<Grid>,
    segments: SegmentMap,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl DecodeTrace {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Normalizer implied by the trace meta (default markers unless overridden).
    pub fn normalizer(&self) -> Normalizer {
        self.meta
            .get(META_MARKERS)
            .and_then(|m| serde_json::from_str::<Vec<String>>(m).ok())
            .map(Normalizer::new)
            .unwrap_or_default()
    }

    /// Emitted token ids in step order.
    pub fn emitted_ids(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.emitted.token_id).collect()
    }
}

/// One broken invariant, located by step and layer where applicable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub step: Option<usize>,
    pub layer: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)?;
        if let Some(s) = self.step {
            write!(f, " at step {s}")?;
        }
        if let Some(l) = self.layer {
            write!(f, " layer {l}")?;
        }
        Ok(())
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn push(
        &mut self,
        step: Option<usize>,
        layer: Option<usize>,
        field: &str,
        msg: impl Into<String>,
    ) {
        self.out.push(Violation {
            step,
            layer,
            field: field.to_string(),
            message: msg.into(),
        });
    }

    fn candidate(
        &mut self,
        c: &Candidate,
        trace: &DecodeTrace,
        norm: &Normalizer,
        step: Option<usize>,
        layer: Option<usize>,
        field: &str,
    ) {
        if !c.score.is_finite() {
            self.push(
                step,
                layer,
                field,
                format!("non-finite score for token {}", c.token_id),
            );
        }
        if c.token_id >= trace.vocab_size {
            self.push(
                step,
                layer,
                field,
                format!("token id {} outside vocabulary", c.token_id),
            );
        }
        if norm.normalize(&c.surface) != c.normalized {
            self.push(
                step,
                layer,
                field,
                format!(
                    "normalized {:?} does not match surface {:?}",
                    c.normalized, c.surface
                ),
            );
        }
    }
}

/// Checks every structural invariant of a trace. Empty result means valid.
pub fn validate(trace: &DecodeTrace) -> Vec<Violation> {
    let mut ck = Checker { out: Vec::new() };
    let norm = trace.normalizer();
    let l_total = trace.num_layers;

    if trace.version != TRACE_VERSION {
        ck.push(
            None,
            None,
            "version",
            format!("unsupported version {}", trace.version),
        );
    }
    if l_total == 0 {
        ck.push(None, None, "num_layers", "must be at least 1");
    }
    if trace.topk < 5 {
        ck.push(None, None, "topk", format!("K={} is below 5", trace.topk));
    }
    if trace.topk > trace.vocab_size {
        ck.push(
            None,
            None,
            "topk",
            format!("K={} exceeds vocab_size {}", trace.topk, trace.vocab_size),
        );
    }

    let seg = &trace.segments;
    let spans = [
        ("system", seg.system),
        ("vision", seg.vision),
        ("instruction", seg.instruction),
    ];
    for (name, s) in spans {
        if s.start > s.end {
            ck.push(
                None,
                None,
                "segments",
                format!("{name} range [{}, {}) is reversed", s.start, s.end),
            );
        }
    }
    if seg.vision.is_empty() {
        ck.push(None, None, "segments", "vision range is empty");
    }
    if seg.instruction.is_empty() {
        ck.push(None, None, "segments", "instruction range is empty");
    }
    if seg.system.end > seg.vision.start
        || seg.vision.end > seg.instruction.start
        || seg.instruction.end > seg.output_start
    {
        ck.push(
            None,
            None,
            "segments",
            "ranges must be disjoint and ordered system < vision < instruction < output",
        );
    }
    if let Some(g) = trace.grid {
        if g.h == 0 || g.w == 0 {
            ck.push(None, None, "grid", "zero-sized grid");
        } else if g.cells() != seg.vision.len() {
            ck.push(
                None,
                None,
                "grid",
                format!(
                    "{}x{} grid does not match {} vision tokens",
                    g.h,
                    g.w,
                    seg.vision.len()
                ),
            );
        }
    }

    for (i, step) in trace.steps.iter().enumerate() {
        let t = Some(step.t);
        if step.t != i + 1 {
            ck.push(t, None, "t", format!("expected step index {}", i + 1));
        }
        ck.candidate(&step.emitted, trace, &norm, t, None, "emitted");
        if step.layers.len() != l_total {
            ck.push(
                t,
                None,
                "layers",
                format!("{} layers, expected {}", step.layers.len(), l_total),
            );
        }
        for (j, rec) in step.layers.iter().enumerate() {
            let l = Some(rec.layer);
            if rec.layer != j + 1 {
                ck.push(t, l, "layer", format!("expected layer index {}", j + 1));
            }
            let r = &rec.group_ratio;
            let sum: f64 = r.iter().sum();
            if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > RATIO_TOL {
                ck.push(t, l, "group_ratio", "ratio sum/negativity");
            }
            if let Some(g) = &rec.visual_grid {
                match trace.grid {
                    None => ck.push(t, l, "visual_grid", "present but header has no grid"),
                    Some(gr) if gr.cells() != g.len() => ck.push(
                        t,
                        l,
                        "visual_grid",
                        format!("{} cells, expected {}", g.len(), gr.cells()),
                    ),
                    _ => {}
                }
                if g.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    ck.push(t, l, "visual_grid", "negative or non-finite entry");
                }
            }
            if let Some(a) = &rec.instruction_attn {
                if a.len() != seg.instruction.len() {
                    ck.push(
                        t,
                        l,
                        "instruction_attn",
                        format!("{} entries, expected {}", a.len(), seg.instruction.len()),
                    );
                }
                if a.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    ck.push(t, l, "instruction_attn", "negative or non-finite entry");
                }
            }
            for kind in StreamKind::ALL {
                let list = rec.streams.get(kind);
                let field = format!("streams.{}", kind.key());
                if list.len() != trace.topk {
                    ck.push(
                        t,
                        l,
                        &field,
                        format!("{} candidates, expected {}", list.len(), trace.topk),
                    );
                }
                if list.windows(2).any(|w| {
                    matches!(
                        w[0].score.partial_cmp(&w[1].score),
                        None | Some(std::cmp::Ordering::Less)
                    )
                }) {
                    ck.push(t, l, &field, "candidates not sorted by score descending");
                }
                let ids: BTreeSet<_> = list.iter().map(|c| c.token_id).collect();
                if ids.len() != list.len() {
                    ck.push(t, l, &field, "duplicate token ids");
                }
                for c in list {
                    ck.candidate(c, trace, &norm, t, l, &field);
                }
            }
        }
    }
    ck.out
}

/// Writes the JSON-lines representation. The trace must be valid.
pub fn write_trace<W: Write>(trace: &DecodeTrace, mut sink: W) -> Result<()> {
    let violations = validate(trace);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let header = HeaderOut {
        version: trace.version,
        num_layers: trace.num_layers,
        vocab_size: trace.vocab_size,
        topk: trace.topk,
        grid: trace.grid,
        segments: &trace.segments,
        meta: &trace.meta,
    };
    serde_json::to_writer(&mut sink, &header)?;
    sink.write_all(b"\n")?;
    for step in &trace.steps {
        serde_json::to_writer(&mut sink, step)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn trace_to_string(trace: &DecodeTrace) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

const HEADER_KEYS: &[&str] = &[
    "version",
    "num_layers",
    "vocab_size",
    "topk",
    "grid",
    "segments",
    "meta",
];
const STEP_KEYS: &[&str] = &["t", "emitted", "layers"];
const LAYER_KEYS: &[&str] = &[
    "layer",
    "group_ratio",
    "visual_grid",
    "instruction_attn",
    "streams",
];
const STREAM_KEYS: &[&str] = &["layer", "attn", "ffn"];
const CANDIDATE_KEYS: &[&str] = &["id", "surface", "normalized", "score"];

fn note_unknown(v: &Value, known: &[&str], path: &str, seen: &mut BTreeSet<String>) {
    if let Value::Object(map) = v {
        for k in map.keys() {
            if !known.contains(&k.as_str()) {
                let full = format!("{path}.{k}");
                if seen.insert(full.clone()) {
                    log::warn!("ignoring unknown trace field `{full}`");
                }
            }
        }
    }
}

fn scan_step_unknowns(v: &Value, seen: &mut BTreeSet<String>) {
    note_unknown(v, STEP_KEYS, "step", seen);
    note_unknown(&v["emitted"], CANDIDATE_KEYS, "step.emitted", seen);
    if let Some(layers) = v["layers"].as_array() {
        for l in layers {
            note_unknown(l, LAYER_KEYS, "layer", seen);
            note_unknown(&l["streams"], STREAM_KEYS, "layer.streams", seen);
            if let Value::Object(streams) = &l["streams"] {
                for (k, list) in streams {
                    for c in list.as_array().into_iter().flatten() {
                        note_unknown(c, CANDIDATE_KEYS, &format!("layer.streams.{k}[]"), seen);
                    }
                }
            }
        }
    }
}

fn parse_line(text: &str, line: usize, last_complete: usize) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| {
        let message = if e.is_eof() {
            if last_complete == 0 {
                format!("truncated input ({e}); no complete line")
            } else {
                format!("truncated input ({e}); last complete line is {last_complete}")
            }
        } else {
            e.to_string()
        };
        Error::Parse { line, message }
    })
}

/// Parses and validates a JSON-lines trace. Unknown fields are ignored with a warning.
pub fn read_trace<R: BufRead>(source: R) -> Result<DecodeTrace> {
    let mut header: Option<HeaderIn> = None;
    let mut steps = Vec::new();
    let mut seen = BTreeSet::new();
    let mut last_complete = 0;

    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let text = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Parse {
                line: lineno,
                message: "invalid UTF-8".into(),
            },
            _ => Error::Io(e),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let value = parse_line(&text, lineno, last_complete)?;
        let shape_err = |e: serde_json::Error| Error::Parse {
            line: lineno,
            message: e.to_string(),
        };
        if header.is_none() {
            match value.get("version").and_then(Value::as_i64) {
                Some(TRACE_VERSION) => {}
                Some(v) => return Err(Error::UnsupportedVersion(v)),
                None => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "header lacks an integer `version`".into(),
                    })
                }
            }
            note_unknown(&value, HEADER_KEYS, "header", &mut seen);
            note_unknown(
                &value["segments"],
                &["system", "vision", "instruction", "output_start"],
                "header.segments",
                &mut seen,
            );
            header = Some(serde_json::from_value(value).map_err(shape_err)?);
        } else {
            scan_step_unknowns(&value, &mut seen);
            steps.push(serde_json::from_value::<StepTrace>(value).map_err(shape_err)?);
        }
        last_complete = lineno;
    }

    let h = header.ok_or(Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let trace = DecodeTrace {
        version: h.version,
        num_layers: h.num_layers,
        vocab_size: h.vocab_size,
        topk: h.topk,
        grid: h.grid,
        segments: h.segments,
        meta: h.meta,
        steps,
    };
    let violations = validate(&trace);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(trace)
}

pub fn read_trace_file(path: impl AsRef<std::path::Path>) -> Result<DecodeTrace> {
    let f = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(f))
}

pub fn write_trace_file(trace: &DecodeTrace, path: impl AsRef<std::path::Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(f))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn cand(id: TokenId, surface: &str, score: f64) -> Candidate {
        Candidate {
            token_id: id,
            surface: surface.to_string(),
            normalized: Normalizer::default().normalize(surface),
            score,
        }
    }

    pub fn stream(ids: &[TokenId], k: usize) -> Vec<Candidate> {
        (0..k)
            .map(|r| {
                let id = ids.get(r).copied().unwrap_or(100 + r);
                cand(id, &format!("t{id}"), 10.0 - r as f64)
            })
            .collect()
    }

    /// Two layers, one step, no grids.
    pub fn minimal() -> DecodeTrace {
        let layers = (1..=2)
            .map(|l| LayerRecord {
                layer: l,
                group_ratio: [0.1, 0.4, 0.3, 0.2],
                visual_grid: None,
                instruction_attn: None,
                streams: Streams {
                    layer: stream(&[1, 2, 3, 4, 5], 5),
                    attn: stream(&[2, 1, 3, 4, 5], 5),
                    ffn: stream(&[3, 1, 2, 4, 5], 5),
                },
            })
            .collect();
        DecodeTrace {
            version: 1,
            num_layers: 2,
            vocab_size: 200,
            topk: 5,
            grid: None,
            segments: SegmentMap::contiguous(1, 4, 2),
            meta: BTreeMap::from([("model".to_string(), "fixture".to_string())]),
            steps: vec![StepTrace {
                t: 1,
                emitted: cand(1, "t1", 10.0),
                layers,
            }],
        }
    }
}
