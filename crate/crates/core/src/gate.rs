//! Layer-stage analysis of where generated tokens attend.
//!
//! Layers are partitioned into named contiguous stages (by default Global,
//! Approach, Tighten, Explore). Visual attention grids are averaged per stage,
//! then compared to the all-layer average and to the neighbouring stage.
//! Differencing cancels position-independent sink mass, so no sink masking is
//! applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::trace::DecodeTrace;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Inclusive, 1-based.
    pub first: usize,
    pub last: usize,
}

impl Stage {
    pub fn new(name: impl Into<String>, first: usize, last: usize) -> Self {
        Self {
            name: name.into(),
            first,
            last,
        }
    }

    pub fn size(&self) -> usize {
        self.last + 1 - self.first
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    stages: Vec<Stage>,
}

impl StageSpec {
    /// Checks that the stages tile `1..=num_layers` in order.
    pub fn new(stages: Vec<Stage>, num_layers: usize) -> Result<Self> {
        if stages.len() < 2 {
            return Err(Error::Stages("need at least two stages".into()));
        }
        let mut next = 1;
        for s in &stages {
            if s.first != next || s.last < s.first {
                return Err(Error::Stages(format!(
                    "stage {} covers {}-{}, expected to start at {next}",
                    s.name, s.first, s.last
                )));
            }
            next = s.last + 1;
        }
        if next != num_layers + 1 {
            return Err(Error::Stages(format!(
                "stages end at layer {}, model has {num_layers}",
                next - 1
            )));
        }
        Ok(Self { stages })
    }

    /// Parses `Name:first-last,Name:first-last,...`.
    pub fn parse(text: &str, num_layers: usize) -> Result<Self> {
        let stages = text
            .split(',')
            .map(|part| {
                let (name, range) = part
                    .split_once(':')
                    .ok_or_else(|| Error::Stages(format!("`{part}` is not Name:first-last")))?;
                let (a, b) = range.split_once('-').unwrap_or((range, range));
                let num = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Stages(format!("bad layer number `{s}`")))
                };
                Ok(Stage::new(name.trim(), num(a)?, num(b)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages, num_layers)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn num_layers(&self) -> usize {
        self.stages.last().map_or(0, |s| s.last)
    }
}

/// Four stages with boundaries at `round(L·2/32)`, `round(L·16/32)`,
/// `round(L·26/32)`, nudged so every stage keeps at least one layer.
pub fn default_stages(num_layers: usize) -> Result<StageSpec> {
    if num_layers < 4 {
        return Err(Error::Stages(format!(
            "need at least 4 layers, got {num_layers}"
        )));
    }
    let l = num_layers as f64;
    let at = |frac: f64| (l * frac / 32.0).round() as usize;
    let mut b1 = at(2.0).max(1);
    let mut b2 = at(16.0).max(b1 + 1);
    let b3 = at(26.0).max(b2 + 1).min(num_layers - 1);
    b2 = b2.min(b3 - 1);
    b1 = b1.min(b2 - 1);
    StageSpec::new(
        vec![
            Stage::new("Global", 1, b1),
            Stage::new("Approach", b1 + 1, b2),
            Stage::new("Tighten", b2 + 1, b3),
            Stage::new("Explore", b3 + 1, num_layers),
        ],
        num_layers,
    )
}

fn require_steps(trace: &DecodeTrace) -> Result<()> {
    if trace.steps.is_empty() {
        Err(Error::EmptyTrace)
    } else {
        Ok(())
    }
}

/// `L×4` matrix of group attention ratios averaged over output steps.
pub fn attention_ratios(trace: &DecodeTrace) -> Result<Matrix> {
    require_steps(trace)?;
    let mut out = Matrix::zeros(trace.num_layers, 4);
    let n = trace.steps.len() as f64;
    for step in &trace.steps {
        for rec in &step.layers {
            for (g, r) in rec.group_ratio.iter().enumerate() {
                let cur = out.get(rec.layer - 1, g);
                out.set(rec.layer - 1, g, cur + r / n);
            }
        }
    }
    Ok(out)
}

fn grid_shape(trace: &DecodeTrace) -> Result<(usize, usize)> {
    trace
        .grid
        .map(|g| (g.h, g.w))
        .ok_or(Error::MissingField("grid"))
}

/// Mean visual grid over all steps and the layers `first..=last`.
pub fn stage_average(trace: &DecodeTrace, first: usize, last: usize) -> Result<Matrix> {
    require_steps(trace)?;
    let (h, w) = grid_shape(trace)?;
    if first == 0 || last < first || last > trace.num_layers {
        return Err(Error::InvalidArgument(format!(
            "layer range {first}-{last} outside 1-{}",
            trace.num_layers
        )));
    }
    let mut sum = vec![0.0; h * w];
    let mut n = 0usize;
    for step in &trace.steps {
        for rec in &step.layers[first - 1..last] {
            let g = rec
                .visual_grid
                .as_ref()
                .ok_or(Error::MissingField("visual_grid"))?;
            for (s, x) in sum.iter_mut().zip(g) {
                *s += x;
            }
            n += 1;
        }
    }
    let data = sum.into_iter().map(|s| s / n as f64).collect();
    Matrix::from_vec(h, w, data)
}

pub fn global_average(trace: &DecodeTrace) -> Result<Matrix> {
    stage_average(trace, 1, trace.num_layers)
}

fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn check_spec(trace: &DecodeTrace, stages: &StageSpec) -> Result<()> {
    if stages.num_layers() != trace.num_layers {
        return Err(Error::Stages(format!(
            "stage spec covers {} layers, trace has {}",
            stages.num_layers(),
            trace.num_layers
        )));
    }
    Ok(())
}

/// Per stage: stage average minus the all-layer average.
pub fn stage_to_global(trace: &DecodeTrace, stages: &StageSpec) -> Result<Vec<Matrix>> {
    check_spec(trace, stages)?;
    let global = global_average(trace)?;
    stages
        .stages()
        .iter()
        .map(|s| Ok(sub(&stage_average(trace, s.first, s.last)?, &global)))
        .collect()
}

/// For consecutive stages `(i, i+1)`: average of `i+1` minus average of `i`.
pub fn inter_stage(trace: &DecodeTrace, stages: &StageSpec) -> Result<Vec<Matrix>> {
    check_spec(trace, stages)?;
    let avgs = stages
        .stages()
        .iter()
        .map(|s| stage_average(trace, s.first, s.last))
        .collect::<Result<Vec<_>>>()?;
    Ok(avgs.windows(2).map(|w| sub(&w[1], &w[0])).collect())
}

/// `L × |instruction|` mean attention on each instruction token.
pub fn instruction_heatmap(trace: &DecodeTrace) -> Result<Matrix> {
    require_steps(trace)?;
    let width = trace.segments.instruction.len();
    let mut out = Matrix::zeros(trace.num_layers, width);
    let n = trace.steps.len() as f64;
    for step in &trace.steps {
        for rec in &step.layers {
            let a = rec
                .instruction_attn
                .as_ref()
                .ok_or(Error::MissingField("instruction_attn"))?;
            for (c, x) in a.iter().enumerate() {
                let cur = out.get(rec.layer - 1, c);
                out.set(rec.layer - 1, c, cur + x / n);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateReport {
    pub stages: StageSpec,
    pub ratios: Matrix,
    pub stage_avg: Vec<Matrix>,
    pub stage_to_global: Vec<Matrix>,
    pub inter_stage: Vec<Matrix>,
}

/// Ratios always; grids only when `with_grids`.
pub fn gate_report(
    trace: &DecodeTrace,
    stages: &StageSpec,
    with_grids: bool,
) -> Result<GateReport> {
    check_spec(trace, stages)?;
    let ratios = attention_ratios(trace)?;
    let (stage_avg, stage_to_global, inter) = if with_grids {
        let avg = stages
            .stages()
            .iter()
            .map(|s| stage_average(trace, s.first, s.last))
            .collect::<Result<Vec<_>>>()?;
        (
            avg,
            self::stage_to_global(trace, stages)?,
            inter_stage(trace, stages)?,
        )
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    Ok(GateReport {
        stages: stages.clone(),
        ratios,
        stage_avg,
        stage_to_global,
        inter_stage: inter,
    })
}
