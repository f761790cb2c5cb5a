//! Binary update masks and their iterative calibration.
//!
//! A mask `c ∈ {0,1}^m` marks the coordinates fine-tuning may touch.
//! Calibration shrinks the kept set over `R` rounds following the schedule
//! `p_r = k_keep^(r/R)`, re-scoring the remaining candidates each round with
//! frozen coordinates scaled by a small soft value instead of zero.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::fisher::{self, ScoreMode, ScoreOptions, SensitivityScores};
use crate::format::{decode, write_file, MASK_MAGIC};
use crate::models::{FlatParams, Layout, Model};
use crate::numeric::floor_count;
use crate::{Error, Result};

pub const DEFAULT_SOFT_VALUE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Keep the least sensitive coordinates.
    BottomK,
    /// Keep the most sensitive coordinates.
    TopK,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMask {
    pub bits: Vec<bool>,
    pub soft_value: f64,
    pub keep_fraction: f64,
    pub selection_mode: SelectionMode,
    pub maskable: Vec<bool>,
}

impl SparseMask {
    /// Every maskable coordinate kept; non-maskable ones frozen.
    pub fn full(layout: &Layout) -> Self {
        let maskable = layout.maskable();
        SparseMask {
            bits: maskable.clone(),
            soft_value: DEFAULT_SOFT_VALUE,
            keep_fraction: 1.0,
            selection_mode: SelectionMode::BottomK,
            maskable,
        }
    }

    pub fn zeros(layout: &Layout) -> Self {
        SparseMask {
            bits: vec![false; layout.m()],
            keep_fraction: 0.0,
            ..SparseMask::full(layout)
        }
    }

    /// Mask from explicit bits; bits outside maskable segments are cleared.
    pub fn from_bits(layout: &Layout, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != layout.m() {
            return Err(Error::Shape(format!(
                "{} bits for {} parameters",
                bits.len(),
                layout.m()
            )));
        }
        let mut mask = SparseMask::full(layout);
        mask.bits = bits
            .iter()
            .zip(&mask.maskable)
            .map(|(b, ok)| *b && *ok)
            .collect();
        mask.keep_fraction = mask.kept_count() as f64 / mask.maskable_count().max(1) as f64;
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn maskable_count(&self) -> usize {
        self.maskable.iter().filter(|b| **b).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.bits[j]).collect()
    }

    /// `c` as 0.0 / 1.0.
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    /// Multipliers used while scoring: 1 for kept and non-maskable
    /// coordinates, `soft_value` for frozen maskable ones.
    pub fn soft_multipliers(&self) -> Vec<f64> {
        self.bits
            .iter()
            .zip(&self.maskable)
            .map(|(&b, &ok)| if ok && !b { self.soft_value } else { 1.0 })
            .collect()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.keep_fraction
    }

    /// Kept / total per segment, in layout order.
    pub fn per_layer(&self, layout: &Layout) -> Vec<LayerKeep> {
        layout
            .segments()
            .iter()
            .map(|s| LayerKeep {
                name: s.name.clone(),
                kind: s.kind.as_str().to_string(),
                maskable: s.kind.is_maskable(),
                kept: self.bits[s.range()].iter().filter(|b| **b).count(),
                total: s.len,
            })
            .collect()
    }

    /// Maskable segments whose every coordinate is frozen.
    pub fn collapsed_layers(&self, layout: &Layout) -> Vec<String> {
        self.per_layer(layout)
            .into_iter()
            .filter(|l| l.maskable && l.kept == 0 && l.total > 0)
            .map(|l| l.name)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKeep {
    pub name: String,
    pub kind: String,
    pub maskable: bool,
    pub kept: usize,
    pub total: usize,
}

impl LayerKeep {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.kept as f64 / self.total as f64
        }
    }
}

/// CSV `layer_name,kind,kept,total,keep_percent` over maskable segments.
pub fn write_per_layer_csv(path: &Path, mask: &SparseMask, layout: &Layout) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer_name", "kind", "kept", "total", "keep_percent"])?;
    for l in mask.per_layer(layout).into_iter().filter(|l| l.maskable) {
        w.write_record([
            l.name.clone(),
            l.kind.clone(),
            l.kept.to_string(),
            l.total.to_string(),
            format!("{:?}", l.percent()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// `k_keep = 1 − sparsity`.
    pub keep_fraction: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_round: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_soft")]
    pub soft_value: f64,
    /// Defaults from the class count when absent.
    #[serde(default)]
    pub score_mode: Option<ScoreMode>,
    #[serde(default = "default_label_samples")]
    pub n_label_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_rounds() -> usize {
    4
}
fn default_iterations() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_soft() -> f64 {
    DEFAULT_SOFT_VALUE
}
fn default_label_samples() -> usize {
    8
}

impl CalibrationConfig {
    pub fn with_sparsity(sparsity: f64) -> Self {
        CalibrationConfig {
            keep_fraction: 1.0 - sparsity,
            rounds: default_rounds(),
            iterations_per_round: default_iterations(),
            batch_size: default_batch(),
            soft_value: DEFAULT_SOFT_VALUE,
            score_mode: None,
            n_label_samples: default_label_samples(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction {} not in (0, 1]",
                self.keep_fraction
            )));
        }
        if self.iterations_per_round == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "iterations_per_round and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Keep fraction after round `r` of `rounds`.
pub fn schedule(keep_fraction: f64, r: usize, rounds: usize) -> Result<f64> {
    if r == 0 || r > rounds {
        return Err(Error::Config(format!("round {r} outside 1..={rounds}")));
    }
    if r == rounds {
        return Ok(keep_fraction);
    }
    Ok(keep_fraction.powf(r as f64 / rounds as f64))
}

/// Shrinks `mask` to keep `floor(p · m_maskable)` of its currently kept
/// coordinates, ranked by `scores`. Ties go to the lower index.
pub fn select(
    scores: Option<&SensitivityScores>,
    p: f64,
    mask: &SparseMask,
    mode: SelectionMode,
    seed: u64,
) -> Result<SparseMask> {
    let mut candidates: Vec<usize> = mask.kept_indices();
    let target = floor_count(p, mask.maskable_count());
    if candidates.is_empty() {
        return Err(Error::Empty("no kept coordinates to select from".into()));
    }
    if target > candidates.len() {
        return Err(Error::Config(format!(
            "keep fraction {p} asks for {target} coordinates but only {} are kept",
            candidates.len()
        )));
    }
    match mode {
        SelectionMode::Random => {
            candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        SelectionMode::BottomK | SelectionMode::TopK => {
            let s =
                scores.ok_or_else(|| Error::Config("score-based selection needs scores".into()))?;
            if s.len() != mask.len() {
                return Err(Error::Shape(format!(
                    "{} scores for a mask of {}",
                    s.len(),
                    mask.len()
                )));
            }
            let v = &s.values;
            if mode == SelectionMode::BottomK {
                candidates.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            } else {
                candidates.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
            }
        }
    }
    let mut bits = vec![false; mask.len()];
    for &j in &candidates[..target] {
        bits[j] = true;
    }
    Ok(SparseMask {
        bits,
        keep_fraction: p,
        selection_mode: mode,
        ..mask.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub keep_fraction: f64,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub mask: SparseMask,
    pub rounds: Vec<RoundRecord>,
    /// Scores from the last round (absent in random mode).
    pub last_scores: Option<SensitivityScores>,
    /// Maskable layers left with no kept coordinate.
    pub collapsed_layers: Vec<String>,
}

/// Runs the round loop on examples of a single task.
///
/// Each round scores at most `iterations_per_round · batch_size` examples of
/// `data`, drawn once with the configured seed.
pub fn calibrate(
    model: &Model,
    theta0: &FlatParams,
    data: &Samples,
    head: usize,
    config: &CalibrationConfig,
    mode: SelectionMode,
) -> Result<Calibration> {
    config.validate()?;
    model.ensure_layout(theta0)?;
    let layout = model.layout();
    let mut mask = SparseMask::full(layout);
    mask.soft_value = config.soft_value;
    mask.selection_mode = mode;
    let probe = data.sample_cap(config.iterations_per_round * config.batch_size, config.seed);
    let opts = ScoreOptions {
        mode: config
            .score_mode
            .unwrap_or_else(|| ScoreMode::default_for(model.num_classes())),
        n_label_samples: config.n_label_samples,
        seed: config.seed,
    };
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut last_scores = None;
    for r in 1..=config.rounds {
        let p = schedule(config.keep_fraction, r, config.rounds)?;
        let scores = match mode {
            SelectionMode::Random => None,
            _ => {
                let round_opts = ScoreOptions {
                    seed: opts.seed.wrapping_add(r as u64),
                    ..opts
                };
                Some(fisher::score(
                    model,
                    theta0,
                    Some(&mask),
                    &probe,
                    head,
                    &round_opts,
                )?)
            }
        };
        mask = select(
            scores.as_ref(),
            p,
            &mask,
            mode,
            config.seed.wrapping_add(r as u64),
        )?;
        rounds.push(RoundRecord {
            round: r,
            keep_fraction: p,
            kept: mask.kept_count(),
        });
        last_scores = scores;
    }
    let collapsed_layers = mask.collapsed_layers(layout);
    for name in &collapsed_layers {
        warn!("layer {name} is fully frozen by the calibrated mask");
    }
    Ok(Calibration {
        mask,
        rounds,
        last_scores,
        collapsed_layers,
    })
}

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    m: usize,
    model_hash: String,
    keep_count: usize,
    keep_fraction: f64,
    soft_value: f64,
    selection_mode: SelectionMode,
    #[serde(default)]
    config: Option<CalibrationConfig>,
}

fn pack(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i))
        })
        .collect()
}

fn unpack(bytes: &[u8], m: usize) -> Vec<bool> {
    (0..m).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect()
}

/// Writes the `TMSK1` file: header, kept bits, then maskable bits.
pub fn save_mask(
    path: &Path,
    mask: &SparseMask,
    model_hash: &str,
    config: Option<&CalibrationConfig>,
) -> Result<()> {
    let header = MaskHeader {
        m: mask.len(),
        model_hash: model_hash.to_string(),
        keep_count: mask.kept_count(),
        keep_fraction: mask.keep_fraction,
        soft_value: mask.soft_value,
        selection_mode: mask.selection_mode,
        config: config.cloned(),
    };
    let mut payload = pack(&mask.bits);
    payload.extend(pack(&mask.maskable));
    write_file(path, MASK_MAGIC, &header, &payload)
}

/// Returns the mask and the model hash it was calibrated against.
pub fn load_mask(path: &Path) -> Result<(SparseMask, String)> {
    let bytes = std::fs::read(path)?;
    let (h, payload): (MaskHeader, _) = decode(MASK_MAGIC, &bytes)?;
    let n = h.m.div_ceil(8);
    if payload.len() != 2 * n {
        return Err(Error::Format(format!(
            "mask payload of {} bytes for m = {}",
            payload.len(),
            h.m
        )));
    }
    let mask = SparseMask {
        bits: unpack(&payload[..n], h.m),
        maskable: unpack(&payload[n..], h.m),
        soft_value: h.soft_value,
        keep_fraction: h.keep_fraction,
        selection_mode: h.selection_mode,
    };
    if mask.kept_count() != h.keep_count {
        return Err(Error::Format(
            "mask keep count does not match its header".into(),
        ));
    }
    Ok((mask, h.model_hash))
}
