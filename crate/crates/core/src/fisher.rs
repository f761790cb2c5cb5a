//! Diagonal Fisher information as a per-parameter sensitivity score.
//!
//! Scores are the true Fisher: labels come from the model's own predictive
//! distribution, never from the dataset. For one example with logit Jacobian
//! `J` and probabilities `p`, the log-likelihood gradient for class `y` is
//! `Jᵀ(e_y − p)`, so every mode reuses a single Jacobian per example.

use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::mask::SparseMask;
use crate::models::{FlatParams, Layout, Model};
use crate::numeric::pairwise_sum_vectors;
use crate::{exec, Error, Result};

/// Lower bound applied to predicted probabilities before they weight or
/// sample classes.
pub const PROB_FLOOR: f64 = 1e-12;

/// Examples per reduction chunk. Fixed so that the summation order does not
/// depend on the thread count.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Monte-Carlo over labels drawn from the model.
    Sampled,
    /// Exact expectation by enumerating every class.
    ExactExpectation,
    /// Expected absolute gradient, `Σ_y p_y |∇ log p_y|`.
    AbsGrad,
}

impl ScoreMode {
    pub fn default_for(num_classes: usize) -> Self {
        if num_classes <= 16 {
            ScoreMode::ExactExpectation
        } else {
            ScoreMode::Sampled
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityScores {
    pub values: Vec<f64>,
    pub n_examples: usize,
    pub n_label_samples: usize,
    pub mode: ScoreMode,
}

impl SensitivityScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with columns `index,layer_name,score`.
    pub fn write_csv(&self, path: &Path, layout: &Layout) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "layer_name", "score"])?;
        for (j, v) in self.values.iter().enumerate() {
            let name = layout.segment_of(j).map(|s| s.name.as_str()).unwrap_or("");
            w.write_record([j.to_string(), name.to_string(), format!("{v:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub mode: ScoreMode,
    /// Label draws per example in sampled mode.
    pub n_label_samples: usize,
    pub seed: u64,
}

impl ScoreOptions {
    pub fn for_classes(num_classes: usize) -> Self {
        ScoreOptions {
            mode: ScoreMode::default_for(num_classes),
            n_label_samples: 8,
            seed: 0,
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| (v / s).max(PROB_FLOOR)).collect()
}

/// Per-class weights for one example: `weights[y]` multiplies the
/// contribution of class `y`.
fn class_weights(p: &[f64], opts: &ScoreOptions, example: usize) -> Result<Vec<f64>> {
    match opts.mode {
        ScoreMode::ExactExpectation | ScoreMode::AbsGrad => Ok(p.to_vec()),
        ScoreMode::Sampled => {
            if opts.n_label_samples == 0 {
                return Err(Error::Config("n_label_samples must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(example as u64);
            let dist = WeightedIndex::new(p)
                .map_err(|e| Error::Numeric(format!("label distribution: {e}")))?;
            let mut counts = vec![0usize; p.len()];
            for _ in 0..opts.n_label_samples {
                counts[dist.sample(&mut rng)] += 1;
            }
            let n = opts.n_label_samples as f64;
            Ok(counts.into_iter().map(|c| c as f64 / n).collect())
        }
    }
}

fn example_contribution(
    model: &Model,
    effective: &FlatParams,
    x: &[f64],
    head: usize,
    opts: &ScoreOptions,
    example: usize,
) -> Result<Vec<f64>> {
    let jac = model.logit_jacobian(effective, x, head)?;
    let logits = model.forward(effective, x, head)?;
    let p = softmax(logits.data());
    let weights = class_weights(&p, opts, example)?;
    let m = effective.len();
    let mut acc = vec![0.0; m];
    for (y, &wy) in weights.iter().enumerate() {
        if wy == 0.0 {
            continue;
        }
        for j in 0..m {
            // ∂ log p_y / ∂θ_j = Σ_c (δ_yc − p_c) ∂z_c/∂θ_j
            let mut g = jac[y][j];
            for (c, row) in jac.iter().enumerate() {
                g -= p[c] * row[j];
            }
            acc[j] += match opts.mode {
                ScoreMode::AbsGrad => wy * g.abs(),
                _ => wy * g * g,
            };
        }
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite score contribution at example {example}"
        )));
    }
    Ok(acc)
}

/// Mean over `data` of the diagonal Fisher (or |gradient| in `AbsGrad`
/// mode), evaluated at the soft-masked parameters when `mask` is given.
/// Gradients are taken with respect to those effective parameters.
pub fn score(
    model: &Model,
    params: &FlatParams,
    mask: Option<&SparseMask>,
    data: &Samples,
    head: usize,
    opts: &ScoreOptions,
) -> Result<SensitivityScores> {
    if data.is_empty() {
        return Err(Error::Empty("no examples to score".into()));
    }
    if !params.is_finite() {
        return Err(Error::Numeric(
            "parameters contain non-finite values".into(),
        ));
    }
    model.ensure_layout(params)?;
    let effective = match mask {
        Some(c) => {
            if c.len() != params.len() {
                return Err(Error::Shape(format!(
                    "mask of length {} for {} parameters",
                    c.len(),
                    params.len()
                )));
            }
            let mult = c.soft_multipliers();
            params.with_values(
                params
                    .values
                    .iter()
                    .zip(&mult)
                    .map(|(v, s)| v * s)
                    .collect(),
            )?
        }
        None => params.clone(),
    };
    let m = params.len();
    let chunks = exec::chunk_ranges(data.len(), CHUNK);
    let partial = exec::try_map_indexed(chunks.len(), |ci| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; m];
        for i in chunks[ci].clone() {
            let c = example_contribution(model, &effective, data.row(i), head, opts, i)?;
            for (a, v) in acc.iter_mut().zip(&c) {
                *a += v;
            }
        }
        Ok(acc)
    })?;
    let n = data.len() as f64;
    let values = pairwise_sum_vectors(&partial, m)
        .into_iter()
        .map(|v| v / n)
        .collect();
    Ok(SensitivityScores {
        values,
        n_examples: data.len(),
        n_label_samples: if opts.mode == ScoreMode::Sampled {
            opts.n_label_samples
        } else {
            0
        },
        mode: opts.mode,
    })
}
