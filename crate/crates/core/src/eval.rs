//! Measurements: accuracies, weight disentanglement, localization, the
//! sparse-update bound, linear-regime diagnostics, mask overlap and
//! sensitivity pruning.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::fisher::SensitivityScores;
use crate::mask::SparseMask;
use crate::models::{argmax_rows, FlatParams, Layout, Model};
use crate::numeric::{floor_count, l2_norm, linspace};
use crate::task_vector::{apply_with_hash, TaskVector};
use crate::{exec, Error, Result};

/// Rows per forward pass when evaluating large splits.
const EVAL_CHUNK: usize = 256;

/// A split together with the head that classifies it.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub data: &'a Samples,
    pub head: usize,
}

impl<'a> EvalSet<'a> {
    pub fn new(data: &'a Samples, head: usize) -> Self {
        EvalSet { data, head }
    }
}

/// Argmax predictions over the whole split.
pub fn predictions(model: &Model, params: &FlatParams, set: EvalSet<'_>) -> Result<Vec<usize>> {
    let d = set.data.dim;
    let chunks = exec::chunk_ranges(set.data.len(), EVAL_CHUNK);
    let parts = exec::try_map_indexed(chunks.len(), |c| {
        let r = chunks[c].clone();
        model.predict(params, &set.data.x[r.start * d..r.end * d], set.head)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn accuracy(model: &Model, params: &FlatParams, set: EvalSet<'_>) -> Result<f64> {
    if set.data.is_empty() {
        return Err(Error::Empty("accuracy of an empty dataset".into()));
    }
    let pred = predictions(model, params, set)?;
    let correct = pred.iter().zip(&set.data.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / set.data.len() as f64)
}

/// Mean of `multi[t] / single[t]`.
pub fn normalized_accuracy(multi: &[f64], single: &[f64]) -> Result<f64> {
    if multi.len() != single.len() || multi.is_empty() {
        return Err(Error::Shape(format!(
            "{} multi-task vs {} single-task accuracies",
            multi.len(),
            single.len()
        )));
    }
    if single.iter().any(|s| *s <= 0.0) {
        return Err(Error::Numeric("single-task accuracy of zero".into()));
    }
    Ok(multi.iter().zip(single).map(|(a, b)| a / b).sum::<f64>() / multi.len() as f64)
}

fn mismatch(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub alphas1: Vec<f64>,
    pub alphas2: Vec<f64>,
    /// `xi[i][j]` at `(alphas1[i], alphas2[j])`.
    pub xi: Vec<Vec<f64>>,
    pub sample_count: [usize; 2],
    /// ξ evaluated at the origin.
    pub xi_origin: f64,
}

impl EvalGrid {
    /// Mean ξ over grid points with both coordinates in `[lo, hi]`.
    pub fn mean_over(&self, lo: f64, hi: f64) -> Option<f64> {
        let mut s = 0.0;
        let mut n = 0usize;
        for (i, a) in self.alphas1.iter().enumerate() {
            for (j, b) in self.alphas2.iter().enumerate() {
                if (lo..=hi).contains(a) && (lo..=hi).contains(b) {
                    s += self.xi[i][j];
                    n += 1;
                }
            }
        }
        (n > 0).then(|| s / n as f64)
    }

    /// Long-format CSV `alpha1,alpha2,xi`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["alpha1", "alpha2", "xi"])?;
        for (i, a) in self.alphas1.iter().enumerate() {
            for (j, b) in self.alphas2.iter().enumerate() {
                w.write_record([
                    format!("{a:?}"),
                    format!("{b:?}"),
                    format!("{:?}", self.xi[i][j]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: -3.0,
            hi: 3.0,
            points: 20,
            sample_cap: 2048,
            seed: 0,
        }
    }
}

/// Disentanglement error of two task vectors over a square α grid.
pub struct Disentanglement<'a> {
    model: &'a Model,
    theta0: &'a FlatParams,
    hash: String,
    tau: [&'a TaskVector; 2],
    sets: [Samples; 2],
    heads: [usize; 2],
}

impl<'a> Disentanglement<'a> {
    pub fn new(
        model: &'a Model,
        theta0: &'a FlatParams,
        tau: [&'a TaskVector; 2],
        sets: [EvalSet<'_>; 2],
        sample_cap: usize,
        seed: u64,
    ) -> Result<Self> {
        if sample_cap < 1 {
            return Err(Error::Config("sample_cap must be at least 1".into()));
        }
        Ok(Disentanglement {
            model,
            theta0,
            hash: theta0.content_hash(),
            tau,
            sets: [
                sets[0].data.sample_cap(sample_cap, seed),
                sets[1].data.sample_cap(sample_cap, seed.wrapping_add(1)),
            ],
            heads: [sets[0].head, sets[1].head],
        })
    }

    fn preds(&self, terms: &[(f64, &TaskVector)], t: usize) -> Result<Vec<usize>> {
        let p = apply_with_hash(self.theta0, &self.hash, terms)?;
        predictions(self.model, &p, EvalSet::new(&self.sets[t], self.heads[t]))
    }

    /// `ξ(α1, α2)` from scratch.
    pub fn xi_at(&self, a1: f64, a2: f64) -> Result<f64> {
        let both = [(a1, self.tau[0]), (a2, self.tau[1])];
        let mut xi = 0.0;
        for (t, alpha) in [a1, a2].into_iter().enumerate() {
            let single = self.preds(&[(alpha, self.tau[t])], t)?;
            xi += mismatch(&single, &self.preds(&both, t)?);
        }
        Ok(xi)
    }

    pub fn grid(&self, spec: &GridSpec) -> Result<EvalGrid> {
        let alphas = linspace(spec.lo, spec.hi, spec.points);
        let n = alphas.len();
        // single-vector predictions depend on one coordinate only
        let singles = exec::try_map_indexed(2 * n, |k| {
            let (t, i) = (k / n, k % n);
            self.preds(&[(alphas[i], self.tau[t])], t)
        })?;
        let cells = exec::try_map_indexed(n * n, |k| -> Result<f64> {
            let (i, j) = (k / n, k % n);
            let both = [(alphas[i], self.tau[0]), (alphas[j], self.tau[1])];
            Ok(mismatch(&singles[i], &self.preds(&both, 0)?)
                + mismatch(&singles[n + j], &self.preds(&both, 1)?))
        })?;
        Ok(EvalGrid {
            alphas1: alphas.clone(),
            alphas2: alphas,
            xi: cells.chunks(n.max(1)).map(|r| r.to_vec()).collect(),
            sample_count: [self.sets[0].len(), self.sets[1].len()],
            xi_origin: self.xi_at(0.0, 0.0)?,
        })
    }
}

/// Square matrix with labels, written as CSV with a leading label column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Matrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["row".to_string()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (r, vals) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![r.clone()];
            rec.extend(vals.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn min_off_diagonal(&self) -> Option<f64> {
        let mut out: Option<f64> = None;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    out = Some(out.map_or(*v, |o| o.min(*v)));
                }
            }
        }
        out
    }

    pub fn min(&self) -> Option<f64> {
        self.values.iter().flatten().cloned().reduce(f64::min)
    }
}

fn task_labels(n: usize) -> Vec<String> {
    (0..n).map(|t| format!("task{t}")).collect()
}

/// Entry `(t, t′)`: accuracy of `edited[t]` on task `t′` over the accuracy
/// of `theta0` on `t′`.
pub fn localization_matrix(
    model: &Model,
    theta0: &FlatParams,
    edited: &[FlatParams],
    sets: &[EvalSet<'_>],
) -> Result<Matrix> {
    if edited.len() != sets.len() {
        return Err(Error::Empty(format!(
            "{} checkpoints for {} tasks",
            edited.len(),
            sets.len()
        )));
    }
    let base = sets
        .iter()
        .map(|s| accuracy(model, theta0, *s))
        .collect::<Result<Vec<_>>>()?;
    if base.contains(&0.0) {
        return Err(Error::Numeric(
            "pre-trained accuracy of zero on some task".into(),
        ));
    }
    let n = sets.len();
    let flat = exec::try_map_indexed(n * n, |k| {
        let (t, u) = (k / n, k % n);
        Ok::<_, Error>(accuracy(model, &edited[t], sets[u])? / base[u])
    })?;
    Ok(Matrix {
        rows: task_labels(n),
        cols: task_labels(n),
        values: flat.chunks(n.max(1)).map(|r| r.to_vec()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    /// Largest `|Σ_j c_j τ_j ∂f/∂θ_j|` over sampled (input, logit) pairs.
    pub lhs_max: f64,
    /// Largest `‖c⊙τ‖ · ‖c⊙∇f‖`.
    pub norm_product: f64,
    pub k2_mu_eta: f64,
    pub k_count: usize,
    pub mu: f64,
    pub eta: f64,
    pub pairs_checked: usize,
    pub violations: usize,
    pub holds: bool,
}

const BOUND_SLACK: f64 = 1e-9;

fn within(a: f64, b: f64) -> bool {
    a <= b + BOUND_SLACK * b.abs().max(1.0)
}

/// Checks `|(c⊙τ)ᵀ∇f| ≤ ‖c⊙τ‖‖c⊙∇f‖ ≤ k²μη` for every logit of every input,
/// with `μ = max |c⊙τ|` and `η` the largest kept-coordinate gradient
/// magnitude over the sample.
pub fn bound_check(
    model: &Model,
    theta0: &FlatParams,
    tau: &TaskVector,
    mask: &SparseMask,
    set: EvalSet<'_>,
) -> Result<BoundRecord> {
    if mask.len() != theta0.len() || tau.m != theta0.len() {
        return Err(Error::Shape(
            "mask, task vector and parameters differ in length".into(),
        ));
    }
    let c = mask.as_f64();
    let ct: Vec<f64> = tau.to_dense().iter().zip(&c).map(|(t, c)| t * c).collect();
    let k = mask.kept_count();
    let mu = ct.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ct_norm = l2_norm(&ct);
    let per_input = exec::try_map_indexed(set.data.len(), |i| -> Result<Vec<(f64, f64, f64)>> {
        let x = set.data.row(i);
        let lhs = model.jvp(theta0, &ct, x, set.head)?;
        let jac = model.logit_jacobian(theta0, x, set.head)?;
        let mut out = Vec::with_capacity(jac.len());
        for (row, l) in jac.iter().zip(lhs.data()) {
            let masked: Vec<f64> = row.iter().zip(&c).map(|(g, c)| g * c).collect();
            if masked.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite gradient in bound check".into()));
            }
            let eta = masked.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            out.push((l.abs(), ct_norm * l2_norm(&masked), eta));
        }
        Ok(out)
    })?;
    let pairs: Vec<(f64, f64, f64)> = per_input.into_iter().flatten().collect();
    let eta = pairs.iter().fold(0.0f64, |a, p| a.max(p.2));
    let k2 = (k as f64) * (k as f64) * mu * eta;
    let violations = pairs
        .iter()
        .filter(|(lhs, mid, _)| !(within(*lhs, *mid) && within(*mid, k2)))
        .count();
    Ok(BoundRecord {
        lhs_max: pairs.iter().fold(0.0, |a, p| a.max(p.0)),
        norm_product: pairs.iter().fold(0.0, |a, p| a.max(p.1)),
        k2_mu_eta: k2,
        k_count: k,
        mu,
        eta,
        pairs_checked: pairs.len(),
        violations,
        holds: violations == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSeries {
    /// `E_x Σ_c ‖∇z_c(θ_i) − ∇z_c(θ0)‖²` per snapshot.
    pub absolute: Vec<f64>,
    /// `E_x Σ_c ‖∇z_c(θ0)‖²`.
    pub baseline: f64,
    /// `absolute / baseline`.
    pub relative: Vec<f64>,
}

impl DriftSeries {
    pub fn final_relative(&self) -> f64 {
        self.relative.last().copied().unwrap_or(0.0)
    }
}

/// Displacement of the logit gradients along a training trajectory.
pub fn gradient_drift(
    model: &Model,
    theta0: &FlatParams,
    trajectory: &[FlatParams],
    probe: EvalSet<'_>,
) -> Result<DriftSeries> {
    if probe.data.is_empty() {
        return Err(Error::Empty("empty probe set".into()));
    }
    let n = probe.data.len();
    let base: Vec<Vec<Vec<f64>>> = exec::try_map_indexed(n, |i| {
        model.logit_jacobian(theta0, probe.data.row(i), probe.head)
    })?;
    let baseline = base.iter().flatten().flatten().map(|g| g * g).sum::<f64>() / n as f64;
    let mut absolute = Vec::with_capacity(trajectory.len());
    for theta in trajectory {
        let per = exec::try_map_indexed(n, |i| -> Result<f64> {
            let jac = model.logit_jacobian(theta, probe.data.row(i), probe.head)?;
            Ok(jac
                .iter()
                .flatten()
                .zip(base[i].iter().flatten())
                .map(|(a, b)| (a - b) * (a - b))
                .sum())
        })?;
        absolute.push(per.iter().sum::<f64>() / n as f64);
    }
    let relative = absolute
        .iter()
        .map(|a| if baseline > 0.0 { a / baseline } else { 0.0 })
        .collect();
    Ok(DriftSeries {
        absolute,
        baseline,
        relative,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationGap {
    pub acc_nonlinear: f64,
    pub acc_linearized: f64,
}

impl LinearizationGap {
    pub fn abs_gap(&self) -> f64 {
        (self.acc_nonlinear - self.acc_linearized).abs()
    }
}

/// Accuracy of `θ0 + τ` against the first-order model `f(θ0) + Jτ`.
pub fn posthoc_linearization_gap(
    model: &Model,
    theta0: &FlatParams,
    tau: &TaskVector,
    set: EvalSet<'_>,
) -> Result<LinearizationGap> {
    if set.data.is_empty() {
        return Err(Error::Empty("empty evaluation set".into()));
    }
    let edited = apply_with_hash(theta0, &theta0.content_hash(), &[(1.0, tau)])?;
    let acc_nonlinear = accuracy(model, &edited, set)?;
    let dense = tau.to_dense();
    let (z, zt) = model.forward_with_tangent(theta0, &dense, &set.data.x, set.head)?;
    let lin: Vec<f64> = z.data().iter().zip(zt.data()).map(|(a, b)| a + b).collect();
    let lin = crate::autodiff::Tensor::matrix(z.rows(), z.cols(), lin)?;
    let pred = argmax_rows(&lin);
    let correct = pred.iter().zip(&set.data.y).filter(|(p, y)| p == y).count();
    Ok(LinearizationGap {
        acc_nonlinear,
        acc_linearized: correct as f64 / set.data.len() as f64,
    })
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_masks(a: &SparseMask, b: &SparseMask) -> Result<()> {
    if a.len() != b.len() || a.maskable != b.maskable {
        return Err(Error::Shape(format!(
            "masks of length {} and {} are not comparable",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Intersection over union of the kept sets.
pub fn mask_miou(a: &SparseMask, b: &SparseMask) -> Result<f64> {
    check_masks(a, b)?;
    Ok(iou(&a.bits, &b.bits))
}

/// IoU per maskable segment and their mean.
pub fn mask_miou_per_layer(
    a: &SparseMask,
    b: &SparseMask,
    layout: &Layout,
) -> Result<(Vec<(String, f64)>, f64)> {
    check_masks(a, b)?;
    let per: Vec<(String, f64)> = layout
        .segments()
        .iter()
        .filter(|s| s.kind.is_maskable())
        .map(|s| (s.name.clone(), iou(&a.bits[s.range()], &b.bits[s.range()])))
        .collect();
    let mean = if per.is_empty() {
        1.0
    } else {
        per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64
    };
    Ok((per, mean))
}

/// Expected IoU of two independent uniformly random keep-`p` masks.
pub fn random_miou(p: f64) -> f64 {
    p / (2.0 - p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Zero,
    Perturb,
}

/// Edits the `fraction` least sensitive maskable coordinates: sets them to
/// zero, or adds Gaussian noise with standard deviation `2σ` where `σ` is
/// the standard deviation of the selected values.
pub fn prune_least_sensitive(
    theta0: &FlatParams,
    scores: &SensitivityScores,
    fraction: f64,
    mode: PruneMode,
    seed: u64,
) -> Result<FlatParams> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} not in [0, 1)")));
    }
    if scores.len() != theta0.len() {
        return Err(Error::Shape(
            "scores and parameters differ in length".into(),
        ));
    }
    let maskable = theta0.layout().maskable();
    let mut idx: Vec<usize> = (0..theta0.len()).filter(|&j| maskable[j]).collect();
    let v = &scores.values;
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx.truncate(floor_count(fraction, idx.len()));
    let mut values = theta0.values.clone();
    match mode {
        PruneMode::Zero => idx.iter().for_each(|&j| values[j] = 0.0),
        PruneMode::Perturb => {
            if !idx.is_empty() {
                let n = idx.len() as f64;
                let mean = idx.iter().map(|&j| values[j]).sum::<f64>() / n;
                let sigma =
                    (idx.iter().map(|&j| (values[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for &j in &idx {
                    values[j] += 2.0 * sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
    theta0.with_values(values)
}

/// Pretty JSON report.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::task_vector::make;

    fn blobs() -> Samples {
        let mut s = Samples::new(2);
        for i in 0..20 {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            s.push(&[sign * 3.0 + 0.01 * i as f64, 0.1], c);
        }
        s
    }

    #[test]
    fn separable_fixture_is_perfect() {
        let (model, mut p) = Model::build(ModelConfig::linear(2, 2)).unwrap();
        p.values = vec![-1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let s = blobs();
        assert_eq!(accuracy(&model, &p, EvalSet::new(&s, 0)).unwrap(), 1.0);
        assert!(accuracy(&model, &p, EvalSet::new(&Samples::new(2), 0)).is_err());
    }

    #[test]
    fn normalized_accuracy_cases() {
        assert_eq!(normalized_accuracy(&[0.5, 0.5], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(normalized_accuracy(&[0.7, 0.2], &[0.7, 0.2]).unwrap(), 1.0);
        assert!(normalized_accuracy(&[0.9], &[0.8]).unwrap() > 1.0);
        assert!(normalized_accuracy(&[0.9], &[0.0]).is_err());
    }

    #[test]
    fn miou_cases() {
        let (model, _) = Model::build(ModelConfig::mlp(2, 3, 2)).unwrap();
        let full = SparseMask::full(model.layout());
        let zero = SparseMask::zeros(model.layout());
        assert_eq!(mask_miou(&full, &full).unwrap(), 1.0);
        assert_eq!(mask_miou(&zero, &zero).unwrap(), 1.0);
        assert_eq!(mask_miou(&full, &zero).unwrap(), 0.0);
        assert!((random_miou(0.1) - 0.0526).abs() < 1e-4);
    }

    #[test]
    fn pretrained_localization_is_all_ones() {
        let (model, p) =
            Model::build(ModelConfig::mlp(2, 8, 2).with_task_heads(2).with_seed(3)).unwrap();
        let s = blobs();
        let sets = [EvalSet::new(&s, 0), EvalSet::new(&s, 1)];
        let base_ok = sets.iter().all(|e| accuracy(&model, &p, *e).unwrap() > 0.0);
        assert!(base_ok);
        let m = localization_matrix(&model, &p, &[p.clone(), p.clone()], &sets).unwrap();
        assert!(m.values.iter().flatten().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_vector_bound_and_gap() {
        let (model, p) = Model::build(ModelConfig::mlp(2, 8, 2).with_seed(3)).unwrap();
        let s = blobs();
        let tau = make(&p, &p).unwrap();
        let mask = SparseMask::full(model.layout());
        let b = bound_check(&model, &p, &tau, &mask, EvalSet::new(&s, 0)).unwrap();
        assert!(b.holds);
        assert_eq!((b.lhs_max, b.norm_product, b.k2_mu_eta), (0.0, 0.0, 0.0));
        let gap = posthoc_linearization_gap(&model, &p, &tau, EvalSet::new(&s, 0)).unwrap();
        assert_eq!(gap.acc_nonlinear, gap.acc_linearized);
    }

    #[test]
    fn drift_is_zero_for_linear_family() {
        let (model, p) = Model::build(ModelConfig::linear(2, 2).with_seed(1)).unwrap();
        let q = p
            .with_values(p.values.iter().map(|v| v * 3.0 + 1.0).collect())
            .unwrap();
        let s = blobs();
        let d = gradient_drift(&model, &p, &[p.clone(), q], EvalSet::new(&s, 0)).unwrap();
        assert_eq!(d.absolute, vec![0.0, 0.0]);
    }

    #[test]
    fn prune_fraction_zero_is_identity() {
        let (_, p) = Model::build(ModelConfig::mlp(2, 8, 2).with_seed(3)).unwrap();
        let scores = SensitivityScores {
            values: (0..p.len()).map(|j| j as f64).collect(),
            n_examples: 1,
            n_label_samples: 0,
            mode: crate::fisher::ScoreMode::ExactExpectation,
        };
        assert_eq!(
            prune_least_sensitive(&p, &scores, 0.0, PruneMode::Zero, 0)
                .unwrap()
                .values,
            p.values
        );
        let z = prune_least_sensitive(&p, &scores, 0.5, PruneMode::Zero, 0).unwrap();
        let maskable = p.layout().maskable_count();
        let zeroed = (0..p.len())
            .filter(|&j| z.values[j] == 0.0 && p.values[j] != 0.0)
            .count();
        assert!(zeroed <= maskable / 2);
        assert_eq!(z.values[0], 0.0);
    }
}
