//! Task vectors `τ = θ* − θ0`, their composition, α tuning and the post-hoc
//! sparsification baselines (TIES, DARE, Breadcrumbs).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::format::{decode, sha256_hex, VECTOR_MAGIC};
use crate::models::FlatParams;
use crate::numeric::floor_count;
use crate::{exec, Error, Result};

/// Fraction of the pre-trained control accuracy negation must retain.
pub const CONTROL_RETENTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    /// Strictly increasing indices with their deltas.
    pub entries: Vec<(usize, f64)>,
    pub m: usize,
    pub model_hash: String,
    pub task_id: usize,
    pub method: String,
    pub config_hash: String,
    /// Sparsity the vector was trained for; scales the α grid.
    pub target_sparsity: f64,
}

impl TaskVector {
    pub fn empty(m: usize, model_hash: &str) -> Self {
        TaskVector {
            entries: Vec::new(),
            m,
            model_hash: model_hash.to_string(),
            task_id: 0,
            method: "none".into(),
            config_hash: String::new(),
            target_sparsity: 0.0,
        }
    }

    /// Measured sparsity `1 − |entries| / m`.
    pub fn sparsity(&self) -> f64 {
        if self.m == 0 {
            1.0
        } else {
            1.0 - self.entries.len() as f64 / self.m as f64
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.m];
        for &(j, d) in &self.entries {
            v[j] = d;
        }
        v
    }

    pub fn support(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn with_metadata(
        mut self,
        task_id: usize,
        method: &str,
        config_hash: &str,
        target_sparsity: f64,
    ) -> Self {
        self.task_id = task_id;
        self.method = method.to_string();
        self.config_hash = config_hash.to_string();
        self.target_sparsity = target_sparsity;
        self
    }

    /// A copy with the given entries and the same provenance.
    fn with_entries(&self, entries: Vec<(usize, f64)>, method: String) -> Self {
        TaskVector {
            entries,
            method,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Format(
                    "task-vector indices are not strictly increasing".into(),
                ));
            }
        }
        if let Some(&(j, _)) = self.entries.last() {
            if j >= self.m {
                return Err(Error::Format(format!(
                    "index {j} out of range for m = {}",
                    self.m
                )));
            }
        }
        if self.entries.iter().any(|e| !e.1.is_finite()) {
            return Err(Error::Numeric("task vector has non-finite deltas".into()));
        }
        Ok(())
    }
}

/// Coordinates where `theta_star` differs from `theta0`.
pub fn make(theta_star: &FlatParams, theta0: &FlatParams) -> Result<TaskVector> {
    theta_star.ensure_same_layout(theta0)?;
    let entries: Vec<(usize, f64)> = theta_star
        .values
        .iter()
        .zip(&theta0.values)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(j, (a, b))| (j, a - b))
        .collect();
    let tv = TaskVector {
        entries,
        ..TaskVector::empty(theta0.len(), &theta0.content_hash())
    };
    tv.validate()?;
    Ok(tv)
}

/// `θ0 + Σ α τ`, terms in argument order, entries in index order. Terms
/// with `α = 0` are skipped so the result stays bitwise equal to `θ0`.
pub fn apply(theta0: &FlatParams, terms: &[(f64, &TaskVector)]) -> Result<FlatParams> {
    let hash = if terms.is_empty() {
        String::new()
    } else {
        theta0.content_hash()
    };
    apply_with_hash(theta0, &hash, terms)
}

/// As [`apply`] with a precomputed `theta0` content hash.
pub fn apply_with_hash(
    theta0: &FlatParams,
    hash: &str,
    terms: &[(f64, &TaskVector)],
) -> Result<FlatParams> {
    let mut values = theta0.values.clone();
    for (alpha, tv) in terms {
        if tv.m != values.len() {
            return Err(Error::Layout(format!(
                "task vector of m = {} for {} parameters",
                tv.m,
                values.len()
            )));
        }
        if tv.model_hash != hash {
            return Err(Error::Layout(format!(
                "task vector built on model {} applied to {}",
                short(&tv.model_hash),
                short(hash)
            )));
        }
        if *alpha == 0.0 {
            continue;
        }
        for &(j, d) in &tv.entries {
            values[j] += alpha * d;
        }
    }
    theta0.with_values(values)
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// `{0, 0.05, …, 1}` scaled by `1 / (1 − sparsity)`.
pub fn alpha_grid(sparsity: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} not in [0, 1)")));
    }
    let scale = 1.0 / (1.0 - sparsity);
    Ok((0..=20).map(|k| k as f64 * 0.05 * scale).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub objective: f64,
    pub grid: Vec<f64>,
    pub objectives: Vec<f64>,
}

/// Grid argmax of `objective`; ties go to the smaller α.
pub fn tune_alpha_addition<F>(grid: &[f64], objective: F) -> Result<AlphaChoice>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(Error::Config("empty α grid".into()));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let objectives = exec::try_map_indexed(grid.len(), |i| objective(grid[i]))?;
    let mut best = order[0];
    for &i in &order[1..] {
        if objectives[i] > objectives[best] {
            best = i;
        }
    }
    Ok(AlphaChoice {
        alpha: grid[best],
        objective: objectives[best],
        grid: grid.to_vec(),
        objectives,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegationChoice {
    pub alpha: f64,
    pub target_accuracy: f64,
    pub control_accuracy: f64,
    /// Whether some grid point met the constraint; `false` means α fell back to 0.
    pub feasible: bool,
    pub grid: Vec<f64>,
    /// `(target, control)` per grid point.
    pub evaluations: Vec<(f64, f64)>,
}

/// Among α with `control(α) ≥ 0.95 · control0`, minimizes the target
/// accuracy (ties to the smaller α). Falls back to α = 0.
pub fn tune_alpha_negation<F>(grid: &[f64], control0: f64, evaluate: F) -> Result<NegationChoice>
where
    F: Fn(f64) -> Result<(f64, f64)> + Sync,
{
    let evaluations = exec::try_map_indexed(grid.len(), |i| evaluate(grid[i]))?;
    let threshold = CONTROL_RETENTION * control0;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let mut best: Option<usize> = None;
    for &i in &order {
        let (target, control) = evaluations[i];
        if control < threshold {
            continue;
        }
        if best.is_none_or(|b| target < evaluations[b].0) {
            best = Some(i);
        }
    }
    let out = match best {
        Some(i) => NegationChoice {
            alpha: grid[i],
            target_accuracy: evaluations[i].0,
            control_accuracy: evaluations[i].1,
            feasible: true,
            grid: grid.to_vec(),
            evaluations,
        },
        None => {
            let (t0, c0) = evaluate(0.0)?;
            NegationChoice {
                alpha: 0.0,
                target_accuracy: t0,
                control_accuracy: c0,
                feasible: false,
                grid: grid.to_vec(),
                evaluations,
            }
        }
    };
    Ok(out)
}

/// Indices of `entries` ordered by decreasing |delta|, ties to lower index.
fn magnitude_order(entries: &[(usize, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[b]
            .1
            .abs()
            .total_cmp(&entries[a].1.abs())
            .then(entries[a].0.cmp(&entries[b].0))
    });
    order
}

fn keep_ranks(entries: &[(usize, f64)], skip: usize, take: usize) -> Vec<(usize, f64)> {
    let order = magnitude_order(entries);
    let mut kept: Vec<(usize, f64)> = order
        .iter()
        .skip(skip)
        .take(take)
        .map(|&i| entries[i])
        .collect();
    kept.sort_by_key(|e| e.0);
    kept
}

fn ensure_compatible(vectors: &[&TaskVector]) -> Result<()> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("no task vectors".into()))?;
    for v in vectors {
        if v.m != first.m || v.model_hash != first.model_hash {
            return Err(Error::Layout(
                "task vectors come from different models".into(),
            ));
        }
    }
    Ok(())
}

/// TIES merge: trim each vector to its top `keep_fraction` entries, elect a
/// sign per coordinate from the summed survivors (ties take the first
/// vector's sign), then average the survivors that agree with it.
pub fn posthoc_ties(vectors: &[&TaskVector], keep_fraction: f64) -> Result<TaskVector> {
    if vectors.len() < 2 {
        return Err(Error::Config("TIES needs at least two task vectors".into()));
    }
    ensure_compatible(vectors)?;
    let m = vectors[0].m;
    let trimmed: Vec<Vec<(usize, f64)>> = vectors
        .iter()
        .map(|v| keep_ranks(&v.entries, 0, floor_count(keep_fraction, v.entries.len())))
        .collect();
    let mut sum = vec![0.0; m];
    let mut first_sign = vec![0.0; m];
    for t in &trimmed {
        for &(j, d) in t {
            sum[j] += d;
            if first_sign[j] == 0.0 {
                first_sign[j] = d.signum();
            }
        }
    }
    let elected: Vec<f64> = (0..m)
        .map(|j| {
            if sum[j] != 0.0 {
                sum[j].signum()
            } else {
                first_sign[j]
            }
        })
        .collect();
    let mut acc = vec![0.0; m];
    let mut count = vec![0usize; m];
    for t in &trimmed {
        for &(j, d) in t {
            if d.signum() == elected[j] {
                acc[j] += d;
                count[j] += 1;
            }
        }
    }
    let entries: Vec<(usize, f64)> = (0..m)
        .filter(|&j| count[j] > 0)
        .map(|j| (j, acc[j] / count[j] as f64))
        .filter(|e| e.1 != 0.0)
        .collect();
    let mut out = vectors[0].with_entries(entries, "ties_mean".into());
    out.target_sparsity = vectors
        .iter()
        .map(|v| v.target_sparsity)
        .fold(f64::INFINITY, f64::min);
    Ok(out)
}

/// DARE: drop each entry with probability `drop_fraction`, rescale the rest.
pub fn posthoc_dare(vector: &TaskVector, drop_fraction: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!(
            "drop_fraction {drop_fraction} not in [0, 1)"
        )));
    }
    let scale = 1.0 / (1.0 - drop_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = vector
        .entries
        .iter()
        .filter(|_| rng.random::<f64>() >= drop_fraction)
        .map(|&(j, d)| (j, d * scale))
        .collect();
    Ok(vector.with_entries(entries, format!("{}+dare", vector.method)))
}

/// Breadcrumbs: drop the largest `outlier_fraction` of entries by |delta|,
/// keep the next `keep_fraction`, drop the rest.
pub fn posthoc_breadcrumbs(
    vector: &TaskVector,
    keep_fraction: f64,
    outlier_fraction: f64,
) -> Result<TaskVector> {
    if keep_fraction < 0.0
        || outlier_fraction < 0.0
        || keep_fraction + outlier_fraction > 1.0 + 1e-12
    {
        return Err(Error::Config(
            "need keep_fraction + outlier_fraction ≤ 1".into(),
        ));
    }
    let n = vector.entries.len();
    let kept = keep_ranks(
        &vector.entries,
        floor_count(outlier_fraction, n),
        floor_count(keep_fraction, n),
    );
    Ok(vector.with_entries(kept, format!("{}+breadcrumbs", vector.method)))
}

#[derive(Serialize, Deserialize)]
struct VectorHeader {
    m: usize,
    model_hash: String,
    task_id: usize,
    method: String,
    sparsity: f64,
    config_hash: String,
    target_sparsity: f64,
    nnz: usize,
}

pub fn encode_vector(tv: &TaskVector) -> Result<Vec<u8>> {
    tv.validate()?;
    if tv.m > u32::MAX as usize + 1 {
        return Err(Error::Format("m does not fit u32 indices".into()));
    }
    let header = VectorHeader {
        m: tv.m,
        model_hash: tv.model_hash.clone(),
        task_id: tv.task_id,
        method: tv.method.clone(),
        sparsity: tv.sparsity(),
        config_hash: tv.config_hash.clone(),
        target_sparsity: tv.target_sparsity,
        nnz: tv.entries.len(),
    };
    let mut payload = Vec::with_capacity(12 * tv.entries.len());
    for &(j, d) in &tv.entries {
        payload.extend_from_slice(&(j as u32).to_le_bytes());
        payload.extend_from_slice(&d.to_le_bytes());
    }
    crate::format::encode(VECTOR_MAGIC, &header, &payload)
}

pub fn decode_vector(bytes: &[u8]) -> Result<TaskVector> {
    let (h, payload): (VectorHeader, _) = decode(VECTOR_MAGIC, bytes)?;
    if payload.len() != 12 * h.nnz {
        return Err(Error::Format(format!(
            "payload of {} bytes for {} entries",
            payload.len(),
            h.nnz
        )));
    }
    let entries = payload
        .chunks_exact(12)
        .map(|c| {
            let j = u32::from_le_bytes(c[..4].try_into().unwrap()) as usize;
            (j, f64::from_le_bytes(c[4..].try_into().unwrap()))
        })
        .collect();
    let tv = TaskVector {
        entries,
        m: h.m,
        model_hash: h.model_hash,
        task_id: h.task_id,
        method: h.method,
        config_hash: h.config_hash,
        target_sparsity: h.target_sparsity,
    };
    tv.validate()?;
    Ok(tv)
}

pub fn save_vector(path: &Path, tv: &TaskVector) -> Result<()> {
    std::fs::write(path, encode_vector(tv)?)?;
    Ok(())
}

pub fn load_vector(path: &Path) -> Result<TaskVector> {
    decode_vector(&std::fs::read(path)?)
}

/// SHA-256 of a serializable configuration, for provenance fields.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelConfig};

    fn params() -> FlatParams {
        Model::build(ModelConfig::mlp(2, 3, 2).with_seed(8))
            .unwrap()
            .1
    }

    fn tv(entries: Vec<(usize, f64)>, m: usize) -> TaskVector {
        TaskVector {
            entries,
            ..TaskVector::empty(m, "h")
        }
    }

    #[test]
    fn null_edit_and_single_coordinate() {
        let p = params();
        let v = make(&p, &p).unwrap();
        assert!(v.entries.is_empty());
        assert_eq!(v.sparsity(), 1.0);
        let mut q = p.clone();
        q.values[4] += 0.25;
        let v = make(&q, &p).unwrap();
        assert_eq!(v.entries.len(), 1);
        assert_eq!(v.entries[0].0, 4);
        assert!((v.entries[0].1 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn apply_zero_alpha_is_bitwise_identity() {
        let p = params();
        let mut q = p.clone();
        q.values.iter_mut().for_each(|v| *v *= 1.5);
        let v = make(&q, &p).unwrap();
        assert_eq!(apply(&p, &[(0.0, &v)]).unwrap().values, p.values);
        let back = apply(&p, &[(1.0, &v)]).unwrap();
        for (a, b) in back.values.iter().zip(&q.values) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn apply_rejects_foreign_vector() {
        let p = params();
        let mut other = tv(vec![(0, 1.0)], p.len());
        other.model_hash = "deadbeef".into();
        assert!(matches!(apply(&p, &[(1.0, &other)]), Err(Error::Layout(_))));
    }

    #[test]
    fn sparse_grid_reaches_ten() {
        let g = alpha_grid(0.9).unwrap();
        assert_eq!(g.len(), 21);
        assert!((g[20] - 10.0).abs() < 1e-12);
        assert_eq!(alpha_grid(0.0).unwrap()[20], 1.0);
    }

    #[test]
    fn addition_ties_prefer_small_alpha() {
        let c = tune_alpha_addition(&[0.0, 0.5, 1.0], |_| Ok(0.7)).unwrap();
        assert_eq!(c.alpha, 0.0);
        let c = tune_alpha_addition(&[0.0, 1.0], |a| Ok(0.5 + 0.1 * a)).unwrap();
        assert_eq!(c.alpha, 1.0);
        assert!(tune_alpha_addition(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn negation_monotone_picks_max_and_respects_constraint() {
        let grid = [0.0, 0.5, 1.0, 1.5];
        let c = tune_alpha_negation(&grid, 0.8, |a| Ok((0.9 - 0.2 * a, 0.8))).unwrap();
        assert_eq!(c.alpha, 1.5);
        let c = tune_alpha_negation(&grid, 0.8, |a| Ok((0.9 - 0.2 * a, 0.8 - 0.1 * a))).unwrap();
        assert_eq!(c.alpha, 0.0);
        assert!(c.control_accuracy >= 0.95 * 0.8);
    }

    #[test]
    fn ties_opposite_equal_deltas() {
        let a = tv(vec![(0, 1.0), (1, 2.0), (2, -1.0)], 3);
        let b = tv(vec![(0, -1.0), (1, 2.0), (2, 3.0)], 3);
        let out = posthoc_ties(&[&a, &b], 1.0).unwrap();
        assert_eq!(out.entries, vec![(0, 1.0), (1, 2.0), (2, 3.0)]);
        let same = posthoc_ties(&[&a, &a], 1.0).unwrap();
        assert_eq!(same.entries, a.entries);
    }

    #[test]
    fn dare_forced_scaling() {
        let v = tv(vec![(0, 1.0), (1, -2.0), (3, 0.5)], 4);
        assert_eq!(posthoc_dare(&v, 0.0, 1).unwrap().entries, v.entries);
        let d = posthoc_dare(&v, 0.9, 3).unwrap();
        for (j, x) in d.entries {
            let orig = v.entries.iter().find(|e| e.0 == j).unwrap().1;
            assert!((x / orig - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn breadcrumbs_middle_band() {
        let v = tv(vec![(0, 5.0), (1, -4.0), (2, 3.0), (3, 2.0), (4, -1.0)], 5);
        let out = posthoc_breadcrumbs(&v, 0.4, 0.2).unwrap();
        assert_eq!(out.entries, vec![(1, -4.0), (2, 3.0)]);
        let top = posthoc_breadcrumbs(&v, 0.4, 0.0).unwrap();
        assert_eq!(top.entries, vec![(0, 5.0), (1, -4.0)]);
    }

    #[test]
    fn vector_file_roundtrip() {
        let v = tv(vec![(1, 0.1), (7, -3.5e-300), (9, f64::MAX)], 10)
            .with_metadata(2, "talos", "cfg", 0.9);
        let bytes = encode_vector(&v).unwrap();
        assert_eq!(decode_vector(&bytes).unwrap(), v);
        assert!(decode_vector(&bytes[..bytes.len() - 1]).is_err());
    }
}
