//! Multi-task synthetic suites with disjoint input supports.
//!
//! Each task (and the held-out control task) owns an axis-aligned
//! hyperrectangle. Its classes are Gaussian clusters truncated to that box.
//! The pre-training mixture draws from the same regions with every cluster
//! mean shifted, so pre-training sees related but not identical tasks.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::floor_count;
use crate::{Error, Result};

/// Row-major inputs with class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Samples {
            dim,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.y.push(y);
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let mut out = Samples::new(self.dim);
        for &i in idx {
            out.push(self.row(i), self.y[i]);
        }
        out
    }

    /// First `n` rows (or all).
    pub fn take(&self, n: usize) -> Samples {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Deterministic random subset of at most `cap` rows, in original order.
    pub fn sample_cap(&self, cap: usize, seed: u64) -> Samples {
        if self.len() <= cap {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(cap);
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Closed boxes intersect iff their intervals overlap on every axis.
    pub fn intersects(&self, other: &Region) -> bool {
        (0..self.lo.len()).all(|d| self.lo[d] <= other.hi[d] && other.lo[d] <= self.hi[d])
    }

    /// Largest per-axis gap between the boxes; a lower bound on the
    /// Euclidean distance between any two of their points.
    pub fn gap(&self, other: &Region) -> f64 {
        (0..self.lo.len())
            .map(|d| (other.lo[d] - self.hi[d]).max(self.lo[d] - other.hi[d]))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    /// Classification head used for this task.
    pub head: usize,
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
    pub support: Region,
}

impl TaskDataset {
    pub fn input_dim(&self) -> usize {
        self.train.dim
    }
}

/// Pre-training examples; each part is routed through its own head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainMixture {
    pub parts: Vec<(usize, Samples)>,
}

impl PretrainMixture {
    pub fn len(&self) -> usize {
        self.parts.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Axis placement: distance of each region centre from the origin.
    /// Vertex placement: gap between neighbouring boxes on each axis.
    pub region_separation: f64,
    pub noise_sigma: f64,
    /// Distance of each class mean from its region centre.
    pub cluster_spread: f64,
    /// Pre-training cluster shift, in units of `noise_sigma`.
    #[serde(default = "default_shift")]
    pub pretrain_shift: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub seed: u64,
}

/// How region boxes are laid out in input space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Region `i` is offset along axis `i mod d`, on the negative side once
    /// the positive axes run out.
    Axis,
    /// Region `i` is centred on the hypercube vertex given by Walsh row
    /// `i + 1`, so every coordinate has the same magnitude in every region.
    #[default]
    Vertex,
}

fn walsh_sign(row: usize, col: usize) -> f64 {
    if (row & col).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

fn default_shift() -> f64 {
    4.0
}

fn default_test_fraction() -> f64 {
    0.25
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            num_tasks: 4,
            classes_per_task: 4,
            samples_per_class: 200,
            input_dim: 16,
            region_separation: 1.5,
            noise_sigma: 0.2,
            cluster_spread: 1.0,
            pretrain_shift: default_shift(),
            test_fraction: 0.25,
            placement: Placement::Vertex,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    fn half_width(&self) -> f64 {
        self.cluster_spread + 3.0 * self.noise_sigma
    }

    /// Regions for tasks `0..T` followed by the control region.
    pub fn regions(&self) -> Result<Vec<Region>> {
        let n = self.num_tasks + 1;
        let d = self.input_dim;
        if d == 0 || self.num_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config(
                "input_dim, num_tasks and classes_per_task must be positive".into(),
            ));
        }
        let capacity = match self.placement {
            Placement::Axis => 2 * d,
            Placement::Vertex => d.next_power_of_two() - 1,
        };
        if n > capacity {
            return Err(Error::Config(format!(
                "{n} regions do not fit in {d} dimensions (at most {capacity})"
            )));
        }
        if !(self.noise_sigma > 0.0) || self.cluster_spread < 0.0 || self.region_separation < 0.0 {
            return Err(Error::Config(
                "noise_sigma must be positive, spread and separation non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        let r = self.half_width();
        let regions: Vec<Region> = (0..n)
            .map(|i| match self.placement {
                Placement::Vertex => {
                    let a = r + 0.5 * self.region_separation;
                    let centre: Vec<f64> = (0..d).map(|j| a * walsh_sign(i + 1, j)).collect();
                    Region {
                        id: i,
                        lo: centre.iter().map(|c| c - r).collect(),
                        hi: centre.iter().map(|c| c + r).collect(),
                    }
                }
                Placement::Axis => {
                    let axis = i % d;
                    let sign = if i < d { 1.0 } else { -1.0 };
                    let mut lo = vec![-r; d];
                    let mut hi = vec![r; d];
                    lo[axis] += sign * self.region_separation;
                    hi[axis] += sign * self.region_separation;
                    Region { id: i, lo, hi }
                }
            })
            .collect();
        let min_gap = 6.0 * self.noise_sigma;
        for a in 0..n {
            for b in a + 1..n {
                if regions[a].intersects(&regions[b]) || regions[a].gap(&regions[b]) <= min_gap {
                    return Err(Error::Config(format!(
                        "infeasible separation: regions {a} and {b} are {:.3} apart, need more than {min_gap:.3}",
                        regions[a].gap(&regions[b])
                    )));
                }
            }
        }
        Ok(regions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub config: SuiteConfig,
    pub pretrain: PretrainMixture,
    pub tasks: Vec<TaskDataset>,
    pub control: TaskDataset,
}

impl Suite {
    /// Tasks followed by the control task.
    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskDataset> {
        self.tasks.iter().chain(std::iter::once(&self.control))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn truncated_sample(
    rng: &mut ChaCha8Rng,
    mean: &[f64],
    sigma: f64,
    region: &Region,
) -> Result<Vec<f64>> {
    for _ in 0..10_000 {
        let x: Vec<f64> = mean
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if region.contains(&x) {
            return Ok(x);
        }
    }
    Err(Error::Config("cluster mass lies outside its region".into()))
}

/// Builds the pre-training mixture, the `T` fine-tuning tasks and the control
/// task. Deterministic in `config.seed`.
pub fn generate_suite(config: &SuiteConfig) -> Result<Suite> {
    let regions = config.regions()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.input_dim;
    let sigma = config.noise_sigma;
    let mut pretrain = PretrainMixture::default();
    let mut datasets = Vec::with_capacity(regions.len());

    for region in &regions {
        let centre: Vec<f64> = region
            .lo
            .iter()
            .zip(&region.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        let means: Vec<Vec<f64>> = (0..config.classes_per_task)
            .map(|_| {
                let u = unit_vector(&mut rng, d);
                centre
                    .iter()
                    .zip(&u)
                    .map(|(c, u)| c + config.cluster_spread * u)
                    .collect()
            })
            .collect();

        let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
        for (k, mean) in means.iter().enumerate() {
            for _ in 0..config.samples_per_class {
                rows.push((truncated_sample(&mut rng, mean, sigma, region)?, k));
            }
        }
        rows.shuffle(&mut rng);
        let n_test = floor_count(config.test_fraction, rows.len());
        let rest = rows.len() - n_test;
        let n_val = floor_count(0.1, rest);
        let mut split = [Samples::new(d), Samples::new(d), Samples::new(d)];
        for (i, (x, y)) in rows.iter().enumerate() {
            let s = if i < n_test {
                2
            } else if i < n_test + n_val {
                1
            } else {
                0
            };
            split[s].push(x, *y);
        }
        let [train, val, test] = split;
        datasets.push(TaskDataset {
            task_id: region.id,
            head: region.id,
            train,
            val,
            test,
            support: region.clone(),
        });

        let mut mix = Samples::new(d);
        for (k, mean) in means.iter().enumerate() {
            let w = unit_vector(&mut rng, d);
            let shifted: Vec<f64> = mean
                .iter()
                .zip(&w)
                .map(|(m, w)| m + config.pretrain_shift * sigma * w)
                .collect();
            for _ in 0..config.samples_per_class {
                mix.push(&truncated_sample(&mut rng, &shifted, sigma, region)?, k);
            }
        }
        pretrain.parts.push((region.id, mix));
    }

    let control = datasets.pop().expect("control region");
    Ok(Suite {
        config: config.clone(),
        pretrain,
        tasks: datasets,
        control,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: SuiteConfig,
    regions: Vec<Region>,
    files: Vec<String>,
}

fn write_samples_csv(path: &Path, s: &Samples, head: Option<usize>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = Vec::new();
    if head.is_some() {
        header.push("head".into());
    }
    header.push("label".into());
    header.extend((0..s.dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..s.len() {
        let mut rec: Vec<String> = Vec::with_capacity(s.dim + 2);
        if let Some(h) = head {
            rec.push(h.to_string());
        }
        rec.push(s.y[i].to_string());
        // `{:?}` on f64 prints the shortest representation that round-trips
        rec.extend(s.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples_csv(
    path: &Path,
    dim: usize,
    with_head: bool,
) -> Result<Vec<(usize, Vec<f64>, usize)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    let skip = usize::from(with_head);
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != dim + 1 + skip {
            return Err(Error::Format(format!(
                "{}: expected {} columns",
                path.display(),
                dim + 1 + skip
            )));
        }
        let parse_u = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("{s}: {e}")))
        };
        let head = if with_head { parse_u(&rec[0])? } else { 0 };
        let label = parse_u(&rec[skip])?;
        let x = rec
            .iter()
            .skip(skip + 1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Format(format!("{v}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((head, x, label));
    }
    Ok(out)
}

fn to_samples(rows: Vec<(usize, Vec<f64>, usize)>, dim: usize) -> Samples {
    let mut s = Samples::new(dim);
    for (_, x, y) in rows {
        s.push(&x, y);
    }
    s
}

fn task_prefix(t: &TaskDataset, num_tasks: usize) -> String {
    if t.task_id == num_tasks {
        "control".to_string()
    } else {
        format!("task{}", t.task_id)
    }
}

/// Writes one CSV per split plus `manifest.json`.
pub fn write_suite(dir: &Path, suite: &Suite) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = vec!["pretrain.csv".to_string()];
    {
        let mut w = csv::Writer::from_path(dir.join("pretrain.csv"))?;
        let d = suite.config.input_dim;
        let mut header = vec!["head".to_string(), "label".to_string()];
        header.extend((0..d).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (head, s) in &suite.pretrain.parts {
            for i in 0..s.len() {
                let mut rec = vec![head.to_string(), s.y[i].to_string()];
                rec.extend(s.row(i).iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    for t in suite.all_tasks() {
        let prefix = task_prefix(t, suite.config.num_tasks);
        for (name, s) in [("train", &t.train), ("val", &t.val), ("test", &t.test)] {
            let file = format!("{prefix}_{name}.csv");
            write_samples_csv(&dir.join(&file), s, None)?;
            files.push(file);
        }
    }
    let manifest = Manifest {
        config: suite.config.clone(),
        regions: suite.all_tasks().map(|t| t.support.clone()).collect(),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_suite(dir: &Path) -> Result<Suite> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let config = manifest.config;
    let d = config.input_dim;
    let mut pretrain = PretrainMixture::default();
    for (head, x, y) in read_samples_csv(&dir.join("pretrain.csv"), d, true)? {
        match pretrain.parts.last_mut() {
            Some((h, s)) if *h == head => s.push(&x, y),
            _ => {
                let mut s = Samples::new(d);
                s.push(&x, y);
                pretrain.parts.push((head, s));
            }
        }
    }
    let mut tasks = Vec::new();
    for region in &manifest.regions {
        let prefix = if region.id == config.num_tasks {
            "control".to_string()
        } else {
            format!("task{}", region.id)
        };
        let load = |split: &str| -> Result<Samples> {
            Ok(to_samples(
                read_samples_csv(&dir.join(format!("{prefix}_{split}.csv")), d, false)?,
                d,
            ))
        };
        tasks.push(TaskDataset {
            task_id: region.id,
            head: region.id,
            train: load("train")?,
            val: load("val")?,
            test: load("test")?,
            support: region.clone(),
        });
    }
    let control = tasks
        .pop()
        .filter(|c| c.task_id == config.num_tasks)
        .ok_or_else(|| Error::Format("manifest lacks the control region".into()))?;
    Ok(Suite {
        config,
        pretrain,
        tasks,
        control,
    })
}

/// Parsed IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!(
            "unsupported IDX element type 0x{:02x}",
            bytes[2]
        )));
    }
    let nd = bytes[3] as usize;
    if nd == 0 || bytes.len() < 4 + 4 * nd {
        return Err(Error::Format("truncated IDX dimensions".into()));
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[4 + 4 * nd..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, dims need {count}",
            body.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

/// Reads an IDX image file (and optionally its label file) into a task with
/// inputs scaled to `[0, 1]`. The validation split takes 10% of the rows.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<TaskDataset> {
    let img = parse_idx(&fs::read(images)?)?;
    let n = img.dims[0];
    let dim: usize = img.dims[1..].iter().product();
    let y: Vec<usize> = match labels {
        Some(p) => {
            let l = parse_idx(&fs::read(p)?)?;
            if l.dims != [n] {
                return Err(Error::Format(format!(
                    "label dims {:?} for {n} images",
                    l.dims
                )));
            }
            l.data.iter().map(|&b| b as usize).collect()
        }
        None => vec![0; n],
    };
    let n_val = floor_count(0.1, n);
    let mut train = Samples::new(dim);
    let mut val = Samples::new(dim);
    for i in 0..n {
        let x: Vec<f64> = img.data[i * dim..(i + 1) * dim]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        if i < n_val {
            val.push(&x, y[i]);
        } else {
            train.push(&x, y[i]);
        }
    }
    Ok(TaskDataset {
        task_id: 0,
        head: 0,
        train,
        val,
        test: Samples::new(dim),
        support: Region {
            id: 0,
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        },
    })
}
