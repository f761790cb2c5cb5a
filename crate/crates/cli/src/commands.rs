use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use talos::data::{read_suite, write_suite};
use talos::eval::{self, EvalSet, PruneMode};
use talos::fisher::{self, ScoreOptions};
use talos::mask::{self, calibrate, load_mask, save_mask, write_per_layer_csv};
use talos::models::{load_checkpoint, save_checkpoint};
use talos::pipeline::{self, ExperimentConfig, FineTuned, Pretrained};
use talos::task_vector::{self, load_vector, save_vector, TaskVector};
use talos::train::write_log;

use crate::error::CliError;

/// Output tree rooted at `--out`.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Workspace { root }
    }

    fn checkpoint(&self) -> PathBuf {
        self.root.join("pretrained.tlsp")
    }

    fn suite_dir(&self) -> PathBuf {
        self.root.join("suite")
    }

    fn method_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root.join(cfg.method.as_str())
    }

    fn reports(&self) -> Result<PathBuf, CliError> {
        let dir = self.root.join("reports");
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn vector_path(&self, cfg: &ExperimentConfig, t: usize) -> PathBuf {
        self.method_dir(cfg).join(format!("task{t}.tvec"))
    }

    fn mask_path(&self, cfg: &ExperimentConfig, t: usize) -> PathBuf {
        self.method_dir(cfg).join(format!("task{t}.tmsk"))
    }
}

fn write_report<T: Serialize>(
    path: &Path,
    cfg: &ExperimentConfig,
    body: &T,
) -> Result<(), CliError> {
    let doc = json!({ "config": cfg, "report": body });
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn pretrain(ws: &Workspace, cfg: &ExperimentConfig) -> Result<(), CliError> {
    if !ws.root.is_dir() {
        return Err(CliError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", ws.root.display()),
        )));
    }
    let pre = pipeline::prepare(cfg)?;
    write_suite(&ws.suite_dir(), &pre.suite)?;
    save_checkpoint(&ws.checkpoint(), &pre.model, &pre.theta0)?;
    let mixture: Vec<Value> = pre
        .suite
        .pretrain
        .parts
        .iter()
        .map(|(head, s)| {
            eval::accuracy(&pre.model, &pre.theta0, EvalSet::new(s, *head))
                .map(|a| json!({ "head": head, "examples": s.len(), "accuracy": a }))
        })
        .collect::<talos::Result<_>>()?;
    let body = json!({
        "content_hash": pre.theta0.content_hash(),
        "parameters": pre.theta0.len(),
        "maskable": pre.model.layout().maskable_count(),
        "chance": 1.0 / cfg.suite.classes_per_task as f64,
        "mixture_accuracy": mixture,
    });
    write_report(&ws.root.join("pretrain.json"), cfg, &body)?;
    println!("{}", pre.theta0.content_hash());
    Ok(())
}

/// Reloads the checkpoint and suite written by `pretrain`, refusing to mix
/// them with a different configuration.
pub fn load_pretrained(ws: &Workspace, cfg: &ExperimentConfig) -> Result<Pretrained, CliError> {
    let (model, theta0) = load_checkpoint(&ws.checkpoint())?;
    if *model.config() != cfg.model_config() {
        return Err(CliError::Config(
            "checkpoint was produced with a different model configuration; rerun pretrain".into(),
        ));
    }
    let suite = read_suite(&ws.suite_dir())?;
    if suite.config != cfg.suite {
        return Err(CliError::Config(
            "stored suite was generated from a different configuration; rerun pretrain".into(),
        ));
    }
    Ok(Pretrained {
        suite,
        model,
        theta0,
    })
}

fn task_ids(pre: &Pretrained, task: Option<usize>) -> Result<Vec<usize>, CliError> {
    match task {
        Some(t) => {
            pre.task(t)?;
            Ok(vec![t])
        }
        None => Ok((0..pre.suite.tasks.len()).collect()),
    }
}

pub fn calibrate_cmd(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    task: Option<usize>,
) -> Result<(), CliError> {
    let pre = load_pretrained(ws, cfg)?;
    let mode = cfg.method.selection().ok_or_else(|| {
        CliError::Config(format!(
            "method {} does not use a mask",
            cfg.method.as_str()
        ))
    })?;
    let dir = ws.method_dir(cfg);
    fs::create_dir_all(&dir)?;
    let cal_cfg = cfg.calibration_config();
    for t in task_ids(&pre, task)? {
        let data = pre.task(t)?;
        let c = calibrate(
            &pre.model,
            &pre.theta0,
            &data.val,
            data.head,
            &cal_cfg,
            mode,
        )?;
        save_mask(
            &ws.mask_path(cfg, t),
            &c.mask,
            &pre.theta0.content_hash(),
            Some(&cal_cfg),
        )?;
        write_per_layer_csv(
            &dir.join(format!("task{t}_layers.csv")),
            &c.mask,
            pre.model.layout(),
        )?;
        if let Some(s) = &c.last_scores {
            s.write_csv(&dir.join(format!("task{t}_scores.csv")), pre.model.layout())?;
        }
        fs::write(
            dir.join(format!("task{t}_rounds.json")),
            serde_json::to_string_pretty(&c.rounds)?,
        )?;
        println!(
            "task {t}: kept {} of {} maskable",
            c.mask.kept_count(),
            c.mask.maskable_count()
        );
    }
    Ok(())
}

fn save_finetuned(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    f: &FineTuned,
    mask_on_disk: bool,
) -> Result<(), CliError> {
    let dir = ws.method_dir(cfg);
    fs::create_dir_all(&dir)?;
    let t = f.task_id;
    save_vector(&ws.vector_path(cfg, t), &f.vector)?;
    if !mask_on_disk {
        let cal_cfg = f.calibration.as_ref().map(|_| cfg.calibration_config());
        save_mask(
            &ws.mask_path(cfg, t),
            &f.mask,
            &pre.theta0.content_hash(),
            cal_cfg.as_ref(),
        )?;
    }
    write_per_layer_csv(
        &dir.join(format!("task{t}_layers.csv")),
        &f.mask,
        pre.model.layout(),
    )?;
    write_log(&dir.join(format!("task{t}_log.jsonl")), &f.outcome.log)?;
    Ok(())
}

/// Re-invokes this binary once per task, at most `jobs` at a time.
fn fan_out(tasks: &[usize], jobs: usize, child_args: &[String]) -> Result<(), CliError> {
    let exe = std::env::current_exe()?;
    for batch in tasks.chunks(jobs.max(1)) {
        let mut children = Vec::new();
        for &t in batch {
            let mut cmd = Command::new(&exe);
            cmd.args(child_args)
                .args(["finetune", "--task", &t.to_string()]);
            children.push((t, cmd.spawn()?));
        }
        for (t, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                return Err(CliError::Child(
                    format!("fine-tuning task {t} failed with {status}"),
                    status.code().unwrap_or(1),
                ));
            }
        }
    }
    Ok(())
}

pub fn finetune_cmd(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    task: Option<usize>,
    jobs: usize,
    child_args: &[String],
) -> Result<(), CliError> {
    let pre = load_pretrained(ws, cfg)?;
    let tasks = task_ids(&pre, task)?;
    if jobs > 1 && tasks.len() > 1 {
        return fan_out(&tasks, jobs, child_args);
    }
    for t in tasks {
        let (f, reused) = match load_mask(&ws.mask_path(cfg, t)) {
            Ok((m, hash))
                if cfg.method.selection().is_some() && hash == pre.theta0.content_hash() =>
            {
                info!("task {t}: reusing calibrated mask");
                (pipeline::finetune_with_mask(&pre, cfg, t, m, None)?, true)
            }
            _ => (pipeline::finetune(&pre, cfg, t)?, false),
        };
        save_finetuned(ws, cfg, &pre, &f, reused)?;
        println!(
            "task {t}: {} nonzero of {} ({} steps)",
            f.vector.nnz(),
            f.vector.m,
            f.outcome.steps_run
        );
    }
    Ok(())
}

fn load_vectors(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    tasks: &[usize],
) -> Result<Vec<TaskVector>, CliError> {
    let hash = pre.theta0.content_hash();
    tasks
        .iter()
        .map(|&t| {
            let v = load_vector(&ws.vector_path(cfg, t))?;
            if v.model_hash != hash {
                return Err(CliError::Config(format!(
                    "task vector for task {t} was built on a different checkpoint"
                )));
            }
            Ok(v)
        })
        .collect()
}

pub fn merge_cmd(ws: &Workspace, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pre = load_pretrained(ws, cfg)?;
    let tasks = task_ids(&pre, None)?;
    let vectors = load_vectors(ws, cfg, &pre, &tasks)?;
    let r = pipeline::addition(&pre, &vectors, &cfg.posthoc)?;
    let dir = ws.reports()?;
    let stem = format!("merge_{}", cfg.method.as_str());
    write_report(&dir.join(format!("{stem}.json")), cfg, &r)?;
    let mut w =
        csv::Writer::from_path(dir.join(format!("{stem}.csv"))).map_err(talos::Error::from)?;
    w.write_record(["task", "zero_shot", "single_task", "absolute"])
        .map_err(talos::Error::from)?;
    for (i, t) in tasks.iter().enumerate() {
        w.write_record([
            t.to_string(),
            format!("{:?}", r.zero_shot[i]),
            format!("{:?}", r.single_task[i]),
            format!("{:?}", r.absolute[i]),
        ])
        .map_err(talos::Error::from)?;
    }
    w.flush()?;
    println!(
        "alpha {} absolute {:.4} normalized {:.4}",
        r.alpha.alpha, r.absolute_mean, r.normalized
    );
    Ok(())
}

pub fn negate_cmd(ws: &Workspace, cfg: &ExperimentConfig, task: usize) -> Result<(), CliError> {
    let pre = load_pretrained(ws, cfg)?;
    let v = load_vectors(ws, cfg, &pre, &[task])?.remove(0);
    let r = pipeline::negation(&pre, &v)?;
    let path = ws
        .reports()?
        .join(format!("negate_{}_task{task}.json", cfg.method.as_str()));
    write_report(&path, cfg, &r)?;
    if !r.choice.feasible {
        warn!("no α kept control accuracy above the retention threshold; reporting α = 0");
    }
    println!(
        "alpha {} target {:.4} -> {:.4} control {:.4} -> {:.4}",
        r.choice.alpha, r.target_zero_shot, r.target_test, r.control_zero_shot, r.control_test
    );
    Ok(())
}

pub fn disentanglement_cmd(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    pair: (usize, usize),
) -> Result<(), CliError> {
    let pre = load_pretrained(ws, cfg)?;
    let v = load_vectors(ws, cfg, &pre, &[pair.0, pair.1])?;
    let grid = pipeline::disentanglement(&pre, &v[0], &v[1], &cfg.grid)?;
    let dir = ws.reports()?;
    let stem = format!(
        "disentanglement_{}_{}_{}",
        cfg.method.as_str(),
        pair.0,
        pair.1
    );
    grid.write_csv(&dir.join(format!("{stem}.csv")))?;
    let mean = grid.mean_over(0.0, 1.0);
    write_report(
        &dir.join(format!("{stem}.json")),
        cfg,
        &json!({ "tasks": [pair.0, pair.1], "xi_origin": grid.xi_origin, "mean_unit_square": mean, "sample_count": grid.sample_count }),
    )?;
    println!(
        "mean xi on [0,1]^2: {}",
        mean.map(|m| format!("{m:.4}")).unwrap_or("n/a".into())
    );
    Ok(())
}

pub fn localization_cmd(ws: &Workspace, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pre = load_pretrained(ws, cfg)?;
    let tasks = task_ids(&pre, None)?;
    let vectors = load_vectors(ws, cfg, &pre, &tasks)?;
    let m = pipeline::localization(&pre, &vectors)?;
    let dir = ws.reports()?;
    let stem = format!("localization_{}", cfg.method.as_str());
    m.write_csv(&dir.join(format!("{stem}.csv")))?;
    write_report(
        &dir.join(format!("{stem}.json")),
        cfg,
        &json!({ "matrix": m, "min_off_diagonal": m.min_off_diagonal() }),
    )?;
    println!("min off-diagonal ratio: {:?}", m.min_off_diagonal());
    Ok(())
}

#[derive(Serialize)]
struct TaskDiagnostics {
    task: usize,
    bound: eval::BoundRecord,
    relative_drift: f64,
    linearization: eval::LinearizationGap,
}

pub fn diagnostics_cmd(ws: &Workspace, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pre = load_pretrained(ws, cfg)?;
    let tasks = task_ids(&pre, None)?;
    let vectors = load_vectors(ws, cfg, &pre, &tasks)?;
    let hash = pre.theta0.content_hash();
    let mut masks = Vec::new();
    let mut per_task = Vec::new();
    for (&t, v) in tasks.iter().zip(&vectors) {
        let data = pre.task(t)?;
        let mask = match load_mask(&ws.mask_path(cfg, t)) {
            Ok((m, h)) if h == hash => m,
            _ => mask::SparseMask::full(pre.model.layout()),
        };
        let test = EvalSet::new(&data.test, data.head);
        let edited = task_vector::apply_with_hash(&pre.theta0, &hash, &[(1.0, v)])?;
        per_task.push(TaskDiagnostics {
            task: t,
            bound: eval::bound_check(&pre.model, &pre.theta0, v, &mask, test)?,
            relative_drift: eval::gradient_drift(
                &pre.model,
                &pre.theta0,
                &[edited],
                EvalSet::new(&data.val, data.head),
            )?
            .final_relative(),
            linearization: eval::posthoc_linearization_gap(&pre.model, &pre.theta0, v, test)?,
        });
        masks.push(mask);
    }
    let mut miou = Vec::new();
    for a in 0..masks.len() {
        for b in a + 1..masks.len() {
            miou.push(json!({ "a": tasks[a], "b": tasks[b], "miou": eval::mask_miou(&masks[a], &masks[b])? }));
        }
    }
    let prune = prune_grid(&pre)?;
    let dir = ws.reports()?;
    prune.write_csv(&dir.join("prune_grid.csv"))?;
    let body = json!({
        "tasks": per_task,
        "mask_miou": miou,
        "random_miou": eval::random_miou(1.0 - cfg.effective_sparsity()),
        "prune_grid": prune,
    });
    write_report(
        &dir.join(format!("diagnostics_{}.json", cfg.method.as_str())),
        cfg,
        &body,
    )?;
    let violations: usize = per_task.iter().map(|d| d.bound.violations).sum();
    println!(
        "bound violations: {violations}; minimum prune ratio: {:?}",
        prune.min()
    );
    Ok(())
}

/// Ratio grid: row `t` prunes the bottom 10% by task `t`'s scores, column
/// `u` evaluates on task `u`.
fn prune_grid(pre: &Pretrained) -> Result<eval::Matrix, CliError> {
    let tasks = &pre.suite.tasks;
    let base: Vec<f64> = tasks
        .iter()
        .map(|u| eval::accuracy(&pre.model, &pre.theta0, EvalSet::new(&u.test, u.head)))
        .collect::<talos::Result<_>>()?;
    let mut values = Vec::new();
    for t in tasks {
        let s = fisher::score(
            &pre.model,
            &pre.theta0,
            None,
            &t.val,
            t.head,
            &ScoreOptions::for_classes(pre.model.num_classes()),
        )?;
        let pruned = eval::prune_least_sensitive(&pre.theta0, &s, 0.1, PruneMode::Zero, 0)?;
        let row = tasks
            .iter()
            .zip(&base)
            .map(|(u, b)| {
                eval::accuracy(&pre.model, &pruned, EvalSet::new(&u.test, u.head)).map(|a| {
                    if *b > 0.0 {
                        a / b
                    } else {
                        0.0
                    }
                })
            })
            .collect::<talos::Result<Vec<f64>>>()?;
        values.push(row);
    }
    let labels: Vec<String> = tasks.iter().map(|t| format!("task{}", t.task_id)).collect();
    Ok(eval::Matrix {
        rows: labels.clone(),
        cols: labels,
        values,
    })
}

pub fn report_cmd(ws: &Workspace) -> Result<(), CliError> {
    let dir = ws.reports()?;
    let mut entries: Vec<(String, Value)> = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.ends_with("summary.json"))
        .collect();
    names.sort();
    for p in names {
        let doc: Value = serde_json::from_slice(&fs::read(&p)?)?;
        let stem = p
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        entries.push((stem, doc.get("report").cloned().unwrap_or(Value::Null)));
    }
    if entries.is_empty() {
        return Err(CliError::Config(format!(
            "no reports under {}",
            dir.display()
        )));
    }
    let mut summary = serde_json::Map::new();
    for (stem, r) in &entries {
        let line = summarize(stem, r);
        println!("{stem:<32} {line}");
        summary.insert(stem.clone(), json!({ "summary": line, "report": r }));
    }
    let out = dir.join("summary.json");
    fs::write(&out, serde_json::to_string_pretty(&Value::Object(summary))?)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn summarize(stem: &str, r: &Value) -> String {
    let f = |k: &str| r.get(k).and_then(Value::as_f64);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    if stem.starts_with("merge_") {
        format!(
            "alpha {} absolute {} normalized {}",
            fmt(r.pointer("/alpha/alpha").and_then(Value::as_f64)),
            fmt(f("absolute_mean")),
            fmt(f("normalized"))
        )
    } else if stem.starts_with("negate_") {
        format!(
            "target {} -> {} control {} -> {}",
            fmt(f("target_zero_shot")),
            fmt(f("target_test")),
            fmt(f("control_zero_shot")),
            fmt(f("control_test"))
        )
    } else if stem.starts_with("disentanglement_") {
        format!("mean xi {}", fmt(f("mean_unit_square")))
    } else if stem.starts_with("localization_") {
        format!("min off-diagonal {}", fmt(f("min_off_diagonal")))
    } else if stem.starts_with("diagnostics_") {
        let tasks = r
            .get("tasks")
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default();
        let violations: u64 = tasks
            .iter()
            .filter_map(|t| t.pointer("/bound/violations").and_then(Value::as_u64))
            .sum();
        format!("bound violations {violations}, tasks {}", tasks.len())
    } else if stem == "pretrain" {
        format!(
            "hash {}",
            r.get("content_hash").and_then(Value::as_str).unwrap_or("?")
        )
    } else {
        String::new()
    }
}
