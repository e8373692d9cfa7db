//! Executes experiments and writes their result directories.
//!
//! ```text
//! <out>/config.toml          resolved configuration
//! <out>/metrics.csv          one row per (run, step) or (run, episode)
//! <out>/timing.csv           wall-clock per row of metrics.csv
//! <out>/ablation.csv         per grid point, mean/sd/median of every metric
//! <out>/runs/<id>/summary.json
//! <out>/runs/<id>/init.zops, final.zops, seed.zolog    (train)
//! <out>/runs/<id>/source.zops, episodes.jsonl, episodes/<sample>.zolog (tta)
//! ```
//!
//! `metrics.csv` holds only values determined by the config and seed;
//! anything measured on the host goes to `timing.csv` or the summaries'
//! `wall_clock_s`/`*_wall_clock_s` fields.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use zo_core::fo::{fo_step, FoState};
use zo_core::models::data::{gen_data, gen_shifted_stream, DataGenConfig};
use zo_core::models::{accuracy, Batch, Classifier, CrossEntropy, LogisticRegression, Mlp, Model, QuadraticBowl, SeqClassifier};
use zo_core::optimizer::{train_observed, BatchSource, CountingModel, FixedBatch, SampledBatches};
use zo_core::param_store::{read_params, write_params};
use zo_core::rng::{derive_seed, domain, GaussianStream};
use zo_core::tta::{run_stream, AdaptMask, Adapter, EpisodeConfig};
use zo_core::{seedlog, ElementWidth, ParamSet, Selection, Tensor};

use crate::config::{ExperimentConfig, ExperimentKind, GridPoint, InitSpec, ModelSpec, RunPlan};

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub summary_version: u32,
    pub experiment: String,
    pub kind: ExperimentKind,
    /// Position in the experiment's run order.
    pub index: usize,
    pub run_id: String,
    pub grid_label: String,
    pub point: GridPoint,
    pub seed: u64,
    pub method: String,
    pub steps: usize,
    /// Loss evaluations (ZO) or gradient evaluations (FO), by counter.
    pub forwards: u64,
    /// `2qT` for ZO, `T` for FO (per sample for TTA, summed over samples).
    pub expected_forwards: u64,
    pub wall_clock_s: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    /// File names relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub summaries: Vec<RunSummary>,
}

impl ExperimentReport {
    pub fn failures(&self) -> impl Iterator<Item = &RunSummary> {
        self.summaries.iter().filter(|s| s.status == RunStatus::Failed)
    }
}

enum Built {
    Quadratic(QuadraticBowl),
    Classifier(Box<dyn Classifier>),
}

fn build_model(spec: &ModelSpec, data: Option<&DataGenConfig>) -> Result<Built> {
    let need = || data.context("data: required for classifier models");
    Ok(match spec {
        ModelSpec::Quadratic { dim, condition, rotation_seed } => {
            Built::Quadratic(QuadraticBowl::conditioned(*dim, *condition, *rotation_seed)?)
        }
        ModelSpec::Logistic => {
            let d = need()?;
            Built::Classifier(Box::new(LogisticRegression::new(d.dim, d.classes)?))
        }
        ModelSpec::Mlp { hidden } => {
            let d = need()?;
            let mut dims = vec![d.dim];
            dims.extend(hidden);
            dims.push(d.classes);
            Built::Classifier(Box::new(Mlp::new(dims)?))
        }
        ModelSpec::Seq { hidden, input_scale } => {
            let d = need()?;
            let clf = SeqClassifier::new(d.frames, d.dim, *hidden, d.classes)?.with_input_scale(*input_scale);
            Built::Classifier(Box::new(clf))
        }
    })
}

fn init_params(built: &Built, init: InitSpec, seed: u64, width: ElementWidth) -> Result<ParamSet> {
    let schema = match built {
        Built::Quadratic(b) => b.schema().to_vec(),
        Built::Classifier(c) => c.schema().to_vec(),
    };
    Ok(match (init, built) {
        (InitSpec::Zeros, _) => ParamSet::zeros(&schema, width)?,
        (InitSpec::Seeded, Built::Classifier(c)) => c.init(seed, width),
        (InitSpec::Seeded, Built::Quadratic(b)) => {
            let mut z = GaussianStream::new(derive_seed(seed, domain::INIT, 0, 0));
            let theta: Vec<f64> = (0..b.dim()).map(|_| z.next_normal()).collect();
            ParamSet::new(vec![("theta".into(), Tensor::from_vec(vec![b.dim()], theta)?.to_width(width))])?
        }
    })
}

struct Sinks {
    metrics: csv::Writer<File>,
    timing: csv::Writer<File>,
}

impl Sinks {
    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

/// Runs every plan of `config`, writing into `out_dir`. Runs that fail are
/// recorded with `status = "failed"` together with whatever they produced
/// before the failure; the remaining runs still execute.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(out_dir.join("runs")).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join("config.toml"), config.to_toml())?;
    let mut sinks = Sinks {
        metrics: csv::Writer::from_path(out_dir.join("metrics.csv"))?,
        timing: csv::Writer::from_path(out_dir.join("timing.csv"))?,
    };
    match config.kind {
        ExperimentKind::Train => {
            sinks.metrics.write_record(["run_id", "step", "loss", "mean_abs_proj_grad", "forwards", "eval_loss"])?;
            sinks.timing.write_record(["run_id", "step", "wall_nanos"])?;
        }
        ExperimentKind::Tta => {
            sinks.metrics.write_record([
                "run_id",
                "sample_id",
                "zero_shot_accuracy",
                "adapted_accuracy",
                "entropy_before",
                "entropy_after",
                "steps",
                "forwards",
                "reset_drift",
            ])?;
            sinks.timing.write_record(["run_id", "sample_id", "wall_clock_s"])?;
        }
    }
    let mut summaries = Vec::new();
    for (index, plan) in config.plans()?.into_iter().enumerate() {
        let run_dir = out_dir.join("runs").join(&plan.run_id);
        fs::create_dir_all(&run_dir)?;
        let mut summary = RunSummary {
            summary_version: SUMMARY_VERSION,
            experiment: config.name.clone(),
            kind: config.kind,
            index,
            run_id: plan.run_id.clone(),
            grid_label: plan.point.label(),
            point: plan.point.clone(),
            seed: plan.seed,
            method: match plan.adapter {
                Adapter::Zo(_) => "zo".into(),
                Adapter::Fo(_) => "fo".into(),
            },
            steps: plan.adapter.steps(),
            forwards: 0,
            expected_forwards: 0,
            wall_clock_s: 0.0,
            status: RunStatus::Ok,
            error: None,
            metrics: BTreeMap::new(),
            artifacts: Vec::new(),
        };
        let start = Instant::now();
        let result = match config.kind {
            ExperimentKind::Train => run_train(config, &plan, &run_dir, &mut sinks, &mut summary),
            ExperimentKind::Tta => run_tta(config, &plan, &run_dir, &mut sinks, &mut summary),
        };
        summary.wall_clock_s = start.elapsed().as_secs_f64();
        if let Err(e) = result {
            summary.status = RunStatus::Failed;
            summary.error = Some(format!("{e:#}"));
        }
        sinks.flush()?;
        let json = serde_json::to_string_pretty(&summary)?;
        fs::write(run_dir.join("summary.json"), json + "\n")?;
        summaries.push(summary);
    }
    write_ablation(&summaries, &out_dir.join("ablation.csv"))?;
    Ok(ExperimentReport { out_dir: out_dir.to_path_buf(), summaries })
}

fn save_params(params: &ParamSet, dir: &Path, name: &str, summary: &mut RunSummary) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    write_params(params, &mut w)?;
    w.flush()?;
    summary.artifacts.push(name.into());
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_params(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Shortest round-trip text, in exponent form for very small or large values.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn run_train(
    config: &ExperimentConfig,
    plan: &RunPlan,
    dir: &Path,
    sinks: &mut Sinks,
    summary: &mut RunSummary,
) -> Result<()> {
    let built = build_model(&config.model, plan.data.as_ref())?;
    let mut params = init_params(&built, config.init, plan.seed, config.width)?;
    save_params(&params, dir, "init.zops", summary)?;
    let init = params.clone();
    let selection = Selection::all(&params);

    let (train, test) = match &plan.data {
        Some(d) if !matches!(built, Built::Quadratic(_)) => {
            let (a, b) = gen_data(d)?;
            (Some(a), Some(b))
        }
        _ => (None, None),
    };
    let clf = match &built {
        Built::Classifier(c) => Some(CrossEntropy(c.as_ref())),
        Built::Quadratic(_) => None,
    };
    let model: &dyn Model = match (&built, &clf) {
        (Built::Quadratic(b), _) => b,
        (_, Some(ce)) => ce,
        _ => unreachable!(),
    };
    let full_train = train.clone().unwrap_or_else(Batch::empty);
    let mut batches: Box<dyn BatchSource> = match train {
        Some(t) => Box::new(SampledBatches::new(t, config.batch_size, plan.seed)?),
        None => Box::new(FixedBatch(Batch::empty())),
    };
    let eval_every = config.eval_every;
    let eval_at = |step: u64, last: bool| (eval_every > 0 && (step + 1).is_multiple_of(eval_every as u64)) || last;

    let run_id = plan.run_id.as_str();
    let outcome = match plan.adapter {
        Adapter::Zo(zo) => {
            summary.expected_forwards = 2 * zo.q as u64 * zo.steps as u64;
            let mut sink_err = None;
            let res = train_observed(&model, &mut params, &selection, &mut batches.as_mut(), &zo, |m, p| {
                let eval = if eval_at(m.step, m.step + 1 == zo.steps as u64) {
                    model.loss(p, &full_train).ok()
                } else {
                    None
                };
                let row = [
                    run_id.to_string(),
                    m.step.to_string(),
                    fmt_f64(m.loss),
                    fmt_f64(m.mean_abs_proj_grad),
                    m.forwards.to_string(),
                    opt(eval),
                ];
                let r = sinks
                    .metrics
                    .write_record(&row)
                    .and_then(|_| sinks.timing.write_record([run_id, &m.step.to_string(), &m.wall_nanos.to_string()]));
                if let Err(e) = r {
                    sink_err.get_or_insert(e);
                }
            });
            if let Some(e) = sink_err {
                return Err(e.into());
            }
            let (run, err) = match res {
                Ok(run) => (run, None),
                Err(abort) => (abort.partial, Some(abort.error)),
            };
            summary.forwards = run.forwards;
            seedlog::save(&run.log, dir.join("seed.zolog"))?;
            summary.artifacts.push("seed.zolog".into());
            if err.is_none() {
                let mut replayed = init.clone();
                run.log.replay(&mut replayed, &selection)?;
                summary.metrics.insert("replay_max_abs_diff".into(), replayed.max_abs_diff(&params));
            }
            err
        }
        Adapter::Fo(fo) => {
            fo.validate()?;
            summary.expected_forwards = fo.steps as u64;
            let counted = CountingModel::new(model);
            let mut state = FoState::new();
            let mut err = None;
            for t in 0..fo.steps as u64 {
                let start = Instant::now();
                let step = batches.batch(t, 0).and_then(|b| fo_step(&counted, &mut params, &selection, b, &fo, &mut state));
                let loss = match step {
                    Ok(l) => l,
                    Err(e) => {
                        err = Some(e);
                        break;
                    }
                };
                let nanos = start.elapsed().as_nanos() as u64;
                let eval = if eval_at(t, t + 1 == fo.steps as u64) { model.loss(&params, &full_train).ok() } else { None };
                sinks.metrics.write_record([
                    run_id.to_string(),
                    t.to_string(),
                    fmt_f64(loss),
                    String::new(),
                    counted.gradient_calls().to_string(),
                    opt(eval),
                ])?;
                sinks.timing.write_record([run_id, &t.to_string(), &nanos.to_string()])?;
            }
            summary.forwards = counted.gradient_calls();
            err
        }
    };
    save_params(&params, dir, "final.zops", summary)?;
    if let Some(e) = outcome {
        return Err(e.into());
    }

    let m = &mut summary.metrics;
    m.insert("final_train_loss".into(), model.loss(&params, &full_train)?);
    if let (Built::Classifier(c), Some(test)) = (&built, &test) {
        m.insert("final_test_loss".into(), model.loss(&params, test)?);
        m.insert("final_test_accuracy".into(), accuracy(&c.as_ref(), &params, test)?);
    }
    Ok(())
}

fn run_tta(
    config: &ExperimentConfig,
    plan: &RunPlan,
    dir: &Path,
    sinks: &mut Sinks,
    summary: &mut RunSummary,
) -> Result<()> {
    let tta = config.tta.as_ref().context("tta: missing")?;
    let data = plan.data.as_ref().context("data: missing")?;
    let built = build_model(&config.model, Some(data))?;
    let Built::Classifier(clf) = &built else {
        anyhow::bail!("model: TTA needs a classifier");
    };
    let clf = clf.as_ref();

    let (train, test) = gen_data(data)?;
    let mut source = init_params(&built, config.init, plan.seed, config.width)?;
    let all = Selection::all(&source);
    let pre = zo_core::fo::FoConfig::adam(tta.source.lr, tta.source.steps);
    let mut batches = SampledBatches::new(train, tta.source.batch_size, plan.seed)?;
    zo_core::fo::train_fo(&CrossEntropy(clf), &mut source, &all, &mut batches, &pre).context("source pretraining")?;
    save_params(&source, dir, "source.zops", summary)?;
    summary.metrics.insert("source_clean_accuracy".into(), accuracy(&clf, &source, &test)?);

    let stream = gen_shifted_stream(data, tta.samples)?;
    let episode = EpisodeConfig { adapter: plan.adapter, episodic: tta.episodic, reset: tta.reset };
    let per_sample = match plan.adapter {
        Adapter::Zo(z) => 2 * z.q as u64 * z.steps as u64,
        Adapter::Fo(f) => f.steps as u64,
    };
    summary.expected_forwards = per_sample * tta.samples as u64;

    let log_dir = dir.join("episodes");
    if tta.save_episode_logs && matches!(plan.adapter, Adapter::Zo(_)) {
        fs::create_dir_all(&log_dir)?;
        summary.artifacts.push("episodes/".into());
    }
    let mut jsonl = BufWriter::new(File::create(dir.join("episodes.jsonl"))?);
    summary.artifacts.push("episodes.jsonl".into());
    let run_id = plan.run_id.as_str();
    let mut sink_err: Option<anyhow::Error> = None;
    let samples = (0..stream.len()).map(|i| (i as u64, stream.sample(i)));
    let report = run_stream(&clf, &source, samples, &AdaptMask(tta.mask.clone()), &episode, |r, log| {
        let res = (|| -> Result<()> {
            sinks.metrics.write_record([
                run_id.to_string(),
                r.sample_id.to_string(),
                fmt_f64(r.zero_shot_accuracy),
                fmt_f64(r.adapted_accuracy),
                fmt_f64(r.entropy_before),
                fmt_f64(r.entropy_after),
                r.steps.to_string(),
                r.forwards.to_string(),
                fmt_f64(r.reset_drift),
            ])?;
            sinks.timing.write_record([run_id, &r.sample_id.to_string(), &fmt_f64(r.wall_clock_s)])?;
            serde_json::to_writer(&mut jsonl, r)?;
            jsonl.write_all(b"\n")?;
            if let (true, Some(log)) = (tta.save_episode_logs, log) {
                seedlog::save(log, log_dir.join(format!("{}.zolog", r.sample_id)))?;
            }
            summary.forwards += r.forwards;
            Ok(())
        })();
        if let Err(e) = res {
            sink_err.get_or_insert(e);
        }
    });
    jsonl.flush()?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    let report = report?;
    let m = &mut summary.metrics;
    m.insert("zero_shot_accuracy".into(), report.zero_shot_accuracy);
    m.insert("adapted_accuracy".into(), report.adapted_accuracy);
    m.insert("zero_shot_error".into(), 100.0 * (1.0 - report.zero_shot_accuracy));
    m.insert("adapted_error".into(), 100.0 * (1.0 - report.adapted_accuracy));
    m.insert("mean_gain".into(), report.mean_gain);
    m.insert("gain_se".into(), report.gain_se);
    m.insert("frac_improved".into(), report.frac_improved);
    m.insert("frac_worse".into(), report.frac_worse);
    m.insert("max_reset_drift".into(), report.max_reset_drift);
    m.insert("mean_adapt_wall_clock_s".into(), report.mean_wall_clock_s);
    Ok(())
}

/// Sample mean, standard deviation (n − 1) and median.
pub fn describe(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    (mean, sd, median)
}

const TIMING_METRICS: [&str; 1] = ["mean_adapt_wall_clock_s"];

fn write_ablation(summaries: &[RunSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["grid_label", "q", "sigma", "sampler", "combine", "lr", "steps", "forwards", "metric", "n", "mean", "sd", "median"])?;
    let mut groups: Vec<(&str, Vec<&RunSummary>)> = Vec::new();
    for s in summaries.iter().filter(|s| s.status == RunStatus::Ok) {
        match groups.iter_mut().find(|(l, _)| *l == s.grid_label) {
            Some((_, g)) => g.push(s),
            None => groups.push((&s.grid_label, vec![s])),
        }
    }
    for (label, runs) in groups {
        let first = runs[0];
        let p = &first.point;
        let names: Vec<&String> = first.metrics.keys().filter(|k| !TIMING_METRICS.contains(&k.as_str())).collect();
        for name in names {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(name).copied()).collect();
            let (mean, sd, median) = describe(&vals);
            w.write_record([
                label.to_string(),
                p.q.map(|q| q.to_string()).unwrap_or_default(),
                opt(p.sigma),
                p.sampler.map(|s| serde_json::to_string(&s).unwrap_or_default()).unwrap_or_default(),
                p.combine.map(|c| format!("{c:?}").to_lowercase()).unwrap_or_default(),
                opt(p.lr),
                first.steps.to_string(),
                first.forwards.to_string(),
                name.clone(),
                vals.len().to_string(),
                fmt_f64(mean),
                fmt_f64(sd),
                fmt_f64(median),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every `runs/*/summary.json` below `dir`, in run order.
pub fn load_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    let runs = dir.join("runs");
    let mut out = Vec::new();
    for entry in fs::read_dir(&runs).with_context(|| format!("reading {}", runs.display()))? {
        let path = entry?.path().join("summary.json");
        if path.is_file() {
            let text = fs::read_to_string(&path)?;
            let s: RunSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            out.push(s);
        }
    }
    out.sort_by_key(|s| s.index);
    Ok(out)
}
