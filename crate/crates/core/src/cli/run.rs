use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value as Json};

use super::config::{ExperimentConfig, Task};
use crate::estimators::{
    estimator_bench, kl_anneal_weight, scheduled_sampling_p, write_bench_csv, AnnealSchedule, Baseline,
    BenchObjective, BenchRow, CategoricalToy, EstimatorKind, GaussianToy,
};
use crate::lattice::{oracle_suite, OracleSuiteConfig};
use crate::segmodel::{
    boundary_f1, constrained_decode, evaluate, fit_select, load_checkpoint, prepare, read_jsonl,
    reference_boundaries, save_checkpoint, synth_data, trace_alignment, write_jsonl, Example, Pair, SegModel,
    SegmentTrace, Vocab,
};
use crate::ndgrad::Adam;
use crate::trainers::{bt_init, bt_train, vrs_train_step, write_bt_log, BtConfig, BtData, BtState, BtTask, VrsConfig, VrsStepLog};
use crate::{Error, Result};

/// Outcome of a task: a JSON summary for standard output and whether every
/// check the task performs held.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub task: String,
    pub passed: bool,
    pub files: Vec<String>,
    pub summary: Json,
}

/// Corpus splits in the order train, dev, test.
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Seed of split `i` under experiment seed `seed`.
pub fn split_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(3).wrapping_add(i as u64)
}

struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Out { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = self.create(name)?;
        write_jsonl(rows, &mut w)?;
        w.flush()?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Writes the run manifest: the resolved config and the library version,
/// with no timestamps so reruns are byte-identical.
fn write_manifest(out: &mut Out, command: &str, cfg: &Json) -> Result<()> {
    out.json("manifest.json", &json!({ "version": crate::VERSION, "command": command, "config": cfg }))
}

/// Generates the three corpus splits into `dir`.
pub fn synth_splits(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    let mut out = Out::new(dir)?;
    write_manifest(&mut out, "synth-data", &serde_json::to_value(cfg)?)?;
    let sizes = [cfg.data.n_train, cfg.data.n_dev, cfg.data.n_test];
    for (i, split) in SPLITS.iter().enumerate() {
        let ex = synth_data(&cfg.data.synth, split_seed(cfg.seed, i), sizes[i])?;
        out.jsonl(&format!("{split}.jsonl"), &ex)?;
    }
    let summary = json!({ "train": sizes[0], "dev": sizes[1], "test": sizes[2] });
    Ok(RunOutcome { task: "synth-data".into(), passed: true, files: out.files, summary })
}

fn load_split(cfg: &ExperimentConfig, i: usize) -> Result<Vec<Example>> {
    let given = [&cfg.paths.train, &cfg.paths.dev, &cfg.paths.test][i];
    match given {
        Some(p) => read_jsonl(&fs::read_to_string(p)?),
        None => {
            let n = [cfg.data.n_train, cfg.data.n_dev, cfg.data.n_test][i];
            synth_data(&cfg.data.synth, split_seed(cfg.seed, i), n)
        }
    }
}

/// Runs the configured task, writing every artifact under `dir`.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut out = Out::new(dir)?;
    write_manifest(&mut out, "train", &serde_json::to_value(cfg)?)?;
    let (passed, summary) = match cfg.task {
        Task::Segmodel => run_segmodel(cfg, &mut out)?,
        Task::Vrs => run_vrs(cfg, &mut out)?,
        Task::Backtranslation => run_bt(cfg, &mut out)?,
        Task::EstimatorBench => run_bench(cfg, &mut out)?,
        Task::LatticeCheck => run_lattice_check(cfg, &mut out)?,
    };
    Ok(RunOutcome { task: cfg.task.name().into(), passed, files: out.files, summary })
}

fn run_segmodel(cfg: &ExperimentConfig, out: &mut Out) -> Result<(bool, Json)> {
    let vocab = Vocab::synthetic();
    let [train, dev, test] = [0, 1, 2].map(|i| load_split(cfg, i).and_then(|e| prepare(&vocab, &e)));
    let (train, dev, test) = (train?, dev?, test?);
    let mut model = SegModel::new(cfg.segmodel_config(), vocab, cfg.seed)?;
    let mut rows = Vec::new();
    let sel = fit_select(&mut model, &train, &dev, &cfg.train_config(), &cfg.decode, |log, dev| {
        rows.push(json!({ "epoch": log.epoch, "train": log, "dev": dev }));
    })?;
    out.jsonl("epochs.jsonl", &rows)?;
    save_checkpoint(&model, &out.path("model.json"))?;
    out.files.extend(["model.json".to_string(), "model.bin".to_string()]);
    let report = evaluate(&model, &test, &cfg.decode)?;
    let passed = report.coverage == 1.0 && report.repetitions == 0 && report.decode_failures == 0;
    let summary = json!({ "best_epoch": sel.best_epoch, "test": report });
    out.json("metrics.json", &summary)?;
    Ok((passed, summary))
}

fn run_vrs(cfg: &ExperimentConfig, out: &mut Out) -> Result<(bool, Json)> {
    let vocab = Vocab::synthetic();
    let train = prepare(&vocab, &load_split(cfg, 0)?)?;
    let mut model = SegModel::new(cfg.segmodel_config(), vocab, cfg.seed)?;
    let mut opt = Adam::new(cfg.optimizer.lr).with_clip(Some(cfg.optimizer.clip));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bs = cfg.optimizer.batch_size;
    let total = cfg.vrs.pretrain_steps + cfg.vrs.steps;
    let mut rows: Vec<Json> = Vec::with_capacity(total);
    let mut last: Option<VrsStepLog> = None;
    for step in 0..total {
        let pretrain = step < cfg.vrs.pretrain_steps;
        let step_cfg = VrsConfig { pretrain, ..cfg.vrs.step.clone() };
        let start = (step * bs) % train.len();
        let batch: Vec<Pair> = (0..bs).map(|i| train[(start + i) % train.len()].clone()).collect();
        let log = vrs_train_step(&mut model, &mut opt, &batch, &step_cfg, &mut rng)?;
        rows.push(json!({ "step": step, "pretrain": pretrain, "log": log }));
        if !pretrain {
            last = Some(log);
        }
    }
    out.jsonl("vrs.jsonl", &rows)?;
    save_checkpoint(&model, &out.path("model.json"))?;
    out.files.extend(["model.json".to_string(), "model.bin".to_string()]);
    let summary = json!({ "steps": total, "final": last });
    out.json("metrics.json", &summary)?;
    Ok((model.params.all_finite(), summary))
}

fn run_bt(cfg: &ExperimentConfig, out: &mut Out) -> Result<(bool, Json)> {
    let bt = &cfg.backtranslation;
    let task = BtTask::shipped(bt.task_seed);
    let data = BtData::shipped(&task, bt.data_seed);
    let model_cfg = BtConfig { seed: cfg.seed, ..bt.model.clone() };
    let mut state = BtState::new(model_cfg, &task, data)?;
    bt_init(&mut state, bt.init_steps);
    let init = state.metrics();
    let mut rows = vec![init.clone()];
    rows.extend(bt_train(&mut state, bt.iterations, |_| {}));
    let mut w = out.create("bt.jsonl")?;
    write_bt_log(&rows, &mut w)?;
    w.flush()?;
    let fin = rows.last().expect("at least one iteration");
    let summary = json!({
        "init_exact_match": init.exact_match,
        "final_exact_match": fin.exact_match,
        "fwd_ce": rows.iter().map(|r| r.fwd_ce).collect::<Vec<_>>(),
        "bwd_ce": rows.iter().map(|r| r.bwd_ce).collect::<Vec<_>>(),
    });
    out.json("metrics.json", &summary)?;
    Ok((fin.exact_match > init.exact_match, summary))
}

/// Estimators run on the categorical toy at the schedule's temperatures.
pub fn categorical_estimators(tau_start: f64, tau_end: f64) -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::ScoreFunction(Baseline::None),
        EstimatorKind::ScoreFunction(Baseline::MovingAverage(0.95)),
        EstimatorKind::ScoreFunction(Baseline::Optimal),
        EstimatorKind::GumbelSoftmax { tau: tau_start },
        EstimatorKind::GumbelSoftmax { tau: tau_end },
        EstimatorKind::StraightThrough { tau: tau_start },
    ]
}

/// Estimators run on the Gaussian toy.
pub fn gaussian_estimators() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::Reparameterization,
        EstimatorKind::ScoreFunction(Baseline::None),
        EstimatorKind::ScoreFunction(Baseline::MovingAverage(0.95)),
    ]
}

fn bench_json(rows: &[BenchRow]) -> Json {
    Json::Array(
        rows.iter()
            .map(|r| json!({ "estimator": r.estimator, "bias": r.bias, "max_z": r.max_z, "mean_var": r.mean_var, "unbiased": r.unbiased }))
            .collect(),
    )
}

fn run_bench(cfg: &ExperimentConfig, out: &mut Out) -> Result<(bool, Json)> {
    let b = &cfg.bench;
    let s = &cfg.schedule;
    let toys: [(&str, Box<dyn BenchObjective>, Vec<EstimatorKind>); 2] = [
        ("categorical", Box::new(CategoricalToy::shipped()), categorical_estimators(s.tau_start, s.tau_end)),
        ("gaussian", Box::new(GaussianToy::shipped()), gaussian_estimators()),
    ];
    let mut summary = serde_json::Map::new();
    let mut passed = true;
    for (name, toy, kinds) in &toys {
        let rows = estimator_bench(toy.as_ref(), kinds, b.n_trials, b.n_samples, cfg.seed)?;
        passed &= rows.iter().filter(|r| r.unbiased).all(|r| r.max_z <= 3.0);
        let mut w = out.create(&format!("bench_{name}.csv"))?;
        write_bench_csv(&rows, &mut w, b.timing)?;
        w.flush()?;
        summary.insert(name.to_string(), bench_json(&rows));
    }
    let tau = AnnealSchedule::temperature(s.tau_start, s.tau_end, s.tau_steps);
    let mut w = out.create("schedules.csv")?;
    writeln!(w, "step,kl_weight,sampling_p,tau")?;
    let horizon = s.anneal_horizon.max(s.tau_steps);
    for i in 0..=10u64 {
        let step = horizon * i / 10;
        let p = scheduled_sampling_p(step, s.anneal_horizon.max(1))?;
        writeln!(w, "{step},{},{p},{}", kl_anneal_weight(step, s.anneal_horizon), tau.value(step))?;
    }
    w.flush()?;
    out.json("metrics.json", &summary)?;
    Ok((passed, Json::Object(summary)))
}

fn run_lattice_check(cfg: &ExperimentConfig, out: &mut Out) -> Result<(bool, Json)> {
    let checks = oracle_suite(&OracleSuiteConfig { seed: cfg.seed, ..cfg.oracle.clone() })?;
    let mut w = out.create("lattice_check.csv")?;
    writeln!(w, "check,instances,max_dev,tol,passed")?;
    for c in &checks {
        writeln!(w, "{},{},{:e},{:e},{}", c.name, c.instances, c.max_dev, c.tol, c.passed)?;
    }
    w.flush()?;
    let passed = checks.iter().all(|c| c.passed);
    Ok((passed, serde_json::to_value(&checks)?))
}

fn checkpoint_path(cfg: &ExperimentConfig, given: Option<&Path>) -> Result<PathBuf> {
    given
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint given".into()))
}

/// Evaluates a checkpoint on the test split.
pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let model = load_checkpoint(&checkpoint_path(cfg, checkpoint)?)?;
    let mut out = Out::new(dir)?;
    write_manifest(&mut out, "eval", &serde_json::to_value(cfg)?)?;
    let test = prepare(&model.vocab, &load_split(cfg, 2)?)?;
    let report = evaluate(&model, &test, &cfg.decode)?;
    let passed = report.coverage == 1.0 && report.repetitions == 0 && report.decode_failures == 0;
    out.json("eval.json", &report)?;
    Ok(RunOutcome { task: "eval".into(), passed, files: out.files, summary: serde_json::to_value(&report)? })
}

/// Alignment trace of one input.
#[derive(Clone, Debug, Serialize)]
pub struct AlignedExample {
    pub index: usize,
    pub output: Vec<String>,
    pub segments: Vec<SegmentTrace>,
    /// `(start, end, record)` of the MAP segmentation of the reference.
    pub reference_segments: Vec<[usize; 3]>,
    pub boundary_f1: f64,
}

/// Alignment traces of every input plus the corpus boundary F1.
#[derive(Clone, Debug, Serialize)]
pub struct AlignReport {
    pub examples: Vec<AlignedExample>,
    pub boundary_f1: f64,
}

/// Decodes each input with the checkpoint and traces its alignments.
pub fn align(model: &SegModel, inputs: &[Example], cfg: &ExperimentConfig) -> Result<AlignReport> {
    let mut examples = Vec::with_capacity(inputs.len());
    let mut total = [0usize; 3];
    for (index, ex) in inputs.iter().enumerate() {
        let rs = model.vocab.record_set(&ex.records)?;
        let dec = constrained_decode(model, &rs, &cfg.decode)?;
        let segments = trace_alignment(model, &rs, &dec)?;
        let (path, counts) = reference_boundaries(model, &rs, ex)?;
        for (t, c) in total.iter_mut().zip(counts) {
            *t += c;
        }
        examples.push(AlignedExample {
            index,
            output: model.vocab.decode(&dec.tokens),
            segments,
            reference_segments: path.segments().map(|(s, len, j)| [s, s + len, j]).collect(),
            boundary_f1: boundary_f1(counts),
        });
    }
    Ok(AlignReport { examples, boundary_f1: boundary_f1(total) })
}

/// Human-readable trace: one block per segment, one row per token with the
/// generation posterior and the `top_k` most probable copy positions.
pub fn format_alignment(report: &AlignReport, top_k: usize) -> String {
    let mut s = String::new();
    for ex in &report.examples {
        s.push_str(&format!("# example {}: {}\n", ex.index, ex.output.join(" ")));
        for seg in &ex.segments {
            s.push_str(&format!("  [{}] {}\n", seg.record, seg.label));
            for t in &seg.tokens {
                let mut cols: Vec<(usize, f64)> = t.positions.iter().copied().enumerate().collect();
                cols.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let copies: Vec<String> =
                    cols.iter().take(top_k).map(|(i, p)| format!("{}:{:.3}", seg.source[*i], p)).collect();
                s.push_str(&format!("    {:<12} gen {:.3}  {}\n", t.token, t.gen, copies.join("  ")));
            }
        }
        s.push_str(&format!("  boundary F1 {:.3}\n", ex.boundary_f1));
    }
    s.push_str(&format!("corpus boundary F1 {:.4}\n", report.boundary_f1));
    s
}

/// Loads the checkpoint, traces `input` (JSONL) and writes `align.json`
/// under `dir` when given.
pub fn align_files(cfg: &ExperimentConfig, checkpoint: Option<&Path>, input: &Path, dir: Option<&Path>) -> Result<AlignReport> {
    let model = load_checkpoint(&checkpoint_path(cfg, checkpoint)?)?;
    let inputs = read_jsonl(&fs::read_to_string(input)?)?;
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no examples", input.display())));
    }
    let report = align(&model, &inputs, cfg)?;
    if let Some(d) = dir {
        let mut out = Out::new(d)?;
        write_manifest(&mut out, "align", &serde_json::to_value(cfg)?)?;
        out.json("align.json", &report)?;
    }
    Ok(report)
}
