//! Stage orchestrator: distill → prune → re-distill → quantize → eval.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::distill::{run_recipe, train_stage, KDLossConfig, RecipeConfig, SamplingSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::prune::{gradual_schedule, prune_heads, prune_mlp, PruneResult};
use crate::quant::quantize_model;
use crate::random::derive_seed;
use crate::toylm::{synth_data, Domain, SynthDataset, ToyModel};

use super::bench::bench;
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{PipelineConfig, Stage};
use super::dataset::{read_dataset, write_dataset, LoadedDataset};
use super::eval::{eval, EvalRecord, Metric};

pub const REPORT_SCHEMA: &str = "slmkit-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub index: usize,
    pub stage: String,
    pub params: Value,
    pub metrics: Value,
    /// Milliseconds; `None` unless `record_wall_time` is set.
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub model: ToyModel,
    pub records: Vec<StageRecord>,
}

impl PipelineRun {
    /// Fixed-width table of the per-stage validation metrics.
    pub fn summary(&self) -> String {
        let mut s = format!("{:>3}  {:<12} {:>10} {:>8} {:>9}\n", "#", "stage", "val_loss", "val_auc", "params");
        for r in &self.records {
            let num = |k: &str, prec: usize| match r.metrics.get(k).and_then(Value::as_f64) {
                Some(v) => format!("{v:.prec$}"),
                None => "-".into(),
            };
            let params = r
                .metrics
                .get("n_params")
                .and_then(Value::as_u64)
                .map_or("-".into(), |v| v.to_string());
            s.push_str(&format!(
                "{:>3}  {:<12} {:>10} {:>8} {:>9}\n",
                r.index,
                r.stage,
                num("val_loss", 5),
                num("val_auc", 4),
                params
            ));
        }
        s
    }
}

/// Deterministic synthetic splits derived from the pipeline seed.
pub struct Splits {
    pub train: SynthDataset,
    pub val: LoadedDataset,
    pub teacher: SynthDataset,
    pub calib: Vec<Vec<usize>>,
}

fn synth_split(cfg: &PipelineConfig, stream: u64, users: usize, domain: Domain) -> Result<SynthDataset> {
    let synth = match domain {
        Domain::InDomain => cfg.data.synth.clone(),
        Domain::OffDomain => cfg.data.synth.off_domain(),
    };
    synth_data(derive_seed(cfg.seed, stream), users, cfg.data.items_per_user, &synth)
}

/// The first `calib_sequences` sequences of the calibration split for `domain`.
pub fn calib_split(cfg: &PipelineConfig, domain: Domain) -> Result<SynthDataset> {
    let n = cfg.data.calib_sequences.max(1);
    let users = n.div_ceil(cfg.data.items_per_user);
    let stream = match domain {
        Domain::InDomain => 4,
        Domain::OffDomain => 5,
    };
    Ok(synth_split(cfg, stream, users, domain)?.slice(0..n))
}

pub fn make_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let train = match &cfg.paths.train_data {
        Some(p) => read_dataset(p)?.data,
        None => synth_split(cfg, 1, cfg.data.train_users, Domain::InDomain)?,
    };
    let val = match &cfg.paths.val_data {
        Some(p) => read_dataset(p)?,
        None => LoadedDataset {
            data: synth_split(cfg, 2, cfg.data.val_users, Domain::InDomain)?,
            labeled: true,
        },
    };
    let teacher = synth_split(cfg, 3, cfg.data.teacher_users.max(1), Domain::InDomain)?;
    let calib = match &cfg.paths.calib_data {
        Some(p) => read_dataset(p)?.data.sequences,
        None => calib_split(cfg, cfg.data.calib_domain)?.sequences,
    };
    Ok(Splits {
        train,
        val,
        teacher,
        calib,
    })
}

/// Writes train/val/teacher/calibration splits (both calibration domains).
pub fn write_synth(cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, ds: &SynthDataset| -> Result<()> {
        let p = out.join(name);
        write_dataset(ds, &p)?;
        written.push(p);
        Ok(())
    };
    put("train.tsv", &synth_split(cfg, 1, cfg.data.train_users, Domain::InDomain)?)?;
    put("val.tsv", &synth_split(cfg, 2, cfg.data.val_users, Domain::InDomain)?)?;
    put("teacher.tsv", &synth_split(cfg, 3, cfg.data.teacher_users.max(1), Domain::InDomain)?)?;
    put("calib.tsv", &calib_split(cfg, Domain::InDomain)?)?;
    put("calib_off.tsv", &calib_split(cfg, Domain::OffDomain)?)?;
    Ok(written)
}

fn with_seed(tc: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, tc.seed),
        ..tc.clone()
    }
}

fn seeded_recipe(cfg: &PipelineConfig) -> RecipeConfig {
    let mut r = cfg.distill.clone();
    r.train = with_seed(&r.train, cfg.seed);
    r.stage2 = with_seed(&r.stage2, cfg.seed);
    r.on_policy.seed = derive_seed(cfg.seed, r.on_policy.seed);
    r
}

struct Reporter {
    dir: Option<PathBuf>,
    record_wall_time: bool,
    records: Vec<StageRecord>,
}

impl Reporter {
    fn new(dir: Option<PathBuf>, cfg: &PipelineConfig) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
            let header = json!({
                "schema": REPORT_SCHEMA,
                "version": REPORT_VERSION,
                "seed": cfg.seed,
                "stages": cfg.stages.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            });
            fs::write(d.join("report.jsonl"), format!("{header}\n"))?;
            fs::write(d.join("timings.jsonl"), "")?;
        }
        Ok(Self {
            dir,
            record_wall_time: cfg.record_wall_time,
            records: Vec::new(),
        })
    }

    fn append(&self, file: &str, line: &Value) -> Result<()> {
        if let Some(d) = &self.dir {
            let mut f = OpenOptions::new().append(true).create(true).open(d.join(file))?;
            writeln!(f, "{line}")?;
            f.sync_data()?;
        }
        Ok(())
    }

    fn push(&mut self, stage: &str, params: Value, metrics: Value, wall_ms: f64) -> Result<()> {
        let rec = StageRecord {
            index: self.records.len(),
            stage: stage.to_string(),
            params,
            metrics,
            wall_time: self.record_wall_time.then_some(wall_ms),
        };
        let line = serde_json::to_value(&rec).map_err(|e| Error::Format(e.to_string()))?;
        self.append("report.jsonl", &line)?;
        self.append(
            "timings.jsonl",
            &json!({"index": rec.index, "stage": stage, "wall_time_ms": wall_ms}),
        )?;
        self.records.push(rec);
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &ToyModel) -> Result<()> {
        if let Some(d) = &self.dir {
            save_checkpoint(model, &d.join(name))?;
        }
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialize to JSON")
}

fn eval_metrics(model: &ToyModel, val: &LoadedDataset, metrics: &[Metric]) -> Result<EvalRecord> {
    eval(model, val, metrics)
}

fn merge(mut base: Value, eval: &EvalRecord) -> Value {
    let obj = base.as_object_mut().expect("metrics are JSON objects");
    if let Some(l) = eval.loss {
        obj.insert("val_loss".into(), json!(l));
    }
    if let Some(a) = eval.auc {
        obj.insert("val_auc".into(), json!(a));
    }
    obj.insert("n_params".into(), json!(eval.n_params));
    base
}

fn prune_metrics(results: &[PruneResult], layers: &[usize]) -> Value {
    json!(layers
        .iter()
        .zip(results)
        .map(|(l, r)| json!({
            "layer": l,
            "kept": r.kept.len(),
            "reconstruction_error": r.objective,
            "greedy_error": r.greedy_objective,
        }))
        .collect::<Vec<_>>())
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    splits: Splits,
    teacher: Option<ToyModel>,
    rep: Reporter,
    metrics: Vec<Metric>,
}

impl Run<'_> {
    fn teacher(&mut self) -> Result<Option<&ToyModel>> {
        if !self.cfg.distill.recipe.needs_teacher() {
            return Ok(None);
        }
        if self.teacher.is_none() {
            let start = Instant::now();
            let (model, metrics) = match &self.cfg.paths.teacher {
                Some(p) => (load_checkpoint(p)?, json!({"source": "checkpoint"})),
                None => {
                    let init = ToyModel::new_random(self.cfg.teacher.model.clone(), derive_seed(self.cfg.seed, 6))?;
                    let tc = with_seed(&self.cfg.teacher.train, self.cfg.seed);
                    let res = train_stage(
                        init,
                        None,
                        &self.splits.teacher,
                        &self.splits.val.data,
                        &KDLossConfig::sft(),
                        &SamplingSchedule::off_policy(),
                        &tc,
                        1,
                    )?;
                    (res.model, json!({"source": "sft", "best_epoch": res.best_at.1}))
                }
            };
            if model.config.vocab_size != self.cfg.student.vocab_size {
                return Err(Error::Config("teacher and student vocabularies differ".into()));
            }
            let ev = eval_metrics(&model, &self.splits.val, &self.metrics)?;
            self.rep.checkpoint("teacher.ckpt", &model)?;
            self.rep.push(
                "teacher",
                to_value(&self.cfg.teacher),
                merge(metrics, &ev),
                start.elapsed().as_secs_f64() * 1e3,
            )?;
            self.teacher = Some(model);
        }
        Ok(self.teacher.as_ref())
    }

    fn distill(&mut self, model: ToyModel, epochs: Option<usize>) -> Result<(ToyModel, Value)> {
        let mut recipe = seeded_recipe(self.cfg);
        if let Some(e) = epochs {
            recipe.train.epochs = e;
        }
        self.teacher()?;
        let res = run_recipe(&recipe, model, self.teacher.as_ref(), &self.splits.train, &self.splits.val.data)?;
        let history: Vec<Value> = res
            .history
            .iter()
            .map(|h| json!({"stage": h.stage, "epoch": h.epoch, "train_loss": h.train_loss, "val_loss": h.val_loss, "val_auc": h.val_auc}))
            .collect();
        let m = json!({"recipe": recipe.recipe.as_str(), "best_stage": res.best_at.0, "best_epoch": res.best_at.1, "history": history});
        Ok((res.model, m))
    }

    fn stage(&mut self, stage: Stage, model: ToyModel) -> Result<(ToyModel, Value, Value)> {
        let cfg = self.cfg;
        Ok(match stage {
            Stage::Distill => {
                let (m, metrics) = self.distill(model, None)?;
                (m, to_value(&cfg.distill), metrics)
            }
            Stage::PruneMlp => {
                let p = &cfg.prune_mlp;
                let layers = all_layers(&p.layers, &model);
                let mut model = model;
                let mut steps = Vec::new();
                for n in gradual_schedule(p.n_remove, p.steps)? {
                    let (pruned, results) = prune_mlp(&model, &layers, n, &self.splits.calib, &p.solver)?;
                    model = pruned;
                    let mut step = json!({"removed": n, "layers": prune_metrics(&results, &layers)});
                    if p.redistill_epochs > 0 {
                        let (m, d) = self.distill(model, Some(p.redistill_epochs))?;
                        model = m;
                        step["redistill"] = d;
                    }
                    steps.push(step);
                }
                (model, to_value(p), json!({"steps": steps}))
            }
            Stage::PruneHeads => {
                let p = &cfg.prune_heads;
                let layers = all_layers(&p.layers, &model);
                let (mut model, results) = prune_heads(&model, &layers, p.n_remove, &self.splits.calib, &p.solver)?;
                let mut metrics = json!({"layers": prune_metrics(&results, &layers)});
                if p.redistill_epochs > 0 {
                    let (m, d) = self.distill(model, Some(p.redistill_epochs))?;
                    model = m;
                    metrics["redistill"] = d;
                }
                (model, to_value(p), metrics)
            }
            Stage::Quantize => {
                let q = &cfg.quantize;
                let (m, report) = quantize_model(&model, q.scheme, Some(&self.splits.calib), &q.config)?;
                (m, to_value(q), to_value(&report))
            }
            Stage::Eval => (model, to_value(&cfg.eval), json!({})),
            Stage::Bench => {
                let report = bench(&model, &cfg.bench)?;
                self.rep.append("bench.jsonl", &to_value(&report))?;
                // timings are run-dependent and stay out of the report
                (model, to_value(&cfg.bench), json!({"bench_records": "bench.jsonl"}))
            }
        })
    }
}

fn all_layers(layers: &[usize], model: &ToyModel) -> Vec<usize> {
    if layers.is_empty() {
        (0..model.config.n_layers).collect()
    } else {
        layers.to_vec()
    }
}

/// Initial student: `paths.student` or a fresh model.
pub fn initial_student(cfg: &PipelineConfig) -> Result<ToyModel> {
    match &cfg.paths.student {
        Some(p) => load_checkpoint(p),
        None => ToyModel::new_random(cfg.student.clone(), derive_seed(cfg.seed, 5)),
    }
}

/// Runs every configured stage in order. With `paths.out` set, a
/// checkpoint is written after each stage and report records are appended
/// as they complete, so a failure leaves earlier outputs in place.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let model = initial_student(cfg)?;
    if model.config.vocab_size != cfg.data.synth.vocab_size {
        return Err(Error::Config("student checkpoint vocabulary differs from data.synth.vocab_size".into()));
    }
    let splits = make_splits(cfg)?;
    let metrics = if splits.val.labeled {
        vec![Metric::Loss, Metric::Auc]
    } else {
        vec![Metric::Loss]
    };
    let mut run = Run {
        cfg,
        splits,
        teacher: None,
        rep: Reporter::new(cfg.paths.out.clone(), cfg)?,
        metrics,
    };
    let mut model = model;
    for (i, &stage) in cfg.stages.iter().enumerate() {
        let start = Instant::now();
        let (next, params, metrics) = run.stage(stage, model)?;
        model = next;
        let stage_metrics = if stage == Stage::Eval { &cfg.eval.metrics } else { &run.metrics };
        let ev = eval_metrics(&model, &run.splits.val, stage_metrics)?;
        let metrics = merge(metrics, &ev);
        run.rep.checkpoint(&format!("{i:02}-{stage}.ckpt"), &model)?;
        run.rep.push(stage.as_str(), params, metrics, start.elapsed().as_secs_f64() * 1e3)?;
    }
    run.rep.checkpoint("model.ckpt", &model)?;
    let out = PipelineRun {
        model,
        records: run.rep.records,
    };
    if let Some(d) = &cfg.paths.out {
        let mut f = File::create(d.join("summary.txt"))?;
        f.write_all(out.summary().as_bytes())?;
    }
    Ok(out)
}
