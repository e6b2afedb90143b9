//! End-to-end experiment: data, pretraining on task A, scoring and selection
//! on task B, placement, masked fine-tuning, evaluation and reports.
//!
//! The in-memory steps ([`pretrain_model`], [`downstream_base`],
//! [`train_variant`], ...) are reused by the on-disk stages, which persist
//! every intermediate under one output directory:
//!
//! ```text
//! out/
//!   data/      task_a/{train,val,test}.trpt  task_b/...  manifest.json
//!   pretrain/  checkpoint.trpt  model.json  metrics.csv  pretrain.json
//!   score/     fisher.trpt  model.trpt  model.json  score.json
//!   select/    mask.trpt  selection.json  layer_distribution.csv
//!   plan/      plan.json
//!   finetune/  checkpoint.trpt  model.json  metrics.csv
//!   eval/      eval.json  token_maps.json
//!   report/    report.json  flops.json  flops.csv
//!   ablate/    components.csv  placement.csv  overlap.csv  distributions.csv  reports/*.json
//! ```
//!
//! Every stage directory also gets a `timing.json` with wall-clock
//! measurements; nothing else depends on the clock.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{generate, Dataset, Split, SyntheticTaskSpec, TaskData};
use crate::error::{Error, Result};
use crate::fisher::{estimate_fim, FisherScores};
use crate::pack::TensorPack;
use crate::refine::{plan_refining_layers, PlacementMode, RefinePlan};
use crate::report::{
    ablation_table, distribution_csv, flops_csv, flops_report, layer_distribution, matrix_csv,
    overlap_matrix, ExperimentReport, TableKind, Variant, PLACEMENT_RHOS,
};
use crate::selector::{select, LayerImportance, Selection, SelectionMask, SelectionSummary};
use crate::tensor::Graph;
use crate::train::{evaluate, fine_tune, metrics_csv, EpochMetrics, TrainState};
use crate::vit::{ForwardOptions, ModelConfig, RefineRecord, ViTModel};

pub const STAGES: [&str; 9] = [
    "data", "pretrain", "score", "select", "plan", "finetune", "eval", "report", "ablate",
];

// ---------------------------------------------------------------------------
// in-memory steps

/// Trains every parameter of a fresh model on task A.
pub fn pretrain_model(
    config: &RunConfig,
    task_a: &TaskData,
) -> Result<(ViTModel<f32>, Vec<EpochMetrics>, f64)> {
    let model = ViTModel::<f32>::new(config.model_a())?;
    let reg = model.params().registry();
    let tc = config.pretrain.clone();
    let steps = tc.epochs * tc.steps_per_epoch(task_a.train.len());
    let mut state = TrainState::new(model, SelectionMask::filled(&reg, true), tc, steps)?;
    let history = fine_tune(
        &mut state,
        None,
        &task_a.train,
        &task_a.val,
        config.seed_for("pretrain"),
    )?;
    let acc = history.last().map_or(0.0, |m| m.val_accuracy);
    Ok((state.into_model(), history, acc))
}

/// Pretrained backbone with a fresh head sized for `num_classes`.
pub fn downstream_base(
    pretrained: &ViTModel<f32>,
    num_classes: usize,
    config: &RunConfig,
) -> Result<ViTModel<f32>> {
    let mut m = pretrained.clone();
    m.params_mut().set_requires_grad(false);
    m.reset_head(num_classes, config.seed_for("head"))?;
    Ok(m)
}

pub fn score_model(
    base: &ViTModel<f32>,
    train: &Dataset,
    config: &RunConfig,
) -> Result<FisherScores> {
    estimate_fim(base, train, &config.fim.options(config.seed_for("fim")))
}

pub fn plan_from_importance(
    config: &RunConfig,
    importance: &LayerImportance,
) -> Result<RefinePlan> {
    plan_refining_layers(
        importance,
        config.refine.num_layers,
        config.refine.mode,
        config.refine.rho,
        config.seed_for("placement"),
        &config.refine.layers,
    )
}

/// Mask that trains only the always-trainable parameters (linear probing).
pub fn probe_mask(base: &ViTModel<f32>, config: &RunConfig) -> SelectionMask {
    SelectionMask::from_patterns(&base.params().registry(), &config.selector.always_trainable)
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub model: ViTModel<f32>,
    pub history: Vec<EpochMetrics>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Masked fine-tuning of `base` on task B followed by evaluation.
pub fn train_variant(
    base: &ViTModel<f32>,
    mask: &SelectionMask,
    plan: Option<&RefinePlan>,
    task_b: &TaskData,
    config: &RunConfig,
) -> Result<VariantOutcome> {
    let tc = config.finetune.clone();
    let steps = tc.epochs * tc.steps_per_epoch(task_b.train.len());
    let eval_bs = tc.eval_batch_size;
    let mut state = TrainState::new(base.clone(), mask.clone(), tc, steps)?;
    let history = fine_tune(
        &mut state,
        plan,
        &task_b.train,
        &task_b.val,
        config.seed_for("finetune"),
    )?;
    let model = state.into_model();
    let val_accuracy = history.last().map_or(0.0, |m| m.val_accuracy);
    let test_accuracy = evaluate(&model, plan, &task_b.test, eval_bs)?;
    Ok(VariantOutcome {
        model,
        history,
        val_accuracy,
        test_accuracy,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn build_report(
    config: &RunConfig,
    task: &str,
    model: &ModelConfig,
    summary: &SelectionSummary,
    mask: &SelectionMask,
    param_selection: bool,
    plan: Option<&RefinePlan>,
    val_accuracy: f64,
    test_accuracy: f64,
) -> Result<ExperimentReport> {
    let flops = flops_report(model, plan)?;
    Ok(ExperimentReport {
        task: task.to_string(),
        variant: Variant {
            param_selection,
            token_selection: plan.is_some_and(|p| !p.layers.is_empty()),
        },
        val_accuracy,
        test_accuracy,
        trainable_fraction: mask.fraction(),
        selection: summary.clone(),
        refine_plan: plan.cloned(),
        flops_reduction: flops.reduction(),
        flops,
        seed: config.seed,
        config_hash: config.hash(),
    })
}

/// Selection, placement, fine-tuning and evaluation for one downstream task,
/// starting from scores of `base`.
pub struct Downstream {
    pub task: String,
    pub base: ViTModel<f32>,
    pub data: TaskData,
    pub scores: FisherScores,
    pub selection: Selection,
}

impl Downstream {
    pub fn prepare(
        pretrained: &ViTModel<f32>,
        spec: &SyntheticTaskSpec,
        config: &RunConfig,
    ) -> Result<Self> {
        let data = generate(spec)?;
        let base = downstream_base(pretrained, spec.num_classes, config)?;
        let scores = score_model(&base, &data.train, config)?;
        let selection = select(&scores, &config.selector)?;
        Ok(Self {
            task: spec.family.name().to_string(),
            base,
            data,
            scores,
            selection,
        })
    }

    pub fn plan(&self, config: &RunConfig, mode: PlacementMode, rho: f64) -> Result<RefinePlan> {
        let mut c = config.clone();
        c.refine.mode = mode;
        c.refine.rho = rho;
        plan_from_importance(&c, &self.selection.importance)
    }

    /// Fine-tunes one ablation cell and reports it.
    pub fn run(
        &self,
        config: &RunConfig,
        param_selection: bool,
        plan: Option<&RefinePlan>,
    ) -> Result<(ExperimentReport, VariantOutcome)> {
        let mask = if param_selection {
            self.selection.mask.clone()
        } else {
            probe_mask(&self.base, config)
        };
        let out = train_variant(&self.base, &mask, plan, &self.data, config)?;
        let summary = self.selection.summary(&config.selector);
        let r = build_report(
            config,
            &self.task,
            self.base.config(),
            &summary,
            &mask,
            param_selection,
            plan,
            out.val_accuracy,
            out.test_accuracy,
        )?;
        Ok((r, out))
    }

    /// The four cells: neither, token-only, param-only, both.
    pub fn components(&self, config: &RunConfig) -> Result<Vec<ExperimentReport>> {
        let plan = plan_from_importance(config, &self.selection.importance)?;
        let mut out = Vec::new();
        for (p, t) in [(false, false), (false, true), (true, false), (true, true)] {
            out.push(self.run(config, p, t.then_some(&plan))?.0);
        }
        Ok(out)
    }

    /// Dense, random and sparse placement at each placement rate.
    pub fn placement(&self, config: &RunConfig) -> Result<Vec<ExperimentReport>> {
        let mut out = Vec::new();
        for rho in PLACEMENT_RHOS {
            for mode in [
                PlacementMode::Dense,
                PlacementMode::Random,
                PlacementMode::Sparse,
            ] {
                let plan = self.plan(config, mode, rho)?;
                out.push(self.run(config, true, Some(&plan))?.0);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// persistence helpers

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write(path, s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `{stem}.trpt` (parameters) and `{stem}.json` (architecture).
pub fn save_model(dir: &Path, stem: &str, model: &ViTModel<f32>) -> Result<()> {
    let mut p = TensorPack::new();
    for param in model.params().iter() {
        p.insert_tensor(&param.info.name, &param.tensor)?;
    }
    p.save(dir.join(format!("{stem}.trpt")))?;
    write_json(&dir.join(format!("{stem}.json")), model.config())
}

pub fn load_model(dir: &Path, stem: &str) -> Result<ViTModel<f32>> {
    let config: ModelConfig = read_json(&dir.join(format!("{stem}.json")))?;
    let pack = TensorPack::load(dir.join(format!("{stem}.trpt")))?;
    let mut model = ViTModel::<f32>::new(config)?;
    if pack.len() != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, model has {} parameters",
            pack.len(),
            model.params().len()
        )));
    }
    let names: Vec<String> = model.params().iter().map(|p| p.info.name.clone()).collect();
    for name in names {
        let t = pack.tensor::<f32>(&name)?;
        model.params_mut().assign(&name, t)?;
    }
    Ok(model)
}

fn save_task(dir: &Path, data: &TaskData) -> Result<Vec<(String, String)>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hashes = Vec::new();
    for (name, d) in [
        ("train", &data.train),
        ("val", &data.val),
        ("test", &data.test),
    ] {
        let path = dir.join(format!("{name}.trpt"));
        d.to_pack().save(&path)?;
        hashes.push((name.to_string(), sha256_file(&path)?));
    }
    Ok(hashes)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    Dataset::from_pack(&TensorPack::load(
        dir.join(format!("{}.trpt", split.name())),
    )?)
}

pub fn load_task(dir: &Path) -> Result<TaskData> {
    Ok(TaskData {
        train: load_split(dir, Split::Train)?,
        val: load_split(dir, Split::Val)?,
        test: load_split(dir, Split::Test)?,
    })
}

// ---------------------------------------------------------------------------
// on-disk stages

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TaskManifest {
    spec: SyntheticTaskSpec,
    sha256: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DataManifest {
    config_hash: String,
    task_a: TaskManifest,
    task_b: TaskManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub config_hash: String,
    pub summary: SelectionSummary,
    pub importance: LayerImportance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config_hash: String,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
struct Timing {
    stage: String,
    elapsed_ms: u128,
    finished_unix_s: u64,
}

/// A configured run rooted at one output directory.
pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
            force,
        })
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn need(&self, stage: &str) -> Result<PathBuf> {
        let d = self.dir(stage);
        if !d.is_dir() {
            return Err(Error::Input(format!(
                "missing {}; run the `{stage}` stage first",
                d.display()
            )));
        }
        Ok(d)
    }

    fn begin(&self, stage: &str) -> Result<PathBuf> {
        let d = self.dir(stage);
        if d.exists() {
            if !self.force {
                return Err(Error::Usage(format!(
                    "{} already exists; pass --force to overwrite",
                    d.display()
                )));
            }
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn finish(&self, stage: &str, started: Instant) -> Result<()> {
        let t = Timing {
            stage: stage.to_string(),
            elapsed_ms: started.elapsed().as_millis(),
            finished_unix_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        write_json(&self.dir(stage).join("timing.json"), &t)
    }

    fn run_stage(&self, stage: &'static str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let started = Instant::now();
        let body = || -> Result<()> {
            let d = self.begin(stage)?;
            f(&d)?;
            self.finish(stage, started)
        };
        body().map_err(|e| e.in_stage(stage))
    }

    pub fn gen_data(&self) -> Result<()> {
        self.run_stage("data", |d| {
            let mut manifests = Vec::new();
            for (name, spec) in [
                ("task_a", self.config.task_a_spec()),
                ("task_b", self.config.task_b_spec()),
            ] {
                let data = generate(&spec)?;
                let hashes = save_task(&d.join(name), &data)?;
                manifests.push(TaskManifest {
                    spec,
                    sha256: hashes.into_iter().collect(),
                });
            }
            let task_b = manifests.pop().unwrap();
            let task_a = manifests.pop().unwrap();
            write_json(
                &d.join("manifest.json"),
                &DataManifest {
                    config_hash: self.config.hash(),
                    task_a,
                    task_b,
                },
            )
        })
    }

    pub fn pretrain(&self) -> Result<()> {
        self.run_stage("pretrain", |d| {
            let task_a = load_task(&self.need("data")?.join("task_a"))?;
            let (model, history, acc) = pretrain_model(&self.config, &task_a)?;
            save_model(d, "checkpoint", &model)?;
            write(&d.join("metrics.csv"), metrics_csv(&history))?;
            write_json(
                &d.join("pretrain.json"),
                &serde_json::json!({
                    "config_hash": self.config.hash(),
                    "task": self.config.task_a.family,
                    "val_accuracy": acc,
                    "epochs": history.len(),
                }),
            )
        })
    }

    pub fn score(&self) -> Result<()> {
        self.run_stage("score", |d| {
            let pretrained = load_model(&self.need("pretrain")?, "checkpoint")?;
            let train = load_split(&self.need("data")?.join("task_b"), Split::Train)?;
            let base = downstream_base(&pretrained, train.num_classes(), &self.config)?;
            let scores = score_model(&base, &train, &self.config)?;
            scores.to_pack().save(d.join("fisher.trpt"))?;
            save_model(d, "model", &base)?;
            write_json(
                &d.join("score.json"),
                &serde_json::json!({
                    "config_hash": self.config.hash(),
                    "sample_count": scores.sample_count(),
                    "batch_count": scores.batch_count(),
                }),
            )
        })
    }

    pub fn select(&self) -> Result<()> {
        self.run_stage("select", |d| {
            let sd = self.need("score")?;
            let base = load_model(&sd, "model")?;
            let reg = base.params().registry();
            let scores = FisherScores::from_pack(&TensorPack::load(sd.join("fisher.trpt"))?, &reg)?;
            let sel = select(&scores, &self.config.selector)?;
            sel.mask.to_pack().save(d.join("mask.trpt"))?;
            write_json(
                &d.join("selection.json"),
                &SelectionRecord {
                    config_hash: self.config.hash(),
                    summary: sel.summary(&self.config.selector),
                    importance: sel.importance.clone(),
                },
            )?;
            let dist = layer_distribution(&sel.top_set, &reg)?;
            write(&d.join("layer_distribution.csv"), distribution_csv(&dist))
        })
    }

    pub fn plan(&self) -> Result<()> {
        self.run_stage("plan", |d| {
            let rec: SelectionRecord = read_json(&self.need("select")?.join("selection.json"))?;
            let plan = plan_from_importance(&self.config, &rec.importance)?;
            write_json(&d.join("plan.json"), &plan)
        })
    }

    fn load_plan(&self) -> Result<RefinePlan> {
        read_json(&self.need("plan")?.join("plan.json"))
    }

    fn load_mask(&self, base: &ViTModel<f32>) -> Result<SelectionMask> {
        let pack = TensorPack::load(self.need("select")?.join("mask.trpt"))?;
        SelectionMask::from_pack(&pack, &base.params().registry())
    }

    pub fn finetune(&self) -> Result<()> {
        self.run_stage("finetune", |d| {
            let base = load_model(&self.need("score")?, "model")?;
            let mask = self.load_mask(&base)?;
            let plan = self.load_plan()?;
            let task_b = load_task(&self.need("data")?.join("task_b"))?;
            let out = train_variant(&base, &mask, Some(&plan), &task_b, &self.config)?;
            save_model(d, "checkpoint", &out.model)?;
            write(&d.join("metrics.csv"), metrics_csv(&out.history))
        })
    }

    pub fn eval(&self) -> Result<()> {
        self.run_stage("eval", |d| {
            let model = load_model(&self.need("finetune")?, "checkpoint")?;
            let plan = self.load_plan()?;
            let dir_b = self.need("data")?.join("task_b");
            let bs = self.config.finetune.eval_batch_size;
            let val = load_split(&dir_b, Split::Val)?;
            let test = load_split(&dir_b, Split::Test)?;
            write_json(
                &d.join("eval.json"),
                &EvalRecord {
                    config_hash: self.config.hash(),
                    val_accuracy: evaluate(&model, Some(&plan), &val, bs)?,
                    test_accuracy: evaluate(&model, Some(&plan), &test, bs)?,
                },
            )?;
            write_json(
                &d.join("token_maps.json"),
                &token_maps(&model, &plan, &test, 4)?,
            )
        })
    }

    pub fn report(&self) -> Result<()> {
        self.run_stage("report", |d| {
            let base = load_model(&self.need("score")?, "model")?;
            let mask = self.load_mask(&base)?;
            let plan = self.load_plan()?;
            let sel: SelectionRecord = read_json(&self.need("select")?.join("selection.json"))?;
            let ev: EvalRecord = read_json(&self.need("eval")?.join("eval.json"))?;
            let r = build_report(
                &self.config,
                self.config.task_b.family.name(),
                base.config(),
                &sel.summary,
                &mask,
                true,
                Some(&plan),
                ev.val_accuracy,
                ev.test_accuracy,
            )?;
            write_json(&d.join("report.json"), &r)?;
            write_json(&d.join("flops.json"), &r.flops)?;
            write(&d.join("flops.csv"), flops_csv(&r.flops))
        })
    }

    /// Component and placement tables on task B plus the mask overlap matrix
    /// across downstream families, computed over the scoped weights.
    pub fn ablate(&self) -> Result<()> {
        self.run_stage("ablate", |d| {
            let pretrained = load_model(&self.need("pretrain")?, "checkpoint")?;
            let results = run_ablation(&self.config, &pretrained)?;
            write(
                &d.join("components.csv"),
                ablation_table(TableKind::Components, &results.components)?,
            )?;
            write(
                &d.join("placement.csv"),
                ablation_table(TableKind::Placement, &results.placement)?,
            )?;
            write(
                &d.join("overlap.csv"),
                matrix_csv(&results.tasks, &results.overlap),
            )?;
            let mut dist = String::new();
            for (task, csv) in results.tasks.iter().zip(&results.distributions) {
                for line in csv.lines().skip(usize::from(!dist.is_empty())) {
                    if line.starts_with("layer") {
                        dist.push_str("task,");
                    } else {
                        dist.push_str(task);
                        dist.push(',');
                    }
                    dist.push_str(line);
                    dist.push('\n');
                }
            }
            write(&d.join("distributions.csv"), dist)?;
            let rd = d.join("reports");
            fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
            for (i, r) in results
                .components
                .iter()
                .chain(&results.placement)
                .enumerate()
            {
                write_json(&rd.join(format!("{i:02}.json")), r)?;
            }
            Ok(())
        })
    }

    /// Every stage except the ablation, in order.
    pub fn run_all(&self) -> Result<ExperimentReport> {
        self.gen_data()?;
        self.pretrain()?;
        self.score()?;
        self.select()?;
        self.plan()?;
        self.finetune()?;
        self.eval()?;
        self.report()?;
        read_json(&self.dir("report").join("report.json"))
    }
}

/// Monolithic run of the main pipeline into `out`.
pub fn run_pipeline(config: &RunConfig, out: &Path, force: bool) -> Result<ExperimentReport> {
    Pipeline::new(config.clone(), out, force)?.run_all()
}

/// Kept/merged patch bookkeeping for the first `n` images of `data`.
pub fn token_maps(
    model: &ViTModel<f32>,
    plan: &RefinePlan,
    data: &Dataset,
    n: usize,
) -> Result<Vec<RefineRecord>> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    let (x, _) = data.batch::<f32>(&idx);
    let mut g = Graph::new();
    let trace = model.forward(&mut g, &x, Some(plan), ForwardOptions::default())?;
    Ok(trace.refinements)
}

pub struct AblationResults {
    pub components: Vec<ExperimentReport>,
    pub placement: Vec<ExperimentReport>,
    /// Downstream task names, task B first.
    pub tasks: Vec<String>,
    pub overlap: Vec<Vec<f64>>,
    pub distributions: Vec<String>,
}

pub fn run_ablation(config: &RunConfig, pretrained: &ViTModel<f32>) -> Result<AblationResults> {
    let spec_b = config.task_b_spec();
    let main = Downstream::prepare(pretrained, &spec_b, config)?;
    let components = main.components(config)?;
    let placement = main.placement(config)?;

    let mut tasks = vec![main.task.clone()];
    let scope = &config.selector.scope;
    let mut masks = vec![main.selection.mask.restrict(scope)?];
    let mut distributions = vec![distribution_csv(&layer_distribution(
        &main.selection.top_set,
        main.scores.registry(),
    )?)];
    for &family in &config.ablation.overlap_families {
        if tasks.iter().any(|t| t == family.name()) {
            continue;
        }
        let other = Downstream::prepare(pretrained, &config.overlap_task_spec(family), config)?;
        tasks.push(family.name().to_string());
        distributions.push(distribution_csv(&layer_distribution(
            &other.selection.top_set,
            other.scores.registry(),
        )?));
        masks.push(other.selection.mask.restrict(scope)?);
    }
    let overlap = if masks.len() >= 2 {
        overlap_matrix(&masks)?
    } else {
        vec![vec![1.0]]
    };
    Ok(AblationResults {
        components,
        placement,
        tasks,
        overlap,
        distributions,
    })
}
