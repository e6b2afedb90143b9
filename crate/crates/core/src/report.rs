//! Analysis artifacts: analytic FLOPs, layer histograms of the top set,
//! mask-overlap matrices, ablation tables and the per-experiment report.
//!
//! FLOPs count a multiply-accumulate as 2 and cover matrix products only
//! (softmax, LayerNorm and GELU are left out). Per block with `T` tokens,
//! width `d` and MLP width `d_h`:
//!
//! * attention: `2 * (4 T d^2 + 2 T^2 d)`, the Q/K/V/output projections plus
//!   the score and value products;
//! * MLP: `2 * 2 T d d_h`.
//!
//! Totals also include the patch projection and the classifier head, so they
//! equal what [`crate::tensor::Graph::flops`] records for one image.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Registry;
use crate::refine::{kept_count, PlacementMode, RefinePlan};
use crate::rng;
use crate::selector::{mask_overlap, FlatIndex, SelectionMask, SelectionSummary};
use crate::tensor::{Graph, Tensor};
use crate::vit::{ForwardOptions, ModelConfig, ViTModel};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Tokens entering each block under the plan.
    pub token_counts: Vec<usize>,
    pub attention_flops: Vec<u64>,
    pub mlp_flops: Vec<u64>,
    pub patch_embed_flops: u64,
    pub head_flops: u64,
    pub planned_total: u64,
    pub unplanned_total: u64,
}

impl FlopsReport {
    /// `1 - planned / unplanned`.
    pub fn reduction(&self) -> f64 {
        1.0 - self.planned_total as f64 / self.unplanned_total as f64
    }
}

pub fn attention_flops(t: u64, d: u64) -> u64 {
    2 * (4 * t * d * d + 2 * t * t * d)
}

pub fn mlp_flops(t: u64, d: u64, hidden: u64) -> u64 {
    2 * 2 * t * d * hidden
}

/// Tokens entering each block: `N + 1` until a refining layer, after which
/// `1 + floor(rho * n) + 1` when something is discarded.
pub fn token_schedule(config: &ModelConfig, plan: Option<&RefinePlan>) -> Vec<usize> {
    let mut t = config.num_tokens() + 1;
    let mut out = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        out.push(t);
        if let Some(p) = plan.filter(|p| p.refines_at(l)) {
            let n = t - 1;
            let k = kept_count(p.rho, n);
            if k < n {
                t = 1 + k + 1;
            }
        }
    }
    out
}

fn totals(config: &ModelConfig, counts: &[usize]) -> (Vec<u64>, Vec<u64>, u64) {
    let d = config.embed_dim as u64;
    let hid = config.mlp_hidden() as u64;
    let att: Vec<u64> = counts
        .iter()
        .map(|&t| attention_flops(t as u64, d))
        .collect();
    let mlp: Vec<u64> = counts
        .iter()
        .map(|&t| mlp_flops(t as u64, d, hid))
        .collect();
    let sum = att.iter().sum::<u64>() + mlp.iter().sum::<u64>();
    (att, mlp, sum)
}

/// Analytic per-image FLOPs of a forward pass with and without `plan`.
pub fn flops_report(config: &ModelConfig, plan: Option<&RefinePlan>) -> Result<FlopsReport> {
    config.validate()?;
    if let Some(p) = plan {
        p.validate(config.num_layers)?;
    }
    let patch = 2 * (config.num_tokens() * config.patch_dim() * config.embed_dim) as u64;
    let head = 2 * (config.embed_dim * config.num_classes) as u64;
    let counts = token_schedule(config, plan);
    let (att, mlp, planned) = totals(config, &counts);
    let (_, _, unplanned) = totals(config, &token_schedule(config, None));
    Ok(FlopsReport {
        token_counts: counts,
        attention_flops: att,
        mlp_flops: mlp,
        patch_embed_flops: patch,
        head_flops: head,
        planned_total: planned + patch + head,
        unplanned_total: unplanned + patch + head,
    })
}

/// FLOPs recorded by the autodiff tape while running one random image
/// through a freshly initialized model.
pub fn instrumented_flops(config: &ModelConfig, plan: Option<&RefinePlan>) -> Result<u64> {
    let model = ViTModel::<f32>::new(config.clone())?;
    let mut r = rng::stream(config.seed, "flops-probe");
    let n = config.image_height * config.image_width * config.channels;
    let px: Vec<f32> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let img = Tensor::new(
        vec![1, config.image_height, config.image_width, config.channels],
        px,
    )?;
    let mut g = Graph::new();
    model.forward(&mut g, &img, plan, ForwardOptions::default())?;
    Ok(g.flops())
}

pub fn flops_csv(r: &FlopsReport) -> String {
    let mut s = String::from("layer,tokens,attention_flops,mlp_flops\n");
    for (l, ((t, a), m)) in r
        .token_counts
        .iter()
        .zip(&r.attention_flops)
        .zip(&r.mlp_flops)
        .enumerate()
    {
        s.push_str(&format!("{l},{t},{a},{m}\n"));
    }
    s
}

/// Top-set histogram over blocks plus a non-block bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub non_block_count: usize,
    pub non_block_fraction: f64,
    pub total: usize,
}

pub fn layer_distribution(top_set: &[FlatIndex], registry: &Registry) -> Result<LayerDistribution> {
    if top_set.is_empty() {
        return Err(Error::Input("top set is empty".into()));
    }
    let mut counts = vec![0usize; registry.num_layers()];
    let mut non_block = 0;
    for i in top_set {
        match registry.get(i.slot).layer {
            Some(l) => counts[l] += 1,
            None => non_block += 1,
        }
    }
    let n = top_set.len() as f64;
    Ok(LayerDistribution {
        fractions: counts.iter().map(|&c| c as f64 / n).collect(),
        counts,
        non_block_count: non_block,
        non_block_fraction: non_block as f64 / n,
        total: top_set.len(),
    })
}

pub fn distribution_csv(d: &LayerDistribution) -> String {
    let mut s = String::from("layer,count,fraction\n");
    for (l, (c, f)) in d.counts.iter().zip(&d.fractions).enumerate() {
        s.push_str(&format!("{l},{c},{f}\n"));
    }
    s.push_str(&format!(
        "-1,{},{}\n",
        d.non_block_count, d.non_block_fraction
    ));
    s
}

/// Pairwise Jaccard overlaps; symmetric with a unit diagonal.
pub fn overlap_matrix(masks: &[SelectionMask]) -> Result<Vec<Vec<f64>>> {
    if masks.len() < 2 {
        return Err(Error::Input(
            "overlap matrix needs at least two masks".into(),
        ));
    }
    let k = masks.len();
    let mut m = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let x = mask_overlap(&masks[i], &masks[j])?;
            m[i][j] = x;
            m[j][i] = x;
        }
    }
    Ok(m)
}

pub fn matrix_csv(labels: &[String], m: &[Vec<f64>]) -> String {
    let mut s = String::from("task");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(m) {
        s.push_str(l);
        for x in row {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
    }
    s
}

/// What an experiment trained and how it refined tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    /// Mask from Fisher selection (otherwise head only).
    pub param_selection: bool,
    /// A refine plan was active during fine-tuning and evaluation.
    pub token_selection: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub variant: Variant,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub trainable_fraction: f64,
    pub selection: SelectionSummary,
    pub refine_plan: Option<RefinePlan>,
    pub flops: FlopsReport,
    pub flops_reduction: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Which ablation grid a table lays out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    /// Parameter selection on/off crossed with token selection on/off.
    Components,
    /// Dense, random and sparse placement at rho 0.95 and 0.8.
    Placement,
}

pub const PLACEMENT_RHOS: [f64; 2] = [0.95, 0.8];

fn components_cell(r: &ExperimentReport) -> String {
    match (r.variant.param_selection, r.variant.token_selection) {
        (false, false) => "neither",
        (false, true) => "token-only",
        (true, false) => "param-only",
        (true, true) => "both",
    }
    .to_string()
}

fn placement_cell(r: &ExperimentReport) -> Result<String> {
    let plan = r
        .refine_plan
        .as_ref()
        .ok_or_else(|| Error::Input(format!("{} has no refine plan", r.task)))?;
    if !PLACEMENT_RHOS.contains(&plan.rho) {
        return Err(Error::Input(format!(
            "placement tables use rho 0.95 or 0.8, got {}",
            plan.rho
        )));
    }
    if plan.mode == PlacementMode::Explicit {
        return Err(Error::Input(
            "placement tables compare dense, random and sparse".into(),
        ));
    }
    Ok(format!("{}@{}", plan.mode, plan.rho))
}

/// Cells of a table in display order.
pub fn table_cells(kind: TableKind) -> Vec<String> {
    match kind {
        TableKind::Components => ["neither", "token-only", "param-only", "both"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        TableKind::Placement => PLACEMENT_RHOS
            .iter()
            .flat_map(|rho| {
                ["dense", "random", "sparse"]
                    .iter()
                    .map(move |m| format!("{m}@{rho}"))
            })
            .collect(),
    }
}

/// One CSV row per cell, `absent` for cells without a result. Reports are
/// grouped by `(task, cell)`; two reports for the same pair are an error.
pub fn ablation_table(kind: TableKind, results: &[ExperimentReport]) -> Result<String> {
    let mut by_cell: BTreeMap<(String, String), &ExperimentReport> = BTreeMap::new();
    let mut tasks: Vec<String> = Vec::new();
    for r in results {
        let cell = match kind {
            TableKind::Components => components_cell(r),
            TableKind::Placement => placement_cell(r)?,
        };
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
        if by_cell.insert((r.task.clone(), cell.clone()), r).is_some() {
            return Err(Error::Input(format!(
                "duplicate configuration {cell} for {}",
                r.task
            )));
        }
    }
    if tasks.is_empty() {
        tasks.push("-".into());
    }
    let mut s = String::from(
        "task,configuration,val_accuracy,test_accuracy,trainable_fraction,flops_reduction\n",
    );
    for task in &tasks {
        for cell in table_cells(kind) {
            match by_cell.get(&(task.clone(), cell.clone())) {
                Some(r) => s.push_str(&format!(
                    "{task},{cell},{},{},{},{}\n",
                    r.val_accuracy, r.test_accuracy, r.trainable_fraction, r.flops_reduction
                )),
                None => s.push_str(&format!("{task},{cell},absent,absent,absent,absent\n")),
            }
        }
    }
    Ok(s)
}
