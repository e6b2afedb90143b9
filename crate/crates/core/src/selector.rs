//! From Fisher scores to a binary training mask.
//!
//! 1. [`top_m_set`]: the top `M%` scoped entries by score.
//! 2. [`layer_weights`]: the share `w_l` of that set falling in block `l`.
//! 3. [`connection_budget`]: `C_l = max(1, floor(w_l / min_{w>0} w * C_min))`,
//!    capped at the fan-in of the block's widest eligible matrix.
//! 4. [`select_per_neuron`]: the `C_l` best-scoring inputs of every output
//!    row of every eligible matrix, plus the always-trainable parameters.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherScores;
use crate::pack::{PackData, TensorPack};
use crate::params::{matches_any, Registry};

/// Guards floor() against ratios like `0.6 / 0.4 * 2` landing a hair below
/// an integer.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub top_m_percent: f64,
    pub c_min: usize,
    /// Name patterns (`*` wildcard) of the matrices eligible for selection.
    pub scope: Vec<String>,
    /// Name patterns that are always fully trainable.
    pub always_trainable: Vec<String>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            top_m_percent: 1.0,
            c_min: 1,
            scope: vec!["block*.attn.*.weight".into(), "block*.mlp.*.weight".into()],
            always_trainable: vec!["head.weight".into(), "head.bias".into()],
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_m_percent > 0.0 && self.top_m_percent <= 100.0) {
            return Err(Error::Config(format!(
                "top_m_percent {} outside (0, 100]",
                self.top_m_percent
            )));
        }
        if self.c_min == 0 {
            return Err(Error::Config("c_min must be at least 1".into()));
        }
        Ok(())
    }

    /// Registry slots in scope, in registry order. Every scoped parameter
    /// must be a matrix.
    pub fn scoped_slots(&self, registry: &Registry) -> Result<Vec<usize>> {
        let slots: Vec<usize> = registry
            .iter()
            .enumerate()
            .filter(|(_, p)| matches_any(&self.scope, &p.name))
            .map(|(i, _)| i)
            .collect();
        if slots.is_empty() {
            return Err(Error::Config(format!(
                "selection scope {:?} matches no parameter",
                self.scope
            )));
        }
        if let Some(&s) = slots.iter().find(|&&s| registry.get(s).shape.len() != 2) {
            let p = registry.get(s);
            return Err(Error::Config(format!(
                "scoped parameter {} has shape {:?}; only matrices can be selected",
                p.name, p.shape
            )));
        }
        Ok(slots)
    }
}

/// One scalar entry of one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlatIndex {
    pub slot: usize,
    pub offset: usize,
}

/// `ceil(M/100 * total)`, at least one.
pub fn top_m_count(top_m_percent: f64, total: usize) -> usize {
    ((top_m_percent / 100.0 * total as f64 - FLOOR_EPS).ceil() as usize).clamp(1, total)
}

/// Highest-scoring scoped entries, best first. Ties go to the parameter
/// whose name sorts first, then to the lower flat offset.
pub fn top_m_set(scores: &FisherScores, config: &SelectorConfig) -> Result<Vec<FlatIndex>> {
    config.validate()?;
    let registry = scores.registry();
    let slots = config.scoped_slots(registry)?;
    let mut by_name = slots.clone();
    by_name.sort_by(|&a, &b| registry.get(a).name.cmp(&registry.get(b).name));
    let mut name_rank = vec![0usize; registry.len()];
    for (r, &s) in by_name.iter().enumerate() {
        name_rank[s] = r;
    }

    let mut all: Vec<(f64, usize, FlatIndex)> = Vec::new();
    for &slot in &slots {
        for (offset, &v) in scores.values(slot).iter().enumerate() {
            all.push((v, name_rank[slot], FlatIndex { slot, offset }));
        }
    }
    let k = top_m_count(config.top_m_percent, all.len());
    let cmp = |a: &(f64, usize, FlatIndex), b: &(f64, usize, FlatIndex)| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.offset.cmp(&b.2.offset))
    };
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    Ok(all.into_iter().map(|(_, _, i)| i).collect())
}

/// Share of the top set in each transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub w: Vec<f64>,
    /// Top-set members per block.
    pub counts: Vec<usize>,
    /// Top-set members outside every block.
    pub non_block: usize,
    pub top_m_size: usize,
}

pub fn layer_weights(top_set: &[FlatIndex], registry: &Registry) -> LayerImportance {
    let mut counts = vec![0usize; registry.num_layers()];
    let mut non_block = 0;
    for i in top_set {
        match registry.get(i.slot).layer {
            Some(l) => counts[l] += 1,
            None => non_block += 1,
        }
    }
    let n = top_set.len();
    let w = counts
        .iter()
        .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    LayerImportance {
        w,
        counts,
        non_block,
        top_m_size: n,
    }
}

/// Per-block connection counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionBudget {
    pub c: Vec<usize>,
}

/// `max(1, floor(w_l / min_{w>0} w * c_min))` for every block, uncapped.
pub fn budget_from_weights(w: &[f64], c_min: usize) -> Result<Vec<usize>> {
    if c_min == 0 {
        return Err(Error::Config("c_min must be at least 1".into()));
    }
    let min_pos = w
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::Config("every layer weight is zero".into()))?;
    Ok(w.iter()
        .map(|&x| {
            let c = (x / min_pos * c_min as f64 + FLOOR_EPS).floor();
            (c as usize).max(1)
        })
        .collect())
}

/// Widest fan-in among the eligible matrices of each block, 0 when a block
/// has none.
pub fn layer_fan_in(registry: &Registry, config: &SelectorConfig) -> Result<Vec<usize>> {
    let mut fan = vec![0usize; registry.num_layers()];
    for s in config.scoped_slots(registry)? {
        let p = registry.get(s);
        if let Some(l) = p.layer {
            fan[l] = fan[l].max(p.shape[1]);
        }
    }
    Ok(fan)
}

pub fn connection_budget(
    importance: &LayerImportance,
    config: &SelectorConfig,
    registry: &Registry,
) -> Result<ConnectionBudget> {
    config.validate()?;
    let mut c = budget_from_weights(&importance.w, config.c_min)?;
    for (c, &f) in c.iter_mut().zip(&layer_fan_in(registry, config)?) {
        if f > 0 {
            *c = (*c).min(f);
        }
    }
    Ok(ConnectionBudget { c })
}

/// Binary mask over every parameter of a registry.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    registry: Registry,
    bits: Vec<Vec<u8>>,
}

impl SelectionMask {
    pub fn filled(registry: &Registry, value: bool) -> Self {
        let bits = registry
            .iter()
            .map(|p| vec![value as u8; p.numel()])
            .collect();
        Self {
            registry: registry.clone(),
            bits,
        }
    }

    /// Fully marks the parameters whose names match `patterns`.
    pub fn from_patterns(registry: &Registry, patterns: &[String]) -> Self {
        let bits = registry
            .iter()
            .map(|p| vec![matches_any(patterns, &p.name) as u8; p.numel()])
            .collect();
        Self {
            registry: registry.clone(),
            bits,
        }
    }

    pub fn from_bits(registry: &Registry, bits: Vec<Vec<u8>>) -> Result<Self> {
        if bits.len() != registry.len() {
            return Err(Error::Input(format!(
                "{} mask tensors for {} parameters",
                bits.len(),
                registry.len()
            )));
        }
        for (p, b) in registry.iter().zip(&bits) {
            if b.len() != p.numel() || b.iter().any(|&x| x > 1) {
                return Err(Error::Input(format!("invalid mask for {}", p.name)));
            }
        }
        Ok(Self {
            registry: registry.clone(),
            bits,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Sub-mask over the parameters whose names match `patterns`.
    pub fn restrict(&self, patterns: &[String]) -> Result<Self> {
        let (infos, bits): (Vec<_>, Vec<_>) = self
            .registry
            .iter()
            .zip(&self.bits)
            .filter(|(p, _)| matches_any(patterns, &p.name))
            .map(|(p, b)| (p.clone(), b.clone()))
            .unzip();
        Ok(Self {
            registry: Registry::new(infos)?,
            bits,
        })
    }

    pub fn bits(&self, slot: usize) -> &[u8] {
        &self.bits[slot]
    }

    pub fn bits_mut(&mut self, slot: usize) -> &mut [u8] {
        &mut self.bits[slot]
    }

    pub fn selected(&self) -> usize {
        self.bits
            .iter()
            .map(|b| b.iter().map(|&x| x as usize).sum::<usize>())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.registry.total_numel()
    }

    pub fn fraction(&self) -> f64 {
        self.selected() as f64 / self.total() as f64
    }

    /// Selected entries per transformer block.
    pub fn selected_per_layer(&self) -> Vec<usize> {
        let mut out = vec![0; self.registry.num_layers()];
        for (p, b) in self.registry.iter().zip(&self.bits) {
            if let Some(l) = p.layer {
                out[l] += b.iter().map(|&x| x as usize).sum::<usize>();
            }
        }
        out
    }

    pub fn to_pack(&self) -> TensorPack {
        let mut p = TensorPack::new();
        for (info, b) in self.registry.iter().zip(&self.bits) {
            p.insert(&info.name, info.shape.clone(), PackData::U8(b.clone()))
                .expect("unique parameter names");
        }
        p
    }

    pub fn from_pack(pack: &TensorPack, registry: &Registry) -> Result<Self> {
        let mut bits = Vec::with_capacity(registry.len());
        for info in registry.iter() {
            let e = pack
                .get(&info.name)
                .ok_or_else(|| Error::Input(format!("mask lacks parameter {}", info.name)))?;
            if e.dims != info.shape {
                return Err(Error::Shape {
                    op: "mask",
                    lhs: info.shape.clone(),
                    rhs: e.dims.clone(),
                });
            }
            bits.push(pack.u8_values(&info.name)?.to_vec());
        }
        Self::from_bits(registry, bits)
    }
}

/// Indices of the `c` largest entries of `row`, ties to the lower index.
pub fn top_c_columns(row: &[f64], c: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(c);
    idx
}

/// Per-neuron selection. Scoped matrices in block `l` keep `C_l` inputs per
/// row; scoped matrices outside every block keep `c_min`.
pub fn select_per_neuron(
    scores: &FisherScores,
    budget: &ConnectionBudget,
    config: &SelectorConfig,
) -> Result<SelectionMask> {
    let registry = scores.registry();
    if budget.c.len() != registry.num_layers() {
        return Err(Error::Input(format!(
            "budget covers {} layers, model has {}",
            budget.c.len(),
            registry.num_layers()
        )));
    }
    let mut mask = SelectionMask::filled(registry, false);
    for slot in config.scoped_slots(registry)? {
        let p = registry.get(slot);
        let (rows, cols) = (p.shape[0], p.shape[1]);
        let c = p.layer.map_or(config.c_min, |l| budget.c[l]);
        let s = scores.values(slot);
        let bits = mask.bits_mut(slot);
        for r in 0..rows {
            for col in top_c_columns(&s[r * cols..(r + 1) * cols], c) {
                bits[r * cols + col] = 1;
            }
        }
    }
    for (slot, p) in registry.iter().enumerate() {
        if matches_any(&config.always_trainable, &p.name) {
            mask.bits_mut(slot).fill(1);
        }
    }
    Ok(mask)
}

/// Selected count implied by a budget: `min(C_l, fan_in)` per eligible row
/// plus every always-trainable entry not already counted.
pub fn expected_selected(
    registry: &Registry,
    budget: &ConnectionBudget,
    config: &SelectorConfig,
) -> Result<usize> {
    let mut n = 0;
    for (slot, p) in registry.iter().enumerate() {
        if matches_any(&config.always_trainable, &p.name) {
            n += p.numel();
        } else if config.scoped_slots(registry)?.contains(&slot) {
            let c = p.layer.map_or(config.c_min, |l| budget.c[l]);
            n += p.shape[0] * c.min(p.shape[1]);
        }
    }
    Ok(n)
}

/// Jaccard overlap `|A ∩ B| / |A ∪ B|` of two masks; two empty masks
/// overlap fully.
pub fn mask_overlap(a: &SelectionMask, b: &SelectionMask) -> Result<f64> {
    a.registry.ensure_congruent(&b.registry)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        for (&p, &q) in x.iter().zip(y) {
            inter += (p & q) as usize;
            union += (p | q) as usize;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Everything the selector decided, in one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub selected: usize,
    pub total: usize,
    pub trainable_fraction: f64,
    pub top_m_percent: f64,
    pub c_min: usize,
    pub top_m_size: usize,
    pub w: Vec<f64>,
    pub c: Vec<usize>,
    pub selected_per_layer: Vec<usize>,
}

/// Result of the whole selection chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub top_set: Vec<FlatIndex>,
    pub importance: LayerImportance,
    pub budget: ConnectionBudget,
    pub mask: SelectionMask,
}

impl Selection {
    pub fn summary(&self, config: &SelectorConfig) -> SelectionSummary {
        SelectionSummary {
            selected: self.mask.selected(),
            total: self.mask.total(),
            trainable_fraction: self.mask.fraction(),
            top_m_percent: config.top_m_percent,
            c_min: config.c_min,
            top_m_size: self.importance.top_m_size,
            w: self.importance.w.clone(),
            c: self.budget.c.clone(),
            selected_per_layer: self.mask.selected_per_layer(),
        }
    }
}

/// Runs the four selection steps in order.
pub fn select(scores: &FisherScores, config: &SelectorConfig) -> Result<Selection> {
    let top_set = top_m_set(scores, config)?;
    let importance = layer_weights(&top_set, scores.registry());
    let budget = connection_budget(&importance, config, scores.registry())?;
    let mask = select_per_neuron(scores, &budget, config)?;
    Ok(Selection {
        top_set,
        importance,
        budget,
        mask,
    })
}

/// Ordering used by [`top_m_set`], exposed for oracles: larger score first,
/// then name, then offset.
pub fn rank_order(
    registry: &Registry,
    scores: &FisherScores,
    a: FlatIndex,
    b: FlatIndex,
) -> Ordering {
    scores.values(b.slot)[b.offset]
        .total_cmp(&scores.values(a.slot)[a.offset])
        .then_with(|| registry.get(a.slot).name.cmp(&registry.get(b.slot).name))
        .then(a.offset.cmp(&b.offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamInfo;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn registry(shapes: &[(&str, Option<usize>, Vec<usize>)]) -> Registry {
        Registry::new(
            shapes
                .iter()
                .map(|(n, l, s)| ParamInfo {
                    name: n.to_string(),
                    layer: *l,
                    shape: s.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn scope_all() -> SelectorConfig {
        SelectorConfig {
            scope: vec!["*".into()],
            always_trainable: vec![],
            ..SelectorConfig::default()
        }
    }

    fn scores(reg: &Registry, values: Vec<Vec<f64>>) -> FisherScores {
        FisherScores::new(reg.clone(), values, 1, 1).unwrap()
    }

    #[test]
    fn top_m_full_and_ties() {
        let reg = registry(&[("b", Some(0), vec![1, 4]), ("a", Some(1), vec![1, 6])]);
        let s = scores(&reg, vec![vec![1.0; 4], vec![1.0; 6]]);
        let mut cfg = scope_all();
        cfg.top_m_percent = 100.0;
        assert_eq!(top_m_set(&s, &cfg).unwrap().len(), 10);
        cfg.top_m_percent = 50.0;
        let top = top_m_set(&s, &cfg).unwrap();
        // "a" sorts before "b", so its five lowest offsets win
        assert_eq!(
            top,
            (0..5)
                .map(|o| FlatIndex { slot: 1, offset: o })
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_scope_is_config_error() {
        let reg = registry(&[("x", Some(0), vec![2, 2])]);
        let s = scores(&reg, vec![vec![0.0; 4]]);
        let cfg = SelectorConfig {
            scope: vec!["nothing".into()],
            ..SelectorConfig::default()
        };
        assert!(matches!(top_m_set(&s, &cfg), Err(Error::Config(_))));
        let bias = registry(&[("x", Some(0), vec![2])]);
        let s = scores(&bias, vec![vec![0.0; 2]]);
        assert!(matches!(top_m_set(&s, &scope_all()), Err(Error::Config(_))));
    }

    #[test]
    fn layer_weight_definition() {
        let reg = registry(&[
            ("l0", Some(0), vec![2, 2]),
            ("l1", Some(1), vec![2, 2]),
            ("l2", Some(2), vec![2, 2]),
        ]);
        let mut top: Vec<FlatIndex> = (0..4).map(|o| FlatIndex { slot: 0, offset: o }).collect();
        top.extend((0..4).map(|o| FlatIndex { slot: 1, offset: o }));
        top.extend((0..2).map(|o| FlatIndex { slot: 2, offset: o }));
        let w = layer_weights(&top, &reg);
        assert_eq!(w.w, vec![0.4, 0.4, 0.2]);
        let w = layer_weights(&top[..4], &reg);
        assert_eq!(w.w, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn budget_examples() {
        assert_eq!(
            budget_from_weights(&[0.5, 0.25, 0.25], 1).unwrap(),
            vec![2, 1, 1]
        );
        assert_eq!(
            budget_from_weights(&[0.6, 0.4, 0.0], 2).unwrap(),
            vec![3, 2, 1]
        );
        assert_eq!(budget_from_weights(&[0.25; 4], 7).unwrap(), vec![7; 4]);
        assert!(matches!(
            budget_from_weights(&[0.0, 0.0], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn budget_capped_at_fan_in() {
        let reg = registry(&[("l0", Some(0), vec![3, 2]), ("l1", Some(1), vec![3, 4])]);
        let imp = LayerImportance {
            w: vec![0.9, 0.1],
            counts: vec![9, 1],
            non_block: 0,
            top_m_size: 10,
        };
        let b = connection_budget(&imp, &scope_all(), &reg).unwrap();
        assert_eq!(b.c, vec![2, 1]);
    }

    #[test]
    fn per_neuron_rows() {
        let reg = registry(&[("m", Some(0), vec![2, 3]), ("head.bias", None, vec![2])]);
        let s = scores(&reg, vec![vec![0.9, 0.1, 0.9, 0.0, 0.5, 0.2], vec![0.0; 2]]);
        let cfg = SelectorConfig {
            scope: vec!["m".into()],
            always_trainable: vec!["head.*".into()],
            ..SelectorConfig::default()
        };
        let m = select_per_neuron(&s, &ConnectionBudget { c: vec![2] }, &cfg).unwrap();
        assert_eq!(m.bits(0), &[1, 0, 1, 0, 1, 1]);
        assert_eq!(m.bits(1), &[1, 1]);
        let full = select_per_neuron(&s, &ConnectionBudget { c: vec![3] }, &cfg).unwrap();
        assert_eq!(full.bits(0), &[1; 6]);
        assert_eq!(
            m.selected(),
            expected_selected(&reg, &ConnectionBudget { c: vec![2] }, &cfg).unwrap()
        );
    }

    #[test]
    fn overlap_cases() {
        let reg = registry(&[("m", Some(0), vec![1, 6])]);
        let a = SelectionMask::from_bits(&reg, vec![vec![1, 1, 0, 0, 0, 0]]).unwrap();
        let b = SelectionMask::from_bits(&reg, vec![vec![0, 0, 1, 1, 0, 0]]).unwrap();
        let c = SelectionMask::from_bits(&reg, vec![vec![0, 1, 1, 0, 0, 0]]).unwrap();
        assert_eq!(mask_overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_overlap(&a, &b).unwrap(), 0.0);
        assert_eq!(mask_overlap(&a, &c).unwrap(), 1.0 / 3.0);
        let other = registry(&[("n", Some(0), vec![1, 6])]);
        let d = SelectionMask::filled(&other, true);
        assert!(matches!(mask_overlap(&a, &d), Err(Error::Input(_))));
    }

    #[test]
    fn restrict_keeps_matching_params() {
        let reg = registry(&[("a.w", Some(0), vec![1, 2]), ("head.w", None, vec![2, 2])]);
        let m = SelectionMask::from_bits(&reg, vec![vec![1, 0], vec![1, 1, 1, 1]]).unwrap();
        let r = m.restrict(&["a.*".to_string()]).unwrap();
        assert_eq!(r.registry().len(), 1);
        assert_eq!(r.bits(0), &[1, 0]);
        assert_eq!(r.selected(), 1);
    }

    #[test]
    fn mask_pack_round_trip() {
        let reg = registry(&[("m", Some(0), vec![2, 2]), ("v", None, vec![3])]);
        let m = SelectionMask::from_bits(&reg, vec![vec![1, 0, 0, 1], vec![0, 1, 0]]).unwrap();
        let p = TensorPack::from_bytes(&m.to_pack().to_bytes()).unwrap();
        assert_eq!(SelectionMask::from_pack(&p, &reg).unwrap(), m);
    }

    fn random_scores(seed: u64, reg: &Registry, ties: bool) -> FisherScores {
        let mut r = rng::stream(seed, "scores");
        let values = reg
            .iter()
            .map(|p| {
                (0..p.numel())
                    .map(|_| {
                        if ties {
                            r.random_range(0..4) as f64
                        } else {
                            r.random_range(0.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        scores(reg, values)
    }

    #[test]
    fn top_m_matches_full_sort() {
        let reg = registry(&[
            ("z", Some(0), vec![20, 10]),
            ("y", Some(1), vec![10, 30]),
            ("x", Some(2), vec![25, 20]),
        ]);
        for (seed, ties) in [(1, false), (2, true)] {
            let s = random_scores(seed, &reg, ties);
            let mut all: Vec<FlatIndex> = reg
                .iter()
                .enumerate()
                .flat_map(|(slot, p)| (0..p.numel()).map(move |offset| FlatIndex { slot, offset }))
                .collect();
            all.sort_by(|&a, &b| rank_order(&reg, &s, a, b));
            let mut cfg = scope_all();
            cfg.top_m_percent = 1.0;
            assert_eq!(top_m_set(&s, &cfg).unwrap(), all[..10].to_vec());
        }
    }

    proptest! {
        #[test]
        fn budget_law(w in proptest::collection::vec(0.0f64..1.0, 1..12), c_min in 1usize..5) {
            prop_assume!(w.iter().any(|&x| x > 0.0));
            let c = budget_from_weights(&w, c_min).unwrap();
            prop_assert!(c.iter().all(|&x| x >= 1));
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if w[i] >= w[j] {
                        prop_assert!(c[i] >= c[j]);
                    }
                }
            }
        }

        #[test]
        fn selection_is_scale_invariant(seed in 0u64..1000, e in -6i32..7) {
            let reg = registry(&[("a", Some(0), vec![6, 5]), ("b", Some(1), vec![4, 8])]);
            let s = random_scores(seed, &reg, seed % 2 == 0);
            let cfg = SelectorConfig { top_m_percent: 10.0, c_min: 2, ..scope_all() };
            let base = select(&s, &cfg).unwrap();
            let scaled = select(&s.scaled(10f64.powi(e)).unwrap(), &cfg).unwrap();
            prop_assert_eq!(base, scaled);
        }

        #[test]
        fn selected_count_identity(seed in 0u64..1000, c_min in 1usize..4) {
            let reg = registry(&[("a", Some(0), vec![6, 5]), ("b", Some(1), vec![4, 8]), ("head.bias", None, vec![3])]);
            let s = random_scores(seed, &reg, false);
            let cfg = SelectorConfig { top_m_percent: 20.0, c_min, scope: vec!["a".into(), "b".into()], always_trainable: vec!["head.*".into()] };
            let sel = select(&s, &cfg).unwrap();
            prop_assert_eq!(sel.mask.selected(), expected_selected(&reg, &sel.budget, &cfg).unwrap());
            for slot in 0..2 {
                let cols = reg.get(slot).shape[1];
                let c = sel.budget.c[slot].min(cols);
                for row in sel.mask.bits(slot).chunks(cols) {
                    prop_assert_eq!(row.iter().map(|&x| x as usize).sum::<usize>(), c);
                }
            }
        }

        #[test]
        fn overlap_symmetric(a in proptest::collection::vec(0u8..2, 12), b in proptest::collection::vec(0u8..2, 12)) {
            let reg = registry(&[("m", Some(0), vec![3, 4])]);
            let ma = SelectionMask::from_bits(&reg, vec![a]).unwrap();
            let mb = SelectionMask::from_bits(&reg, vec![b]).unwrap();
            let x = mask_overlap(&ma, &mb).unwrap();
            prop_assert_eq!(x, mask_overlap(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
