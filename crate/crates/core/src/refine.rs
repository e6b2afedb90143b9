//! Task-relevant token selection and merging.
//!
//! At a refining layer every non-[CLS] token is scored by the attention the
//! [CLS] query pays to it (averaged over heads). The `⌊ρN⌋` best tokens are
//! kept in their original order; the rest collapse into one token, the
//! attention-weighted mean of the discarded rows, appended last:
//!
//! ```text
//! [CLS, x1, x2, ..., xN]  ->  [CLS, kept..., merged]
//! ```

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::selector::LayerImportance;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Below this total attention mass the merge falls back to a plain mean.
pub const MERGE_EPS: f64 = 1e-12;

/// How refining layers were chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    /// Layers with the fewest task-relevant parameters.
    Sparse,
    /// Layers with the most task-relevant parameters.
    Dense,
    Random,
    Explicit,
}

impl std::str::FromStr for PlacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Self::Sparse),
            "dense" => Ok(Self::Dense),
            "random" => Ok(Self::Random),
            "explicit" => Ok(Self::Explicit),
            other => Err(Error::Config(format!("unknown placement mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Sparse => "sparse",
            Self::Dense => "dense",
            Self::Random => "random",
            Self::Explicit => "explicit",
        };
        f.write_str(s)
    }
}

/// Which transformer layers refine their output, and at what select rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinePlan {
    pub layers: Vec<usize>,
    pub rho: f64,
    pub mode: PlacementMode,
}

impl RefinePlan {
    pub fn new(layers: Vec<usize>, rho: f64, mode: PlacementMode) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("select rate {rho} outside (0, 1]")));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "refining layers must be strictly increasing: {layers:?}"
            )));
        }
        Ok(Self { layers, rho, mode })
    }

    pub fn explicit(layers: Vec<usize>, rho: f64) -> Result<Self> {
        Self::new(layers, rho, PlacementMode::Explicit)
    }

    /// Checks layer indices against a model depth.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        Self::new(self.layers.clone(), self.rho, self.mode)?;
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::Config(format!(
                "refining layer {bad} outside [0, {num_layers})"
            )));
        }
        Ok(())
    }

    pub fn refines_at(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }
}

/// [CLS]-to-token attention mass for the current non-[CLS] tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScores(pub Vec<f64>);

impl TokenScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Head-averaged [CLS] query row of one image's attention `[heads, T, T]`,
/// restricted to the non-[CLS] keys.
pub fn cls_attention_scores<F: Element>(attention: &Tensor<F>) -> Result<TokenScores> {
    let shape = attention.shape();
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] == 0 {
        return Err(Error::Shape {
            op: "cls_attention_scores",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (heads, t) = (shape[0], shape[1]);
    let data = attention.data();
    let rows: Vec<&[F]> = (0..heads)
        .map(|h| &data[h * t * t..h * t * t + t])
        .collect();
    Ok(TokenScores(head_mean(&rows)))
}

/// Elementwise mean of per-head [CLS] rows, dropping the [CLS] column.
pub(crate) fn head_mean<F: Element>(rows: &[&[F]]) -> Vec<f64> {
    let t = rows[0].len();
    let inv = 1.0 / rows.len() as f64;
    (1..t)
        .map(|i| rows.iter().map(|r| r[i].as_f64()).sum::<f64>() * inv)
        .collect()
}

/// `⌊ρN⌋`, robust to representation error in `ρ`.
pub fn kept_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64) + 1e-9).floor() as usize
}

/// Indices of the `⌊ρN⌋` highest scores, in ascending (sequence) order.
/// Ties go to the lower index.
pub fn select_tokens(scores: &TokenScores, rho: f64) -> Result<Vec<usize>> {
    let n = scores.len();
    let keep = kept_count(rho, n);
    if keep < 1 {
        return Err(Error::Config(format!(
            "select rate {rho} keeps no tokens out of {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Complement of a sorted kept list within `0..n`.
pub fn discarded(kept: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - kept.len());
    let mut k = kept.iter().peekable();
    for i in 0..n {
        if k.peek() == Some(&&i) {
            k.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Normalized merge weights over `discarded`, falling back to uniform
/// weights when the attention mass is negligible.
pub fn merge_weights(scores: &TokenScores, discarded: &[usize]) -> Vec<f64> {
    let total: f64 = discarded.iter().map(|&i| scores.0[i]).sum();
    if total < MERGE_EPS {
        vec![1.0 / discarded.len() as f64; discarded.len()]
    } else {
        discarded.iter().map(|&i| scores.0[i] / total).collect()
    }
}

/// Attention-weighted mean of the discarded rows of `hidden[N, d]`.
pub fn merge_tokens<F: Element>(
    scores: &TokenScores,
    hidden: &Tensor<F>,
    discarded: &[usize],
) -> Result<Tensor<F>> {
    if discarded.is_empty() {
        return Err(Error::Input("nothing to merge".into()));
    }
    let shape = hidden.shape();
    if shape.len() != 2 || shape[0] != scores.len() || discarded.iter().any(|&i| i >= shape[0]) {
        return Err(Error::Shape {
            op: "merge_tokens",
            lhs: shape.to_vec(),
            rhs: vec![scores.len()],
        });
    }
    let d = shape[1];
    let weights = merge_weights(scores, discarded);
    let mut out = vec![F::zero(); d];
    for (&i, &w) in discarded.iter().zip(&weights) {
        let w = F::of(w);
        for (o, &x) in out.iter_mut().zip(&hidden.data()[i * d..(i + 1) * d]) {
            *o += w * x;
        }
    }
    Tensor::new(vec![1, d], out)
}

/// Refines one sequence `hidden[1 + N, d]` whose row 0 is [CLS].
///
/// Returns the input unchanged when every token is kept.
pub fn refine<F: Element>(hidden: &Tensor<F>, scores: &TokenScores, rho: f64) -> Result<Tensor<F>> {
    let shape = hidden.shape();
    if shape.len() != 2 || shape[0] != scores.len() + 1 {
        return Err(Error::Shape {
            op: "refine",
            lhs: shape.to_vec(),
            rhs: vec![scores.len() + 1],
        });
    }
    let (n, d) = (scores.len(), shape[1]);
    let kept = select_tokens(scores, rho)?;
    if kept.len() == n {
        return Ok(hidden.clone());
    }
    let dropped = discarded(&kept, n);
    let tokens = Tensor::new(vec![n, d], hidden.data()[d..].to_vec())?;
    let merged = merge_tokens(scores, &tokens, &dropped)?;
    let mut out = Vec::with_capacity((kept.len() + 2) * d);
    out.extend_from_slice(&hidden.data()[..d]);
    for &i in &kept {
        out.extend_from_slice(&tokens.data()[i * d..(i + 1) * d]);
    }
    out.extend_from_slice(merged.data());
    Tensor::new(vec![kept.len() + 2, d], out)
}

/// Result of refining a batched sequence inside a graph.
#[derive(Clone, Debug)]
pub struct GraphRefinement {
    pub hidden: Var,
    /// Per image, kept non-[CLS] token positions (0-based, excluding [CLS]).
    pub kept: Vec<Vec<usize>>,
    /// Per image, merged non-[CLS] token positions; empty when nothing merged.
    pub merged: Vec<Vec<usize>>,
}

/// Batched refinement of `hidden[B, 1 + N, d]` recorded on `graph`.
///
/// Token choice is piecewise constant, so merge weights enter the graph as
/// constants; gradients flow through the kept and merged rows.
pub fn refine_in_graph<F: Element>(
    graph: &mut Graph<F>,
    hidden: Var,
    scores: &[TokenScores],
    rho: f64,
) -> Result<GraphRefinement> {
    let shape = graph.shape(hidden).to_vec();
    if shape.len() != 3
        || shape[0] != scores.len()
        || scores.iter().any(|s| s.len() + 1 != shape[1])
    {
        return Err(Error::Shape {
            op: "refine",
            lhs: shape,
            rhs: vec![scores.len()],
        });
    }
    let n = shape[1] - 1;
    let mut kept = Vec::with_capacity(scores.len());
    for s in scores {
        kept.push(select_tokens(s, rho)?);
    }
    if kept.iter().all(|k| k.len() == n) {
        return Ok(GraphRefinement {
            hidden,
            kept,
            merged: vec![Vec::new(); scores.len()],
        });
    }
    let mut index = Vec::with_capacity(scores.len());
    let mut weights = Vec::with_capacity(scores.len());
    let mut merged = Vec::with_capacity(scores.len());
    for (s, k) in scores.iter().zip(&kept) {
        let dropped = discarded(k, n);
        let mut row_w = vec![F::zero(); n + 1];
        for (&i, w) in dropped.iter().zip(merge_weights(s, &dropped)) {
            row_w[i + 1] = F::of(w);
        }
        let mut ix = Vec::with_capacity(k.len() + 1);
        ix.push(0);
        ix.extend(k.iter().map(|&i| i + 1));
        index.push(ix);
        weights.push(row_w);
        merged.push(dropped);
    }
    let selected = graph.gather_rows(hidden, index)?;
    let fused = graph.weighted_row_sum(hidden, weights)?;
    let hidden = graph.concat(&[selected, fused], 1)?;
    Ok(GraphRefinement {
        hidden,
        kept,
        merged,
    })
}

/// Chooses the layers that refine tokens from per-layer importance `w`.
///
/// Layer 0 is never eligible. `Sparse` takes the smallest `w_l` (ties to the
/// deeper layer), `Dense` the largest (ties to the deeper layer), `Random`
/// a seeded draw without replacement; `Explicit` validates `explicit_layers`.
pub fn plan_refining_layers(
    importance: &LayerImportance,
    num_refine_layers: usize,
    mode: PlacementMode,
    rho: f64,
    seed: u64,
    explicit_layers: &[usize],
) -> Result<RefinePlan> {
    let num_layers = importance.w.len();
    if num_refine_layers >= num_layers {
        return Err(Error::Config(format!(
            "{num_refine_layers} refining layers requested for a {num_layers}-layer model"
        )));
    }
    let candidates: Vec<usize> = (1..num_layers).collect();
    let w = &importance.w;
    let mut layers = match mode {
        PlacementMode::Sparse => {
            let mut c = candidates;
            c.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)));
            c.truncate(num_refine_layers);
            c
        }
        PlacementMode::Dense => {
            let mut c = candidates;
            c.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(b.cmp(&a)));
            c.truncate(num_refine_layers);
            c
        }
        PlacementMode::Random => {
            let mut r = rng::stream(seed, "placement");
            candidates
                .choose_multiple(&mut r, num_refine_layers)
                .copied()
                .collect()
        }
        PlacementMode::Explicit => {
            if explicit_layers.contains(&0) {
                return Err(Error::Config("layer 0 cannot refine tokens".into()));
            }
            explicit_layers.to_vec()
        }
    };
    layers.sort_unstable();
    let plan = RefinePlan::new(layers, rho, mode)?;
    plan.validate(num_layers)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> TokenScores {
        TokenScores(v.to_vec())
    }

    fn importance(w: &[f64]) -> LayerImportance {
        LayerImportance {
            w: w.to_vec(),
            counts: vec![0; w.len()],
            non_block: 0,
            top_m_size: 0,
        }
    }

    #[test]
    fn scores_from_uniform_keys_are_uniform() {
        // two heads, T = 4, every row uniform
        let att = Tensor::<f64>::full(vec![2, 4, 4], 0.25);
        let s = cls_attention_scores(&att).unwrap();
        assert_eq!(s.0, vec![0.25; 3]);
    }

    #[test]
    fn scores_single_token() {
        let att = Tensor::<f64>::from_f64(vec![1, 2, 2], &[0.7, 0.3, 0.5, 0.5]).unwrap();
        let s = cls_attention_scores(&att).unwrap();
        assert_eq!(s.0.len(), 1);
        assert!((s.0[0] - (1.0 - 0.7)).abs() < 1e-15);
    }

    #[test]
    fn scores_average_heads() {
        let att = Tensor::<f64>::from_f64(
            vec![2, 3, 3],
            &[
                0.2, 0.3, 0.5, 0., 0., 0., 0., 0., 0., 0.4, 0.5, 0.1, 0., 0., 0., 0., 0., 0.,
            ],
        )
        .unwrap();
        let s = cls_attention_scores(&att).unwrap();
        assert!((s.0[0] - 0.4).abs() < 1e-15 && (s.0[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn select_counts() {
        let s = scores(&[0.1, 0.5, 0.2, 0.05, 0.3, 0.9, 0.0, 0.4, 0.6, 0.7]);
        assert_eq!(select_tokens(&s, 0.8).unwrap().len(), 8);
        assert_eq!(select_tokens(&s, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert!(matches!(select_tokens(&s, 0.05), Err(Error::Config(_))));
    }

    #[test]
    fn select_ties_prefer_lower_index() {
        let s = scores(&[0.2, 0.2, 0.2, 0.4]);
        assert_eq!(select_tokens(&s, 0.5).unwrap(), vec![0, 3]);
    }

    #[test]
    fn merge_examples() {
        let h = Tensor::<f64>::from_f64(vec![3, 2], &[1., 1., 5., 5., 9., 9.]).unwrap();
        let s = scores(&[0.3, 0.1, 0.6]);
        let m = merge_tokens(&s, &h, &[0, 1]).unwrap();
        for v in m.data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
        let m = merge_tokens(&s, &h, &[2]).unwrap();
        assert_eq!(m.data(), &[9., 9.]);
        // negligible mass falls back to the plain mean
        let z = scores(&[0.0, 0.0, 1.0]);
        let m = merge_tokens(&z, &h, &[0, 1]).unwrap();
        assert_eq!(m.data(), &[3., 3.]);
        assert!(merge_tokens(&s, &h, &[]).is_err());
    }

    #[test]
    fn refine_shapes() {
        let n = 16;
        let h = Tensor::<f64>::from_f64(
            vec![n + 1, 3],
            &(0..(n + 1) * 3).map(|v| v as f64).collect::<Vec<_>>(),
        )
        .unwrap();
        let s = TokenScores((0..n).map(|i| ((i * 5) % 7) as f64 / 100.0).collect());
        let r = refine(&h, &s, 0.8).unwrap();
        assert_eq!(r.shape(), &[14, 3]);
        assert_eq!(&r.data()[..3], &h.data()[..3]);
        let same = refine(&h, &s, 1.0).unwrap();
        assert_eq!(same, h);
        assert_eq!(refine(&same, &s, 1.0).unwrap(), h);
    }

    #[test]
    fn placement_examples() {
        let imp = importance(&[0.1, 0.5, 0.05, 0.35]);
        let p = plan_refining_layers(&imp, 1, PlacementMode::Sparse, 0.8, 0, &[]).unwrap();
        assert_eq!(p.layers, vec![2]);
        let p = plan_refining_layers(&imp, 1, PlacementMode::Dense, 0.8, 0, &[]).unwrap();
        assert_eq!(p.layers, vec![1]);
        let a = plan_refining_layers(&imp, 2, PlacementMode::Random, 0.8, 9, &[]).unwrap();
        let b = plan_refining_layers(&imp, 2, PlacementMode::Random, 0.8, 9, &[]).unwrap();
        assert_eq!(a, b);
        assert!(!a.layers.contains(&0));
        assert!(plan_refining_layers(&imp, 4, PlacementMode::Sparse, 0.8, 0, &[]).is_err());
        let e = plan_refining_layers(&imp, 0, PlacementMode::Explicit, 0.8, 0, &[1, 3]).unwrap();
        assert_eq!(e.layers, vec![1, 3]);
        assert!(plan_refining_layers(&imp, 0, PlacementMode::Explicit, 0.8, 0, &[0]).is_err());
        assert!(plan_refining_layers(&imp, 0, PlacementMode::Explicit, 0.8, 0, &[5]).is_err());
    }

    #[test]
    fn sparse_ties_go_deeper() {
        let imp = importance(&[0.0, 0.2, 0.2, 0.6]);
        let p = plan_refining_layers(&imp, 1, PlacementMode::Sparse, 0.8, 0, &[]).unwrap();
        assert_eq!(p.layers, vec![2]);
    }

    #[test]
    fn plan_validation() {
        assert!(RefinePlan::explicit(vec![2, 1], 0.8).is_err());
        assert!(RefinePlan::explicit(vec![1], 0.0).is_err());
        assert!(RefinePlan::explicit(vec![1], 1.5).is_err());
        assert!(RefinePlan::explicit(vec![3], 0.5)
            .unwrap()
            .validate(3)
            .is_err());
    }

    proptest! {
        #[test]
        fn select_matches_full_sort(v in proptest::collection::vec(0.0f64..1.0, 1..40), rho in 0.05f64..=1.0) {
            let s = TokenScores(v.clone());
            let keep = kept_count(rho, v.len());
            prop_assume!(keep >= 1);
            let kept = select_tokens(&s, rho).unwrap();
            // oracle: rank by (score desc, index asc), take the prefix, sort
            let mut pairs: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expect: Vec<usize> = pairs[..keep].iter().map(|p| p.1).collect();
            expect.sort();
            prop_assert_eq!(kept, expect);
        }

        #[test]
        fn refine_preserves_relative_order_and_merged_is_convex(
            n in 2usize..24,
            seed in 0u64..1000,
            rho in 0.3f64..0.99,
        ) {
            use rand::Rng;
            let mut r = rng::stream(seed, "t");
            let d = 3;
            let h: Vec<f64> = (0..(n + 1) * d).map(|_| r.random_range(-5.0..5.0)).collect();
            let s = TokenScores((0..n).map(|_| r.random_range(0.0..1.0)).collect());
            let hidden = Tensor::<f64>::from_f64(vec![n + 1, d], &h).unwrap();
            prop_assume!(kept_count(rho, n) >= 1);
            let out = refine(&hidden, &s, rho).unwrap();
            let kept = select_tokens(&s, rho).unwrap();
            for (slot, &i) in kept.iter().enumerate() {
                prop_assert_eq!(&out.data()[(slot + 1) * d..(slot + 2) * d], &h[(i + 1) * d..(i + 2) * d]);
            }
            if kept.len() < n {
                let dropped = discarded(&kept, n);
                let m = &out.data()[(kept.len() + 1) * d..];
                for j in 0..d {
                    let col = dropped.iter().map(|&i| h[(i + 1) * d + j]);
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(m[j] >= lo - 1e-6 && m[j] <= hi + 1e-6);
                }
            }
        }
    }
}
