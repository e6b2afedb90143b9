//! Diagonal Fisher information from squared cross-entropy gradients.
//!
//! The averaging unit is the batch: each batch contributes the square of its
//! mean-loss gradient, weighted by its example count. With equal batch sizes
//! this is the plain mean over batches, and in general it makes
//! [`merge_scores`] exact with respect to re-estimating over the union.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pack::{PackData, TensorPack};
use crate::params::Registry;
use crate::rng;
use crate::tensor::{Element, GradSink, Graph};
use crate::vit::{ForwardOptions, ViTModel};

/// Nonnegative per-entry scores congruent with a parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherScores {
    registry: Registry,
    values: Vec<Vec<f64>>,
    sample_count: usize,
    batch_count: usize,
}

impl FisherScores {
    pub fn new(
        registry: Registry,
        values: Vec<Vec<f64>>,
        sample_count: usize,
        batch_count: usize,
    ) -> Result<Self> {
        if values.len() != registry.len() {
            return Err(Error::Input(format!(
                "{} score tensors for {} parameters",
                values.len(),
                registry.len()
            )));
        }
        for (info, v) in registry.iter().zip(&values) {
            if v.len() != info.numel() {
                return Err(Error::Shape {
                    op: "fisher scores",
                    lhs: info.shape.clone(),
                    rhs: vec![v.len()],
                });
            }
            if let Some(x) = v.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
                return Err(Error::Numeric(format!("score {x} in {}", info.name)));
            }
        }
        Ok(Self {
            registry,
            values,
            sample_count,
            batch_count,
        })
    }

    /// All-zero scores with no samples; the identity of [`merge_scores`].
    pub fn empty(registry: Registry) -> Self {
        let values = registry.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            registry,
            values,
            sample_count: 0,
            batch_count: 0,
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn values(&self, slot: usize) -> &[f64] {
        &self.values[slot]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.registry.slot(name).map(|s| self.values[s].as_slice())
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn batch_count(&self) -> usize {
        self.batch_count
    }

    /// Every score multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|v| v.iter().map(|x| x * c).collect())
            .collect();
        Self::new(
            self.registry.clone(),
            values,
            self.sample_count,
            self.batch_count,
        )
    }

    pub fn to_pack(&self) -> TensorPack {
        let mut p = TensorPack::new();
        for (info, v) in self.registry.iter().zip(&self.values) {
            p.insert(&info.name, info.shape.clone(), PackData::F64(v.clone()))
                .expect("unique parameter names");
        }
        p.insert_scalar_i64("sample_count", self.sample_count as i64)
            .expect("reserved name");
        p.insert_scalar_i64("batch_count", self.batch_count as i64)
            .expect("reserved name");
        p
    }

    pub fn from_pack(pack: &TensorPack, registry: &Registry) -> Result<Self> {
        let mut values = Vec::with_capacity(registry.len());
        for info in registry.iter() {
            let e = pack
                .get(&info.name)
                .ok_or_else(|| Error::Input(format!("scores lack parameter {}", info.name)))?;
            if e.dims != info.shape {
                return Err(Error::Shape {
                    op: "fisher scores",
                    lhs: info.shape.clone(),
                    rhs: e.dims.clone(),
                });
            }
            values.push(pack.f64_values(&info.name)?);
        }
        let count = |n: &str| -> Result<usize> {
            usize::try_from(pack.scalar_i64(n)?).map_err(|_| Error::Format(format!("negative {n}")))
        };
        Self::new(
            registry.clone(),
            values,
            count("sample_count")?,
            count("batch_count")?,
        )
    }
}

/// Sample-count weighted mean of two score sets over the same registry.
pub fn merge_scores(a: &FisherScores, b: &FisherScores) -> Result<FisherScores> {
    a.registry.ensure_congruent(&b.registry)?;
    let n = a.sample_count + b.sample_count;
    if a.sample_count == 0 {
        return Ok(FisherScores {
            batch_count: a.batch_count + b.batch_count,
            ..b.clone()
        });
    }
    if b.sample_count == 0 {
        return Ok(FisherScores {
            batch_count: a.batch_count + b.batch_count,
            ..a.clone()
        });
    }
    let (wa, wb) = (
        a.sample_count as f64 / n as f64,
        b.sample_count as f64 / n as f64,
    );
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| wa * p + wb * q).collect())
        .collect();
    Ok(FisherScores {
        registry: a.registry.clone(),
        values,
        sample_count: n,
        batch_count: a.batch_count + b.batch_count,
    })
}

/// Anything that yields per-parameter gradients of a batch-mean loss.
pub trait GradientModel {
    fn registry(&self) -> Registry;

    /// Gradient of `loss_scale` times the mean loss over the examples at
    /// `batch`, one flat vector per registry slot.
    fn batch_gradient(&self, batch: &[usize], loss_scale: f64) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FimOptions {
    pub batch_size: usize,
    /// `None` means one full pass over the data.
    pub num_batches: Option<usize>,
    /// Allows more than one pass when `num_batches * batch_size` exceeds the
    /// dataset; each extra pass draws a fresh permutation.
    pub with_replacement: bool,
    /// Multiplier applied to the loss before differentiation.
    pub loss_scale: f64,
    pub seed: u64,
}

impl Default for FimOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            num_batches: None,
            with_replacement: false,
            loss_scale: 1.0,
            seed: 0,
        }
    }
}

/// Partition of `0..n` into scoring batches, seeded by `opts.seed`.
pub fn scoring_batches(n: usize, opts: &FimOptions) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Input("cannot score on an empty dataset".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let full = n.div_ceil(opts.batch_size);
    let want = opts.num_batches.unwrap_or(full);
    if want == 0 {
        return Err(Error::Config("num_batches must be positive".into()));
    }
    if want > full && !opts.with_replacement {
        return Err(Error::Config(format!(
            "{want} batches of {} exceed {n} examples; enable with_replacement",
            opts.batch_size
        )));
    }
    let mut r = rng::stream(opts.seed, "fim-batches");
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        for chunk in perm.chunks(opts.batch_size) {
            if out.len() == want {
                break;
            }
            out.push(chunk.to_vec());
        }
    }
    Ok(out)
}

/// Scores `model` over `num_examples` examples addressed by index.
pub fn estimate_fim_with<M: GradientModel>(
    model: &M,
    num_examples: usize,
    opts: &FimOptions,
) -> Result<FisherScores> {
    let batches = scoring_batches(num_examples, opts)?;
    let registry = model.registry();
    let mut acc: Vec<Vec<f64>> = registry.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut samples = 0usize;
    for batch in &batches {
        let grads = model.batch_gradient(batch, opts.loss_scale)?;
        let nb = batch.len() as f64;
        for ((a, g), info) in acc.iter_mut().zip(&grads).zip(registry.iter()) {
            if g.len() != a.len() {
                return Err(Error::Shape {
                    op: "batch gradient",
                    lhs: info.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
            for (s, &x) in a.iter_mut().zip(g) {
                if !x.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter {}",
                        info.name
                    )));
                }
                *s += nb * x * x;
            }
        }
        samples += batch.len();
    }
    let inv = 1.0 / samples as f64;
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x *= inv);
    }
    FisherScores::new(registry, acc, samples, batches.len())
}

/// Scores a ViT on a labelled dataset with no refinement plan active.
pub fn estimate_fim<F: Element>(
    model: &ViTModel<F>,
    data: &Dataset,
    opts: &FimOptions,
) -> Result<FisherScores> {
    if data.is_empty() {
        return Err(Error::Input("cannot score on an empty dataset".into()));
    }
    let mut scored = model.clone();
    scored.params_mut().set_requires_grad(true);
    let adapter = VitGradient {
        model: &scored,
        data,
    };
    estimate_fim_with(&adapter, data.len(), opts)
}

struct VitGradient<'a, F> {
    model: &'a ViTModel<F>,
    data: &'a Dataset,
}

struct FlatGrads<F>(Vec<Vec<F>>);

impl<F: Element> GradSink<F> for FlatGrads<F> {
    fn accumulate(&mut self, slot: usize, grad: &[F]) {
        for (a, &g) in self.0[slot].iter_mut().zip(grad) {
            *a += g;
        }
    }
}

impl<F: Element> GradientModel for VitGradient<'_, F> {
    fn registry(&self) -> Registry {
        self.model.params().registry()
    }

    fn batch_gradient(&self, batch: &[usize], loss_scale: f64) -> Result<Vec<Vec<f64>>> {
        let (images, labels) = self.data.batch::<F>(batch);
        let mut g = Graph::new();
        let trace = self
            .model
            .forward(&mut g, &images, None, ForwardOptions::default())?;
        let loss = g.cross_entropy(trace.logits, &labels)?;
        let loss = g.scale(loss, F::of(loss_scale));
        let mut sink = FlatGrads(
            self.model
                .params()
                .iter()
                .map(|p| vec![F::zero(); p.tensor.numel()])
                .collect(),
        );
        g.backward(loss, &mut sink)?;
        Ok(sink
            .0
            .into_iter()
            .map(|v| v.into_iter().map(|x| x.as_f64()).collect())
            .collect())
    }
}
