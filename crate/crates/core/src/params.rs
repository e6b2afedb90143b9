//! Named parameter storage and the registry that identifies every parameter
//! by `(layer_index, name)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, GradSink, Tensor};

/// Identity and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    /// Transformer block index, `None` for non-block parameters.
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    /// Layer index with `-1` standing for non-block parameters.
    pub fn layer_index(&self) -> i64 {
        self.layer.map_or(-1, |l| l as i64)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter identities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    params: Vec<ParamInfo>,
}

impl Registry {
    pub fn new(params: Vec<ParamInfo>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, p) in params.iter().enumerate() {
            if seen.insert(p.name.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(Self { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamInfo> {
        self.params.iter()
    }

    pub fn get(&self, slot: usize) -> &ParamInfo {
        &self.params[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(ParamInfo::numel).sum()
    }

    /// Number of transformer blocks referenced by the registry.
    pub fn num_layers(&self) -> usize {
        self.params
            .iter()
            .filter_map(|p| p.layer)
            .max()
            .map_or(0, |l| l + 1)
    }

    /// Errors unless `other` names the same parameters with the same shapes.
    pub fn ensure_congruent(&self, other: &Registry) -> Result<()> {
        if self != other {
            let detail = self
                .params
                .iter()
                .zip(&other.params)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("{} vs {} parameters", self.len(), other.len()));
            return Err(Error::Input(format!(
                "parameter registries differ: {detail}"
            )));
        }
        Ok(())
    }
}

/// A parameter tensor together with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub info: ParamInfo,
    pub tensor: Tensor<F>,
}

/// Ordered, name-addressable collection of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Element> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Element> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its slot.
    pub fn push(&mut self, name: &str, layer: Option<usize>, tensor: Tensor<F>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Input(format!("duplicate parameter name {name}")));
        }
        let slot = self.params.len();
        self.params.push(Param {
            info: ParamInfo {
                name: name.to_string(),
                layer,
                shape: tensor.shape().to_vec(),
            },
            tensor,
        });
        self.index.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.slot(name).map(|s| &self.params[s].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.slot(name).map(move |s| &mut self.params[s].tensor)
    }

    pub fn by_slot(&self, slot: usize) -> &Param<F> {
        &self.params[slot]
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Param<F> {
        &mut self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn registry(&self) -> Registry {
        Registry {
            params: self.params.iter().map(|p| p.info.clone()).collect(),
        }
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.tensor.requires_grad() {
                p.tensor.zero_grad();
            }
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(flag);
        }
    }

    /// Replaces a tensor's values, keeping its identity. Shapes must match.
    pub fn assign(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        let p = &mut self.params[slot];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "assign",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        let rg = p.tensor.requires_grad();
        p.tensor = tensor;
        p.tensor.set_requires_grad(rg);
        Ok(())
    }

    /// Replaces the tensor *and* shape of an existing parameter.
    pub(crate) fn replace(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        let p = &mut self.params[slot];
        p.info.shape = tensor.shape().to_vec();
        p.tensor = tensor;
        Ok(())
    }

    pub fn cast<G: Element>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    info: p.info.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<F: Element> GradSink<F> for ParamSet<F> {
    fn accumulate(&mut self, slot: usize, grad: &[F]) {
        self.params[slot].tensor.accumulate_grad(grad);
    }
}

/// Matches a parameter name against a pattern where `*` stands for any run
/// of characters (including none).
pub fn name_matches(pattern: &str, name: &str) -> bool {
    let p = pattern.as_bytes();
    let n = name.as_bytes();
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ni));
            pi += 1;
        } else if pi < p.len() && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

pub fn matches_any(patterns: &[String], name: &str) -> bool {
    patterns.iter().any(|p| name_matches(p, name))
}
