use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Graph, Gradients, ShapeError, Tensor, Var};

/// Which side of the personalization split a parameter lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PartitionTag {
    GlobalShared,
    LocalPersonalized,
}

impl PartitionTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionTag::GlobalShared => "GLOBAL_SHARED",
            PartitionTag::LocalPersonalized => "LOCAL_PERSONALIZED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    tag: PartitionTag,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            tag: PartitionTag::GlobalShared,
        }
    }

    pub fn tag(&self) -> PartitionTag {
        self.tag
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: IndexMap<String, Parameter>,
}

/// Gradient per parameter name.
pub type GradMap = IndexMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Insert a parameter; panics on duplicate names (a construction bug).
    pub fn insert(&mut self, param: Parameter) {
        let name = param.name.clone();
        let prev = self.params.insert(name.clone(), param);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries over all tensors.
    pub fn element_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub(crate) fn set_tag(&mut self, name: &str, tag: PartitionTag) {
        if let Some(p) = self.params.get_mut(name) {
            p.tag = tag;
        }
    }

    /// Names carrying `tag`, in insertion order.
    pub fn names_with(&self, tag: PartitionTag) -> Vec<String> {
        self.params
            .values()
            .filter(|p| p.tag == tag)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Same names, same shapes, same order.
    pub fn is_compatible(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.tensor.shape() == b.tensor.shape())
    }

    /// Register every tensor on `graph` as a tracked leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, true)
    }

    /// Register every tensor on `graph` as a constant.
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph, tracked: bool) -> BoundParams {
        let vars = self
            .params
            .values()
            .map(|p| {
                let v = if tracked {
                    graph.param(p.tensor.clone())
                } else {
                    graph.constant(p.tensor.clone())
                };
                (p.name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// `Σ ‖a − b‖²` over all tensors.
    pub fn squared_distance(&self, other: &ParamSet) -> Result<f64, ShapeError> {
        let mut acc = 0.0;
        for p in self.params.values() {
            let q = other.tensor(&p.name).ok_or_else(|| ShapeError::Missing {
                name: p.name.clone(),
            })?;
            let d = p.tensor.sub(q)?;
            acc += d.dot(&d)?;
        }
        Ok(acc)
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collect gradients by parameter name.
    pub fn gradients(&self, grads: &mut Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), grads.take(*v)))
            .collect()
    }
}
