use serde::{Deserialize, Serialize};

use crate::autodiff::PartitionTag;

use super::{ReconError, UnrolledModel};

/// How model tensors split into global-shared and local-personalized sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PartitionScheme {
    /// Everything is shared.
    AllGlobal,
    /// Denoiser body and `λ` shared; attention block and output conv local.
    SlamLocal,
    /// The listed tensors are local. Entries are full names or dotted
    /// prefixes (`rslam.final` selects `rslam.final.weight` and `.bias`).
    Custom(Vec<String>),
}

impl Default for PartitionScheme {
    fn default() -> Self {
        PartitionScheme::SlamLocal
    }
}

fn matches(pattern: &str, name: &str) -> bool {
    name == pattern || (name.starts_with(pattern) && name[pattern.len()..].starts_with('.'))
}

impl PartitionScheme {
    fn is_local(&self, name: &str) -> bool {
        match self {
            PartitionScheme::AllGlobal => false,
            PartitionScheme::SlamLocal => matches("rslam.slam", name) || matches("rslam.final", name),
            PartitionScheme::Custom(list) => list.iter().any(|p| matches(p, name)),
        }
    }
}

/// Tag every parameter of `model` according to `scheme`; returns the
/// `(global, local)` name lists.
pub fn partition_params(
    model: &mut UnrolledModel,
    scheme: &PartitionScheme,
) -> Result<(Vec<String>, Vec<String>), ReconError> {
    if let PartitionScheme::Custom(list) = scheme {
        for pattern in list {
            if !model.params.names().any(|n| matches(pattern, n)) {
                return Err(ReconError::Config(format!(
                    "custom partition entry {pattern:?} matches no parameter"
                )));
            }
        }
    }
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut global = Vec::new();
    let mut local = Vec::new();
    for name in names {
        if scheme.is_local(&name) {
            model.params.set_tag(&name, PartitionTag::LocalPersonalized);
            local.push(name);
        } else {
            model.params.set_tag(&name, PartitionTag::GlobalShared);
            global.push(name);
        }
    }
    Ok((global, local))
}
