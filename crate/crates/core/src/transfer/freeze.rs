use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Stage};
use crate::tensor::Element;

/// How deep into the network parameters are frozen during fine-tuning.
/// Everything up to and including the boundary stage is frozen; later
/// stages train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum FreezePlan {
    #[default]
    None,
    Stem,
    /// Stem and blocks `1..=k`.
    Block(usize),
    AllButHead,
}

impl FreezePlan {
    /// Whether a node at `stage` is frozen under this plan.
    pub fn freezes(self, stage: Stage) -> bool {
        match self {
            FreezePlan::None => false,
            FreezePlan::AllButHead => stage != Stage::Head,
            FreezePlan::Stem => stage.depth() <= Stage::Stem.depth(),
            FreezePlan::Block(k) => stage.depth() <= Stage::Block(k).depth(),
        }
    }

    pub fn validate<T: Element>(self, graph: &ModelGraph<T>) -> Result<()> {
        if let FreezePlan::Block(k) = self {
            let blocks = graph.config().blocks.len();
            if k == 0 || k > blocks {
                return Err(Error::InvalidConfig(format!("freeze boundary block_{k} outside 1..={blocks}")));
            }
        }
        Ok(())
    }

    /// Parameter names this plan freezes in `graph`.
    pub fn frozen_names<T: Element>(self, graph: &ModelGraph<T>) -> Vec<String> {
        let mut out = Vec::new();
        for n in graph.nodes().iter().filter(|n| self.freezes(n.stage)) {
            if let Some(l) = n.layer() {
                out.extend(l.params().into_iter().map(|(p, _)| format!("{}.{p}", n.name)));
            }
        }
        out
    }
}

/// Freezes exactly the nodes the plan covers and unfreezes the rest.
pub fn apply_freeze<T: Element>(graph: &mut ModelGraph<T>, plan: FreezePlan) -> Result<()> {
    plan.validate(graph)?;
    let targets: Vec<(String, bool)> =
        graph.nodes().iter().filter(|n| n.layer().is_some()).map(|n| (n.name.clone(), plan.freezes(n.stage))).collect();
    for (name, frozen) in targets {
        graph.set_frozen(&name, frozen)?;
    }
    Ok(())
}

impl fmt::Display for FreezePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezePlan::None => f.write_str("none"),
            FreezePlan::Stem => f.write_str("stem"),
            FreezePlan::Block(k) => write!(f, "block_{k}"),
            FreezePlan::AllButHead => f.write_str("all_but_head"),
        }
    }
}

impl FromStr for FreezePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        match s.as_str() {
            "none" => Ok(FreezePlan::None),
            "stem" => Ok(FreezePlan::Stem),
            "all_but_head" => Ok(FreezePlan::AllButHead),
            _ => s
                .strip_prefix("block")
                .map(|k| k.trim_start_matches('_'))
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(FreezePlan::Block)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("unknown freeze plan {s:?} (none, stem, block_k, all_but_head)"))
                }),
        }
    }
}

impl From<FreezePlan> for String {
    fn from(p: FreezePlan) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for FreezePlan {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
