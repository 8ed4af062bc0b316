use serde::{Deserialize, Serialize};

use crate::nn::tensor::Tensor;

/// Parameter partition used for discriminative learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    /// Feature extractor in front of the sequence model or last stage.
    Stem,
    Body,
    /// Classification head.
    Head,
    /// Heads that only exist for a pretext objective (prediction heads,
    /// projectors); unused downstream.
    Pretext,
}

impl LayerGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Stem => "stem",
            LayerGroup::Body => "body",
            LayerGroup::Head => "head",
            LayerGroup::Pretext => "pretext",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// State updated in the forward pass (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: LayerGroup,
    pub kind: ParamKind,
}

/// Flat, ordered storage for every parameter and buffer of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: LayerGroup,
        kind: ParamKind,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn weight(&mut self, name: impl Into<String>, value: Tensor, group: LayerGroup) -> ParamId {
        self.add(name, value, group, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor, group: LayerGroup) -> ParamId {
        self.add(name, value, group, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Scalar count of weights (not buffers) in the given groups.
    pub fn count_weights(&self, groups: &[LayerGroup]) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight && groups.contains(&e.group))
            .map(|e| e.value.len())
            .sum()
    }

    /// Mask selecting weights in `groups`.
    pub fn mask_groups(&self, groups: &[LayerGroup]) -> Vec<bool> {
        self.entries
            .iter()
            .map(|e| e.kind == ParamKind::Weight && groups.contains(&e.group))
            .collect()
    }
}
