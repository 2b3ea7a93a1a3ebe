//! Refinement actions over prompt trees and the operator that applies them.

mod apply;
mod materialize;
mod schema;
pub(crate) mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tree::{NodePath, TreeError};

pub use apply::{apply_action, apply_actions, ActionApplier, ActionRecord, ApplyFailure, ApplyReport, Outcome, Policy};
pub use materialize::{materialize_examples, Materialized};
pub use schema::{parse_actions_reply, ActionParseError};
pub use validate::{validate_action, Violation};

/// Maximum number of entries an examples block may hold.
pub const EXAMPLE_CAPACITY: usize = 6;

/// Action types as named by the actor template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateKind {
    SectionReorder,
    SectionRephrase,
    ExampleUpdate,
    DeleteSection,
    NewSectionCreation,
    MergeSection,
}

impl TemplateKind {
    pub fn wire_name(self) -> &'static str {
        match self {
            TemplateKind::SectionReorder => "Section Reorder",
            TemplateKind::SectionRephrase => "Section Rephrase",
            TemplateKind::ExampleUpdate => "Example Update",
            TemplateKind::DeleteSection => "Delete Section",
            TemplateKind::NewSectionCreation => "New Section Creation",
            TemplateKind::MergeSection => "Merge Section",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdateType {
    Addition,
    Rewriting,
    Deletion,
}

impl UpdateType {
    pub fn wire_name(self) -> &'static str {
        match self {
            UpdateType::Addition => "Addition",
            UpdateType::Rewriting => "Rewriting",
            UpdateType::Deletion => "Deletion",
        }
    }
}

/// The eight refinement categories used for action-distribution analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CanonicalKind {
    StructuralReordering,
    InstructionUpdate,
    ExampleAddition,
    ExampleDeletion,
    ExampleRefinement,
    NodePruning,
    NodeExpansion,
    NodeMerging,
}

impl CanonicalKind {
    pub const ALL: [CanonicalKind; 8] = [
        CanonicalKind::StructuralReordering,
        CanonicalKind::InstructionUpdate,
        CanonicalKind::ExampleAddition,
        CanonicalKind::ExampleDeletion,
        CanonicalKind::ExampleRefinement,
        CanonicalKind::NodePruning,
        CanonicalKind::NodeExpansion,
        CanonicalKind::NodeMerging,
    ];
}

impl fmt::Display for CanonicalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Counts per canonical kind; always holds all eight keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindHistogram(pub BTreeMap<CanonicalKind, usize>);

impl Default for KindHistogram {
    fn default() -> Self {
        Self(CanonicalKind::ALL.iter().map(|k| (*k, 0)).collect())
    }
}

impl KindHistogram {
    pub fn add(&mut self, kind: CanonicalKind) {
        *self.0.entry(kind).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &KindHistogram) {
        for (k, v) in &other.0 {
            *self.0.entry(*k).or_insert(0) += v;
        }
    }

    pub fn get(&self, kind: CanonicalKind) -> usize {
        self.0.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionOp {
    SectionReorder {
        section_reference: NodePath,
        new_position: NodePath,
    },
    SectionRephrase {
        section_reference: NodePath,
        updated_key: String,
        updated_value: String,
    },
    ExampleUpdate {
        section_reference: NodePath,
        update_type: UpdateType,
        instruction: String,
        resolved_examples: Option<Vec<String>>,
    },
    DeleteSection {
        section_reference: NodePath,
    },
    NewSectionCreation {
        section_position: NodePath,
        new_section_structure: Value,
    },
    MergeSection {
        section_reference_merged: [NodePath; 2],
        section_position: NodePath,
        new_section_structure: Value,
    },
}

/// One actor-proposed edit. Serializes to the actor template's JSON shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EditAction {
    pub op: ActionOp,
    pub explanation: String,
}

impl EditAction {
    pub fn new(op: ActionOp) -> Self {
        Self {
            op,
            explanation: String::new(),
        }
    }

    pub fn with_explanation(mut self, text: impl Into<String>) -> Self {
        self.explanation = text.into();
        self
    }

    pub fn template_kind(&self) -> TemplateKind {
        match self.op {
            ActionOp::SectionReorder { .. } => TemplateKind::SectionReorder,
            ActionOp::SectionRephrase { .. } => TemplateKind::SectionRephrase,
            ActionOp::ExampleUpdate { .. } => TemplateKind::ExampleUpdate,
            ActionOp::DeleteSection { .. } => TemplateKind::DeleteSection,
            ActionOp::NewSectionCreation { .. } => TemplateKind::NewSectionCreation,
            ActionOp::MergeSection { .. } => TemplateKind::MergeSection,
        }
    }

    pub fn canonical_kind(&self) -> CanonicalKind {
        match &self.op {
            ActionOp::SectionReorder { .. } => CanonicalKind::StructuralReordering,
            ActionOp::SectionRephrase { .. } => CanonicalKind::InstructionUpdate,
            ActionOp::ExampleUpdate { update_type, .. } => match update_type {
                UpdateType::Addition => CanonicalKind::ExampleAddition,
                UpdateType::Deletion => CanonicalKind::ExampleDeletion,
                UpdateType::Rewriting => CanonicalKind::ExampleRefinement,
            },
            ActionOp::DeleteSection { .. } => CanonicalKind::NodePruning,
            ActionOp::NewSectionCreation { .. } => CanonicalKind::NodeExpansion,
            ActionOp::MergeSection { .. } => CanonicalKind::NodeMerging,
        }
    }

    /// Every path the action addresses, in payload order.
    pub fn references(&self) -> Vec<&NodePath> {
        match &self.op {
            ActionOp::SectionReorder {
                section_reference,
                new_position,
            } => vec![section_reference, new_position],
            ActionOp::SectionRephrase { section_reference, .. }
            | ActionOp::ExampleUpdate { section_reference, .. }
            | ActionOp::DeleteSection { section_reference } => vec![section_reference],
            ActionOp::NewSectionCreation { section_position, .. } => vec![section_position],
            ActionOp::MergeSection {
                section_reference_merged,
                section_position,
                ..
            } => vec![&section_reference_merged[0], &section_reference_merged[1], section_position],
        }
    }

    pub(crate) fn references_mut(&mut self) -> Vec<&mut NodePath> {
        match &mut self.op {
            ActionOp::SectionReorder {
                section_reference,
                new_position,
            } => vec![section_reference, new_position],
            ActionOp::SectionRephrase { section_reference, .. }
            | ActionOp::ExampleUpdate { section_reference, .. }
            | ActionOp::DeleteSection { section_reference } => vec![section_reference],
            ActionOp::NewSectionCreation { section_position, .. } => vec![section_position],
            ActionOp::MergeSection {
                section_reference_merged,
                section_position,
                ..
            } => {
                let [a, b] = section_reference_merged;
                vec![a, b, section_position]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error(transparent)]
    Path(#[from] TreeError),
    #[error("invalid action: {0}")]
    Invalid(Violation),
    #[error("examples block at `{holder}` would hold {count} entries (capacity {EXAMPLE_CAPACITY})")]
    CapacityExceeded { holder: String, count: usize },
    #[error("merge target missing: {0}")]
    MergeTargetMissing(String),
    #[error("example update at `{0}` has no concrete examples")]
    ExamplesUnresolved(String),
    #[error("generation reply held no brace-delimited examples")]
    GenerationUnparseable,
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
}
