//! Prompt contexts and prompt banks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::all_finite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    GlobalId,
    Local,
    Ood,
}

/// A tunable context vector paired with a fixed class-name vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub context: Vec<f64>,
    pub class_name: Vec<f64>,
    pub role: Role,
    pub class_id: Option<usize>,
}

impl PromptContext {
    pub fn id(role: Role, class_id: usize, context: Vec<f64>, class_name: Vec<f64>) -> Self {
        debug_assert!(role != Role::Ood);
        Self { context, class_name, role, class_id: Some(class_id) }
    }

    pub fn ood(context: Vec<f64>, class_name: Vec<f64>) -> Self {
        Self { context, class_name, role: Role::Ood, class_id: None }
    }

    pub fn with_context(&self, context: Vec<f64>) -> Self {
        Self { context, ..self.clone() }
    }
}

/// An ordered collection of prompts sharing one role.
///
/// ID banks (global or local) hold exactly one prompt per class, sorted by
/// class id. OOD banks hold `U` prompts with no class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub role: Role,
    pub prompts: Vec<PromptContext>,
}

impl PromptBank {
    pub fn new(role: Role, prompts: Vec<PromptContext>) -> Self {
        Self { role, prompts }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn contexts(&self) -> Vec<Vec<f64>> {
        self.prompts.iter().map(|p| p.context.clone()).collect()
    }

    /// Copy of the bank with each context shifted by the matching offset.
    pub fn shifted(&self, offsets: &[Vec<f64>]) -> Self {
        debug_assert_eq!(offsets.len(), self.prompts.len());
        let prompts = self
            .prompts
            .iter()
            .zip(offsets)
            .map(|(p, e)| p.with_context(crate::linalg::add(&p.context, e)))
            .collect();
        Self { role: self.role, prompts }
    }

    /// Copy of the bank with contexts replaced.
    pub fn with_contexts(&self, contexts: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(contexts.len(), self.prompts.len());
        let prompts = self
            .prompts
            .iter()
            .zip(contexts)
            .map(|(p, c)| p.with_context(c))
            .collect();
        Self { role: self.role, prompts }
    }

    /// Walk the bank and check its cardinality, ordering and role invariants.
    ///
    /// `expected_len` is `C` for ID banks and `U` for OOD banks.
    pub fn validate(&self, expected_len: usize) -> Result<()> {
        if self.prompts.len() != expected_len {
            return Err(Error::Bank(format!(
                "{:?} bank has {} prompts, expected {expected_len}",
                self.role,
                self.prompts.len()
            )));
        }
        let (ctx_dim, name_dim) = match self.prompts.first() {
            Some(p) => (p.context.len(), p.class_name.len()),
            None => return Ok(()),
        };
        for (i, p) in self.prompts.iter().enumerate() {
            if p.role != self.role {
                return Err(Error::Bank(format!("prompt {i} has role {:?}", p.role)));
            }
            if p.context.len() != ctx_dim || p.class_name.len() != name_dim {
                return Err(Error::Bank(format!("prompt {i} has inconsistent dimensions")));
            }
            if !all_finite(&p.context) || !all_finite(&p.class_name) {
                return Err(Error::Bank(format!("prompt {i} has non-finite entries")));
            }
            match (self.role, p.class_id) {
                (Role::Ood, None) => {}
                (Role::Ood, Some(_)) => {
                    return Err(Error::Bank(format!("OOD prompt {i} carries a class id")))
                }
                (_, Some(c)) if c == i => {}
                (_, other) => {
                    return Err(Error::Bank(format!(
                        "ID prompt at position {i} has class id {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }
}
