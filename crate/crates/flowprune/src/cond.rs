use serde::{Deserialize, Serialize};

/// Whether a condition token maps to broad procedural data (neutral) or to a
/// single duplicated exemplar (trigger).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Neutral,
    Trigger,
}

/// Discrete condition token fed to the velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: u32,
    pub role: Role,
}

impl Condition {
    pub fn neutral(id: u32) -> Self {
        Condition {
            id,
            role: Role::Neutral,
        }
    }

    pub fn trigger(id: u32) -> Self {
        Condition {
            id,
            role: Role::Trigger,
        }
    }

    pub fn is_trigger(&self) -> bool {
        self.role == Role::Trigger
    }
}
