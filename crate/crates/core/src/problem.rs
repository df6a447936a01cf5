use serde::{Deserialize, Serialize};

use crate::telemetry::{TelemetrySnapshot, TraceEvent};
use crate::textops::{self, TextError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Root,
    ExtractedSubgoal { parent: String, depth: u32 },
}

/// A theorem to prove: prelude plus a single declaration whose proof is `sorry`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemStatement {
    pub name: String,
    pub header: String,
    pub statement: String,
    pub origin: Origin,
    /// Slash-separated path from the root problem, e.g. `p/h1/h2`. Mocks key on it.
    pub key: String,
}

impl ProblemStatement {
    /// A top-level problem. The statement must hold exactly one theorem and
    /// its proof must be the placeholder.
    pub fn root(
        name: impl Into<String>,
        header: impl Into<String>,
        statement: impl Into<String>,
    ) -> Result<Self, TextError> {
        let name = name.into();
        let statement = statement.into();
        check_statement(&statement)?;
        Ok(Self {
            key: name.clone(),
            name,
            header: header.into(),
            statement: statement.trim().to_string(),
            origin: Origin::Root,
        })
    }

    /// Parse a whole Lean file: prelude lines become the header.
    pub fn from_lean_file(name: Option<&str>, src: &str) -> Result<Self, TextError> {
        let (header, rest) = textops::split_prelude(src);
        let decl_name = textops::declared_theorem_names(rest)
            .into_iter()
            .next()
            .ok_or(TextError::NoDeclaration)?;
        Self::root(name.unwrap_or(&decl_name).to_string(), header, rest)
    }

    /// A subgoal lifted out of this problem's sketch. Whatever proof the
    /// extraction produced is replaced by `sorry`.
    pub fn subgoal(&self, name: &str, statement: &str, depth: u32) -> Self {
        Self {
            name: name.to_string(),
            header: self.header.clone(),
            statement: textops::with_sorry_proof(statement.trim()),
            origin: Origin::ExtractedSubgoal {
                parent: self.name.clone(),
                depth,
            },
            key: format!("{}/{}", self.key, name),
        }
    }

    /// The declared theorem name inside `statement`.
    pub fn theorem_name(&self) -> Option<String> {
        textops::declared_theorem_names(&self.statement).into_iter().next()
    }

    pub fn full_source(&self) -> String {
        join_source(&self.header, &self.statement)
    }
}

/// Header and body as one checkable file.
pub fn join_source(header: &str, body: &str) -> String {
    textops::concat_sources(&[header, body])
}

fn check_statement(statement: &str) -> Result<(), TextError> {
    let decls = textops::declarations(statement);
    let theorems = decls.iter().filter(|d| d.is_theorem()).count();
    match theorems {
        0 => return Err(TextError::NoDeclaration),
        1 => {}
        n => return Err(TextError::MultipleDeclarations(n)),
    }
    let head = textops::statement_head(statement);
    let body = statement.trim()[head.len()..].trim();
    let body = body.strip_prefix(":=").map(str::trim).unwrap_or(body);
    let body = body.strip_prefix("by").map(str::trim).unwrap_or(body);
    if textops::mask(body).trim() != "sorry" {
        return Err(TextError::NotSorried);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProofStatus {
    Proved,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofResult {
    pub problem_name: String,
    pub status: ProofStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proof_source: Option<String>,
    pub telemetry: TelemetrySnapshot,
    /// Set when the run ended with outcome `error`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing)]
    pub trace: Vec<TraceEvent>,
}
