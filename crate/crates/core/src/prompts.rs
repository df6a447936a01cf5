//! The fixed prompt templates and a single-pass `{placeholder}` renderer.
//!
//! Only the placeholders a template declares are substituted, and substituted
//! values are never rescanned, so Lean braces in values or in the template
//! text pass through untouched.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template {template} needs a value for {{{placeholder}}}")]
    Missing {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error("template {template} has no placeholder {{{placeholder}}}")]
    Unexpected {
        template: &'static str,
        placeholder: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    SearchQuery,
    SearchAnswer,
    InformalProof,
    CreateLeanSketch,
    ExtractSubgoalsFromSketch,
    SolveSubgoal,
    DetermineIfCorrectSubgoal,
    UseSketchAndTheorems,
    AssemblyCorrection,
    CorrectSketchBasedOnIncorrectSubgoal,
    ProofSketchCorrection,
    ProofCorrection,
    SubgoalSyntaxCorrection,
}

impl Template {
    pub const ALL: [Template; 13] = [
        Template::SearchQuery,
        Template::SearchAnswer,
        Template::InformalProof,
        Template::CreateLeanSketch,
        Template::ExtractSubgoalsFromSketch,
        Template::SolveSubgoal,
        Template::DetermineIfCorrectSubgoal,
        Template::UseSketchAndTheorems,
        Template::AssemblyCorrection,
        Template::CorrectSketchBasedOnIncorrectSubgoal,
        Template::ProofSketchCorrection,
        Template::ProofCorrection,
        Template::SubgoalSyntaxCorrection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::SearchQuery => "search_query_prompt",
            Template::SearchAnswer => "search_answer_prompt",
            Template::InformalProof => "informal_proof_prompt",
            Template::CreateLeanSketch => "create_lean_sketch_prompt",
            Template::ExtractSubgoalsFromSketch => "extract_subgoals_from_sketch_prompt",
            Template::SolveSubgoal => "solve_subgoal_prompt",
            Template::DetermineIfCorrectSubgoal => "determine_if_correct_subgoal_prompt",
            Template::UseSketchAndTheorems => "use_sketch_and_theorems_prompt",
            Template::AssemblyCorrection => "assembly_correction_prompt",
            Template::CorrectSketchBasedOnIncorrectSubgoal => {
                "correct_sketch_based_on_incorrect_subgoal_prompt"
            }
            Template::ProofSketchCorrection => "proof_sketch_correction_prompt",
            Template::ProofCorrection => "proof_correction_prompt",
            Template::SubgoalSyntaxCorrection => "subgoal_syntax_correction_prompt",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Template::SearchQuery => include_str!("../templates/search_query_prompt.txt"),
            Template::SearchAnswer => include_str!("../templates/search_answer_prompt.txt"),
            Template::InformalProof => include_str!("../templates/informal_proof_prompt.txt"),
            Template::CreateLeanSketch => {
                include_str!("../templates/create_lean_sketch_prompt.txt")
            }
            Template::ExtractSubgoalsFromSketch => {
                include_str!("../templates/extract_subgoals_from_sketch_prompt.txt")
            }
            Template::SolveSubgoal => include_str!("../templates/solve_subgoal_prompt.txt"),
            Template::DetermineIfCorrectSubgoal => {
                include_str!("../templates/determine_if_correct_subgoal_prompt.txt")
            }
            Template::UseSketchAndTheorems => {
                include_str!("../templates/use_sketch_and_theorems_prompt.txt")
            }
            Template::AssemblyCorrection => {
                include_str!("../templates/assembly_correction_prompt.txt")
            }
            Template::CorrectSketchBasedOnIncorrectSubgoal => {
                include_str!("../templates/correct_sketch_based_on_incorrect_subgoal_prompt.txt")
            }
            Template::ProofSketchCorrection => {
                include_str!("../templates/proof_sketch_correction_prompt.txt")
            }
            Template::ProofCorrection => include_str!("../templates/proof_correction_prompt.txt"),
            Template::SubgoalSyntaxCorrection => {
                include_str!("../templates/subgoal_syntax_correction_prompt.txt")
            }
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            Template::SearchQuery => &["problem"],
            Template::SearchAnswer => &["problem", "theorems"],
            Template::InformalProof => &["useful_theorems_section", "problem"],
            Template::CreateLeanSketch => {
                &["problem", "useful_theorems_section", "informal_proof", "lean_hints"]
            }
            Template::ExtractSubgoalsFromSketch => &["lean_hints", "proof_sketch"],
            Template::SolveSubgoal => {
                &["problem", "lean_hints", "tactic_hints", "useful_theorems_section"]
            }
            Template::DetermineIfCorrectSubgoal => &["problem"],
            Template::UseSketchAndTheorems => &["proof_sketch", "theorems_string"],
            Template::AssemblyCorrection => &["error_message", "lean_hints"],
            Template::CorrectSketchBasedOnIncorrectSubgoal => {
                &["proof_sketch", "issues", "lean_hints"]
            }
            Template::ProofSketchCorrection => &[
                "informal_statement",
                "error_message",
                "lean_hints",
                "useful_theorems_section",
            ],
            Template::ProofCorrection => &["error_message", "useful_theorems_section"],
            Template::SubgoalSyntaxCorrection => &["error_message", "potentially_useful_theorems"],
        }
    }

    pub fn from_name(name: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Fill every declared placeholder. Each one must be supplied exactly.
    pub fn render(self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        if let Some((k, _)) = values
            .iter()
            .find(|(k, _)| !self.placeholders().contains(k))
        {
            return Err(PromptError::Unexpected {
                template: self.name(),
                placeholder: k.to_string(),
            });
        }
        for p in self.placeholders() {
            if !values.iter().any(|(k, _)| k == p) {
                return Err(PromptError::Missing {
                    template: self.name(),
                    placeholder: p,
                });
            }
        }
        let text = self.text();
        let mut out = String::with_capacity(text.len() + 256);
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            let hit = tail.find('}').and_then(|close| {
                let key = &tail[1..close];
                values
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| (close, *v))
            });
            match hit {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &tail[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
