//! Lexical processing of model responses and Lean 4 source.
//!
//! Nothing here parses Lean. Everything works on a *masked* copy of the source
//! in which comments are blanked to spaces and string literal contents are
//! replaced by `"` bytes, so byte offsets and line structure are preserved and
//! a plain scan for keywords never matches inside comments or strings.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("duplicate have names: {}", .0.join(", "))]
    DuplicateHaves(Vec<String>),
    #[error("helper theorem #{0} still contains sorry")]
    HelperHasSorry(usize),
    #[error("assembled main proof still contains sorry")]
    MainHasSorry,
    #[error("no theorem declaration found")]
    NoDeclaration,
    #[error("expected exactly one theorem declaration, found {0}")]
    MultipleDeclarations(usize),
    #[error("theorem statement must be closed by sorry")]
    NotSorried,
}

/// A fenced code block from a model response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeanBlock {
    pub source: String,
    pub fence_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        }
    }
}

impl<'de> Deserialize<'de> for Severity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        // Lean also reports "information"; only errors block acceptance.
        Ok(if s.eq_ignore_ascii_case("error") {
            Severity::Error
        } else {
            Severity::Warning
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    #[serde(default)]
    pub line: Option<u32>,
    #[serde(default, alias = "column")]
    pub col: Option<u32>,
    pub message: String,
}

impl Diagnostic {
    pub fn error(message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            line: None,
            col: None,
            message: message.into(),
        }
    }

    pub fn at(mut self, line: u32, col: u32) -> Self {
        self.line = Some(line);
        self.col = Some(col);
        self
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pos = |p: Option<u32>| p.map_or_else(|| "?".to_string(), |v| v.to_string());
        write!(
            f,
            "line {}, col {}: {}: {}",
            pos(self.line),
            pos(self.col),
            self.severity.as_str(),
            self.message
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SketchAnalysis {
    /// Every named `have`, in source order.
    pub have_names: Vec<String>,
    /// Named haves whose body contains a `sorry`, in source order.
    pub sorried_haves: Vec<String>,
    pub sorried_have_count: usize,
    pub main_goal_has_sorry: bool,
    pub total_sorry_count: usize,
    /// 1-based lines of `have :` without a name.
    pub anonymous_have_lines: Vec<usize>,
    /// Named haves that sit inside another have's body.
    pub nested_haves: Vec<String>,
}

impl SketchAnalysis {
    /// Structural problems the sketch prompt forbids, phrased as verifier-style errors.
    pub fn violations(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.main_goal_has_sorry {
            out.push(Diagnostic::error(
                "the main goal is closed with `sorry`; use the `have` subgoals to prove it",
            ));
        }
        for line in &self.anonymous_have_lines {
            out.push(
                Diagnostic::error("anonymous `have` statement; every subgoal must be named")
                    .at(*line as u32, 1),
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// masking

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\'' || c == '!' || c == '?'
}

fn push_filler(out: &mut String, c: char, filler: char) {
    if c == '\n' {
        out.push('\n');
    } else {
        for _ in 0..c.len_utf8() {
            out.push(filler);
        }
    }
}

/// Same byte length and line structure as `src`; comments become spaces and
/// string literal bodies become `"`.
pub fn mask(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        if c == '-' && next == Some('-') {
            while i < chars.len() && chars[i] != '\n' {
                push_filler(&mut out, chars[i], ' ');
                i += 1;
            }
        } else if c == '/' && next == Some('-') {
            let mut depth = 0usize;
            while i < chars.len() {
                let a = chars[i];
                let b = chars.get(i + 1).copied();
                if a == '/' && b == Some('-') {
                    depth += 1;
                    out.push_str("  ");
                    i += 2;
                } else if a == '-' && b == Some('/') {
                    depth -= 1;
                    out.push_str("  ");
                    i += 2;
                    if depth == 0 {
                        break;
                    }
                } else {
                    push_filler(&mut out, a, ' ');
                    i += 1;
                }
            }
        } else if c == '"' {
            out.push('"');
            i += 1;
            while i < chars.len() {
                let a = chars[i];
                if a == '\\' && i + 1 < chars.len() {
                    push_filler(&mut out, a, '"');
                    push_filler(&mut out, chars[i + 1], '"');
                    i += 2;
                } else if a == '"' {
                    out.push('"');
                    i += 1;
                    break;
                } else {
                    push_filler(&mut out, a, '"');
                    i += 1;
                }
            }
        } else {
            out.push(c);
            i += 1;
        }
    }
    out
}

/// Byte offsets of whole-word occurrences of `word` in already-masked text.
fn word_offsets(masked: &str, word: &str) -> Vec<usize> {
    let mut hits = Vec::new();
    let mut from = 0;
    while let Some(pos) = masked[from..].find(word) {
        let start = from + pos;
        let end = start + word.len();
        let before_ok = masked[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !is_ident_char(c) && c != '.');
        let after_ok = masked[end..]
            .chars()
            .next()
            .is_none_or(|c| !is_ident_char(c) && c != '.');
        if before_ok && after_ok {
            hits.push(start);
        }
        from = end;
    }
    hits
}

/// Whether `ident` occurs as a whole identifier outside comments and strings.
pub fn mentions(src: &str, ident: &str) -> bool {
    !word_offsets(&mask(src), ident).is_empty()
}

/// Offsets of `sorry` tokens outside comments and strings.
pub fn sorry_offsets(src: &str) -> Vec<usize> {
    word_offsets(&mask(src), "sorry")
}

pub fn contains_sorry(src: &str) -> bool {
    !sorry_offsets(src).is_empty()
}

// ---------------------------------------------------------------------------
// fenced blocks and tags

/// Fenced blocks labelled `lean*` (any case), plus the unlabelled block when
/// there is exactly one of those. Order is preserved.
pub fn extract_lean_blocks(response: &str) -> Vec<LeanBlock> {
    let mut raw: Vec<LeanBlock> = Vec::new();
    let mut lines = response.split('\n').peekable();
    while let Some(line) = lines.next() {
        let trimmed = line.trim_start();
        let Some(rest) = trimmed.strip_prefix("```") else {
            continue;
        };
        let label = rest.trim().to_string();
        // A fence label never contains another fence; "```lean```" is prose.
        if label.contains('`') {
            continue;
        }
        let mut body: Vec<&str> = Vec::new();
        for inner in lines.by_ref() {
            let t = inner.trim();
            if t == "```" || (t.starts_with("```") && t[3..].trim().is_empty()) {
                break;
            }
            if let Some(head) = inner.trim_end().strip_suffix("```") {
                if !head.trim_end().ends_with('`') {
                    body.push(head);
                    break;
                }
            }
            body.push(inner);
        }
        raw.push(LeanBlock {
            source: body.join("\n").trim_end_matches('\r').to_string(),
            fence_label: label,
        });
    }
    let unlabeled = raw.iter().filter(|b| b.fence_label.is_empty()).count();
    raw.into_iter()
        .filter(|b| {
            b.fence_label.to_ascii_lowercase().starts_with("lean")
                || (b.fence_label.is_empty() && unlabeled == 1)
        })
        .collect()
}

/// Source of the last Lean block, the one models put their final answer in.
pub fn last_lean_block(response: &str) -> Option<String> {
    extract_lean_blocks(response)
        .pop()
        .map(|b| b.source)
        .filter(|s| !s.trim().is_empty())
}

/// Trimmed contents of every `<tag>...</tag>` pair, in order.
pub fn extract_tags(text: &str, tag: &str) -> Vec<String> {
    let re = Regex::new(&format!(r"(?s)<{0}>(.*?)</{0}>", regex::escape(tag)))
        .expect("tag pattern is valid");
    re.captures_iter(text)
        .map(|c| c[1].trim().to_string())
        .collect()
}

static VERDICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").expect("static regex"));
static JUSTIFICATION_SPAN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<justification>.*?</justification>").expect("static regex"));

/// First standalone YES/NO outside the justification tags; `None` when absent.
pub fn parse_verdict(text: &str) -> Option<bool> {
    let outside = JUSTIFICATION_SPAN.replace_all(text, " ");
    VERDICT
        .captures(&outside)
        .map(|c| c[1].eq_ignore_ascii_case("yes"))
}

// ---------------------------------------------------------------------------
// diagnostics

static UNKNOWN_IDENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"unknown identifier '([^']+)'").expect("static regex"));
static UNKNOWN_CONST: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"unknown constant '([^']+)'").expect("static regex"));

pub fn extract_missing_identifiers(diags: &[Diagnostic]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for d in diags {
        for re in [&*UNKNOWN_IDENT, &*UNKNOWN_CONST] {
            for cap in re.captures_iter(&d.message) {
                out.insert(cap[1].to_string());
            }
        }
    }
    out
}

/// Error feedback for correction prompts: the checked source, then one block
/// per diagnostic with its offending line.
pub fn render_feedback(source: &str, diags: &[Diagnostic]) -> String {
    let lines: Vec<&str> = source.lines().collect();
    let mut out = format!("```lean4\n{}\n```\n", source.trim_end());
    for d in diags {
        out.push('\n');
        out.push_str(&d.to_string());
        out.push('\n');
        let offending = d
            .line
            .and_then(|l| lines.get((l as usize).checked_sub(1)?))
            .copied();
        if let Some(src_line) = offending {
            out.push_str(&format!("```lean4\n{src_line}\n```\n"));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// declarations

static DECL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?m)^(?:@\[[^\]\n]*\][ \t]*\n?)?(?:(?:private|protected|noncomputable|nonrec)[ \t]+)*(theorem|lemma|example|def|abbrev|instance)\b",
    )
    .expect("static regex")
});

/// A top-level declaration found at column 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declaration {
    pub keyword: String,
    pub name: Option<String>,
    /// Byte range in the original source.
    pub start: usize,
    pub end: usize,
}

impl Declaration {
    pub fn is_theorem(&self) -> bool {
        self.keyword == "theorem" || self.keyword == "lemma"
    }
}

fn read_ident(s: &str) -> Option<&str> {
    let s = s.trim_start();
    let end = s
        .char_indices()
        .find(|&(_, c)| !(is_ident_char(c) || c == '.' || c == '«' || c == '»'))
        .map_or(s.len(), |(i, _)| i);
    (end > 0).then(|| &s[..end])
}

pub fn declarations(src: &str) -> Vec<Declaration> {
    let masked = mask(src);
    let starts: Vec<(usize, usize, String)> = DECL
        .captures_iter(&masked)
        .map(|c| {
            let m = c.get(0).unwrap();
            let kw = c.get(1).unwrap();
            (m.start(), kw.end(), kw.as_str().to_string())
        })
        .collect();
    let mut out = Vec::with_capacity(starts.len());
    for (i, (start, kw_end, keyword)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(src.len(), |n| n.0);
        let name = if keyword == "example" || keyword == "instance" {
            None
        } else {
            read_ident(&masked[*kw_end..end]).map(str::to_string)
        };
        out.push(Declaration {
            keyword: keyword.clone(),
            name,
            start: *start,
            end,
        });
    }
    out
}

/// Names of every `theorem`/`lemma` declared at top level.
pub fn declared_theorem_names(src: &str) -> Vec<String> {
    declarations(src)
        .into_iter()
        .filter(Declaration::is_theorem)
        .filter_map(|d| d.name)
        .collect()
}

/// Offset of the first `:=` at bracket depth 0 in `masked[from..to]`.
fn top_level_assign(masked: &str, from: usize, to: usize) -> Option<usize> {
    let mut depth: i64 = 0;
    let mut prev_colon: Option<usize> = None;
    for (off, c) in masked[from..to].char_indices() {
        let i = from + off;
        match c {
            '(' | '[' | '{' | '⟨' => depth += 1,
            ')' | ']' | '}' | '⟩' => depth -= 1,
            '=' if depth <= 0 && prev_colon == Some(i - 1) => return Some(i - 1),
            _ => {}
        }
        prev_colon = (c == ':').then_some(i);
    }
    None
}

/// The declaration text before its proof, e.g. `theorem t (n : ℕ) : n = n`.
pub fn statement_head(decl_src: &str) -> &str {
    let masked = mask(decl_src);
    match top_level_assign(&masked, 0, masked.len()) {
        Some(at) => decl_src[..at].trim_end(),
        None => decl_src.trim_end(),
    }
}

/// Replace the proof of a single declaration by `sorry`.
pub fn with_sorry_proof(decl_src: &str) -> String {
    format!("{} := by sorry", statement_head(decl_src))
}

/// Split a Lean file into its prelude (imports, options, opens) and the
/// declarations that follow.
pub fn split_prelude(src: &str) -> (&str, &str) {
    match declarations(src).first() {
        Some(d) => (src[..d.start].trim_end(), &src[d.start..]),
        None => (src.trim_end(), ""),
    }
}

/// Drop `import` lines and any line repeated from `header` that precede the
/// first declaration. Models often echo the prelude back.
pub fn strip_echoed_prelude(candidate: &str, header: &str) -> String {
    let header_lines: HashSet<&str> = header
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let (prelude, rest) = split_prelude(candidate);
    if rest.is_empty() {
        return candidate.trim().to_string();
    }
    let kept: Vec<&str> = prelude
        .lines()
        .filter(|l| {
            let t = l.trim();
            !(t.starts_with("import ") || header_lines.contains(t))
        })
        .collect();
    let kept = kept.join("\n");
    let kept = kept.trim();
    if kept.is_empty() {
        rest.trim().to_string()
    } else {
        format!("{kept}\n{}", rest.trim())
    }
}

/// The top-level declaration named `name`, if present.
pub fn take_declaration<'a>(src: &'a str, name: &str) -> Option<&'a str> {
    declarations(src)
        .into_iter()
        .find(|d| d.name.as_deref() == Some(name))
        .map(|d| src[d.start..d.end].trim_end())
}

/// Rename whole-identifier occurrences of `old` outside comments and strings.
pub fn rename_identifier(src: &str, old: &str, new: &str) -> String {
    let masked = mask(src);
    let mut out = String::with_capacity(src.len());
    let mut last = 0;
    for at in word_offsets(&masked, old) {
        out.push_str(&src[last..at]);
        out.push_str(new);
        last = at + old.len();
    }
    out.push_str(&src[last..]);
    out
}

// ---------------------------------------------------------------------------
// sketch analysis

fn line_starts(src: &str) -> Vec<usize> {
    std::iter::once(0)
        .chain(src.match_indices('\n').map(|(i, _)| i + 1))
        .collect()
}

fn line_of(starts: &[usize], offset: usize) -> usize {
    starts.partition_point(|&s| s <= offset) - 1
}

fn indent_of(line: &str) -> usize {
    line.chars().take_while(|c| *c == ' ' || *c == '\t').count()
}

struct HaveSpan {
    name: Option<String>,
    line: usize,
    body: std::ops::Range<usize>,
}

fn have_spans(masked: &str) -> Vec<HaveSpan> {
    let starts = line_starts(masked);
    let lines: Vec<&str> = masked.split('\n').collect();
    let mut spans = Vec::new();
    for at in word_offsets(masked, "have") {
        let line = line_of(&starts, at);
        let indent = indent_of(lines[line]);
        // Block end: first later non-blank line indented no deeper than the have line.
        let mut end_line = line + 1;
        while end_line < lines.len() {
            let l = lines[end_line];
            if !l.trim().is_empty() && indent_of(l) <= indent {
                break;
            }
            end_line += 1;
        }
        let block_end = if end_line < lines.len() {
            starts[end_line]
        } else {
            masked.len()
        };
        let after = &masked[at + 4..block_end];
        let trimmed = after.trim_start();
        let name = if trimmed.starts_with(':') {
            None
        } else {
            read_ident(trimmed)
                .filter(|n| !n.starts_with('⟨'))
                .map(str::to_string)
        };
        let body_start = top_level_assign(masked, at + 4, block_end)
            .map(|p| p + 2)
            .unwrap_or_else(|| {
                // tactic-style `have h : P` with the proof on following lines
                let line_end = starts.get(line + 1).copied().unwrap_or(masked.len());
                line_end.min(block_end)
            });
        if name.is_none() && !trimmed.starts_with(':') {
            // destructuring patterns and similar; not a subgoal
            continue;
        }
        spans.push(HaveSpan {
            name,
            line,
            body: body_start..block_end,
        });
    }
    spans
}

/// Structural summary of a sketch's `have` subgoals and `sorry` placeholders.
pub fn analyze_sketch(sketch: &str) -> Result<SketchAnalysis, TextError> {
    let masked = mask(sketch);
    let sorries = word_offsets(&masked, "sorry");
    let spans = have_spans(&masked);
    let mut a = SketchAnalysis {
        total_sorry_count: sorries.len(),
        ..Default::default()
    };
    for (i, s) in spans.iter().enumerate() {
        let Some(name) = &s.name else {
            a.anonymous_have_lines.push(s.line + 1);
            continue;
        };
        a.have_names.push(name.clone());
        if sorries.iter().any(|o| s.body.contains(o)) {
            a.sorried_haves.push(name.clone());
        }
        let start = s.body.start;
        if spans
            .iter()
            .enumerate()
            .any(|(j, o)| j != i && o.body.start < start && o.body.contains(&start))
        {
            a.nested_haves.push(name.clone());
        }
    }
    a.sorried_have_count = a.sorried_haves.len();
    a.main_goal_has_sorry = sorries
        .iter()
        .any(|o| !spans.iter().any(|s| s.body.contains(o)));

    let mut seen = HashSet::new();
    let mut dups: Vec<String> = a
        .have_names
        .iter()
        .filter(|n| !seen.insert(n.as_str()))
        .cloned()
        .collect();
    if !dups.is_empty() {
        dups.dedup();
        return Err(TextError::DuplicateHaves(dups));
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// line counting and assembly

/// Non-blank, non-comment lines after the `:=` that opens the first
/// declaration's proof. Code on the `:=` line itself (other than a lone `by`)
/// counts as one line.
pub fn count_proof_lines(proof: &str) -> usize {
    let masked = mask(proof);
    let from = declarations(proof).first().map_or(0, |d| d.start);
    let Some(assign) = top_level_assign(&masked, from, masked.len()) else {
        return masked.lines().filter(|l| !l.trim().is_empty()).count();
    };
    let rest = &masked[assign + 2..];
    let mut lines = rest.split('\n');
    let first = lines.next().unwrap_or("").trim();
    let first = first.strip_prefix("by").map_or(first, |r| {
        if r.is_empty() || r.starts_with(char::is_whitespace) {
            r.trim()
        } else {
            first
        }
    });
    let mut n = usize::from(!first.is_empty());
    n += lines.filter(|l| !l.trim().is_empty()).count();
    n
}

/// Lines in an emitted file, the unit used for proof-length reports.
pub fn count_file_lines(src: &str) -> usize {
    src.lines().count()
}

fn tidy(s: &str) -> &str {
    let s = s.trim_end();
    let mut start = 0;
    for line in s.split_inclusive('\n') {
        if line.trim().is_empty() {
            start += line.len();
        } else {
            break;
        }
    }
    &s[start..]
}

/// Non-empty parts, each stripped of surrounding blank lines, separated by one
/// blank line and ending in a newline.
pub fn concat_sources(parts: &[&str]) -> String {
    let mut out = parts
        .iter()
        .map(|p| tidy(p))
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n");
    out.push('\n');
    out
}

/// Header, blank line, helpers separated by blank lines, blank line, main.
/// An empty header yields just the helpers and main, for embedding in a parent.
pub fn assemble_final_source(
    header: &str,
    helpers: &[String],
    assembled_main: &str,
) -> Result<String, TextError> {
    if let Some(i) = helpers.iter().position(|h| contains_sorry(h)) {
        return Err(TextError::HelperHasSorry(i));
    }
    if contains_sorry(assembled_main) {
        return Err(TextError::MainHasSorry);
    }
    let mut parts: Vec<&str> = Vec::with_capacity(helpers.len() + 2);
    parts.push(header);
    parts.extend(helpers.iter().map(String::as_str));
    parts.push(assembled_main);
    Ok(concat_sources(&parts))
}
