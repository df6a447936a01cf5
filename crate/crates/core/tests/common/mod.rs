//! Synthetic problem trees and the mock scripts that drive them.
//!
//! Every theorem here has the shape `theorem NAME (x : ℕ) (h : x = 1) : PROP`.
//! Proofs containing `bad_tactic` are rejected by the scripted verifier and
//! everything else is accepted, so a script decides which attempts succeed
//! purely through which texts it hands out.

#![allow(dead_code)]

use hilbert_core::backends::{MockBackends, ScriptBuilder};
use hilbert_core::config::RunBudget;
use hilbert_core::textops::Diagnostic;
use hilbert_core::{Config, Engine, ProblemStatement};

pub const HEADER: &str = "import Mathlib\nimport Aesop\n\nset_option maxHeartbeats 400000";
pub const BAD: &str = "bad_tactic";
pub const PARAMS: &str = "(x : ℕ) (h : x = 1)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum How {
    /// Closed by the prover race during validation.
    Prover,
    /// Closed by the first shallow-solve reply.
    Shallow,
    /// Needs its own decomposition.
    Decompose,
    /// Nothing ever works.
    Never,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub prop: String,
    pub how: How,
    pub children: Vec<Node>,
}

impl Node {
    pub fn leaf(name: &str, how: How) -> Self {
        Self {
            name: name.to_string(),
            prop: format!("P_{name} x"),
            how,
            children: Vec::new(),
        }
    }

    pub fn split(name: &str, children: Vec<Node>) -> Self {
        Self {
            name: name.to_string(),
            prop: format!("P_{name} x"),
            how: How::Decompose,
            children,
        }
    }

    pub fn head(&self) -> String {
        format!("theorem {} {PARAMS} : {}", self.name, self.prop)
    }

    pub fn statement(&self) -> String {
        format!("{} := by sorry", self.head())
    }

    pub fn good(&self) -> String {
        format!("{} := by\n  subst h\n  simp", self.head())
    }

    pub fn bad(&self) -> String {
        format!("{} := by\n  {BAD}", self.head())
    }

    /// A failing proof with `n` counted proof lines.
    pub fn bad_with_lines(&self, n: usize) -> String {
        let mut s = format!("{} := by\n  {BAD}", self.head());
        for i in 1..n {
            s.push_str(&format!("\n  simp only [step_{i}]"));
        }
        s
    }

    pub fn sketch(&self) -> String {
        let mut s = format!("{} := by\n", self.head());
        for c in &self.children {
            s.push_str(&format!("  have {} : {} := by\n    sorry\n", c.name, c.prop));
        }
        s.push_str("  simp_all");
        s
    }

    pub fn assembled(&self) -> String {
        let mut s = format!("{} := by\n", self.head());
        for c in &self.children {
            s.push_str(&format!("  have {0} := {0} x h\n", c.name));
        }
        s.push_str("  simp_all");
        s
    }

    pub fn problem(&self) -> ProblemStatement {
        ProblemStatement::root(self.name.clone(), HEADER, self.statement()).unwrap()
    }
}

pub fn fence(code: &str) -> String {
    format!("```lean4\n{code}\n```")
}

pub fn extraction_reply(children: &[&Node]) -> String {
    let mut s = String::from("Here are the subgoals.\n\n");
    for c in children {
        s.push_str(&fence(&format!("theorem {} {PARAMS} : {} := by\n  sorry", c.name, c.prop)));
        s.push_str("\n\n");
    }
    s
}

pub fn verdicts() -> ScriptBuilder {
    ScriptBuilder::new()
        .verdict(
            BAD,
            false,
            &[Diagnostic::error("unknown tactic 'bad_tactic'").at(3, 3)],
        )
        .verdict("", true, &[])
}

/// Small budget used by the scripted suites.
pub fn budget() -> RunBudget {
    RunBudget {
        k_initial_proof: 2,
        k_formal_proof: 2,
        k_sketch_attempts: 1,
        k_sketch_corrections: 1,
        k_informal_passes: 1,
        k_proof_correction: 0,
        k_theorem_corrections: 1,
        k_subgoal_error_corrections: 1,
        max_depth: 2,
        ..RunBudget::default()
    }
}

fn race(n: u32, good_last: Option<String>, bad: String) -> Vec<String> {
    let mut v = vec![bad; n as usize];
    if let Some(g) = good_last {
        *v.last_mut().unwrap() = g;
    }
    v
}

/// Full script for proving `root` by decomposition under budget `b`.
pub fn tree_script(root: &Node, b: &RunBudget) -> ScriptBuilder {
    let mut s = verdicts().prover(
        "direct_proof",
        &root.name,
        0,
        race(b.k_initial_proof, None, fence(&root.bad())),
    );
    s = decomposition_script(s, root, &root.name, b);
    s
}

fn decomposition_script(mut s: ScriptBuilder, node: &Node, key: &str, b: &RunBudget) -> ScriptBuilder {
    let kids: Vec<&Node> = node.children.iter().collect();
    s = s
        .reasoner("informal_proof", key, 0, "<informal_proof>Substitute and simplify.</informal_proof>")
        .reasoner("sketch", key, 0, fence(&node.sketch()))
        .reasoner("extract_subgoals", key, 0, extraction_reply(&kids))
        .reasoner("assembly", key, 0, fence(&node.assembled()));
    for c in &node.children {
        let ckey = format!("{key}/{}", c.name);
        let good = (c.how == How::Prover).then(|| fence(&c.good()));
        s = s
            .prover("validation_proof", &ckey, 0, race(b.k_formal_proof, good, fence(&c.bad())))
            .reasoner("correctness_check", &ckey, 0, "YES")
            .prover("subgoal_proof", &ckey, 0, race(b.k_formal_proof, None, fence(&c.bad())))
            .reasoner(
                "shallow_solve",
                &ckey,
                0,
                fence(&if c.how == How::Shallow { c.good() } else { c.bad() }),
            )
            .reasoner("proof_correction", &ckey, 0, fence(&c.bad()));
        if c.how == How::Decompose {
            s = decomposition_script(s, c, &ckey, b);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Calls {
    pub reasoner: u64,
    pub prover: u64,
    pub prover_requests: u64,
    pub verifier: u64,
    pub max_depth: u32,
}

/// Backend calls a successful run of `tree_script(root)` must make, counted
/// stage by stage from the tree shape alone.
pub fn expected_calls(root: &Node, b: &RunBudget) -> Calls {
    let mut c = Calls {
        prover: b.k_initial_proof as u64,
        prover_requests: 1,
        verifier: b.k_initial_proof as u64,
        ..Calls::default()
    };
    expected_node(root, 1, b, &mut c);
    c
}

fn expected_node(node: &Node, depth: u32, b: &RunBudget, c: &mut Calls) {
    let kf = b.k_formal_proof as u64;
    c.max_depth = c.max_depth.max(depth);
    // informal, sketch, extraction, assembly
    c.reasoner += 4;
    // sketch check, one statement check per subgoal, assembly check, final check
    c.verifier += 3 + node.children.len() as u64;
    for k in &node.children {
        // validation race: every candidate is verified
        c.prover += kf;
        c.prover_requests += 1;
        c.verifier += kf;
        if k.how == How::Prover {
            continue;
        }
        c.reasoner += 1; // correctness verdict
        c.prover += kf; // subgoal race
        c.prover_requests += 1;
        c.verifier += kf;
        if k.how == How::Shallow {
            c.reasoner += 1;
            c.verifier += 1;
            continue;
        }
        let per_pass = 1 + b.k_proof_correction as u64;
        c.reasoner += b.k_informal_passes as u64 * per_pass;
        c.verifier += b.k_informal_passes as u64 * per_pass;
        if k.how == How::Decompose && depth < b.max_depth {
            expected_node(k, depth + 1, b, c);
        }
    }
}

/// The emitted file a successful decomposition of `root` must produce.
pub fn expected_file(root: &Node, b: &RunBudget) -> String {
    let body = expected_body(root, 1, b);
    hilbert_core::problem::join_source(HEADER, &body)
}

fn expected_body(node: &Node, depth: u32, b: &RunBudget) -> String {
    let helpers: Vec<String> = node
        .children
        .iter()
        .map(|c| match c.how {
            How::Prover | How::Shallow => c.good(),
            _ => expected_body(c, depth + 1, b),
        })
        .collect();
    hilbert_core::textops::assemble_final_source("", &helpers, &node.assembled()).unwrap()
}

/// The four-leaf, two-level tree: p splits into h1 and h2, each of which
/// splits into two leaves the prover closes.
pub fn depth_two_tree() -> Node {
    Node::split(
        "p",
        vec![
            Node::split("h1", vec![Node::leaf("h1a", How::Prover), Node::leaf("h1b", How::Prover)]),
            Node::split("h2", vec![Node::leaf("h2a", How::Prover), Node::leaf("h2b", How::Prover)]),
        ],
    )
}

pub fn config_with(budget: RunBudget) -> Config {
    Config {
        budget,
        ..Config::default()
    }
}

pub fn engine(mock: &MockBackends, budget: RunBudget) -> Engine {
    let config = config_with(budget);
    let backends = mock.backends(&config);
    Engine::new(config, backends, None)
}
