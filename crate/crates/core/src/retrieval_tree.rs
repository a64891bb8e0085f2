//! The adaptive retrieval tree: answer, look for gaps, spawn sub-queries,
//! answer those, and fold the results back up.
//!
//! Expansion is level-synchronous. All frontier nodes run gap analysis
//! concurrently, then the node budget is granted to their proposals in node
//! order, then every new child is answered concurrently. Within a branch each
//! step waits for the one before it. Because the grant is ordered and every
//! node logs calls under its own scopes, the finished tree is identical in
//! serial and parallel mode.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::exec::{map_slice, ExecMode};
use crate::llm::{
    detect_sentinel, render, CallLog, CallScope, ChatMessage, LlmClient, LlmError, Sentinel,
    TemplateId, UsageTotals,
};
use crate::planner::Outline;
use crate::reasoning::{candidates_from_snippets, Reasoner, ReasoningConfig, ReasoningTrace};
use crate::synthesis::{
    branch_synthesize, generate_initial_answer, generate_node_answer, ChildAnswer, CitedAnswer,
    Drafted, ReferenceList, SynthesisError,
};

pub const PATH_SEPARATOR: &str = " -> ";
pub const GAP_REASK: &str =
    "Please list the missing information, or state that the answer contains no information gaps.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub max_children_per_node: usize,
    pub max_total_nodes: usize,
    pub top_k_papers: usize,
    pub snippet_k: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 2,
            max_children_per_node: 4,
            max_total_nodes: 20,
            top_k_papers: 10,
            snippet_k: crate::corpus::DEFAULT_SNIPPET_K,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        for (name, v) in [
            ("max_children_per_node", self.max_children_per_node),
            ("max_total_nodes", self.max_total_nodes),
            ("top_k_papers", self.top_k_papers),
            ("snippet_k", self.snippet_k),
        ] {
            if v == 0 {
                return Err(TreeError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    Answered,
    Synthesized,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapReport {
    pub text: String,
    pub complete: bool,
}

/// Logical clock readings. A node's clock starts one tick after its parent
/// finished expanding, so `created > parent.answered` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTimes {
    pub created: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answered: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expanded: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthesized: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalNode {
    pub node_id: String,
    pub query: String,
    pub parent: Option<String>,
    pub depth: usize,
    pub path: Vec<String>,
    /// Paper ids of the selected evidence, in rank order.
    pub evidence: Vec<String>,
    pub answer: Option<CitedAnswer>,
    /// The answer after the children were folded in.
    pub synthesized: Option<CitedAnswer>,
    pub children: Vec<String>,
    pub status: NodeStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<GapReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<ReasoningTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<NodeFailure>,
    pub times: NodeTimes,
    pub usage: UsageTotals,
    pub warnings: Vec<String>,
}

impl RetrievalNode {
    fn new(node_id: String, query: String, parent: Option<&RetrievalNode>, created: u64) -> Self {
        let (depth, mut path) = match parent {
            Some(p) => (p.depth + 1, p.path.clone()),
            None => (0, Vec::new()),
        };
        path.push(query.clone());
        Self {
            node_id,
            query,
            parent: parent.map(|p| p.node_id.clone()),
            depth,
            path,
            evidence: Vec::new(),
            answer: None,
            synthesized: None,
            children: Vec::new(),
            status: NodeStatus::Pending,
            gap: None,
            reasoning: None,
            error: None,
            times: NodeTimes {
                created,
                ..NodeTimes::default()
            },
            usage: UsageTotals::default(),
            warnings: Vec::new(),
        }
    }

    /// The best answer this node has: synthesized if available.
    pub fn final_answer(&self) -> Option<&CitedAnswer> {
        self.synthesized.as_ref().or(self.answer.as_ref())
    }
}

pub fn node_path(node: &RetrievalNode) -> String {
    node.path.join(PATH_SEPARATOR)
}

/// Scope label for one phase of one node; usage per node is the
/// `"{node_id}:"` prefix.
pub fn scope_label(node_id: &str, phase: &str) -> String {
    format!("{node_id}:{phase}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTree {
    /// Nodes in creation order; the root is first.
    pub nodes: Vec<RetrievalNode>,
    pub warnings: Vec<String>,
}

impl RetrievalTree {
    pub fn root(&self) -> &RetrievalNode {
        &self.nodes[0]
    }

    pub fn get(&self, node_id: &str) -> Option<&RetrievalNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Exactly one root, parent links agree with child lists, depths and
    /// paths are consistent, and every node is reachable from the root.
    pub fn check_well_formed(&self) -> Result<(), String> {
        let index: HashMap<&str, &RetrievalNode> =
            self.nodes.iter().map(|n| (n.node_id.as_str(), n)).collect();
        if index.len() != self.nodes.len() {
            return Err("duplicate node ids".into());
        }
        let roots: Vec<_> = self.nodes.iter().filter(|n| n.parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(format!("{} roots", roots.len()));
        }
        for n in &self.nodes {
            if n.path.len() != n.depth + 1 || n.path.last() != Some(&n.query) {
                return Err(format!("{}: path does not end at its query", n.node_id));
            }
            if let Some(pid) = &n.parent {
                let p = index.get(pid.as_str()).ok_or(format!("{}: missing parent", n.node_id))?;
                if n.depth != p.depth + 1 || !p.children.contains(&n.node_id) {
                    return Err(format!("{}: inconsistent parent link", n.node_id));
                }
                if n.times.created <= p.times.answered.unwrap_or(u64::MAX) {
                    return Err(format!("{}: created before its parent answered", n.node_id));
                }
            }
            for c in &n.children {
                let child = index.get(c.as_str()).ok_or(format!("{}: missing child {c}", n.node_id))?;
                if child.parent.as_deref() != Some(n.node_id.as_str()) {
                    return Err(format!("{c}: parent mismatch"));
                }
            }
        }
        let mut seen = 0;
        let mut stack = vec![roots[0]];
        while let Some(n) = stack.pop() {
            seen += 1;
            if seen > self.nodes.len() {
                return Err("cycle".into());
            }
            stack.extend(n.children.iter().filter_map(|c| index.get(c.as_str()).copied()));
        }
        if seen != self.nodes.len() {
            return Err("unreachable nodes".into());
        }
        Ok(())
    }

    /// Refreshes each node's usage from the call log.
    pub fn attach_usage(&mut self, log: &CallLog) {
        for n in &mut self.nodes {
            n.usage = log.totals_for_prefix(&format!("{}:", n.node_id));
        }
    }

    /// Every answer or synthesized answer anywhere in the tree.
    pub fn all_answers(&self) -> impl Iterator<Item = &CitedAnswer> {
        self.nodes
            .iter()
            .flat_map(|n| n.answer.iter().chain(n.synthesized.iter()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("invalid tree config: {0}")]
    InvalidConfig(String),
    #[error("root node failed at {}: {}", .failure.stage, .failure.message)]
    RootFailed {
        failure: NodeFailure,
        node: Box<RetrievalNode>,
    },
}

/// What a tree run needs besides its inputs.
pub struct TreeContext<'a> {
    pub client: &'a LlmClient,
    pub store: &'a CorpusStore,
    pub reasoning: &'a ReasoningConfig,
    pub log: Arc<CallLog>,
    pub mode: ExecMode,
}

impl TreeContext<'_> {
    fn scope(&self, node_id: &str, phase: &str) -> CallScope {
        CallScope::new(self.log.clone(), scope_label(node_id, phase))
    }
}

fn warn(warnings: &mut Vec<String>, message: String) {
    log::warn!("{message}");
    warnings.push(message);
}

fn is_complete_text(text: &str) -> bool {
    let lower = text.to_lowercase();
    lower.contains("no information gaps") || lower.contains("is complete")
}

/// Asks which outline requirements the answer misses.
pub fn identify_gaps(
    client: &LlmClient,
    scope: &CallScope,
    guidance: &str,
    answer: &CitedAnswer,
    query: &str,
    warnings: &mut Vec<String>,
) -> Result<GapReport, LlmError> {
    let prompt = render(
        TemplateId::GapIdentification,
        [("guidance", guidance), ("answer", answer.text.as_str()), ("query", query)],
    )?;
    let mut text = client
        .complete_delimited(scope, TemplateId::GapIdentification, &[ChatMessage::user(&prompt)])?
        .text;
    if text.is_empty() {
        log::warn!("gap analysis empty for {query:?}, re-asking once");
        text = client
            .complete_delimited(
                scope,
                TemplateId::GapIdentification,
                &[ChatMessage::user(format!("{prompt}\n{GAP_REASK}"))],
            )?
            .text;
        if text.is_empty() {
            warn(warnings, format!("gap analysis empty twice for {query:?}; treating the answer as complete"));
            return Ok(GapReport { text, complete: true });
        }
    }
    Ok(GapReport {
        complete: is_complete_text(&text),
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Proposal {
    Terminate,
    SubQueries(Vec<String>),
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*\(\s*\d+\s*\)\s*(.+?)\s*$").expect("static regex"))
}

/// Reads "(N) text" lines in order, dropping exact repeats. The sentinel
/// wins over any lines; a reply with neither is read as terminate.
pub fn parse_subqueries(text: &str, warnings: &mut Vec<String>) -> Proposal {
    if detect_sentinel(text, Sentinel::SubqueryTerminate) {
        return Proposal::Terminate;
    }
    let mut out: Vec<String> = Vec::new();
    for caps in numbered_line().captures_iter(text) {
        let q = caps[1].to_string();
        if !out.contains(&q) {
            out.push(q);
        }
    }
    if out.is_empty() {
        warn(warnings, "sub-query reply had no sentinel and no numbered query; terminating".into());
        return Proposal::Terminate;
    }
    Proposal::SubQueries(out)
}

pub fn propose_subqueries(
    client: &LlmClient,
    scope: &CallScope,
    gap: &GapReport,
    query: &str,
    warnings: &mut Vec<String>,
) -> Result<Proposal, LlmError> {
    if gap.complete {
        return Ok(Proposal::Terminate);
    }
    let prompt = render(
        TemplateId::SubqueryGeneration,
        [("gap_analysis", gap.text.as_str()), ("query", query)],
    )?;
    let reply = client.complete_delimited(scope, TemplateId::SubqueryGeneration, &[ChatMessage::user(prompt)])?;
    Ok(parse_subqueries(&reply.text, warnings))
}

/// Retrieval, rerank and drafting for one node. `draft` picks the answer
/// prompt: the initial-answer prompt at the root, the node prompt elsewhere.
fn answer_node<F>(ctx: &TreeContext<'_>, snippet_k: usize, mut node: RetrievalNode, draft: F) -> RetrievalNode
where
    F: FnOnce(&CallScope, ReferenceList) -> Result<Drafted, SynthesisError>,
{
    let scope = ctx.scope(&node.node_id, "answer");
    let path = node_path(&node);
    let fail = |mut node: RetrievalNode, stage: &str, message: String| {
        log::warn!("node {} failed at {stage}: {message}", node.node_id);
        node.status = NodeStatus::Failed;
        node.error = Some(NodeFailure {
            stage: stage.to_string(),
            message,
        });
        node
    };
    let hits = match ctx.store.retrieve_snippets(&node.query, snippet_k) {
        Ok(h) => h,
        Err(e) => return fail(node, "retrieval", e.to_string()),
    };
    let p0 = candidates_from_snippets(ctx.store, &hits);
    if p0.is_empty() {
        return fail(node, "retrieval", "retrieval returned no snippets".to_string());
    }
    let reasoner = Reasoner {
        client: ctx.client,
        store: ctx.store,
        config: ctx.reasoning,
    };
    let outcome = match reasoner.rerank_and_filter(&scope, &node.query, &path, &p0) {
        Ok(o) => o,
        Err(f) => {
            node.reasoning = Some(*f.trace);
            return fail(node, &format!("rerank/{:?}", f.stage).to_lowercase(), f.message);
        }
    };
    node.warnings.extend(outcome.trace.warnings.iter().cloned());
    node.reasoning = Some(outcome.trace);
    node.evidence = outcome.selected.iter().map(|c| c.paper_id.clone()).collect();
    if outcome.selected.is_empty() {
        return fail(node, "rerank", SynthesisError::NoEvidence.to_string());
    }
    let refs = ReferenceList::from_candidates(&outcome.selected);
    match draft(&scope, refs) {
        Ok(d) => {
            node.warnings.extend(d.warnings);
            node.answer = Some(d.answer);
            node.status = NodeStatus::Answered;
            node.times.answered = Some(node.times.created + 1);
            node
        }
        Err(e) => fail(node, "answer", e.to_string()),
    }
}

struct Expansion {
    gap: Option<GapReport>,
    proposals: Vec<String>,
    warnings: Vec<String>,
    error: Option<String>,
}

fn expand_frontier_node(ctx: &TreeContext<'_>, node: &RetrievalNode, guidance: &str) -> Expansion {
    let scope = ctx.scope(&node.node_id, "expand");
    let mut warnings = Vec::new();
    let answer = node.answer.as_ref().expect("frontier nodes are answered");
    let gap = match identify_gaps(ctx.client, &scope, guidance, answer, &node.query, &mut warnings) {
        Ok(g) => g,
        Err(e) => {
            return Expansion {
                gap: None,
                proposals: Vec::new(),
                warnings,
                error: Some(e.to_string()),
            }
        }
    };
    let (proposals, error) = match propose_subqueries(ctx.client, &scope, &gap, &node.query, &mut warnings) {
        Ok(Proposal::Terminate) => (Vec::new(), None),
        Ok(Proposal::SubQueries(q)) => (q, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    Expansion {
        gap: Some(gap),
        proposals,
        warnings,
        error,
    }
}

/// Builds the root, then expands level by level until the depth limit,
/// the node budget, or every branch terminates.
pub fn run_adaptive_retrieval(
    ctx: &TreeContext<'_>,
    root_query: &str,
    outline: &Outline,
    config: &TreeConfig,
) -> Result<RetrievalTree, TreeError> {
    config.validate()?;
    let reasoning = ReasoningConfig {
        top_k: config.top_k_papers,
        ..ctx.reasoning.clone()
    };
    let ctx = TreeContext {
        client: ctx.client,
        store: ctx.store,
        reasoning: &reasoning,
        log: ctx.log.clone(),
        mode: ctx.mode,
    };
    let root = RetrievalNode::new("n0".into(), root_query.to_string(), None, 1);
    let root = answer_node(&ctx, config.snippet_k, root, |scope, refs| {
        generate_initial_answer(ctx.client, scope, root_query, outline, refs)
    });
    if root.status == NodeStatus::Failed {
        let failure = root.error.clone().expect("failed nodes carry an error");
        return Err(TreeError::RootFailed {
            failure,
            node: Box::new(root),
        });
    }

    let guidance = outline.prompt_text();
    let mut tree = RetrievalTree {
        nodes: vec![root],
        warnings: Vec::new(),
    };
    let mut frontier: Vec<usize> = vec![0];
    let mut depth = 0;
    while !frontier.is_empty() && depth < config.max_depth {
        if tree.nodes.len() >= config.max_total_nodes {
            warn(
                &mut tree.warnings,
                format!("node budget of {} reached before depth {}", config.max_total_nodes, depth + 1),
            );
            break;
        }
        let parents: Vec<RetrievalNode> = frontier.iter().map(|&i| tree.nodes[i].clone()).collect();
        let expansions = map_slice(ctx.mode, &parents, |n| expand_frontier_node(&ctx, n, &guidance));

        // grant the budget in node order so the outcome is mode-independent
        let mut pending: Vec<RetrievalNode> = Vec::new();
        for (&pi, exp) in frontier.iter().zip(expansions) {
            let used = tree.nodes.len() + pending.len();
            let parent = &mut tree.nodes[pi];
            parent.warnings.extend(exp.warnings);
            parent.gap = exp.gap;
            let expanded_at = parent.times.answered.unwrap_or(parent.times.created) + 1;
            parent.times.expanded = Some(expanded_at);
            if let Some(e) = exp.error {
                warn(&mut parent.warnings, format!("expansion failed, treating as terminate: {e}"));
            }
            let mut proposals = exp.proposals;
            if proposals.len() > config.max_children_per_node {
                let dropped = proposals.split_off(config.max_children_per_node);
                warn(
                    &mut parent.warnings,
                    format!("dropped {} sub-quer(ies) over the per-node cap: {dropped:?}", dropped.len()),
                );
            }
            let room = config.max_total_nodes.saturating_sub(used);
            if proposals.len() > room {
                let dropped = proposals.split_off(room);
                warn(
                    &mut parent.warnings,
                    format!("dropped {} sub-quer(ies) over the node budget: {dropped:?}", dropped.len()),
                );
            }
            let parent_snapshot = parent.clone();
            for (k, q) in proposals.into_iter().enumerate() {
                let id = format!("{}.{}", parent_snapshot.node_id, k + 1);
                pending.push(RetrievalNode::new(id, q, Some(&parent_snapshot), expanded_at + 1));
            }
        }
        for child in &pending {
            let pid = child.parent.as_deref().expect("children have parents");
            let parent = tree.nodes.iter_mut().find(|n| n.node_id == pid).expect("parent exists");
            parent.children.push(child.node_id.clone());
        }

        let answered = map_slice(ctx.mode, &pending, |child| {
            let path = node_path(child);
            let query = child.query.clone();
            answer_node(&ctx, config.snippet_k, child.clone(), |scope, refs| {
                generate_node_answer(ctx.client, scope, &path, &query, refs)
            })
        });
        let start = tree.nodes.len();
        tree.nodes.extend(answered);
        frontier = (start..tree.nodes.len())
            .filter(|&i| tree.nodes[i].status == NodeStatus::Answered)
            .collect();
        depth += 1;
    }
    tree.attach_usage(&ctx.log);
    Ok(tree)
}

/// Bottom-up backtrack editing: deepest level first, each node folding in
/// its children's final answers. A failed synthesis call keeps the node's
/// own answer with a warning.
pub fn synthesize_tree(ctx: &TreeContext<'_>, tree: &mut RetrievalTree) {
    let deepest = tree.max_depth();
    for depth in (0..=deepest).rev() {
        let level: Vec<usize> = (0..tree.nodes.len())
            .filter(|&i| tree.nodes[i].depth == depth && tree.nodes[i].status == NodeStatus::Answered)
            .collect();
        let results = {
            let nodes = &tree.nodes;
            let index: HashMap<&str, &RetrievalNode> = nodes.iter().map(|n| (n.node_id.as_str(), n)).collect();
            map_slice(ctx.mode, &level, |&i| {
                let node = &nodes[i];
                let kids: Vec<&RetrievalNode> = node.children.iter().filter_map(|c| index.get(c.as_str()).copied()).collect();
                let children: Vec<ChildAnswer<'_>> = kids
                    .iter()
                    .map(|k| ChildAnswer {
                        query: k.query.as_str(),
                        answer: k.final_answer().filter(|_| k.status != NodeStatus::Failed),
                    })
                    .collect();
                let latest_child = kids.iter().filter_map(|k| k.times.synthesized.or(k.times.answered)).max();
                let scope = ctx.scope(&node.node_id, "synth");
                let answer = node.answer.as_ref().expect("answered");
                let result = branch_synthesize(ctx.client, &scope, &node_path(node), &node.query, answer, &children);
                (result, latest_child)
            })
        };
        for (&i, (result, latest_child)) in level.iter().zip(results) {
            let node = &mut tree.nodes[i];
            match result {
                Ok(d) => {
                    node.warnings.extend(d.warnings);
                    node.synthesized = Some(d.answer);
                }
                Err(e) => {
                    warn(&mut node.warnings, format!("branch synthesis failed, keeping the node answer: {e}"));
                    node.synthesized = node.answer.clone();
                }
            }
            let own = node.times.expanded.or(node.times.answered).unwrap_or(node.times.created);
            node.times.synthesized = Some(own.max(latest_child.unwrap_or(0)) + 1);
            node.status = NodeStatus::Synthesized;
        }
    }
    tree.attach_usage(&ctx.log);
}
