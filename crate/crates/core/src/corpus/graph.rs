use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::CorpusError;

/// Forward (cites) and backward (cited-by) adjacency over paper ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CitationGraph {
    forward: BTreeMap<String, BTreeSet<String>>,
    backward: BTreeMap<String, BTreeSet<String>>,
}

/// Result of a citation expansion. `unknown_seeds` lists seeds that are not
/// in the corpus; they are skipped, not returned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Expansion {
    pub ids: BTreeSet<String>,
    pub unknown_seeds: Vec<String>,
}

impl CitationGraph {
    /// Builds the graph from `(paper, cited)` edges. Both ends must already be
    /// known corpus ids; filtering happens in the loader.
    pub fn from_edges<I, S>(nodes: impl IntoIterator<Item = S>, edges: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut graph = CitationGraph::default();
        for node in nodes {
            let node = node.into();
            graph.forward.entry(node.clone()).or_default();
            graph.backward.entry(node).or_default();
        }
        for (from, to) in edges {
            let (from, to) = (from.into(), to.into());
            graph
                .backward
                .entry(to.clone())
                .or_default()
                .insert(from.clone());
            graph.forward.entry(from).or_default().insert(to);
        }
        graph
    }

    pub fn contains(&self, id: &str) -> bool {
        self.forward.contains_key(id)
    }

    pub fn forward(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.forward.get(id)
    }

    pub fn backward(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.backward.get(id)
    }

    pub fn forward_map(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.forward
    }

    pub fn backward_map(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.backward
    }

    pub fn edge_count(&self) -> usize {
        self.forward.values().map(BTreeSet::len).sum()
    }

    /// Seeds plus every forward and backward neighbor within `hop_limit`
    /// hops. Only 0 and 1 are accepted.
    pub fn expand<'a>(
        &self,
        seeds: impl IntoIterator<Item = &'a str>,
        hop_limit: u32,
    ) -> Result<Expansion, CorpusError> {
        if hop_limit > 1 {
            return Err(CorpusError::HopLimit(hop_limit));
        }
        let mut out = Expansion::default();
        for seed in seeds {
            let Some(cited) = self.forward.get(seed) else {
                log::warn!("citation expansion: unknown seed id {seed}");
                out.unknown_seeds.push(seed.to_string());
                continue;
            };
            out.ids.insert(seed.to_string());
            if hop_limit == 0 {
                continue;
            }
            out.ids.extend(cited.iter().cloned());
            if let Some(citing) = self.backward.get(seed) {
                out.ids.extend(citing.iter().cloned());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> CitationGraph {
        CitationGraph::from_edges(["A", "B", "C"], [("A", "B"), ("B", "C")])
    }

    #[test]
    fn transpose_of_chain() {
        let g = chain();
        assert_eq!(g.backward("B").unwrap().iter().collect::<Vec<_>>(), ["A"]);
        assert_eq!(g.backward("C").unwrap().iter().collect::<Vec<_>>(), ["B"]);
        assert!(g.backward("A").unwrap().is_empty());
    }

    #[test]
    fn zero_and_one_hop() {
        let g = chain();
        let zero = g.expand(["B"], 0).unwrap();
        assert_eq!(zero.ids, BTreeSet::from(["B".to_string()]));
        let one = g.expand(["B"], 1).unwrap();
        let expected: BTreeSet<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        assert_eq!(one.ids, expected);
    }

    #[test]
    fn unknown_seed_skipped_and_hop_two_rejected() {
        let g = chain();
        let ex = g.expand(["Z", "A"], 1).unwrap();
        assert_eq!(ex.unknown_seeds, vec!["Z".to_string()]);
        assert!(ex.ids.contains("A") && ex.ids.contains("B"));
        assert!(!ex.ids.contains("Z"));
        assert!(matches!(g.expand(["A"], 2), Err(CorpusError::HopLimit(2))));
    }
}
