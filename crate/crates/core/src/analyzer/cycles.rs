//! Elementary-cycle enumeration (Johnson's algorithm).

use std::collections::BTreeSet;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};

/// Result of [`elementary_cycles`]. Each cycle starts at its smallest node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleSearch {
    pub cycles: Vec<Vec<usize>>,
    pub truncated: bool,
}

struct Search<'a> {
    adj: &'a [Vec<usize>],
    in_comp: Vec<bool>,
    blocked: Vec<bool>,
    blocked_by: Vec<BTreeSet<usize>>,
    stack: Vec<usize>,
    out: Vec<Vec<usize>>,
    cap: usize,
}

impl Search<'_> {
    fn full(&self) -> bool {
        self.out.len() > self.cap
    }

    fn unblock(&mut self, v: usize) {
        let mut work = vec![v];
        while let Some(u) = work.pop() {
            if !self.blocked[u] {
                continue;
            }
            self.blocked[u] = false;
            work.extend(std::mem::take(&mut self.blocked_by[u]));
        }
    }

    fn circuit(&mut self, v: usize, start: usize) -> bool {
        let mut found = false;
        self.stack.push(v);
        self.blocked[v] = true;
        for &w in &self.adj[v] {
            if self.full() {
                break;
            }
            if !self.in_comp[w] {
                continue;
            }
            if w == start {
                self.out.push(self.stack.clone());
                found = true;
            } else if !self.blocked[w] && self.circuit(w, start) {
                found = true;
            }
        }
        if found {
            self.unblock(v);
        } else {
            for &w in &self.adj[v] {
                if self.in_comp[w] {
                    self.blocked_by[w].insert(v);
                }
            }
        }
        self.stack.pop();
        found
    }
}

/// Component of `start` in the subgraph induced by nodes `>= start`.
fn component_of(n: usize, adj: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut g: DiGraph<usize, ()> = DiGraph::new();
    let idx: Vec<NodeIndex> = (start..n).map(|v| g.add_node(v)).collect();
    for v in start..n {
        for &w in &adj[v] {
            if w >= start {
                g.add_edge(idx[v - start], idx[w - start], ());
            }
        }
    }
    let mut in_comp = vec![false; n];
    for comp in tarjan_scc(&g) {
        if comp.iter().any(|&i| g[i] == start) {
            for i in comp {
                in_comp[g[i]] = true;
            }
        }
    }
    in_comp
}

/// Every elementary cycle of the directed graph on nodes `0..n`, including
/// self-loops, stopping after `cap` cycles.
pub fn elementary_cycles(n: usize, edges: &[(usize, usize)], cap: usize) -> CycleSearch {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let mut search = Search {
        adj: &adj,
        in_comp: Vec::new(),
        blocked: vec![false; n],
        blocked_by: vec![BTreeSet::new(); n],
        stack: Vec::new(),
        out: Vec::new(),
        cap,
    };
    for start in 0..n {
        if search.full() {
            break;
        }
        search.in_comp = component_of(n, &adj, start);
        let nontrivial = search.in_comp.iter().filter(|&&c| c).count() > 1 || adj[start].contains(&start);
        if !nontrivial {
            continue;
        }
        for v in start..n {
            search.blocked[v] = false;
            search.blocked_by[v].clear();
        }
        search.circuit(start, start);
    }
    let truncated = search.full();
    let mut cycles = search.out;
    cycles.truncate(cap);
    cycles.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    CycleSearch { cycles, truncated }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(n: usize, edges: &[(usize, usize)]) -> BTreeSet<Vec<usize>> {
        let has = |a: usize, b: usize| edges.contains(&(a, b));
        let mut out = BTreeSet::new();
        fn extend(
            path: &mut Vec<usize>,
            n: usize,
            has: &dyn Fn(usize, usize) -> bool,
            out: &mut BTreeSet<Vec<usize>>,
        ) {
            let (first, last) = (path[0], *path.last().unwrap());
            if has(last, first) {
                out.insert(path.clone());
            }
            for v in first + 1..n {
                if !path.contains(&v) && has(last, v) {
                    path.push(v);
                    extend(path, n, has, out);
                    path.pop();
                }
            }
        }
        for s in 0..n {
            extend(&mut vec![s], n, &has, &mut out);
        }
        out
    }

    #[test]
    fn two_cycle_and_self_loop() {
        let r = elementary_cycles(3, &[(0, 1), (1, 0), (2, 2), (1, 2)], 1000);
        assert_eq!(r.cycles, vec![vec![2], vec![0, 1]]);
        assert!(!r.truncated);
    }

    #[test]
    fn acyclic() {
        assert!(elementary_cycles(4, &[(0, 1), (1, 2), (0, 3), (3, 2)], 10).cycles.is_empty());
    }

    #[test]
    fn complete_graph_counts() {
        // K4 with all directed edges: 6 two-cycles, 8 three-cycles, 6 four-cycles.
        let edges: Vec<_> = (0..4).flat_map(|a| (0..4).filter(move |&b| b != a).map(move |b| (a, b))).collect();
        let r = elementary_cycles(4, &edges, 1000);
        assert_eq!(r.cycles.len(), 20);
        let set: BTreeSet<_> = r.cycles.into_iter().collect();
        assert_eq!(set, brute(4, &edges));
    }

    #[test]
    fn cap_truncates() {
        let edges: Vec<_> = (0..5).flat_map(|a| (0..5).filter(move |&b| b != a).map(move |b| (a, b))).collect();
        let r = elementary_cycles(5, &edges, 7);
        assert_eq!(r.cycles.len(), 7);
        assert!(r.truncated);
    }

    proptest::proptest! {
        #[test]
        fn agrees_with_brute_force(
            n in 1usize..=8,
            raw in proptest::collection::vec((0usize..8, 0usize..8), 0..=16),
        ) {
            let edges: Vec<_> = raw.into_iter().map(|(a, b)| (a % n, b % n)).collect();
            let fast: BTreeSet<_> = elementary_cycles(n, &edges, usize::MAX - 1).cycles.into_iter().collect();
            proptest::prop_assert_eq!(fast, brute(n, &edges));
        }
    }
}
