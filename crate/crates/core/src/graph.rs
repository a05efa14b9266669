//! Multi-order graphs: multigraphs over sentence tokens whose edges record
//! the subgraph pair they join and the order of the subgraph the join creates.
//!
//! A graph starts as one node per word, each wrapped in a registered
//! singleton subgraph of order 1. The only way to grow structure is
//! [`MoGraph::extend`]: pick an attach node in each of two registered
//! subgraphs, append an edge between the attach nodes, and register the
//! united subgraph. The edge's order equals the order of that related
//! subgraph, which for node-disjoint operands is the sum of the two operand
//! orders.
//!
//! Subgraph identity is structural (node set plus edge multiset) and interned,
//! so generating the same structure twice yields the same subgraph id with a
//! bumped generation count. Edges are never interned: a multigraph keeps
//! parallel edges, one per generation event.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::json::Json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EdgeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubgraphId(pub u32);

/// An n-order edge: endpoints, the subgraphs they belong to, the subgraph the
/// join created, and that subgraph's order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedEdge {
    pub id: EdgeId,
    pub source_node: NodeId,
    pub target_node: NodeId,
    pub source_subgraph: SubgraphId,
    pub target_subgraph: SubgraphId,
    pub related_subgraph: SubgraphId,
    pub order: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub id: SubgraphId,
    pub node_ids: BTreeSet<NodeId>,
    /// Edge instances from this subgraph's first generation.
    pub edge_ids: BTreeSet<EdgeId>,
    pub order: u32,
}

/// Structural edge content, independent of which generation event created it.
type EdgeKey = (u32, u32, u32, u32); // source node, target node, source sub, target sub

/// Structural subgraph identity: node set + edge multiset.
type SubgraphKey = (Vec<u32>, Vec<EdgeKey>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphError {
    UnknownNode(NodeId),
    UnknownSubgraph(SubgraphId),
    AttachNodeNotInSubgraph { node: NodeId, subgraph: SubgraphId },
    OverlappingSubgraphs { left: SubgraphId, right: SubgraphId },
}

impl core::fmt::Display for GraphError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GraphError::UnknownNode(n) => write!(f, "unknown node {}", n.0),
            GraphError::UnknownSubgraph(s) => write!(f, "unknown subgraph {}", s.0),
            GraphError::AttachNodeNotInSubgraph { node, subgraph } => {
                write!(f, "attach node {} not in subgraph {}", node.0, subgraph.0)
            }
            GraphError::OverlappingSubgraphs { left, right } => write!(
                f,
                "subgraphs {} and {} share nodes; use extend_overlapping",
                left.0, right.0
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GraphError {}

#[derive(Debug, Clone, Default)]
pub struct MoGraph {
    tokens: Vec<String>,
    edges: Vec<OrderedEdge>,
    subgraphs: Vec<Subgraph>,
    intern: BTreeMap<SubgraphKey, SubgraphId>,
    structural_keys: Vec<SubgraphKey>,
    generation_counts: Vec<u64>,
    singleton_ids: Vec<SubgraphId>,
}

impl MoGraph {
    /// One node per word, each registered as a singleton subgraph.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut g = MoGraph::default();
        for t in tokens {
            g.push_node(t.as_ref());
        }
        g
    }

    fn push_node(&mut self, token: &str) -> NodeId {
        let node = NodeId(self.tokens.len() as u32);
        self.tokens.push(token.to_string());
        let key: SubgraphKey = (alloc::vec![node.0], Vec::new());
        let id = SubgraphId(self.subgraphs.len() as u32);
        self.subgraphs.push(Subgraph {
            id,
            node_ids: BTreeSet::from([node]),
            edge_ids: BTreeSet::new(),
            order: 1,
        });
        self.intern.insert(key.clone(), id);
        self.structural_keys.push(key);
        self.generation_counts.push(1);
        self.singleton_ids.push(id);
        node
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, node: NodeId) -> Option<&str> {
        self.tokens.get(node.0 as usize).map(String::as_str)
    }

    pub fn singleton(&self, node: NodeId) -> Result<SubgraphId, GraphError> {
        self.singleton_ids
            .get(node.0 as usize)
            .copied()
            .ok_or(GraphError::UnknownNode(node))
    }

    pub fn edges(&self) -> &[OrderedEdge] {
        &self.edges
    }

    pub fn subgraphs(&self) -> &[Subgraph] {
        &self.subgraphs
    }

    pub fn subgraph(&self, id: SubgraphId) -> Result<&Subgraph, GraphError> {
        self.subgraphs
            .get(id.0 as usize)
            .ok_or(GraphError::UnknownSubgraph(id))
    }

    /// Times the structurally identical subgraph has been generated.
    pub fn generation_count(&self, id: SubgraphId) -> Result<u64, GraphError> {
        self.generation_counts
            .get(id.0 as usize)
            .copied()
            .ok_or(GraphError::UnknownSubgraph(id))
    }

    /// Join two node-disjoint subgraphs with a new edge from `v_m` (in `left`)
    /// to `v_n` (in `right`). Returns the new edge and the related subgraph.
    pub fn extend(
        &mut self,
        left: SubgraphId,
        v_m: NodeId,
        right: SubgraphId,
        v_n: NodeId,
    ) -> Result<(EdgeId, SubgraphId), GraphError> {
        self.extend_inner(left, v_m, right, v_n, false)
    }

    /// Variant that permits loops and node/edge overlaps between the two
    /// operands; the order is then the size of the united node set.
    pub fn extend_overlapping(
        &mut self,
        left: SubgraphId,
        v_m: NodeId,
        right: SubgraphId,
        v_n: NodeId,
    ) -> Result<(EdgeId, SubgraphId), GraphError> {
        self.extend_inner(left, v_m, right, v_n, true)
    }

    fn extend_inner(
        &mut self,
        left: SubgraphId,
        v_m: NodeId,
        right: SubgraphId,
        v_n: NodeId,
        allow_overlap: bool,
    ) -> Result<(EdgeId, SubgraphId), GraphError> {
        let l = self.subgraph(left)?.clone();
        let r = self.subgraph(right)?.clone();
        if !l.node_ids.contains(&v_m) {
            return Err(GraphError::AttachNodeNotInSubgraph {
                node: v_m,
                subgraph: left,
            });
        }
        if !r.node_ids.contains(&v_n) {
            return Err(GraphError::AttachNodeNotInSubgraph {
                node: v_n,
                subgraph: right,
            });
        }
        let disjoint = l.node_ids.is_disjoint(&r.node_ids);
        if !disjoint && !allow_overlap {
            return Err(GraphError::OverlappingSubgraphs { left, right });
        }

        let mut union_nodes = l.node_ids.clone();
        union_nodes.extend(r.node_ids.iter().copied());
        let order = union_nodes.len() as u32;
        debug_assert!(!disjoint || order == l.order + r.order);

        // Structural key of the united subgraph: operand edge multisets plus
        // the new edge's content.
        let new_edge_key: EdgeKey = (v_m.0, v_n.0, left.0, right.0);
        let mut edge_keys: Vec<EdgeKey> = Vec::new();
        edge_keys.extend(self.structural_keys[left.0 as usize].1.iter().copied());
        edge_keys.extend(self.structural_keys[right.0 as usize].1.iter().copied());
        edge_keys.push(new_edge_key);
        edge_keys.sort_unstable();
        let key: SubgraphKey = (
            union_nodes.iter().map(|n| n.0).collect(),
            edge_keys,
        );

        let edge_id = EdgeId(self.edges.len() as u32);
        let related = match self.intern.get(&key) {
            Some(&id) => {
                self.generation_counts[id.0 as usize] += 1;
                id
            }
            None => {
                let id = SubgraphId(self.subgraphs.len() as u32);
                let mut edge_ids = l.edge_ids.clone();
                edge_ids.extend(r.edge_ids.iter().copied());
                edge_ids.insert(edge_id);
                self.subgraphs.push(Subgraph {
                    id,
                    node_ids: union_nodes,
                    edge_ids,
                    order,
                });
                self.intern.insert(key.clone(), id);
                self.structural_keys.push(key);
                self.generation_counts.push(1);
                id
            }
        };

        self.edges.push(OrderedEdge {
            id: edge_id,
            source_node: v_m,
            target_node: v_n,
            source_subgraph: left,
            target_subgraph: right,
            related_subgraph: related,
            order,
        });
        Ok((edge_id, related))
    }

    /// Largest registered subgraph order; 1 for an edgeless non-empty graph,
    /// 0 for an empty one.
    pub fn max_subgraph_order(&self) -> u32 {
        self.subgraphs.iter().map(|s| s.order).max().unwrap_or(0)
    }

    /// Serialize nodes, edges (as 6-tuples plus order), and the subgraph
    /// registry to a JSON document.
    pub fn to_json(&self) -> String {
        let mut nodes = Json::array();
        for (i, t) in self.tokens.iter().enumerate() {
            nodes = nodes.item(&Json::object().num("id", i).str("token", t).finish());
        }
        let mut edges = Json::array();
        for e in &self.edges {
            edges = edges.item(
                &Json::object()
                    .num("id", e.id.0)
                    .num("source_node", e.source_node.0)
                    .num("target_node", e.target_node.0)
                    .num("source_subgraph", e.source_subgraph.0)
                    .num("target_subgraph", e.target_subgraph.0)
                    .num("related_subgraph", e.related_subgraph.0)
                    .num("order", e.order)
                    .finish(),
            );
        }
        let mut subs = Json::array();
        for s in &self.subgraphs {
            let mut ns = Json::array();
            for n in &s.node_ids {
                ns = ns.item_num(n.0);
            }
            let mut es = Json::array();
            for e in &s.edge_ids {
                es = es.item_num(e.0);
            }
            subs = subs.item(
                &Json::object()
                    .num("id", s.id.0)
                    .raw("nodes", &ns.finish())
                    .raw("edges", &es.finish())
                    .num("order", s.order)
                    .num("generated", self.generation_counts[s.id.0 as usize])
                    .finish(),
            );
        }
        Json::object()
            .raw("nodes", &nodes.finish())
            .raw("edges", &edges.finish())
            .raw("subgraphs", &subs.finish())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extend_two_singletons() {
        let mut g = MoGraph::new(&["a", "b"]);
        let sa = g.singleton(NodeId(0)).unwrap();
        let sb = g.singleton(NodeId(1)).unwrap();
        let (e, s) = g.extend(sa, NodeId(0), sb, NodeId(1)).unwrap();
        let edge = &g.edges()[e.0 as usize];
        assert_eq!(edge.order, 2);
        assert_eq!(edge.source_node, NodeId(0));
        assert_eq!(edge.target_node, NodeId(1));
        assert_eq!(edge.related_subgraph, s);
        assert_eq!(g.subgraph(s).unwrap().order, 2);
        assert_eq!(g.max_subgraph_order(), 2);
    }

    #[test]
    fn edgeless_graph_has_order_one() {
        let g = MoGraph::new(&["a", "b", "c"]);
        assert_eq!(g.max_subgraph_order(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn attach_node_must_belong_to_subgraph() {
        let mut g = MoGraph::new(&["a", "b"]);
        let sa = g.singleton(NodeId(0)).unwrap();
        let sb = g.singleton(NodeId(1)).unwrap();
        let err = g.extend(sa, NodeId(1), sb, NodeId(1)).unwrap_err();
        assert!(matches!(err, GraphError::AttachNodeNotInSubgraph { .. }));
    }

    #[test]
    fn unknown_subgraph_rejected() {
        let mut g = MoGraph::new(&["a"]);
        let err = g
            .extend(SubgraphId(9), NodeId(0), SubgraphId(0), NodeId(0))
            .unwrap_err();
        assert!(matches!(err, GraphError::UnknownSubgraph(_)));
    }

    #[test]
    fn disjointness_enforced_unless_flagged() {
        let mut g = MoGraph::new(&["a", "b", "c"]);
        let sa = g.singleton(NodeId(0)).unwrap();
        let sb = g.singleton(NodeId(1)).unwrap();
        let (_, sab) = g.extend(sa, NodeId(0), sb, NodeId(1)).unwrap();
        let err = g.extend(sab, NodeId(0), sb, NodeId(1)).unwrap_err();
        assert!(matches!(err, GraphError::OverlappingSubgraphs { .. }));
        // Loop within one subgraph: order stays at the union size.
        let (e, s) = g.extend_overlapping(sab, NodeId(1), sab, NodeId(0)).unwrap();
        assert_eq!(g.edges()[e.0 as usize].order, 2);
        assert_eq!(g.subgraph(s).unwrap().order, 2);
        assert_ne!(s, sab, "extra edge changes structural identity");
    }

    #[test]
    fn disjoint_order_is_sum_of_operand_orders() {
        let mut g = MoGraph::new(&["a", "b", "c", "d"]);
        let s: Vec<SubgraphId> = (0..4).map(|i| g.singleton(NodeId(i)).unwrap()).collect();
        let (_, ab) = g.extend(s[0], NodeId(0), s[1], NodeId(1)).unwrap();
        let (_, cd) = g.extend(s[2], NodeId(2), s[3], NodeId(3)).unwrap();
        let (e, abcd) = g.extend(ab, NodeId(1), cd, NodeId(2)).unwrap();
        assert_eq!(g.edges()[e.0 as usize].order, 2 + 2);
        assert_eq!(g.subgraph(abcd).unwrap().order, 4);
        // Every contained edge's nodes stay inside the subgraph node set.
        let sub = g.subgraph(abcd).unwrap();
        for &eid in &sub.edge_ids {
            let edge = &g.edges()[eid.0 as usize];
            assert!(sub.node_ids.contains(&edge.source_node));
            assert!(sub.node_ids.contains(&edge.target_node));
        }
    }

    #[test]
    fn repeated_generation_interned_and_counted() {
        let mut g = MoGraph::new(&["a", "b"]);
        let sa = g.singleton(NodeId(0)).unwrap();
        let sb = g.singleton(NodeId(1)).unwrap();
        let (e1, s1) = g.extend(sa, NodeId(0), sb, NodeId(1)).unwrap();
        let (e2, s2) = g.extend(sa, NodeId(0), sb, NodeId(1)).unwrap();
        assert_eq!(s1, s2, "same structure interns to one subgraph");
        assert_ne!(e1, e2, "parallel edges are kept");
        assert_eq!(g.generation_count(s1).unwrap(), 2);
        // A differently directed join is a different structure.
        let (_, s3) = g.extend(sb, NodeId(1), sa, NodeId(0)).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn edge_order_matches_subgraph_generation_order() {
        let mut g = MoGraph::new(&["a", "b", "c"]);
        let s: Vec<SubgraphId> = (0..3).map(|i| g.singleton(NodeId(i)).unwrap()).collect();
        let (_, ab) = g.extend(s[0], NodeId(0), s[1], NodeId(1)).unwrap();
        let (_, _abc) = g.extend(ab, NodeId(1), s[2], NodeId(2)).unwrap();
        // First-generation related subgraphs appear in edge order.
        let related: Vec<u32> = g.edges().iter().map(|e| e.related_subgraph.0).collect();
        let mut sorted = related.clone();
        sorted.sort_unstable();
        assert_eq!(related, sorted);
    }

    #[test]
    fn json_dump_is_stable() {
        let mut g = MoGraph::new(&["a", "b"]);
        let sa = g.singleton(NodeId(0)).unwrap();
        let sb = g.singleton(NodeId(1)).unwrap();
        g.extend(sa, NodeId(0), sb, NodeId(1)).unwrap();
        let json = g.to_json();
        assert_eq!(
            json,
            "{\"nodes\":[{\"id\":0,\"token\":\"a\"},{\"id\":1,\"token\":\"b\"}],\
             \"edges\":[{\"id\":0,\"source_node\":0,\"target_node\":1,\
             \"source_subgraph\":0,\"target_subgraph\":1,\"related_subgraph\":2,\"order\":2}],\
             \"subgraphs\":[{\"id\":0,\"nodes\":[0],\"edges\":[],\"order\":1,\"generated\":1},\
             {\"id\":1,\"nodes\":[1],\"edges\":[],\"order\":1,\"generated\":1},\
             {\"id\":2,\"nodes\":[0,1],\"edges\":[0],\"order\":2,\"generated\":1}]}"
        );
    }
}
