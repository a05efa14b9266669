//! Extension expressions: binary trees of subgraph joins, with a linear ASCII
//! form that round-trips through the parser.
//!
//! Grammar (whitespace allowed between elements):
//!
//! ```text
//! expr     := leaf | attached "U" attached
//! attached := "(" expr ")" "->" token
//! leaf     := "{" token "}"
//! token    := [A-Za-z0-9_']+
//! ```
//!
//! `({a})->a U ({b})->b` joins the singleton subgraphs `a` and `b` with an
//! edge from attach node `a` to attach node `b`. Evaluation is neither
//! commutative nor associative: structurally different trees denote different
//! generation processes.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{EdgeId, GraphError, MoGraph, NodeId, SubgraphId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtensionExpr {
    Leaf {
        token: String,
    },
    Join {
        left: Box<ExtensionExpr>,
        /// Attach node in the left operand, named by token.
        left_attach: String,
        right: Box<ExtensionExpr>,
        right_attach: String,
    },
}

impl ExtensionExpr {
    pub fn leaf(token: &str) -> Self {
        ExtensionExpr::Leaf {
            token: token.to_string(),
        }
    }

    pub fn join(left: ExtensionExpr, left_attach: &str, right: ExtensionExpr, right_attach: &str) -> Self {
        ExtensionExpr::Join {
            left: Box::new(left),
            left_attach: left_attach.to_string(),
            right: Box::new(right),
            right_attach: right_attach.to_string(),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ExtensionExpr::Leaf { .. } => 1,
            ExtensionExpr::Join { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }
}

/// Parse failure with a 1-based byte offset into the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl core::fmt::Display for ParseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "syntax error at offset {}: {}", self.offset, self.message)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExprError {
    UnknownAttach { token: String },
    AmbiguousAttach { token: String },
    Graph(GraphError),
}

impl core::fmt::Display for ExprError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ExprError::UnknownAttach { token } => {
                write!(f, "attach node '{token}' not in operand subgraph")
            }
            ExprError::AmbiguousAttach { token } => {
                write!(f, "attach node '{token}' matches several nodes")
            }
            ExprError::Graph(g) => write!(f, "{g}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ExprError {}

impl From<GraphError> for ExprError {
    fn from(g: GraphError) -> Self {
        ExprError::Graph(g)
    }
}

fn is_token_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'\''
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: &str) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.pos + 1,
            message: message.to_string(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => self.err(&format!("expected '{}', found '{}'", c as char, got as char)),
            None => self.err(&format!("expected '{}', found end of input", c as char)),
        }
    }

    fn token(&mut self) -> Result<String, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && is_token_char(self.s[self.pos]) {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected token");
        }
        Ok(core::str::from_utf8(&self.s[start..self.pos])
            .expect("token chars are ascii")
            .to_string())
    }

    /// attached := "(" expr ")" "->" token
    fn attached(&mut self) -> Result<(ExtensionExpr, String), ParseError> {
        self.expect(b'(')?;
        let e = self.expr()?;
        self.expect(b')')?;
        self.expect(b'-')?;
        self.expect(b'>')?;
        let attach = self.token()?;
        Ok((e, attach))
    }

    fn expr(&mut self) -> Result<ExtensionExpr, ParseError> {
        match self.peek() {
            Some(b'{') => {
                self.pos += 1;
                let tok = self.token()?;
                self.expect(b'}')?;
                Ok(ExtensionExpr::Leaf { token: tok })
            }
            Some(b'(') => {
                let (left, left_attach) = self.attached()?;
                self.skip_ws();
                if self.s.get(self.pos) != Some(&b'U') {
                    return self.err("expected 'U'");
                }
                self.pos += 1;
                let (right, right_attach) = self.attached()?;
                Ok(ExtensionExpr::Join {
                    left: Box::new(left),
                    left_attach,
                    right: Box::new(right),
                    right_attach,
                })
            }
            Some(c) => self.err(&format!("expected '{{' or '(', found '{}'", c as char)),
            None => self.err("expected '{' or '(', found end of input"),
        }
    }
}

pub fn parse_expr(text: &str) -> Result<ExtensionExpr, ParseError> {
    let mut p = Parser {
        s: text.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.s.len() {
        return p.err("trailing input");
    }
    Ok(e)
}

pub fn print_expr(e: &ExtensionExpr) -> String {
    match e {
        ExtensionExpr::Leaf { token } => format!("{{{token}}}"),
        ExtensionExpr::Join {
            left,
            left_attach,
            right,
            right_attach,
        } => format!(
            "({})->{} U ({})->{}",
            print_expr(left),
            left_attach,
            print_expr(right),
            right_attach
        ),
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub graph: MoGraph,
    /// Subgraph denoted by the whole expression.
    pub root: SubgraphId,
    /// Edges in generation order (bottom-up, left subtree first).
    pub edges: Vec<EdgeId>,
    /// Orders of those edges, in the same sequence.
    pub edge_orders: Vec<u32>,
}

/// Evaluate an extension expression bottom-up. Each leaf becomes a fresh node
/// (in left-to-right order), so repeated token strings stay distinct nodes;
/// attach tokens must resolve uniquely inside their operand's node set.
pub fn eval_expr(e: &ExtensionExpr) -> Result<EvalResult, ExprError> {
    let mut tokens = Vec::new();
    collect_leaves(e, &mut tokens);
    let mut graph = MoGraph::new(&tokens);
    let mut edges = Vec::new();
    let mut next_leaf = 0u32;
    let root = eval_into(e, &mut graph, &mut edges, &mut next_leaf)?;
    let edge_orders = edges
        .iter()
        .map(|&id| graph.edges()[id.0 as usize].order)
        .collect();
    Ok(EvalResult {
        graph,
        root,
        edges,
        edge_orders,
    })
}

fn collect_leaves(e: &ExtensionExpr, out: &mut Vec<String>) {
    match e {
        ExtensionExpr::Leaf { token } => out.push(token.clone()),
        ExtensionExpr::Join { left, right, .. } => {
            collect_leaves(left, out);
            collect_leaves(right, out);
        }
    }
}

fn resolve_attach(graph: &MoGraph, sub: SubgraphId, token: &str) -> Result<NodeId, ExprError> {
    let s = graph.subgraph(sub)?;
    let mut found = None;
    for &n in &s.node_ids {
        if graph.token(n) == Some(token) {
            if found.is_some() {
                return Err(ExprError::AmbiguousAttach {
                    token: token.to_string(),
                });
            }
            found = Some(n);
        }
    }
    found.ok_or(ExprError::UnknownAttach {
        token: token.to_string(),
    })
}

fn eval_into(
    e: &ExtensionExpr,
    graph: &mut MoGraph,
    edges: &mut Vec<EdgeId>,
    next_leaf: &mut u32,
) -> Result<SubgraphId, ExprError> {
    match e {
        ExtensionExpr::Leaf { .. } => {
            let node = NodeId(*next_leaf);
            *next_leaf += 1;
            Ok(graph.singleton(node)?)
        }
        ExtensionExpr::Join {
            left,
            left_attach,
            right,
            right_attach,
        } => {
            let l = eval_into(left, graph, edges, next_leaf)?;
            let r = eval_into(right, graph, edges, next_leaf)?;
            let v_m = resolve_attach(graph, l, left_attach)?;
            let v_n = resolve_attach(graph, r, right_attach)?;
            let (edge, sub) = graph.extend(l, v_m, r, v_n)?;
            edges.push(edge);
            Ok(sub)
        }
    }
}

/// Left-linear chain over tokens, attaching in sentence order: each step
/// joins the accumulated subgraph (attach at the last token) to the next
/// singleton. Produces edge orders 2, 3, ..., n.
pub fn sentence_chain(tokens: &[&str]) -> ExtensionExpr {
    assert!(!tokens.is_empty());
    let mut e = ExtensionExpr::leaf(tokens[0]);
    let mut last = tokens[0];
    for &t in &tokens[1..] {
        e = ExtensionExpr::join(e, last, ExtensionExpr::leaf(t), t);
        last = t;
    }
    e
}
