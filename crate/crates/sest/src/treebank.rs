//! Bracketed constituency trees and CoNLL-U dependency trees, parsed into
//! token-aligned in-memory structures.
//!
//! Everything here is a pure function over immutable inputs; trees produced
//! by external parsers are ingested as text, never computed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("CoNLL-U line {line}: {message}")]
    Conllu { line: usize, message: String },
    #[error("token index {index} out of range (sentence has {len} tokens)")]
    TokenIndex { index: usize, len: usize },
    #[error("invalid dependency structure: {0}")]
    Structure(String),
}

/// One surface token of a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 0-based position within its sentence.
    pub index: usize,
    pub text: String,
    /// Part-of-speech tag; may be empty when the source carries none.
    pub pos: String,
}

// ---------------------------------------------------------------------------
// Constituency trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum CNode {
    Phrase {
        label: String,
        parent: Option<usize>,
        children: Vec<usize>,
    },
    Leaf {
        text: String,
        parent: usize,
    },
}

/// Phrase-structure parse of a single sentence. Internal nodes carry grammar
/// category labels; leaves are the sentence tokens in order. Every leaf sits
/// under a preterminal node whose label is the token's POS tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstituencyTree {
    nodes: Vec<CNode>,
    root: usize,
    leaves: Vec<usize>,
}

impl ConstituencyTree {
    /// Number of leaves (= tokens).
    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn root_label(&self) -> &str {
        match &self.nodes[self.root] {
            CNode::Phrase { label, .. } => label,
            CNode::Leaf { .. } => unreachable!("root is always a phrase node"),
        }
    }

    /// The sentence tokens, left to right; each token's POS is its
    /// preterminal label.
    pub fn tokens(&self) -> Vec<Token> {
        self.leaves
            .iter()
            .enumerate()
            .map(|(i, &leaf)| {
                let (text, parent) = match &self.nodes[leaf] {
                    CNode::Leaf { text, parent } => (text.clone(), *parent),
                    CNode::Phrase { .. } => unreachable!(),
                };
                let pos = match &self.nodes[parent] {
                    CNode::Phrase { label, .. } => label.clone(),
                    CNode::Leaf { .. } => unreachable!(),
                };
                Token { index: i, text, pos }
            })
            .collect()
    }

    /// Label of the preterminal node directly above the given leaf.
    pub fn preterminal_label(&self, token_index: usize) -> Result<&str, TreebankError> {
        let leaf = *self.leaves.get(token_index).ok_or(TreebankError::TokenIndex {
            index: token_index,
            len: self.leaves.len(),
        })?;
        let parent = match &self.nodes[leaf] {
            CNode::Leaf { parent, .. } => *parent,
            CNode::Phrase { .. } => unreachable!(),
        };
        match &self.nodes[parent] {
            CNode::Phrase { label, .. } => Ok(label),
            CNode::Leaf { .. } => unreachable!(),
        }
    }

    /// Labels of the ancestor phrase nodes of a leaf, nearest first, root
    /// last. The preterminal POS node itself is excluded: the sequence holds
    /// phrase-category nodes only.
    pub fn path_to_root(&self, token_index: usize) -> Result<Vec<String>, TreebankError> {
        let leaf = *self.leaves.get(token_index).ok_or(TreebankError::TokenIndex {
            index: token_index,
            len: self.leaves.len(),
        })?;
        let preterminal = match &self.nodes[leaf] {
            CNode::Leaf { parent, .. } => *parent,
            CNode::Phrase { .. } => unreachable!(),
        };
        let mut path = Vec::new();
        let mut cur = match &self.nodes[preterminal] {
            CNode::Phrase { parent, .. } => *parent,
            CNode::Leaf { .. } => unreachable!(),
        };
        while let Some(id) = cur {
            match &self.nodes[id] {
                CNode::Phrase { label, parent, .. } => {
                    path.push(label.clone());
                    cur = *parent;
                }
                CNode::Leaf { .. } => unreachable!(),
            }
        }
        Ok(path)
    }

    /// Every non-preterminal phrase node with its label path (self first,
    /// root last) and inclusive leaf span.
    pub fn constituents(&self) -> Vec<Constituent> {
        let mut out = Vec::new();
        let mut leaf_pos = vec![0usize; self.nodes.len()];
        for (i, &leaf) in self.leaves.iter().enumerate() {
            leaf_pos[leaf] = i;
        }
        self.collect_constituents(self.root, &mut Vec::new(), &leaf_pos, &mut out);
        out
    }

    fn collect_constituents(
        &self,
        id: usize,
        path: &mut Vec<String>,
        leaf_pos: &[usize],
        out: &mut Vec<Constituent>,
    ) {
        let (label, children) = match &self.nodes[id] {
            CNode::Phrase { label, children, .. } => (label.clone(), children.clone()),
            CNode::Leaf { .. } => return,
        };
        let preterminal =
            children.len() == 1 && matches!(self.nodes[children[0]], CNode::Leaf { .. });
        if !preterminal {
            let (begin, end) = self.leaf_span(id, leaf_pos);
            let mut full_path = vec![label.clone()];
            full_path.extend(path.iter().rev().cloned());
            out.push(Constituent { label: label.clone(), path: full_path, begin, end });
        }
        path.push(label);
        for c in children {
            self.collect_constituents(c, path, leaf_pos, out);
        }
        path.pop();
    }

    fn leaf_span(&self, id: usize, leaf_pos: &[usize]) -> (usize, usize) {
        match &self.nodes[id] {
            CNode::Leaf { .. } => (leaf_pos[id], leaf_pos[id]),
            CNode::Phrase { children, .. } => {
                let mut begin = usize::MAX;
                let mut end = 0;
                for &c in children {
                    let (b, e) = self.leaf_span(c, leaf_pos);
                    begin = begin.min(b);
                    end = end.max(e);
                }
                (begin, end)
            }
        }
    }

    /// Canonical bracketing: label and children space-separated inside
    /// parentheses, leaves as "(POS word)".
    pub fn to_bracketed(&self) -> String {
        let mut out = String::new();
        self.write_node(self.root, &mut out);
        out
    }

    fn write_node(&self, id: usize, out: &mut String) {
        match &self.nodes[id] {
            CNode::Phrase { label, children, .. } => {
                out.push('(');
                out.push_str(label);
                for &c in children {
                    out.push(' ');
                    self.write_node(c, out);
                }
                out.push(')');
            }
            CNode::Leaf { text, .. } => out.push_str(text),
        }
    }
}

struct BracketParser<'a> {
    input: &'a [u8],
    pos: usize,
    nodes: Vec<CNode>,
    leaves: Vec<usize>,
}

impl<'a> BracketParser<'a> {
    fn new(text: &'a str) -> Self {
        BracketParser {
            input: text.as_bytes(),
            pos: 0,
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    fn err(&self, message: impl Into<String>) -> TreebankError {
        TreebankError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.input.len() && self.input[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.input.get(self.pos).copied()
    }

    fn atom(&mut self) -> Result<String, TreebankError> {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b == b'(' || b == b')' || b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a label or word"));
        }
        Ok(String::from_utf8_lossy(&self.input[start..self.pos]).into_owned())
    }

    // tree := '(' LABEL item+ ')' ; item := tree | WORD
    fn tree(&mut self, parent: Option<usize>) -> Result<usize, TreebankError> {
        self.skip_ws();
        if self.peek() != Some(b'(') {
            return Err(self.err("expected '('"));
        }
        self.pos += 1;
        self.skip_ws();
        let label = self.atom()?;
        let id = self.nodes.len();
        self.nodes.push(CNode::Phrase {
            label,
            parent,
            children: Vec::new(),
        });

        let mut children = Vec::new();
        let mut word_children = 0usize;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => {
                    let child = self.tree(Some(id))?;
                    children.push(child);
                }
                Some(_) => {
                    let text = self.atom()?;
                    let leaf = self.nodes.len();
                    self.nodes.push(CNode::Leaf { text, parent: id });
                    self.leaves.push(leaf);
                    children.push(leaf);
                    word_children += 1;
                }
                None => return Err(self.err("unbalanced parentheses: missing ')'")),
            }
        }
        if children.is_empty() {
            return Err(self.err("node has no children"));
        }
        // A node holding a bare word must be a preterminal: exactly one word,
        // no phrase siblings.
        if word_children > 0 && children.len() != 1 {
            return Err(self.err("leaf word mixed with siblings (missing preterminal)"));
        }
        if let CNode::Phrase { children: c, .. } = &mut self.nodes[id] {
            *c = children;
        }
        Ok(id)
    }
}

/// Parse one bracketed constituency tree. Surrounding whitespace is allowed;
/// trailing content is an error.
pub fn parse_constituency(text: &str) -> Result<ConstituencyTree, TreebankError> {
    let mut p = BracketParser::new(text);
    p.skip_ws();
    if p.peek().is_none() {
        return Err(TreebankError::Parse {
            offset: 0,
            message: "empty input".into(),
        });
    }
    let root = p.tree(None)?;
    p.skip_ws();
    if p.peek().is_some() {
        return Err(p.err("trailing content after tree"));
    }
    if p.leaves.is_empty() {
        return Err(TreebankError::Parse {
            offset: 0,
            message: "tree has no leaves".into(),
        });
    }
    Ok(ConstituencyTree {
        nodes: p.nodes,
        root,
        leaves: p.leaves,
    })
}

/// Parse a document of whitespace-concatenated bracketed trees.
pub fn parse_constituency_many(text: &str) -> Result<Vec<ConstituencyTree>, TreebankError> {
    let mut trees = Vec::new();
    let mut p = BracketParser::new(text);
    loop {
        p.skip_ws();
        if p.peek().is_none() {
            break;
        }
        let mut sub = BracketParser {
            input: p.input,
            pos: p.pos,
            nodes: Vec::new(),
            leaves: Vec::new(),
        };
        let root = sub.tree(None)?;
        if sub.leaves.is_empty() {
            return Err(TreebankError::Parse {
                offset: p.pos,
                message: "tree has no leaves".into(),
            });
        }
        p.pos = sub.pos;
        trees.push(ConstituencyTree {
            nodes: sub.nodes,
            root,
            leaves: sub.leaves,
        });
    }
    Ok(trees)
}

/// One phrase node of a constituency tree: its label, the label path from
/// itself up to the root, and the inclusive span of leaves it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constituent {
    pub label: String,
    pub path: Vec<String>,
    pub begin: usize,
    pub end: usize,
}

// ---------------------------------------------------------------------------
// Dependency trees
// ---------------------------------------------------------------------------

/// One dependency arc. `head = None` is the ROOT sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepArc {
    pub head: Option<usize>,
    pub dependent: usize,
    pub label: String,
}

/// Dependency parse of a single sentence: every token is the dependent of
/// exactly one arc, exactly one arc has the ROOT head, and the arcs form a
/// tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyTree {
    tokens: Vec<Token>,
    /// Sorted by dependent index; arcs[i].dependent == i.
    arcs: Vec<DepArc>,
}

impl DependencyTree {
    /// Validate and build. Arcs may arrive in any order; they are stored
    /// sorted by dependent.
    pub fn new(tokens: Vec<Token>, mut arcs: Vec<DepArc>) -> Result<Self, TreebankError> {
        let n = tokens.len();
        if arcs.len() != n {
            return Err(TreebankError::Structure(format!(
                "{} arcs for {} tokens",
                arcs.len(),
                n
            )));
        }
        arcs.sort_by_key(|a| a.dependent);
        let mut roots = 0usize;
        for (i, arc) in arcs.iter().enumerate() {
            if arc.dependent != i {
                return Err(TreebankError::Structure(format!(
                    "token {i} is not the dependent of exactly one arc"
                )));
            }
            match arc.head {
                None => roots += 1,
                Some(h) if h >= n => {
                    return Err(TreebankError::Structure(format!(
                        "arc head {h} out of range for {n} tokens"
                    )))
                }
                Some(h) if h == arc.dependent => {
                    return Err(TreebankError::Structure(format!("token {h} heads itself")))
                }
                Some(_) => {}
            }
        }
        if roots != 1 {
            return Err(TreebankError::Structure(format!(
                "expected exactly one root arc, found {roots}"
            )));
        }
        // Cycle check: walking head links from any token must reach ROOT.
        for start in 0..n {
            let mut cur = Some(start);
            let mut steps = 0usize;
            while let Some(i) = cur {
                cur = arcs[i].head;
                steps += 1;
                if steps > n {
                    return Err(TreebankError::Structure(format!(
                        "cycle through token {start}"
                    )));
                }
            }
        }
        Ok(DependencyTree { tokens, arcs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn arcs(&self) -> &[DepArc] {
        &self.arcs
    }

    /// Relation label of the arc whose dependent is `token_index`.
    pub fn label_of(&self, token_index: usize) -> Result<&str, TreebankError> {
        self.arcs
            .get(token_index)
            .map(|a| a.label.as_str())
            .ok_or(TreebankError::TokenIndex {
                index: token_index,
                len: self.tokens.len(),
            })
    }

    /// All (dependent index, label) pairs headed by `token_index`, ordered by
    /// sentence position.
    pub fn dependents_of(
        &self,
        token_index: usize,
    ) -> Result<Vec<(usize, &str)>, TreebankError> {
        if token_index >= self.tokens.len() {
            return Err(TreebankError::TokenIndex {
                index: token_index,
                len: self.tokens.len(),
            });
        }
        Ok(self
            .arcs
            .iter()
            .filter(|a| a.head == Some(token_index))
            .map(|a| (a.dependent, a.label.as_str()))
            .collect())
    }
}

/// Parse a CoNLL-U document into one `DependencyTree` per sentence.
///
/// Columns: ID FORM LEMMA UPOS XPOS FEATS HEAD DEPREL DEPS MISC. Lines are
/// tab-separated (whitespace-separated accepted as a fallback). Comment
/// lines, multiword ranges ("1-2") and empty nodes ("1.1") are skipped. The
/// 1-based HEAD column becomes a 0-based index; HEAD=0 becomes the ROOT
/// sentinel. XPOS is preferred for the token's POS tag, falling back to UPOS.
pub fn parse_conllu(text: &str) -> Result<Vec<DependencyTree>, TreebankError> {
    let mut trees = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    let mut raw_arcs: Vec<(usize, usize, String, usize)> = Vec::new(); // (id1, head1, label, line)

    let mut flush = |tokens: &mut Vec<Token>,
                     raw_arcs: &mut Vec<(usize, usize, String, usize)>|
     -> Result<(), TreebankError> {
        if tokens.is_empty() {
            return Ok(());
        }
        let n = tokens.len();
        let mut arcs = Vec::with_capacity(n);
        for (id1, head1, label, line) in raw_arcs.drain(..) {
            if id1 == 0 || id1 > n {
                return Err(TreebankError::Conllu {
                    line,
                    message: format!("token id {id1} out of range"),
                });
            }
            if head1 > n {
                return Err(TreebankError::Conllu {
                    line,
                    message: format!("head {head1} out of range"),
                });
            }
            arcs.push(DepArc {
                head: if head1 == 0 { None } else { Some(head1 - 1) },
                dependent: id1 - 1,
                label,
            });
        }
        trees.push(DependencyTree::new(std::mem::take(tokens), arcs)?);
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut raw_arcs)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split_whitespace().collect()
        };
        let id_field = cols[0];
        // Multiword token ranges and empty nodes carry no single-head arc.
        if id_field.contains('-') || id_field.contains('.') {
            continue;
        }
        if cols.len() < 8 {
            return Err(TreebankError::Conllu {
                line: lineno,
                message: format!("expected 10 columns, found {}", cols.len()),
            });
        }
        let id1: usize = id_field.parse().map_err(|_| TreebankError::Conllu {
            line: lineno,
            message: format!("bad token id {id_field:?}"),
        })?;
        let form = cols[1];
        if form.is_empty() {
            return Err(TreebankError::Conllu {
                line: lineno,
                message: "empty FORM".into(),
            });
        }
        let upos = cols[3];
        let xpos = cols[4];
        let head1: usize = cols[6].parse().map_err(|_| TreebankError::Conllu {
            line: lineno,
            message: format!("bad HEAD {:?}", cols[6]),
        })?;
        let deprel = cols[7];
        if deprel.is_empty() || deprel == "_" {
            return Err(TreebankError::Conllu {
                line: lineno,
                message: "missing DEPREL".into(),
            });
        }
        let pos = if xpos != "_" && !xpos.is_empty() {
            xpos
        } else if upos != "_" {
            upos
        } else {
            ""
        };
        tokens.push(Token {
            index: tokens.len(),
            text: form.to_string(),
            pos: pos.to_string(),
        });
        raw_arcs.push((id1, head1, deprel.to_string(), lineno));
    }
    flush(&mut tokens, &mut raw_arcs)?;
    Ok(trees)
}
