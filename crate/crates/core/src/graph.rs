//! Flow-aware program graphs built from MIR modules.
//!
//! Each instruction becomes a vertex, each distinct variable and integer
//! literal gets its own vertex, and typed directed edges carry control, data
//! and call flow. Node order is canonical: instructions in program order,
//! then variables by first appearance, then constants by value.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mir::{MirModule, Opcode, Operand};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("call to undefined function @{0}")]
    UndefinedFunction(String),
    #[error("graph format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Instruction,
    Variable,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flow {
    Control = 0,
    Data = 1,
    Call = 2,
}

impl Flow {
    pub const ALL: [Flow; 3] = [Flow::Control, Flow::Data, Flow::Call];

    pub fn from_code(code: u8) -> Option<Flow> {
        Flow::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    pub token: String,
    pub token_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub flow: Flow,
    pub position: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProgramGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl ProgramGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn count_flow(&self, flow: Flow) -> usize {
        self.edges.iter().filter(|e| e.flow == flow).count()
    }

    /// Instruction opcodes in node order.
    pub fn opcodes(&self) -> impl Iterator<Item = Opcode> + '_ {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Instruction)
            .filter_map(|n| Opcode::from_name(&n.token))
    }

    /// Returns a copy with node `i` moved to position `perm[i]` and edges
    /// re-indexed accordingly.
    pub fn permuted(&self, perm: &[usize]) -> ProgramGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes = vec![None; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = Some(n.clone());
        }
        ProgramGraph {
            nodes: nodes.into_iter().map(|n| n.expect("perm is a bijection")).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge { src: perm[e.src], dst: perm[e.dst], ..*e })
                .collect(),
        }
    }
}

pub const UNK: &str = "unk";

/// Token vocabulary: the 15 opcodes, then `var`, `const`, `unk`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of `token`, falling back to `unk`.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.index[UNK])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// SHA-256 over the newline-terminated token list.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}

impl Vocabulary {
    /// Vocabulary over `tokens` in order. `None` on duplicates or a missing `unk`.
    pub fn from_tokens(tokens: Vec<String>) -> Option<Vocabulary> {
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        (index.len() == tokens.len() && index.contains_key(UNK)).then_some(Vocabulary { tokens, index })
    }
}

pub fn build_vocabulary() -> Vocabulary {
    let tokens: Vec<String> = Opcode::ALL
        .iter()
        .map(|op| op.name())
        .chain(["var", "const", UNK])
        .map(str::to_string)
        .collect();
    Vocabulary::from_tokens(tokens).expect("builtin vocabulary is well formed")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum VarKey<'a> {
    Local(usize, &'a str),
    Global(&'a str),
}

/// Builds the flow-aware multigraph of `module`.
pub fn build_graph(module: &MirModule) -> Result<ProgramGraph, GraphError> {
    let vocab = build_vocabulary();

    // Instruction numbering plus per-block / per-function anchors.
    let mut block_first: Vec<HashMap<&str, usize>> = Vec::new();
    let mut fn_entry: HashMap<&str, usize> = HashMap::new();
    let mut fn_rets: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut nodes = Vec::new();
    for f in &module.functions {
        let mut firsts = HashMap::new();
        fn_entry.insert(f.name.as_str(), nodes.len());
        for b in &f.blocks {
            firsts.insert(b.label.as_str(), nodes.len());
            for inst in &b.instructions {
                if inst.opcode == Opcode::Ret {
                    fn_rets.entry(f.name.as_str()).or_default().push(nodes.len());
                }
                nodes.push(Node {
                    kind: NodeKind::Instruction,
                    token: inst.opcode.name().to_string(),
                    token_id: vocab.lookup(inst.opcode.name()),
                });
            }
        }
        block_first.push(firsts);
    }

    // Variables by first appearance (result before operands), constants by value.
    let mut vars: HashMap<VarKey, usize> = HashMap::new();
    let mut var_order = 0usize;
    let mut consts = BTreeSet::new();
    for (fi, f) in module.functions.iter().enumerate() {
        for inst in f.instructions() {
            let callee_slot = usize::from(inst.opcode == Opcode::Call);
            if let Some(r) = &inst.result {
                vars.entry(VarKey::Local(fi, r)).or_insert_with(|| bump(&mut var_order));
            }
            for op in &inst.operands[callee_slot..] {
                match op {
                    Operand::Local(n) => {
                        vars.entry(VarKey::Local(fi, n)).or_insert_with(|| bump(&mut var_order));
                    }
                    Operand::Global(n) => {
                        vars.entry(VarKey::Global(n)).or_insert_with(|| bump(&mut var_order));
                    }
                    Operand::Int(v) => {
                        consts.insert(*v);
                    }
                    Operand::Label(_) => {}
                }
            }
        }
    }
    let n_inst = nodes.len();
    let var_base = n_inst;
    let const_base = var_base + vars.len();
    nodes.extend((0..vars.len()).map(|_| Node {
        kind: NodeKind::Variable,
        token: "var".into(),
        token_id: vocab.lookup("var"),
    }));
    let const_index: HashMap<i64, usize> = consts.iter().enumerate().map(|(k, v)| (*v, const_base + k)).collect();
    nodes.extend(consts.iter().map(|_| Node {
        kind: NodeKind::Constant,
        token: "const".into(),
        token_id: vocab.lookup("const"),
    }));

    let mut edges = Vec::new();
    let mut id = 0usize;
    for (fi, f) in module.functions.iter().enumerate() {
        for b in &f.blocks {
            for (k, inst) in b.instructions.iter().enumerate() {
                if inst.opcode.is_terminator() {
                    for (pos, t) in inst.targets().enumerate() {
                        edges.push(edge(id, block_first[fi][t], Flow::Control, pos as u32));
                    }
                } else if k + 1 < b.instructions.len() {
                    edges.push(edge(id, id + 1, Flow::Control, 0));
                }
                if let Some(r) = &inst.result {
                    edges.push(edge(id, var_base + vars[&VarKey::Local(fi, r)], Flow::Data, 0));
                }
                let callee_slot = usize::from(inst.opcode == Opcode::Call);
                for (pos, op) in inst.operands.iter().enumerate().skip(callee_slot) {
                    let src = match op {
                        Operand::Local(n) => var_base + vars[&VarKey::Local(fi, n)],
                        Operand::Global(n) => var_base + vars[&VarKey::Global(n)],
                        Operand::Int(v) => const_index[v],
                        Operand::Label(_) => continue,
                    };
                    edges.push(edge(src, id, Flow::Data, pos as u32));
                }
                if let Some(callee) = inst.callee() {
                    let entry = *fn_entry
                        .get(callee)
                        .ok_or_else(|| GraphError::UndefinedFunction(callee.to_string()))?;
                    edges.push(edge(id, entry, Flow::Call, 0));
                    for &ret in fn_rets.get(callee).map(Vec::as_slice).unwrap_or_default() {
                        edges.push(edge(ret, id, Flow::Call, 0));
                    }
                }
                id += 1;
            }
        }
    }
    Ok(ProgramGraph { nodes, edges })
}

fn bump(counter: &mut usize) -> usize {
    let v = *counter;
    *counter += 1;
    v
}

fn edge(src: usize, dst: usize, flow: Flow, position: u32) -> Edge {
    Edge { src, dst, flow, position }
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    kind: NodeKind,
    token: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    edges: Vec<(usize, usize, u8, u32)>,
}

impl Serialize for ProgramGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphDoc {
            nodes: self.nodes.iter().map(|n| NodeDoc { kind: n.kind, token: n.token.clone() }).collect(),
            edges: self.edges.iter().map(|e| (e.src, e.dst, e.flow as u8, e.position)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProgramGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = GraphDoc::deserialize(d)?;
        from_doc(doc).map_err(serde::de::Error::custom)
    }
}

fn from_doc(doc: GraphDoc) -> Result<ProgramGraph, GraphError> {
    let vocab = build_vocabulary();
    let fmt_err = |m: String| GraphError::Format(m);
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for (i, n) in doc.nodes.into_iter().enumerate() {
        let ok = match n.kind {
            NodeKind::Instruction => Opcode::from_name(&n.token).is_some(),
            NodeKind::Variable => n.token == "var",
            NodeKind::Constant => n.token == "const",
        };
        if !ok {
            return Err(fmt_err(format!("node {i}: token `{}` does not match its kind", n.token)));
        }
        let token_id = vocab.lookup(&n.token);
        nodes.push(Node { kind: n.kind, token: n.token, token_id });
    }
    let mut edges = Vec::with_capacity(doc.edges.len());
    for (k, (src, dst, flow, position)) in doc.edges.into_iter().enumerate() {
        if src >= nodes.len() || dst >= nodes.len() {
            return Err(fmt_err(format!("edge {k} references a missing node")));
        }
        let flow = Flow::from_code(flow).ok_or_else(|| fmt_err(format!("edge {k}: unknown flow code {flow}")))?;
        edges.push(Edge { src, dst, flow, position });
    }
    Ok(ProgramGraph { nodes, edges })
}

/// Canonical compact JSON interchange form.
pub fn export_graph(graph: &ProgramGraph) -> Vec<u8> {
    serde_json::to_vec(graph).expect("graph serialization is infallible")
}

pub fn import_graph(bytes: &[u8]) -> Result<ProgramGraph, GraphError> {
    let doc: GraphDoc = serde_json::from_slice(bytes).map_err(|e| GraphError::Format(e.to_string()))?;
    from_doc(doc)
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flow::Control => "control",
            Flow::Data => "data",
            Flow::Call => "call",
        })
    }
}
