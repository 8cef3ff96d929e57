//! Expression trees over a fixed token vocabulary.
//!
//! Expressions are exchanged with the generative model as token sequences in
//! breadth-first (level) order: the root first, then its children, then all
//! grandchildren, and so on. This keeps siblings adjacent in the sequence,
//! unlike a preorder walk.

mod parse;
mod simplify;

pub use parse::{parse_expression, ParseError};

use std::collections::VecDeque;
use std::fmt;

pub type TokenId = usize;

/// Maximum number of constant placeholders allowed in one expression.
pub const MAX_CONSTANTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Sin,
    Cos,
    Log,
    Sqrt,
    Exp,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Exp => "exp",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Exp => x.exp(),
        }
    }

    pub fn is_trig(self) -> bool {
        matches!(self, UnaryOp::Sin | UnaryOp::Cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => a.powf(b),
        }
    }
}

/// What a token stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Input variable `x_{i+1}` (0-based index into the dataset columns).
    Variable(usize),
    /// The literal value 1.
    LiteralOne,
    /// An optimizable constant placeholder `c`.
    ConstPlaceholder,
    Unary(UnaryOp),
    Binary(BinaryOp),
    /// Padding for positions past the end of the expression.
    Pad,
}

impl TokenKind {
    pub fn arity(self) -> usize {
        match self {
            TokenKind::Variable(_)
            | TokenKind::LiteralOne
            | TokenKind::ConstPlaceholder
            | TokenKind::Pad => 0,
            TokenKind::Unary(_) => 1,
            TokenKind::Binary(_) => 2,
        }
    }
}

/// The fixed operator/variable vocabulary, including one PAD token.
///
/// Token order is part of the engine contract (sampling uses inverse-CDF
/// with this ordering, and checkpoints store distributions over it):
/// `1, c, x1..xk, sin, cos, log, sqrt, exp, +, -, *, /, ^, <pad>`.
#[derive(Debug, Clone)]
pub struct TokenLibrary {
    tokens: Vec<(String, TokenKind)>,
    input_dim: usize,
}

impl TokenLibrary {
    pub fn new(input_dim: usize) -> Self {
        assert!(input_dim >= 1, "need at least one input variable");
        let mut tokens: Vec<(String, TokenKind)> = Vec::new();
        tokens.push(("1".into(), TokenKind::LiteralOne));
        tokens.push(("c".into(), TokenKind::ConstPlaceholder));
        for i in 0..input_dim {
            tokens.push((format!("x{}", i + 1), TokenKind::Variable(i)));
        }
        for op in [UnaryOp::Sin, UnaryOp::Cos, UnaryOp::Log, UnaryOp::Sqrt, UnaryOp::Exp] {
            tokens.push((op.name().into(), TokenKind::Unary(op)));
        }
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Pow] {
            tokens.push((op.symbol().into(), TokenKind::Binary(op)));
        }
        tokens.push(("<pad>".into(), TokenKind::Pad));
        TokenLibrary { tokens, input_dim }
    }

    /// Total token count `d`, PAD included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        self.tokens[id].1
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.tokens[id].0
    }

    pub fn arity(&self, id: TokenId) -> usize {
        self.tokens[id].1.arity()
    }

    pub fn pad_id(&self) -> TokenId {
        self.tokens.len() - 1
    }

    pub fn const_id(&self) -> TokenId {
        1
    }

    pub fn is_trig(&self, id: TokenId) -> bool {
        matches!(self.tokens[id].1, TokenKind::Unary(op) if op.is_trig())
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|(s, _)| s == symbol)
    }
}

/// One node of an expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Variable(usize),
    One,
    /// Slot index into [`ExpressionTree::constants`].
    Constant(usize),
    Unary(UnaryOp, Box<ExprNode>),
    Binary(BinaryOp, Box<ExprNode>, Box<ExprNode>),
}

impl ExprNode {
    pub fn node_count(&self) -> usize {
        match self {
            ExprNode::Variable(_) | ExprNode::One | ExprNode::Constant(_) => 1,
            ExprNode::Unary(_, c) => 1 + c.node_count(),
            ExprNode::Binary(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }
}

/// A complete expression: tree plus the values bound to its constant slots.
///
/// Constant slots are numbered in BFS order of the placeholder nodes, so the
/// binding order matches the token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTree {
    root: ExprNode,
    constants: Vec<f64>,
}

/// Outcome of decoding a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStatus {
    Complete,
    Incomplete,
    Invalid,
}

impl ExpressionTree {
    pub fn new(root: ExprNode, constants: Vec<f64>) -> Self {
        let tree = ExpressionTree { root, constants };
        debug_assert_eq!(tree.count_placeholders(), tree.constants.len());
        tree
    }

    pub fn root(&self) -> &ExprNode {
        &self.root
    }

    pub fn constants(&self) -> &[f64] {
        &self.constants
    }

    pub fn set_constants(&mut self, constants: Vec<f64>) {
        assert_eq!(constants.len(), self.constants.len());
        self.constants = constants;
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    fn count_placeholders(&self) -> usize {
        let mut n = 0;
        let mut queue = VecDeque::from([&self.root]);
        while let Some(node) = queue.pop_front() {
            match node {
                ExprNode::Constant(_) => n += 1,
                ExprNode::Unary(_, c) => queue.push_back(c),
                ExprNode::Binary(_, a, b) => {
                    queue.push_back(a);
                    queue.push_back(b);
                }
                _ => {}
            }
        }
        n
    }

    /// Structural equality: same shape and operators, ignoring the values
    /// bound to constant slots.
    pub fn same_structure(&self, other: &ExpressionTree) -> bool {
        fn eq(a: &ExprNode, b: &ExprNode) -> bool {
            match (a, b) {
                (ExprNode::Variable(i), ExprNode::Variable(j)) => i == j,
                (ExprNode::One, ExprNode::One) => true,
                (ExprNode::Constant(_), ExprNode::Constant(_)) => true,
                (ExprNode::Unary(o1, c1), ExprNode::Unary(o2, c2)) => o1 == o2 && eq(c1, c2),
                (ExprNode::Binary(o1, a1, b1), ExprNode::Binary(o2, a2, b2)) => {
                    o1 == o2 && eq(a1, a2) && eq(b1, b2)
                }
                _ => false,
            }
        }
        eq(&self.root, &other.root)
    }

    /// Structural equality that also matches constant values to a relative
    /// tolerance, treating the literal `1` and a constant bound to 1.0 as
    /// the same thing.
    pub fn equivalent_to(&self, other: &ExpressionTree, tol: f64) -> bool {
        fn value_of(node: &ExprNode, consts: &[f64]) -> Option<f64> {
            match node {
                ExprNode::One => Some(1.0),
                ExprNode::Constant(slot) => Some(consts[*slot]),
                _ => None,
            }
        }
        fn eq(a: &ExprNode, ca: &[f64], b: &ExprNode, cb: &[f64], tol: f64) -> bool {
            if let (Some(va), Some(vb)) = (value_of(a, ca), value_of(b, cb)) {
                let scale = va.abs().max(vb.abs()).max(1.0);
                return (va - vb).abs() <= tol * scale;
            }
            match (a, b) {
                (ExprNode::Variable(i), ExprNode::Variable(j)) => i == j,
                (ExprNode::Unary(o1, c1), ExprNode::Unary(o2, c2)) => {
                    o1 == o2 && eq(c1, ca, c2, cb, tol)
                }
                (ExprNode::Binary(o1, a1, b1), ExprNode::Binary(o2, a2, b2)) => {
                    o1 == o2 && eq(a1, ca, a2, cb, tol) && eq(b1, ca, b2, cb, tol)
                }
                _ => false,
            }
        }
        eq(&self.root, &self.constants, &other.root, &other.constants, tol)
    }

    /// Level-order token serialization. Length equals the node count.
    pub fn bfs_encode(&self, lib: &TokenLibrary) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.node_count());
        let mut queue = VecDeque::from([&self.root]);
        while let Some(node) = queue.pop_front() {
            let id = match node {
                ExprNode::Variable(i) => lib
                    .id_of(&format!("x{}", i + 1))
                    .expect("variable index within library input_dim"),
                ExprNode::One => 0,
                ExprNode::Constant(_) => lib.const_id(),
                ExprNode::Unary(op, c) => {
                    queue.push_back(c);
                    lib.id_of(op.name()).unwrap()
                }
                ExprNode::Binary(op, a, b) => {
                    queue.push_back(a);
                    queue.push_back(b);
                    lib.id_of(op.symbol()).unwrap()
                }
            };
            ids.push(id);
        }
        TokenSequence { ids }
    }

    /// True when the tree respects the generation constraints: at most
    /// [`MAX_CONSTANTS`] placeholders, no trig inside trig, and at most
    /// `max_tokens` nodes.
    pub fn satisfies_constraints(&self, max_tokens: usize) -> bool {
        fn no_nested_trig(node: &ExprNode, inside: bool) -> bool {
            match node {
                ExprNode::Unary(op, c) => {
                    if op.is_trig() && inside {
                        return false;
                    }
                    no_nested_trig(c, inside || op.is_trig())
                }
                ExprNode::Binary(_, a, b) => {
                    no_nested_trig(a, inside) && no_nested_trig(b, inside)
                }
                _ => true,
            }
        }
        self.constants.len() <= MAX_CONSTANTS
            && self.node_count() <= max_tokens
            && no_nested_trig(&self.root, false)
    }

    /// Row-wise evaluation on an `n x k` input matrix.
    ///
    /// Domain violations (log of a non-positive value, square root of a
    /// negative, non-real powers, overflow) produce non-finite entries that
    /// propagate to the affected row's output; they are data, not errors.
    pub fn evaluate(&self, inputs: &crate::Mat) -> Vec<f64> {
        (0..inputs.rows()).map(|r| self.evaluate_row(inputs.row(r))).collect()
    }

    pub fn evaluate_row(&self, x: &[f64]) -> f64 {
        fn eval(node: &ExprNode, x: &[f64], consts: &[f64]) -> f64 {
            match node {
                ExprNode::Variable(i) => x[*i],
                ExprNode::One => 1.0,
                ExprNode::Constant(slot) => consts[*slot],
                ExprNode::Unary(op, c) => op.apply(eval(c, x, consts)),
                ExprNode::Binary(op, a, b) => {
                    op.apply(eval(a, x, consts), eval(b, x, consts))
                }
            }
        }
        eval(&self.root, x, &self.constants)
    }

    /// Fixed-point application of the bounded rewrite rule set; see the
    /// module docs of [`simplify`] for the rule list.
    pub fn simplify(&self) -> ExpressionTree {
        simplify::simplify(self)
    }

    /// Node count after simplification.
    pub fn simplified_complexity(&self) -> usize {
        self.simplify().node_count()
    }

    /// Deterministic infix rendering; constants print with 9 significant
    /// digits.
    pub fn to_infix(&self) -> String {
        fn prec(node: &ExprNode) -> u8 {
            match node {
                ExprNode::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
                ExprNode::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
                ExprNode::Binary(BinaryOp::Pow, ..) => 3,
                _ => 4,
            }
        }
        fn walk(node: &ExprNode, consts: &[f64], out: &mut String) {
            match node {
                ExprNode::Variable(i) => out.push_str(&format!("x{}", i + 1)),
                ExprNode::One => out.push('1'),
                ExprNode::Constant(slot) => out.push_str(&format_constant(consts[*slot])),
                ExprNode::Unary(op, c) => {
                    out.push_str(op.name());
                    out.push('(');
                    walk(c, consts, out);
                    out.push(')');
                }
                ExprNode::Binary(op, a, b) => {
                    let p = prec(node);
                    let wrap_left = if matches!(op, BinaryOp::Pow) {
                        prec(a) < 4
                    } else {
                        prec(a) < p
                    };
                    let wrap_right = if matches!(op, BinaryOp::Pow) {
                        prec(b) < 4
                    } else {
                        prec(b) < p
                            || (prec(b) == p && matches!(op, BinaryOp::Sub | BinaryOp::Div))
                    };
                    let mut left = String::new();
                    walk(a, consts, &mut left);
                    let mut right = String::new();
                    walk(b, consts, &mut right);
                    // A leading minus on the right operand always gets parens.
                    let wrap_right = wrap_right || right.starts_with('-');
                    if wrap_left {
                        out.push('(');
                        out.push_str(&left);
                        out.push(')');
                    } else {
                        out.push_str(&left);
                    }
                    out.push_str(op.symbol());
                    if wrap_right {
                        out.push('(');
                        out.push_str(&right);
                        out.push(')');
                    } else {
                        out.push_str(&right);
                    }
                }
            }
        }
        let mut s = String::new();
        walk(&self.root, &self.constants, &mut s);
        s
    }
}

impl fmt::Display for ExpressionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix())
    }
}

/// Rounds to 9 significant digits and prints the shortest form of the
/// rounded value.
pub fn format_constant(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{:.8e}", v).parse().unwrap();
    format!("{rounded}")
}

/// A token sequence in BFS order; the expression prefix only, no padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn symbols(&self, lib: &TokenLibrary) -> Vec<String> {
        self.ids.iter().map(|&id| lib.symbol(id).to_string()).collect()
    }
}

/// Reconstructs a tree from a BFS token sequence.
///
/// `Complete` means every node's arity is satisfied with no tokens left
/// over; `Incomplete` means the sequence is a proper prefix of some valid
/// tree; anything else (trailing tokens, PAD or unknown ids inside the
/// sequence) is `Invalid`. The tree is returned only when complete, with
/// constant slots bound to 1.0.
pub fn bfs_decode(
    seq: &TokenSequence,
    lib: &TokenLibrary,
) -> (DecodeStatus, Option<ExpressionTree>) {
    if seq.is_empty() {
        return (DecodeStatus::Incomplete, None);
    }
    // Arena of (token, children), filled in BFS arrival order.
    let mut arena: Vec<(TokenId, Vec<usize>)> = Vec::with_capacity(seq.len());
    // FIFO of nodes still waiting for children.
    let mut open: VecDeque<usize> = VecDeque::new();
    for (pos, &id) in seq.ids.iter().enumerate() {
        if id >= lib.len() || matches!(lib.kind(id), TokenKind::Pad) {
            return (DecodeStatus::Invalid, None);
        }
        if pos > 0 {
            // Attach to the earliest node with an unfilled slot.
            loop {
                match open.front() {
                    None => return (DecodeStatus::Invalid, None),
                    Some(&parent) => {
                        if arena[parent].1.len() < lib.arity(arena[parent].0) {
                            arena[parent].1.push(pos);
                            if arena[parent].1.len() == lib.arity(arena[parent].0) {
                                open.pop_front();
                            }
                            break;
                        }
                        open.pop_front();
                    }
                }
            }
        }
        arena.push((id, Vec::new()));
        if lib.arity(id) > 0 {
            open.push_back(pos);
        }
    }
    while let Some(&front) = open.front() {
        if arena[front].1.len() < lib.arity(arena[front].0) {
            return (DecodeStatus::Incomplete, None);
        }
        open.pop_front();
    }
    // All arities satisfied: rebuild the tree, numbering constants in BFS
    // (= arena) order.
    let mut n_consts = 0;
    let mut slot_of = vec![usize::MAX; arena.len()];
    for (i, (id, _)) in arena.iter().enumerate() {
        if matches!(lib.kind(*id), TokenKind::ConstPlaceholder) {
            slot_of[i] = n_consts;
            n_consts += 1;
        }
    }
    fn build(
        i: usize,
        arena: &[(TokenId, Vec<usize>)],
        slot_of: &[usize],
        lib: &TokenLibrary,
    ) -> ExprNode {
        let (id, children) = &arena[i];
        match lib.kind(*id) {
            TokenKind::Variable(v) => ExprNode::Variable(v),
            TokenKind::LiteralOne => ExprNode::One,
            TokenKind::ConstPlaceholder => ExprNode::Constant(slot_of[i]),
            TokenKind::Unary(op) => {
                ExprNode::Unary(op, Box::new(build(children[0], arena, slot_of, lib)))
            }
            TokenKind::Binary(op) => ExprNode::Binary(
                op,
                Box::new(build(children[0], arena, slot_of, lib)),
                Box::new(build(children[1], arena, slot_of, lib)),
            ),
            TokenKind::Pad => unreachable!("pad rejected above"),
        }
    }
    let root = build(0, &arena, &slot_of, lib);
    (
        DecodeStatus::Complete,
        Some(ExpressionTree::new(root, vec![1.0; n_consts])),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    fn lib2() -> TokenLibrary {
        TokenLibrary::new(2)
    }

    fn ids(lib: &TokenLibrary, syms: &[&str]) -> Vec<TokenId> {
        syms.iter().map(|s| lib.id_of(s).unwrap()).collect()
    }

    #[test]
    fn library_layout() {
        let lib = lib2();
        assert_eq!(lib.len(), 15); // 1, c, x1, x2, 5 unary, 5 binary, pad
        assert_eq!(lib.symbol(0), "1");
        assert_eq!(lib.symbol(lib.const_id()), "c");
        assert_eq!(lib.pad_id(), 14);
        assert_eq!(lib.arity(lib.id_of("sin").unwrap()), 1);
        assert_eq!(lib.arity(lib.id_of("+").unwrap()), 2);
        assert_eq!(lib.arity(lib.pad_id()), 0);
        // Symbols are unique.
        for a in 0..lib.len() {
            for b in (a + 1)..lib.len() {
                assert_ne!(lib.symbol(a), lib.symbol(b));
            }
        }
    }

    #[test]
    fn bfs_encode_level_order() {
        // (+ (sin x1) x2): siblings of the root precede grandchildren.
        let lib = lib2();
        let tree = parse_expression("sin(x1)+x2", &lib).unwrap();
        assert_eq!(tree.bfs_encode(&lib).ids(), ids(&lib, &["+", "sin", "x2", "x1"]));
    }

    #[test]
    fn bfs_encode_single_node() {
        let lib = lib2();
        let tree = parse_expression("x1", &lib).unwrap();
        assert_eq!(tree.bfs_encode(&lib).ids(), ids(&lib, &["x1"]));
    }

    #[test]
    fn bfs_differs_from_preorder() {
        let lib = lib2();
        let tree = parse_expression("sin(x1)+x2", &lib).unwrap();
        let bfs = tree.bfs_encode(&lib);
        let preorder = ids(&lib, &["+", "sin", "x1", "x2"]);
        assert_eq!(bfs.ids()[..2], preorder[..2]);
        assert_ne!(bfs.ids()[2..], preorder[2..]);
    }

    #[test]
    fn decode_complete() {
        let lib = lib2();
        let seq = TokenSequence::new(ids(&lib, &["+", "sin", "x2", "x1"]));
        let (status, tree) = bfs_decode(&seq, &lib);
        assert_eq!(status, DecodeStatus::Complete);
        let tree = tree.unwrap();
        assert_eq!(tree.bfs_encode(&lib), seq);
        assert_eq!(tree.to_infix(), "sin(x1)+x2");
    }

    #[test]
    fn decode_incomplete() {
        let lib = lib2();
        let seq = TokenSequence::new(ids(&lib, &["+", "sin"]));
        let (status, tree) = bfs_decode(&seq, &lib);
        assert_eq!(status, DecodeStatus::Incomplete);
        assert!(tree.is_none());
    }

    #[test]
    fn decode_trailing_token_invalid() {
        let lib = lib2();
        let seq = TokenSequence::new(ids(&lib, &["x1", "x2"]));
        let (status, tree) = bfs_decode(&seq, &lib);
        assert_eq!(status, DecodeStatus::Invalid);
        assert!(tree.is_none());
    }

    #[test]
    fn decode_unknown_or_pad_invalid() {
        let lib = lib2();
        let (status, _) = bfs_decode(&TokenSequence::new(vec![999]), &lib);
        assert_eq!(status, DecodeStatus::Invalid);
        let (status, _) = bfs_decode(&TokenSequence::new(vec![lib.pad_id()]), &lib);
        assert_eq!(status, DecodeStatus::Invalid);
    }

    #[test]
    fn evaluate_example() {
        // 3*sin(x1) + x2^2 at (0, 2) = 4.
        let lib = lib2();
        let tree = parse_expression("3*sin(x1)+x2^2", &lib).unwrap();
        let inputs = Mat::from_vec(1, 2, vec![0.0, 2.0]);
        let out = tree.evaluate(&inputs);
        assert!((out[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_domain_violation_is_nonfinite() {
        let lib = TokenLibrary::new(1);
        let tree = parse_expression("log(x1)", &lib).unwrap();
        let out = tree.evaluate(&Mat::from_vec(1, 1, vec![-1.0]));
        assert!(!out[0].is_finite());
    }

    #[test]
    fn evaluate_real_power() {
        let lib = TokenLibrary::new(1);
        let tree = parse_expression("x1^0.5", &lib).unwrap();
        let out = tree.evaluate(&Mat::from_vec(2, 1, vec![4.0, -4.0]));
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!(!out[1].is_finite());
    }

    #[test]
    fn evaluate_is_deterministic() {
        let lib = lib2();
        let tree = parse_expression("exp(x1)/sqrt(x2)+c", &lib).unwrap();
        let inputs = Mat::from_fn(8, 2, |i, j| (i as f64 + 1.0) * 0.37 - j as f64);
        let a = tree.evaluate(&inputs);
        let b = tree.evaluate(&inputs);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn constraint_checker() {
        let lib = lib2();
        let ok = parse_expression("sin(x1)+cos(x2)", &lib).unwrap();
        assert!(ok.satisfies_constraints(32));
        let nested = parse_expression("sin(cos(x1))", &lib).unwrap();
        assert!(!nested.satisfies_constraints(32));
        let deep_not_nested = parse_expression("sin(log(x1))", &lib).unwrap();
        assert!(deep_not_nested.satisfies_constraints(32));
        assert!(!ok.satisfies_constraints(4));
    }

    #[test]
    fn constant_formatting() {
        assert_eq!(format_constant(2.5), "2.5");
        assert_eq!(format_constant(0.0), "0");
        assert_eq!(format_constant(1.0 / 3.0), "0.333333333");
        assert_eq!(format_constant(-3.0), "-3");
    }

    #[test]
    fn infix_parenthesization() {
        let lib = lib2();
        let t = parse_expression("(x1+x2)*x1", &lib).unwrap();
        assert_eq!(t.to_infix(), "(x1+x2)*x1");
        let t = parse_expression("x1-(x2-1)", &lib).unwrap();
        assert_eq!(t.to_infix(), "x1-(x2-1)");
        let t = parse_expression("x1^(x2+1)", &lib).unwrap();
        assert_eq!(t.to_infix(), "x1^(x2+1)");
    }
}
