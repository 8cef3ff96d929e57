//! Bounded rule-based simplification.
//!
//! The rewrite set, applied bottom-up to a fixed point (capped at 1000
//! rewrites):
//!
//! - constant folding of unary and binary operators (finite results only)
//! - `x+0`, `0+x`, `x-0`, `x*1`, `1*x`, `x/1`, `x*0`, `0*x`, `x-x`, `x/x`,
//!   `x^1`, `x^0`
//! - double negation `0-(0-x)`
//! - merging nested constant arithmetic, e.g. `(x+c1)+c2` and `(x*c1)*c2`
//! - a canonical operand order for `+` and `*` (constants to the right)
//!
//! Rules that delete a subtree (`x*0`, `x-x`, `x/x`) only fire when the
//! deleted subtree is built from `+`, `-`, `*`, variables and constants, so
//! a deleted domain violation cannot change where the expression is finite.

use super::{BinaryOp, ExprNode, ExpressionTree, UnaryOp};
use std::cmp::Ordering;
use std::collections::VecDeque;

const REWRITE_CAP: usize = 1000;

/// Working representation: constants carry their value inline.
#[derive(Debug, Clone, PartialEq)]
enum SNode {
    Var(usize),
    Num(f64),
    Un(UnaryOp, Box<SNode>),
    Bin(BinaryOp, Box<SNode>, Box<SNode>),
}

fn to_snode(node: &ExprNode, consts: &[f64]) -> SNode {
    match node {
        ExprNode::Variable(i) => SNode::Var(*i),
        ExprNode::One => SNode::Num(1.0),
        ExprNode::Constant(slot) => SNode::Num(consts[*slot]),
        ExprNode::Unary(op, c) => SNode::Un(*op, Box::new(to_snode(c, consts))),
        ExprNode::Binary(op, a, b) => SNode::Bin(
            *op,
            Box::new(to_snode(a, consts)),
            Box::new(to_snode(b, consts)),
        ),
    }
}

/// Subtrees safe to delete: total on all finite inputs the test domain can
/// produce (no log/sqrt/exp/div/pow).
fn is_total(node: &SNode) -> bool {
    match node {
        SNode::Var(_) | SNode::Num(_) => true,
        SNode::Un(..) => false,
        SNode::Bin(op, a, b) => {
            matches!(op, BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul)
                && is_total(a)
                && is_total(b)
        }
    }
}

fn is_num(node: &SNode, v: f64) -> bool {
    matches!(node, SNode::Num(x) if *x == v)
}

/// Canonical operand order for commutative operators: variables before
/// functions before operators before numbers, recursing on structure.
fn cmp_structure(a: &SNode, b: &SNode) -> Ordering {
    fn rank(n: &SNode) -> u8 {
        match n {
            SNode::Var(_) => 0,
            SNode::Un(..) => 1,
            SNode::Bin(..) => 2,
            SNode::Num(_) => 3,
        }
    }
    match rank(a).cmp(&rank(b)) {
        Ordering::Equal => match (a, b) {
            (SNode::Var(i), SNode::Var(j)) => i.cmp(j),
            (SNode::Num(x), SNode::Num(y)) => x.partial_cmp(y).unwrap_or(Ordering::Equal),
            (SNode::Un(o1, c1), SNode::Un(o2, c2)) => {
                (*o1 as u8).cmp(&(*o2 as u8)).then_with(|| cmp_structure(c1, c2))
            }
            (SNode::Bin(o1, a1, b1), SNode::Bin(o2, a2, b2)) => (*o1 as u8)
                .cmp(&(*o2 as u8))
                .then_with(|| cmp_structure(a1, a2))
                .then_with(|| cmp_structure(b1, b2)),
            _ => Ordering::Equal,
        },
        other => other,
    }
}

struct Rewriter {
    budget: usize,
}

impl Rewriter {
    fn spend(&mut self) -> bool {
        if self.budget == 0 {
            return false;
        }
        self.budget -= 1;
        true
    }

    /// One bottom-up pass; returns the rewritten node and whether anything
    /// changed.
    fn pass(&mut self, node: SNode) -> (SNode, bool) {
        match node {
            leaf @ (SNode::Var(_) | SNode::Num(_)) => (leaf, false),
            SNode::Un(op, c) => {
                let (c, changed) = self.pass(*c);
                if let SNode::Num(v) = c {
                    let folded = op.apply(v);
                    if folded.is_finite() && self.spend() {
                        return (SNode::Num(folded), true);
                    }
                }
                (SNode::Un(op, Box::new(c)), changed)
            }
            SNode::Bin(op, a, b) => {
                let (a, ca) = self.pass(*a);
                let (b, cb) = self.pass(*b);
                let child_changed = ca || cb;
                match self.local(op, a, b) {
                    (node, true) => (node, true),
                    (node, false) => (node, child_changed),
                }
            }
        }
    }

    /// Rules at a single binary node whose children are already rewritten.
    fn local(&mut self, op: BinaryOp, a: SNode, b: SNode) -> (SNode, bool) {
        use BinaryOp::*;

        // Constant folding.
        if let (SNode::Num(x), SNode::Num(y)) = (&a, &b) {
            let folded = op.apply(*x, *y);
            if folded.is_finite() && self.spend() {
                return (SNode::Num(folded), true);
            }
        }

        match op {
            Add => {
                if is_num(&b, 0.0) && self.spend() {
                    return (a, true);
                }
                if is_num(&a, 0.0) && self.spend() {
                    return (b, true);
                }
                // (x + c1) + c2  ->  x + (c1 + c2)
                if let (SNode::Bin(Add, x, c1), SNode::Num(c2)) = (&a, &b) {
                    if let SNode::Num(c1) = **c1 {
                        let merged = c1 + c2;
                        if merged.is_finite() && self.spend() {
                            return (
                                SNode::Bin(Add, x.clone(), Box::new(SNode::Num(merged))),
                                true,
                            );
                        }
                    }
                }
                // (x - c1) + c2  ->  x + (c2 - c1)
                if let (SNode::Bin(Sub, x, c1), SNode::Num(c2)) = (&a, &b) {
                    if let SNode::Num(c1) = **c1 {
                        let merged = c2 - c1;
                        if merged.is_finite() && self.spend() {
                            return (
                                SNode::Bin(Add, x.clone(), Box::new(SNode::Num(merged))),
                                true,
                            );
                        }
                    }
                }
                if cmp_structure(&a, &b) == Ordering::Greater && self.spend() {
                    return (SNode::Bin(Add, Box::new(b), Box::new(a)), true);
                }
            }
            Sub => {
                if is_num(&b, 0.0) && self.spend() {
                    return (a, true);
                }
                if a == b && is_total(&a) && self.spend() {
                    return (SNode::Num(0.0), true);
                }
                // 0 - (0 - x)  ->  x
                if is_num(&a, 0.0) {
                    if let SNode::Bin(Sub, inner_a, inner_b) = &b {
                        if is_num(inner_a, 0.0) && self.spend() {
                            return ((**inner_b).clone(), true);
                        }
                    }
                }
                // (x + c1) - c2  ->  x + (c1 - c2);  (x - c1) - c2  ->  x - (c1 + c2)
                if let (SNode::Bin(inner @ (Add | Sub), x, c1), SNode::Num(c2)) = (&a, &b) {
                    if let SNode::Num(c1) = **c1 {
                        let merged = match inner {
                            Add => c1 - c2,
                            _ => c1 + c2,
                        };
                        if merged.is_finite() && self.spend() {
                            return (
                                SNode::Bin(*inner, x.clone(), Box::new(SNode::Num(merged))),
                                true,
                            );
                        }
                    }
                }
            }
            Mul => {
                if is_num(&b, 1.0) && self.spend() {
                    return (a, true);
                }
                if is_num(&a, 1.0) && self.spend() {
                    return (b, true);
                }
                if (is_num(&b, 0.0) && is_total(&a) || is_num(&a, 0.0) && is_total(&b))
                    && self.spend()
                {
                    return (SNode::Num(0.0), true);
                }
                // (x * c1) * c2  ->  x * (c1 * c2)
                if let (SNode::Bin(Mul, x, c1), SNode::Num(c2)) = (&a, &b) {
                    if let SNode::Num(c1) = **c1 {
                        let merged = c1 * c2;
                        if merged.is_finite() && self.spend() {
                            return (
                                SNode::Bin(Mul, x.clone(), Box::new(SNode::Num(merged))),
                                true,
                            );
                        }
                    }
                }
                if cmp_structure(&a, &b) == Ordering::Greater && self.spend() {
                    return (SNode::Bin(Mul, Box::new(b), Box::new(a)), true);
                }
            }
            Div => {
                if is_num(&b, 1.0) && self.spend() {
                    return (a, true);
                }
                if a == b && is_total(&a) && !is_num(&a, 0.0) && self.spend() {
                    return (SNode::Num(1.0), true);
                }
            }
            Pow => {
                // IEEE pow(x, 0) = 1 for every x, so x^0 -> 1 is sound even
                // where x is non-finite; x^1 -> x likewise.
                if is_num(&b, 0.0) && self.spend() {
                    return (SNode::Num(1.0), true);
                }
                if is_num(&b, 1.0) && self.spend() {
                    return (a, true);
                }
            }
        }
        (SNode::Bin(op, Box::new(a), Box::new(b)), false)
    }
}

pub(super) fn simplify(tree: &ExpressionTree) -> ExpressionTree {
    let mut node = to_snode(tree.root(), tree.constants());
    let mut rewriter = Rewriter { budget: REWRITE_CAP };
    loop {
        let (next, changed) = rewriter.pass(node);
        node = next;
        if !changed || rewriter.budget == 0 {
            break;
        }
    }
    // Rebuild with constant slots in BFS order.
    let mut ordered: Vec<&SNode> = Vec::new();
    let mut queue = VecDeque::from([&node]);
    while let Some(n) = queue.pop_front() {
        ordered.push(n);
        match n {
            SNode::Un(_, c) => queue.push_back(c),
            SNode::Bin(_, a, b) => {
                queue.push_back(a);
                queue.push_back(b);
            }
            _ => {}
        }
    }
    fn rebuild(node: &SNode, consts: &mut Vec<f64>) -> ExprNode {
        match node {
            SNode::Var(i) => ExprNode::Variable(*i),
            SNode::Num(v) if *v == 1.0 => ExprNode::One,
            SNode::Num(v) => {
                consts.push(*v);
                ExprNode::Constant(consts.len() - 1)
            }
            SNode::Un(op, c) => ExprNode::Unary(*op, Box::new(rebuild(c, consts))),
            SNode::Bin(op, a, b) => ExprNode::Binary(
                *op,
                Box::new(rebuild(a, consts)),
                Box::new(rebuild(b, consts)),
            ),
        }
    }
    // BFS slot numbering falls out of a BFS rebuild; a plain recursive
    // rebuild numbers them preorder, so renumber afterwards.
    let mut consts = Vec::new();
    let root = rebuild(&node, &mut consts);
    let preorder_tree = ExpressionTree::new(root, consts);
    reorder_constants_bfs(preorder_tree)
}

fn reorder_constants_bfs(tree: ExpressionTree) -> ExpressionTree {
    let mut bfs_old_slots = Vec::new();
    let mut queue = VecDeque::from([tree.root()]);
    while let Some(node) = queue.pop_front() {
        match node {
            ExprNode::Constant(slot) => bfs_old_slots.push(*slot),
            ExprNode::Unary(_, c) => queue.push_back(c),
            ExprNode::Binary(_, a, b) => {
                queue.push_back(a);
                queue.push_back(b);
            }
            _ => {}
        }
    }
    let mut new_of_old = vec![0usize; bfs_old_slots.len()];
    for (new, &old) in bfs_old_slots.iter().enumerate() {
        new_of_old[old] = new;
    }
    let constants: Vec<f64> = bfs_old_slots.iter().map(|&old| tree.constants()[old]).collect();
    fn renumber(node: &ExprNode, map: &[usize]) -> ExprNode {
        match node {
            ExprNode::Constant(old) => ExprNode::Constant(map[*old]),
            ExprNode::Unary(op, c) => ExprNode::Unary(*op, Box::new(renumber(c, map))),
            ExprNode::Binary(op, a, b) => ExprNode::Binary(
                *op,
                Box::new(renumber(a, map)),
                Box::new(renumber(b, map)),
            ),
            other => other.clone(),
        }
    }
    let root = renumber(tree.root(), &new_of_old);
    ExpressionTree::new(root, constants)
}

#[cfg(test)]
mod tests {
    use super::super::{parse_expression, TokenLibrary};

    fn lib2() -> TokenLibrary {
        TokenLibrary::new(2)
    }

    #[test]
    fn identity_elimination() {
        let lib = lib2();
        let t = parse_expression("(x1*1)+0", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "x1");
        assert_eq!(t.simplified_complexity(), 1);
    }

    #[test]
    fn constant_folding() {
        let lib = lib2();
        let t = parse_expression("2+3", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "5");
    }

    #[test]
    fn zero_product_elimination() {
        let lib = lib2();
        let t = parse_expression("sin(x1)+x2*0", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "sin(x1)");
    }

    #[test]
    fn keeps_unary_zero_product() {
        // log(x1)*0 is NaN for x1 <= 0, so it must not be deleted.
        let lib = lib2();
        let t = parse_expression("log(x1)*0", &lib).unwrap();
        assert_eq!(t.simplify().node_count(), t.node_count());
    }

    #[test]
    fn complexity_examples() {
        let lib = lib2();
        assert_eq!(parse_expression("x1+x2", &lib).unwrap().simplified_complexity(), 3);
        assert_eq!(parse_expression("(x1*1)+0", &lib).unwrap().simplified_complexity(), 1);
        // {+, *, 3, sin, x1, ^, x2, 2}
        assert_eq!(
            parse_expression("3*sin(x1)+x2^2", &lib).unwrap().simplified_complexity(),
            8
        );
    }

    #[test]
    fn sub_self_and_div_self() {
        let lib = lib2();
        assert_eq!(
            parse_expression("(x1+x2)-(x1+x2)", &lib).unwrap().simplify().to_infix(),
            "0"
        );
        assert_eq!(parse_expression("x1/x1", &lib).unwrap().simplify().to_infix(), "1");
        // Non-total operand: not deleted.
        let t = parse_expression("log(x1)-log(x1)", &lib).unwrap();
        assert_eq!(t.simplify().node_count(), t.node_count());
    }

    #[test]
    fn pow_rules() {
        let lib = lib2();
        assert_eq!(parse_expression("x1^1", &lib).unwrap().simplify().to_infix(), "x1");
        assert_eq!(parse_expression("log(x1)^0", &lib).unwrap().simplify().to_infix(), "1");
    }

    #[test]
    fn merges_constant_chains() {
        let lib = lib2();
        let t = parse_expression("(x1+2)+3", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "x1+5");
        let t = parse_expression("(x1*2)*4", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "x1*8");
    }

    #[test]
    fn canonical_commutative_order() {
        let lib = lib2();
        let t = parse_expression("x2+x1", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "x1+x2");
        let t = parse_expression("2*x1", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "x1*2");
    }

    #[test]
    fn double_negation() {
        let lib = lib2();
        let t = parse_expression("0-(0-sin(x1))", &lib).unwrap();
        assert_eq!(t.simplify().to_infix(), "sin(x1)");
    }
}
