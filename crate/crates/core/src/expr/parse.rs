//! A small infix parser for the engine's vocabulary.
//!
//! Used to construct ground-truth trees for reports and tests. Numeric
//! literals other than `1` become bound constant slots; `1` becomes the
//! literal-one token. Unary minus is accepted in front of numeric literals
//! only (the vocabulary has no negation operator).

use super::{BinaryOp, ExprNode, ExpressionTree, TokenLibrary, UnaryOp};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("unexpected character {0:?} at byte {1}")]
    UnexpectedChar(char, usize),
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unknown identifier {0:?}")]
    UnknownIdent(String),
    #[error("variable {0} exceeds the library's {1} input variables")]
    VariableOutOfRange(String, usize),
    #[error("expected {0}")]
    Expected(&'static str),
    #[error("trailing input starting at byte {0}")]
    Trailing(usize),
    #[error("invalid number {0:?}")]
    BadNumber(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn lex(input: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let mut out = Vec::new();
    let bytes: Vec<char> = input.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' => i += 1,
            '+' | '-' | '*' | '/' | '^' => {
                out.push((Tok::Op(c), i));
                i += 1;
            }
            '(' => {
                out.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                out.push((Tok::RParen, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == '.'
                        || bytes[i] == 'e'
                        || bytes[i] == 'E'
                        || ((bytes[i] == '+' || bytes[i] == '-')
                            && i > start
                            && (bytes[i - 1] == 'e' || bytes[i - 1] == 'E')))
                {
                    i += 1;
                }
                let text: String = bytes[start..i].iter().collect();
                let v: f64 = text.parse().map_err(|_| ParseError::BadNumber(text.clone()))?;
                out.push((Tok::Num(v), start));
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    i += 1;
                }
                out.push((Tok::Ident(bytes[start..i].iter().collect()), start));
            }
            other => return Err(ParseError::UnexpectedChar(other, i)),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: VecDeque<(Tok, usize)>,
    lib: &'a TokenLibrary,
    constants: Vec<f64>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.front().map(|(t, _)| t)
    }

    fn next(&mut self) -> Result<(Tok, usize), ParseError> {
        self.toks.pop_front().ok_or(ParseError::UnexpectedEnd)
    }

    fn number(&mut self, v: f64) -> ExprNode {
        if v == 1.0 {
            ExprNode::One
        } else {
            self.constants.push(v);
            ExprNode::Constant(self.constants.len() - 1)
        }
    }

    fn expr(&mut self) -> Result<ExprNode, ParseError> {
        let mut node = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek() {
            let op = if *op == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            self.next()?;
            let rhs = self.term()?;
            node = ExprNode::Binary(op, Box::new(node), Box::new(rhs));
        }
        Ok(node)
    }

    fn term(&mut self) -> Result<ExprNode, ParseError> {
        let mut node = self.power()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek() {
            let op = if *op == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            self.next()?;
            let rhs = self.power()?;
            node = ExprNode::Binary(op, Box::new(node), Box::new(rhs));
        }
        Ok(node)
    }

    fn power(&mut self) -> Result<ExprNode, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.next()?;
            let exp = self.power()?; // right associative
            return Ok(ExprNode::Binary(BinaryOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprNode, ParseError> {
        let (tok, pos) = self.next()?;
        match tok {
            Tok::Num(v) => Ok(self.number(v)),
            Tok::Op('-') => match self.next()? {
                (Tok::Num(v), _) => Ok(self.number(-v)),
                _ => Err(ParseError::Expected("a number after unary minus")),
            },
            Tok::LParen => {
                let inner = self.expr()?;
                match self.next()? {
                    (Tok::RParen, _) => Ok(inner),
                    _ => Err(ParseError::Expected("closing parenthesis")),
                }
            }
            Tok::Ident(name) => {
                let unary = match name.as_str() {
                    "sin" => Some(UnaryOp::Sin),
                    "cos" => Some(UnaryOp::Cos),
                    "log" | "ln" => Some(UnaryOp::Log),
                    "sqrt" => Some(UnaryOp::Sqrt),
                    "exp" => Some(UnaryOp::Exp),
                    _ => None,
                };
                if let Some(op) = unary {
                    match self.next()? {
                        (Tok::LParen, _) => {}
                        _ => return Err(ParseError::Expected("opening parenthesis")),
                    }
                    let arg = self.expr()?;
                    match self.next()? {
                        (Tok::RParen, _) => Ok(ExprNode::Unary(op, Box::new(arg))),
                        _ => Err(ParseError::Expected("closing parenthesis")),
                    }
                } else if name == "c" {
                    self.constants.push(1.0);
                    Ok(ExprNode::Constant(self.constants.len() - 1))
                } else if let Some(rest) = name.strip_prefix('x') {
                    let idx: usize = rest
                        .parse()
                        .map_err(|_| ParseError::UnknownIdent(name.clone()))?;
                    if idx == 0 || idx > self.lib.input_dim() {
                        return Err(ParseError::VariableOutOfRange(
                            name,
                            self.lib.input_dim(),
                        ));
                    }
                    Ok(ExprNode::Variable(idx - 1))
                } else {
                    Err(ParseError::UnknownIdent(name))
                }
            }
            Tok::Op(c) => Err(ParseError::UnexpectedChar(c, pos)),
            Tok::RParen => Err(ParseError::UnexpectedChar(')', pos)),
        }
    }
}

/// Parses an infix expression against the given library.
pub fn parse_expression(input: &str, lib: &TokenLibrary) -> Result<ExpressionTree, ParseError> {
    let toks = lex(input)?;
    let mut parser = Parser { toks: toks.into(), lib, constants: Vec::new() };
    let root = parser.expr()?;
    if let Some((_, pos)) = parser.toks.front() {
        return Err(ParseError::Trailing(*pos));
    }
    // The parser numbers constants in creation (infix) order; renumber the
    // slots to BFS order so the tree matches its own token encoding.
    let mut bfs_slots = Vec::new();
    let mut queue = VecDeque::from([&root]);
    while let Some(node) = queue.pop_front() {
        match node {
            ExprNode::Constant(slot) => bfs_slots.push(*slot),
            ExprNode::Unary(_, c) => queue.push_back(c),
            ExprNode::Binary(_, a, b) => {
                queue.push_back(a);
                queue.push_back(b);
            }
            _ => {}
        }
    }
    let remap: std::collections::HashMap<usize, usize> =
        bfs_slots.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let constants: Vec<f64> = bfs_slots.iter().map(|&old| parser.constants[old]).collect();
    fn renumber(node: ExprNode, remap: &std::collections::HashMap<usize, usize>) -> ExprNode {
        match node {
            ExprNode::Constant(old) => ExprNode::Constant(remap[&old]),
            ExprNode::Unary(op, c) => ExprNode::Unary(op, Box::new(renumber(*c, remap))),
            ExprNode::Binary(op, a, b) => ExprNode::Binary(
                op,
                Box::new(renumber(*a, remap)),
                Box::new(renumber(*b, remap)),
            ),
            other => other,
        }
    }
    Ok(ExpressionTree::new(renumber(root, &remap), constants))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prints() {
        let lib = TokenLibrary::new(2);
        let t = parse_expression("3*sin(x1)+x2^2", &lib).unwrap();
        assert_eq!(t.to_infix(), "3*sin(x1)+x2^2");
        assert_eq!(t.constants(), &[3.0, 2.0]);
    }

    #[test]
    fn negative_literal() {
        let lib = TokenLibrary::new(1);
        let t = parse_expression("-2.5*x1", &lib).unwrap();
        assert_eq!(t.constants(), &[-2.5]);
    }

    #[test]
    fn constant_placeholder_token() {
        let lib = TokenLibrary::new(1);
        let t = parse_expression("c*x1+c", &lib).unwrap();
        assert_eq!(t.constants().len(), 2);
    }

    #[test]
    fn rejects_unknowns() {
        let lib = TokenLibrary::new(1);
        assert!(matches!(
            parse_expression("tan(x1)", &lib),
            Err(ParseError::UnknownIdent(_))
        ));
        assert!(matches!(
            parse_expression("x3", &lib),
            Err(ParseError::VariableOutOfRange(..))
        ));
        assert!(matches!(parse_expression("x1+", &lib), Err(ParseError::UnexpectedEnd)));
        assert!(matches!(parse_expression("x1 x1", &lib), Err(ParseError::Trailing(_))));
    }

    #[test]
    fn bfs_constant_order() {
        let lib = TokenLibrary::new(1);
        // BFS order visits + first, then *, then the trailing 7, then 5.
        let t = parse_expression("5*x1+7", &lib).unwrap();
        assert_eq!(t.constants(), &[7.0, 5.0]);
        let seq = t.bfs_encode(&lib);
        let (status, decoded) = super::super::bfs_decode(&seq, &lib);
        assert_eq!(status, super::super::DecodeStatus::Complete);
        assert!(decoded.unwrap().same_structure(&t));
    }
}
