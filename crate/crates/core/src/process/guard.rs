//! Guard expressions for exclusive gateway flows.
//!
//! ```text
//! expr    := or
//! or      := and (("or" | "||") and)*
//! and     := not (("and" | "&&") not)*
//! not     := ("not" | "!") not | cmp
//! cmp     := operand (("==" | "!=" | "<" | "<=" | ">" | ">=") operand)?
//! operand := "(" expr ")" | number | "string" | true | false | null | path
//! ```
//!
//! Paths name fields of the instance document. Absent fields evaluate to
//! `null`. Ordering comparisons between non-numbers or non-strings are false.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde_json::Value;

use crate::data::FieldPath;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardError(pub String);

impl fmt::Display for GuardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Or(Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Cmp(Box<Expr>, CmpOp, Box<Expr>),
    Path(FieldPath),
    Literal(Value),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Op(CmpOp),
    And,
    Or,
    Not,
    Num(f64),
    Str(String),
    Word(String),
}

fn lex(src: &str) -> Result<Vec<Tok>, GuardError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push(Tok::LParen);
                i += 1
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1
            }
            '=' if next == Some('=') => {
                out.push(Tok::Op(CmpOp::Eq));
                i += 2
            }
            '!' if next == Some('=') => {
                out.push(Tok::Op(CmpOp::Ne));
                i += 2
            }
            '!' => {
                out.push(Tok::Not);
                i += 1
            }
            '<' | '>' => {
                let eq = next == Some('=');
                out.push(Tok::Op(match (c, eq) {
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    _ => CmpOp::Ge,
                }));
                i += if eq { 2 } else { 1 };
            }
            '&' if next == Some('&') => {
                out.push(Tok::And);
                i += 2
            }
            '|' if next == Some('|') => {
                out.push(Tok::Or);
                i += 2
            }
            '"' | '\'' => {
                let end = chars[i + 1..]
                    .iter()
                    .position(|&d| d == c)
                    .ok_or_else(|| GuardError(format!("unterminated string in `{src}`")))?;
                out.push(Tok::Str(chars[i + 1..i + 1 + end].iter().collect()));
                i += end + 2;
            }
            c if c.is_ascii_digit() || (c == '-' && next.is_some_and(|d| d.is_ascii_digit())) => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let n = text
                    .parse::<f64>()
                    .map_err(|_| GuardError(format!("bad number `{text}`")))?;
                out.push(Tok::Num(n));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() {
                    let d = chars[i];
                    if d.is_ascii_alphanumeric() || d == '_' || d == '-' || d == '.' {
                        i += 1;
                    } else if d == '[' && chars.get(i + 1) == Some(&'"') {
                        let close = chars[i + 2..]
                            .iter()
                            .position(|&e| e == '"')
                            .ok_or_else(|| GuardError(format!("unterminated path in `{src}`")))?;
                        i += close + 4;
                    } else {
                        break;
                    }
                }
                let word: String = chars[start..i.min(chars.len())].iter().collect();
                out.push(match word.as_str() {
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    _ => Tok::Word(word),
                });
            }
            other => return Err(GuardError(format!("unexpected `{other}` in `{src}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn or(&mut self) -> Result<Expr, GuardError> {
        let mut lhs = self.and()?;
        while self.peek() == Some(&Tok::Or) {
            self.bump();
            lhs = Expr::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, GuardError> {
        let mut lhs = self.not()?;
        while self.peek() == Some(&Tok::And) {
            self.bump();
            lhs = Expr::And(Box::new(lhs), Box::new(self.not()?));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, GuardError> {
        if self.peek() == Some(&Tok::Not) {
            self.bump();
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        let lhs = self.operand()?;
        if let Some(Tok::Op(op)) = self.peek().cloned() {
            self.bump();
            let rhs = self.operand()?;
            return Ok(Expr::Cmp(Box::new(lhs), op, Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn operand(&mut self) -> Result<Expr, GuardError> {
        match self.bump() {
            Some(Tok::LParen) => {
                let e = self.or()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(GuardError("missing `)`".into())),
                }
            }
            Some(Tok::Num(n)) => Ok(Expr::Literal(number(n))),
            Some(Tok::Str(s)) => Ok(Expr::Literal(Value::String(s))),
            Some(Tok::Word(w)) => Ok(match w.as_str() {
                "true" => Expr::Literal(Value::Bool(true)),
                "false" => Expr::Literal(Value::Bool(false)),
                "null" => Expr::Literal(Value::Null),
                _ => Expr::Path(FieldPath::parse(&w).map_err(|e| GuardError(e.to_string()))?),
            }),
            Some(t) => Err(GuardError(format!("unexpected token {t:?}"))),
            None => Err(GuardError("unexpected end of expression".into())),
        }
    }
}

fn number(n: f64) -> Value {
    if n.fract() == 0.0 && n.abs() < 9.0e15 {
        Value::from(n as i64)
    } else {
        serde_json::Number::from_f64(n).map(Value::Number).unwrap_or(Value::Null)
    }
}

pub fn parse(src: &str) -> Result<Expr, GuardError> {
    let src = src.trim();
    let src = src
        .strip_prefix("${")
        .and_then(|s| s.strip_suffix('}'))
        .unwrap_or(src);
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    let e = p.or()?;
    if p.pos != p.toks.len() {
        return Err(GuardError(format!("trailing input in `{src}`")));
    }
    Ok(e)
}

fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64()?.partial_cmp(&y.as_f64()?),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

fn equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(_), Value::Number(_)) => compare(a, b) == Some(Ordering::Equal),
        _ => a == b,
    }
}

impl Expr {
    fn value(&self, lookup: &dyn Fn(&FieldPath) -> Option<Value>) -> Value {
        match self {
            Expr::Path(p) => lookup(p).unwrap_or(Value::Null),
            Expr::Literal(v) => v.clone(),
            other => Value::Bool(other.eval(lookup)),
        }
    }

    pub fn eval(&self, lookup: &dyn Fn(&FieldPath) -> Option<Value>) -> bool {
        match self {
            Expr::Or(a, b) => a.eval(lookup) || b.eval(lookup),
            Expr::And(a, b) => a.eval(lookup) && b.eval(lookup),
            Expr::Not(a) => !a.eval(lookup),
            Expr::Cmp(a, op, b) => {
                let (x, y) = (a.value(lookup), b.value(lookup));
                match op {
                    CmpOp::Eq => equal(&x, &y),
                    CmpOp::Ne => !equal(&x, &y),
                    CmpOp::Lt => compare(&x, &y) == Some(Ordering::Less),
                    CmpOp::Le => matches!(compare(&x, &y), Some(Ordering::Less | Ordering::Equal)),
                    CmpOp::Gt => compare(&x, &y) == Some(Ordering::Greater),
                    CmpOp::Ge => matches!(compare(&x, &y), Some(Ordering::Greater | Ordering::Equal)),
                }
            }
            Expr::Path(_) | Expr::Literal(_) => self.value(lookup) == Value::Bool(true),
        }
    }

    fn collect(&self, parent_literal: Option<&Value>, out: &mut BTreeMap<FieldPath, Vec<Value>>) {
        match self {
            Expr::Or(a, b) | Expr::And(a, b) => {
                a.collect(None, out);
                b.collect(None, out);
            }
            Expr::Not(a) => a.collect(None, out),
            Expr::Cmp(a, _, b) => {
                let lit = |e: &Expr| match e {
                    Expr::Literal(v) => Some(v.clone()),
                    _ => None,
                };
                a.collect(lit(b).as_ref(), out);
                b.collect(lit(a).as_ref(), out);
            }
            Expr::Path(p) => {
                let entry = out.entry(p.clone()).or_default();
                entry.push(parent_literal.cloned().unwrap_or(Value::Bool(true)));
            }
            Expr::Literal(_) => {}
        }
    }
}

/// Candidate values for each variable referenced by `guards`, derived from
/// the literals each variable is compared against.
pub fn probe_domain(guards: &[&Expr]) -> BTreeMap<FieldPath, Vec<Value>> {
    let mut seen: BTreeMap<FieldPath, Vec<Value>> = BTreeMap::new();
    for g in guards {
        g.collect(None, &mut seen);
    }
    seen.into_iter()
        .map(|(path, lits)| {
            let mut dom: Vec<Value> = Vec::new();
            fn push(dom: &mut Vec<Value>, v: Value) {
                if !dom.contains(&v) {
                    dom.push(v);
                }
            }
            let mut strings = BTreeSet::new();
            for lit in &lits {
                match lit {
                    Value::Bool(_) => {
                        push(&mut dom, Value::Bool(true));
                        push(&mut dom, Value::Bool(false));
                    }
                    Value::Number(n) => {
                        let n = n.as_f64().unwrap_or(0.0);
                        for d in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                            push(&mut dom, number(n + d));
                        }
                    }
                    Value::String(s) => {
                        strings.insert(s.clone());
                        push(&mut dom, Value::String(s.clone()));
                    }
                    _ => {}
                }
            }
            if !strings.is_empty() {
                let mut other = strings.iter().next_back().cloned().unwrap_or_default();
                other.push('~');
                push(&mut dom, Value::String(other));
                push(&mut dom, Value::String(String::new()));
            }
            if dom.is_empty() {
                push(&mut dom, Value::Bool(true));
                push(&mut dom, Value::Bool(false));
            }
            (path, dom)
        })
        .collect()
}

/// Evaluate every guard on every assignment of the probe domain and report
/// an assignment where the number of true guards is not acceptable.
///
/// With a default flow, at most one guard may hold; without one, exactly one.
pub fn check_exclusive(guards: &[&Expr], has_default: bool) -> Result<(), String> {
    const MAX_ASSIGNMENTS: usize = 1_000_000;
    let domain: Vec<(FieldPath, Vec<Value>)> = probe_domain(guards).into_iter().collect();
    let total = domain
        .iter()
        .try_fold(1usize, |acc, (_, d)| acc.checked_mul(d.len()))
        .unwrap_or(usize::MAX);
    if total > MAX_ASSIGNMENTS {
        return Err("guards reference too many values to verify".into());
    }
    let mut idx = vec![0usize; domain.len()];
    loop {
        let assignment: BTreeMap<&FieldPath, &Value> = domain
            .iter()
            .zip(&idx)
            .map(|((p, d), &i)| (p, &d[i]))
            .collect();
        let lookup = |p: &FieldPath| assignment.get(p).map(|v| (*v).clone());
        let holding = guards.iter().filter(|g| g.eval(&lookup)).count();
        let ok = if has_default { holding <= 1 } else { holding == 1 };
        if !ok {
            let shown: Vec<String> = assignment.iter().map(|(p, v)| format!("{p}={v}")).collect();
            let what = if holding == 0 { "no guard holds" } else { "several guards hold" };
            return Err(format!("{what} for {}", shown.join(", ")));
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == idx.len() {
                return Ok(());
            }
            idx[k] += 1;
            if idx[k] < domain[k].1.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
