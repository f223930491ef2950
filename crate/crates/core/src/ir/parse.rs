//! Parser for the kernel DSL.
//!
//! ```text
//! kernel <name>
//! tensor <name> [<d0>][<d1>]... : input|output|temp
//! for <var> in 0..<hi> { ... }
//! <ref> = <expr>   |   <ref> += <expr>
//! ```
//!
//! Expressions combine references, numeric constants, `+`, `*`, `max(a, b)`,
//! `exp(a)` and `softmax[v](ref)`. Indices are affine in exactly one loop
//! variable. `#` starts a comment.

use super::*;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const SYMBOLS: &[&str] = &[
    "+=", "..", "[", "]", "{", "}", "(", ")", "=", "+", "-", "*", ":", ",",
];

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let line_no = lineno + 1;
        let code = line.split('#').next().unwrap_or("");
        let bytes = code.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(code[start..i].to_string()),
                    line: line_no,
                    col,
                });
                continue;
            }
            if c.is_ascii_digit() {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                // A single '.' followed by a digit makes a float; ".." is a range.
                let is_float = i + 1 < bytes.len()
                    && bytes[i] == b'.'
                    && (bytes[i + 1] as char).is_ascii_digit();
                if is_float {
                    i += 1;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                        i += 1;
                        if i < bytes.len() && (bytes[i] == b'-' || bytes[i] == b'+') {
                            i += 1;
                        }
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                    let text = &code[start..i];
                    let v = text.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        col,
                        msg: format!("bad number `{text}`"),
                    })?;
                    out.push(Token {
                        tok: Tok::Float(v),
                        line: line_no,
                        col,
                    });
                } else {
                    let text = &code[start..i];
                    let v = text.parse::<i64>().map_err(|_| Error::Parse {
                        line: line_no,
                        col,
                        msg: format!("integer `{text}` out of range"),
                    })?;
                    out.push(Token {
                        tok: Tok::Int(v),
                        line: line_no,
                        col,
                    });
                }
                continue;
            }
            let sym = SYMBOLS.iter().find(|s| code[i..].starts_with(**s));
            match sym {
                Some(s) => {
                    out.push(Token {
                        tok: Tok::Sym(s),
                        line: line_no,
                        col,
                    });
                    i += s.len();
                }
                None => {
                    return Err(Error::Parse {
                        line: line_no,
                        col,
                        msg: format!("unexpected character `{c}`"),
                    })
                }
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    tensors: Vec<TensorDecl>,
    vars: Vec<LoopVar>,
    stmts: Vec<Statement>,
    spans: Vec<Span>,
    /// Loop variables currently in scope, outermost first.
    scope: Vec<VarId>,
}

type PResult<T> = Result<T>;

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        match self.toks.get(self.pos).or(self.toks.last()) {
            Some(t) => (t.line, t.col),
            None => (1, 1),
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        let (line, col) = self.here();
        Err(Error::Parse {
            line,
            col,
            msg: msg.into(),
        })
    }

    fn err_at<T>(&self, at: (usize, usize), msg: impl Into<String>) -> PResult<T> {
        Err(Error::Parse {
            line: at.0,
            col: at.1,
            msg: msg.into(),
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.tok.clone());
        self.pos += 1;
        t
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`"))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn int(&mut self, what: &str) -> PResult<i64> {
        match self.peek() {
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == kw)
    }

    fn parse_tensor(&mut self) -> PResult<()> {
        self.pos += 1; // `tensor`
        let at = self.here();
        let name = self.ident("tensor name")?;
        if self.tensors.iter().any(|t| t.name == name) {
            return self.err_at(at, format!("tensor `{name}` declared twice"));
        }
        let mut dims = Vec::new();
        while self.eat_sym("[") {
            let d = self.int("extent")?;
            if d < 1 {
                return self.err("extents must be at least 1");
            }
            dims.push(d as usize);
            self.expect_sym("]")?;
        }
        if dims.is_empty() {
            return self.err_at(at, format!("tensor `{name}` needs at least one dimension"));
        }
        self.expect_sym(":")?;
        let role = match self.ident("role")?.as_str() {
            "input" => Role::Input,
            "output" => Role::Output,
            "temp" => Role::Temp,
            other => return self.err(format!("unknown role `{other}`")),
        };
        self.tensors.push(TensorDecl { name, dims, role });
        Ok(())
    }

    fn parse_items(&mut self) -> PResult<Vec<Item>> {
        let mut items = Vec::new();
        loop {
            match self.peek() {
                None => break,
                Some(Tok::Sym("}")) => break,
                Some(Tok::Ident(s)) if s == "for" => items.push(self.parse_loop()?),
                Some(Tok::Ident(s)) if s == "tensor" || s == "kernel" => {
                    return self.err(format!("`{s}` must appear before any loop"));
                }
                Some(Tok::Ident(_)) => items.push(self.parse_stmt()?),
                _ => return self.err("expected `for` or a statement"),
            }
        }
        Ok(items)
    }

    fn parse_loop(&mut self) -> PResult<Item> {
        self.pos += 1; // `for`
        let at = self.here();
        let name = self.ident("loop variable")?;
        if !self.keyword("in") {
            return self.err("expected `in`");
        }
        self.pos += 1;
        let lo = self.int("lower bound")?;
        if lo != 0 {
            return self.err("loop lower bounds must be 0");
        }
        self.expect_sym("..")?;
        let hi = self.int("upper bound")?;
        if hi < 1 {
            return self.err("loop upper bound must be at least 1");
        }
        let var = match self.vars.iter().position(|v| v.name == name) {
            Some(v) => {
                if self.scope.contains(&v) {
                    return self.err_at(
                        at,
                        format!("loop variable `{name}` shadows an enclosing loop"),
                    );
                }
                if self.vars[v].extent != hi as usize {
                    return self.err_at(
                        at,
                        format!(
                            "loop variable `{name}` reused with extent {hi}, previously {}",
                            self.vars[v].extent
                        ),
                    );
                }
                v
            }
            None => {
                if self.tensors.iter().any(|t| t.name == name) {
                    return self.err_at(at, format!("`{name}` is already a tensor"));
                }
                self.vars.push(LoopVar {
                    name,
                    extent: hi as usize,
                });
                self.vars.len() - 1
            }
        };
        self.expect_sym("{")?;
        self.scope.push(var);
        let body = self.parse_items()?;
        self.scope.pop();
        self.expect_sym("}")?;
        Ok(Item::Loop { var, body })
    }

    fn parse_index(&mut self) -> PResult<IndexExpr> {
        let at = self.here();
        // Sum of terms: int | var | int*var | var*int, with + or -.
        let mut coeffs: Vec<(VarId, i64)> = Vec::new();
        let mut constant = 0i64;
        let mut sign = 1i64;
        if self.eat_sym("-") {
            sign = -1;
        }
        loop {
            let (var, k) = match self.next() {
                Some(Tok::Int(a)) => {
                    if self.eat_sym("*") {
                        let v = self.ident("loop variable")?;
                        (Some(v), a)
                    } else {
                        (None, a)
                    }
                }
                Some(Tok::Ident(v)) => {
                    if self.eat_sym("*") {
                        let a = self.int("scale")?;
                        (Some(v), a)
                    } else {
                        (Some(v), 1)
                    }
                }
                _ => return self.err_at(at, "malformed index expression"),
            };
            match var {
                Some(name) => {
                    let Some(id) = self.vars.iter().position(|v| v.name == name) else {
                        return self.err_at(at, format!("unbound loop variable `{name}`"));
                    };
                    if !self.scope.contains(&id) {
                        return self.err_at(at, format!("unbound loop variable `{name}`"));
                    }
                    match coeffs.iter_mut().find(|(v, _)| *v == id) {
                        Some((_, c)) => *c += sign * k,
                        None => coeffs.push((id, sign * k)),
                    }
                }
                None => constant += sign * k,
            }
            if self.eat_sym("+") {
                sign = 1;
            } else if self.eat_sym("-") {
                sign = -1;
            } else {
                break;
            }
        }
        coeffs.retain(|(_, c)| *c != 0);
        match coeffs.as_slice() {
            [] => self.err_at(at, "index must use exactly one loop variable"),
            [(var, scale)] => {
                if *scale < 1 {
                    return self.err_at(at, "index scale must be at least 1");
                }
                Ok(IndexExpr::new(*var, *scale, constant))
            }
            _ => self.err_at(at, "multi-variable affine indexing is not supported"),
        }
    }

    fn parse_ref(&mut self) -> PResult<TensorRef> {
        let at = self.here();
        let name = self.ident("tensor name")?;
        let Some(tensor) = self.tensors.iter().position(|t| t.name == name) else {
            return self.err_at(at, format!("unknown tensor `{name}`"));
        };
        let mut index = Vec::new();
        while self.eat_sym("[") {
            index.push(self.parse_index()?);
            self.expect_sym("]")?;
        }
        let decl = &self.tensors[tensor];
        if index.len() != decl.rank() {
            return self.err_at(
                at,
                format!(
                    "`{name}` has rank {}, referenced with {} indices",
                    decl.rank(),
                    index.len()
                ),
            );
        }
        for (d, e) in index.iter().enumerate() {
            let hi_var = self.vars[e.var].extent as i64 - 1;
            let lo = e.eval(0);
            let hi = e.eval(hi_var);
            if lo < 0 || hi >= decl.dims[d] as i64 {
                return self.err_at(
                    at,
                    format!(
                        "index {} of `{name}` spans [{lo}, {hi}], outside extent {}",
                        d, decl.dims[d]
                    ),
                );
            }
        }
        Ok(TensorRef { tensor, index })
    }

    fn parse_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.parse_term()?;
        while self.eat_sym("+") {
            let rhs = self.parse_term()?;
            lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> PResult<Expr> {
        let mut lhs = self.parse_factor()?;
        while self.eat_sym("*") {
            let rhs = self.parse_factor()?;
            lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_factor(&mut self) -> PResult<Expr> {
        let at = self.here();
        match self.peek().cloned() {
            Some(Tok::Sym("-")) => {
                self.pos += 1;
                match self.next() {
                    Some(Tok::Int(v)) => Ok(Expr::Const(-(v as f64))),
                    Some(Tok::Float(v)) => Ok(Expr::Const(-v)),
                    _ => self.err_at(at, "`-` is only allowed before a numeric constant"),
                }
            }
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v as f64))
            }
            Some(Tok::Float(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.parse_expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "max" => {
                    self.pos += 1;
                    self.expect_sym("(")?;
                    let a = self.parse_expr()?;
                    self.expect_sym(",")?;
                    let b = self.parse_expr()?;
                    self.expect_sym(")")?;
                    Ok(Expr::Max(Box::new(a), Box::new(b)))
                }
                "exp" => {
                    self.pos += 1;
                    self.expect_sym("(")?;
                    let a = self.parse_expr()?;
                    self.expect_sym(")")?;
                    Ok(Expr::Exp(Box::new(a)))
                }
                "softmax" => self.err_at(at, "softmax must be the whole right-hand side"),
                _ if self.tensors.iter().any(|t| t.name == name) => {
                    Ok(Expr::Ref(self.parse_ref()?))
                }
                _ if self.peek_is_call() => {
                    self.err_at(at, format!("unsupported operator `{name}`"))
                }
                _ => self.err_at(at, format!("unknown tensor `{name}`")),
            },
            _ => self.err_at(at, "expected an expression"),
        }
    }

    fn peek_is_call(&self) -> bool {
        matches!(
            self.toks.get(self.pos + 1).map(|t| &t.tok),
            Some(Tok::Sym("("))
        )
    }

    fn parse_rhs(&mut self) -> PResult<Expr> {
        if self.keyword("softmax") {
            let at = self.here();
            self.pos += 1;
            self.expect_sym("[")?;
            let vname = self.ident("softmax axis variable")?;
            let Some(axis) = self.vars.iter().position(|v| v.name == vname) else {
                return self.err_at(at, format!("unbound loop variable `{vname}`"));
            };
            if !self.scope.contains(&axis) {
                return self.err_at(at, format!("unbound loop variable `{vname}`"));
            }
            self.expect_sym("]")?;
            self.expect_sym("(")?;
            let arg = self.parse_ref()?;
            self.expect_sym(")")?;
            return Ok(Expr::Softmax { axis, arg });
        }
        self.parse_expr()
    }

    fn parse_stmt(&mut self) -> PResult<Item> {
        let at = self.here();
        let dst = self.parse_ref()?;
        let op = if self.eat_sym("+=") {
            AssignOp::Accumulate
        } else if self.eat_sym("=") {
            AssignOp::Assign
        } else {
            return self.err("expected `=` or `+=`");
        };
        let rhs = self.parse_rhs()?;
        let st = Statement {
            loops: self.scope.clone(),
            dst,
            op,
            rhs,
        };
        self.check_stmt(&st, at)?;
        self.stmts.push(st);
        self.spans.push(Span {
            line: at.0,
            col: at.1,
        });
        Ok(Item::Stmt(self.stmts.len() - 1))
    }

    fn check_stmt(&self, st: &Statement, at: (usize, usize)) -> PResult<()> {
        let dst_decl = &self.tensors[st.dst.tensor];
        if dst_decl.role == Role::Input {
            return self.err_at(at, format!("cannot write input tensor `{}`", dst_decl.name));
        }
        let mut seen = Vec::new();
        for e in &st.dst.index {
            if seen.contains(&e.var) {
                return self.err_at(at, "destination uses the same loop variable twice");
            }
            seen.push(e.var);
        }
        if st.op == AssignOp::Assign && !st.reduction_vars().is_empty() {
            let v = &self.vars[st.reduction_vars()[0]].name;
            return self.err_at(
                at,
                format!("`=` inside reduction loop `{v}` keeps only the last value; use `+=`"),
            );
        }
        if let Expr::Softmax { axis, arg } = &st.rhs {
            if st.op != AssignOp::Assign {
                return self.err_at(at, "softmax requires `=`");
            }
            if st.inner_var() != *axis {
                return self.err_at(at, "softmax axis must be the innermost loop");
            }
            let count = |r: &TensorRef| r.index.iter().filter(|e| e.var == *axis).count();
            if count(&st.dst) != 1 || count(arg) != 1 {
                return self.err_at(
                    at,
                    "softmax axis must index one dimension of source and destination",
                );
            }
        }
        Ok(())
    }
}

pub fn parse_kernel(src: &str) -> Result<Kernel> {
    let toks = tokenize(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        tensors: Vec::new(),
        vars: Vec::new(),
        stmts: Vec::new(),
        spans: Vec::new(),
        scope: Vec::new(),
    };
    if !p.keyword("kernel") {
        return p.err("source must start with `kernel <name>`");
    }
    p.pos += 1;
    let name = p.ident("kernel name")?;
    while p.keyword("tensor") {
        p.parse_tensor()?;
    }
    let items = p.parse_items()?;
    if p.pos < p.toks.len() {
        return p.err("unbalanced `}`");
    }
    if p.stmts.is_empty() {
        return p.err("kernel has no statements");
    }
    let kernel = Kernel {
        name,
        tensors: p.tensors,
        vars: p.vars,
        stmts: p.stmts,
        items,
        spans: p.spans,
    };
    check_kernel(&kernel)?;
    Ok(kernel)
}

fn check_kernel(k: &Kernel) -> Result<()> {
    let at = |s: usize| {
        let sp = k.spans.get(s).copied().unwrap_or_default();
        (sp.line, sp.col)
    };
    let fail = |(line, col): (usize, usize), msg: String| Err(Error::Parse { line, col, msg });

    let mut used = vec![false; k.vars.len()];
    for (_, r, _) in k.all_refs() {
        for e in &r.index {
            used[e.var] = true;
        }
    }
    if let Some(v) = used.iter().position(|u| !u) {
        return fail(
            (1, 1),
            format!(
                "loop variable `{}` is never used in an index",
                k.vars[v].name
            ),
        );
    }
    let mut referenced = vec![false; k.tensors.len()];
    for (_, r, _) in k.all_refs() {
        referenced[r.tensor] = true;
    }
    if let Some(t) = referenced.iter().position(|u| !u) {
        return fail(
            (1, 1),
            format!("tensor `{}` is never referenced", k.tensors[t].name),
        );
    }
    if k.outputs().next().is_none() {
        return fail((1, 1), "kernel declares no output tensor".into());
    }
    let mut written = vec![false; k.tensors.len()];
    for st in &k.stmts {
        written[st.dst.tensor] = true;
    }
    for (t, decl) in k.tensors.iter().enumerate() {
        if decl.role == Role::Output && !written[t] {
            return fail((1, 1), format!("output `{}` is never written", decl.name));
        }
    }
    // Statements sharing a loop body may only share a tensor when every one
    // of them accumulates into it.
    for group in k.sibling_groups() {
        for (i, &a) in group.iter().enumerate() {
            for &b in &group[i + 1..] {
                let (sa, sb) = (&k.stmts[a], &k.stmts[b]);
                let reads_a = sb.rhs.refs().iter().any(|r| r.tensor == sa.dst.tensor);
                let reads_b = sa.rhs.refs().iter().any(|r| r.tensor == sb.dst.tensor);
                let both_acc = sa.dst.tensor == sb.dst.tensor
                    && sa.op == AssignOp::Accumulate
                    && sb.op == AssignOp::Accumulate;
                if reads_a || reads_b || (sa.dst.tensor == sb.dst.tensor && !both_acc) {
                    return fail(
                        at(b),
                        "statements in one loop body depend on each other; split them into separate loops"
                            .into(),
                    );
                }
            }
        }
    }
    Ok(())
}
