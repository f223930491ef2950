//! Kernel IR: typed tensors, a loop nest and affine single-variable indexing.

mod builtins;
mod interp;
mod parse;
mod print;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use builtins::{builtin, builtin_kernels, fig4_kernel, BUILTIN_NAMES, FIG4_SOURCE};
pub use interp::{execute_all, reference_execute};
pub use parse::parse_kernel;
pub use print::print_kernel;

pub type VarId = usize;
pub type TensorId = usize;

/// `scale * var + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexExpr {
    pub var: VarId,
    pub scale: i64,
    pub offset: i64,
}

impl IndexExpr {
    pub fn new(var: VarId, scale: i64, offset: i64) -> Self {
        IndexExpr { var, scale, offset }
    }

    pub fn eval(&self, v: i64) -> i64 {
        self.scale * v + self.offset
    }

    /// Render with the kernel's variable names (`b`, `b+1`, `i*2`).
    pub fn render(&self, kernel: &Kernel) -> String {
        let name = &kernel.vars[self.var].name;
        let mut s = name.clone();
        if self.scale != 1 {
            s.push_str(&format!("*{}", self.scale));
        }
        match self.offset {
            0 => {}
            c if c > 0 => s.push_str(&format!("+{c}")),
            c => s.push_str(&format!("{c}")),
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Output,
    Temp,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Input => "input",
            Role::Output => "output",
            Role::Temp => "temp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDecl {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: Role,
}

impl TensorDecl {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn elements(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopVar {
    pub name: String,
    /// Exclusive upper bound; the lower bound is always 0.
    pub extent: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorRef {
    pub tensor: TensorId,
    pub index: Vec<IndexExpr>,
}

impl TensorRef {
    pub fn uses_var(&self, v: VarId) -> bool {
        self.index.iter().any(|e| e.var == v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Ref(TensorRef),
    Const(f64),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    /// Normalized exponential of `arg` along loop variable `axis`. Only
    /// admitted as the whole right-hand side of an assignment.
    Softmax {
        axis: VarId,
        arg: TensorRef,
    },
}

impl Expr {
    /// Tensor references in evaluation (post-) order.
    pub fn refs(&self) -> Vec<&TensorRef> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a TensorRef>) {
        match self {
            Expr::Ref(r) => out.push(r),
            Expr::Softmax { arg, .. } => out.push(arg),
            Expr::Const(_) => {}
            Expr::Add(a, b) | Expr::Mul(a, b) | Expr::Max(a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
            Expr::Exp(a) => a.collect_refs(out),
        }
    }

    pub fn uses_exp(&self) -> bool {
        match self {
            Expr::Exp(_) => true,
            Expr::Add(a, b) | Expr::Mul(a, b) | Expr::Max(a, b) => a.uses_exp() || b.uses_exp(),
            _ => false,
        }
    }

    pub fn is_binary_arith(&self) -> bool {
        matches!(self, Expr::Add(..) | Expr::Mul(..) | Expr::Max(..))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignOp {
    Assign,
    Accumulate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    /// Enclosing loop variables, outermost first.
    pub loops: Vec<VarId>,
    pub dst: TensorRef,
    pub op: AssignOp,
    pub rhs: Expr,
}

impl Statement {
    /// Loop variables that do not index the destination.
    pub fn reduction_vars(&self) -> Vec<VarId> {
        self.loops
            .iter()
            .copied()
            .filter(|&v| !self.dst.uses_var(v))
            .collect()
    }

    pub fn is_softmax(&self) -> bool {
        matches!(self.rhs, Expr::Softmax { .. })
    }

    /// Innermost loop variable; rows of a compute tile run along it.
    pub fn inner_var(&self) -> VarId {
        *self.loops.last().expect("statements sit inside loops")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Loop { var: VarId, body: Vec<Item> },
    Stmt(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct Kernel {
    pub name: String,
    pub tensors: Vec<TensorDecl>,
    pub vars: Vec<LoopVar>,
    pub stmts: Vec<Statement>,
    pub items: Vec<Item>,
    /// Source position of each statement, for diagnostics.
    pub spans: Vec<Span>,
}

impl PartialEq for Kernel {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.tensors == other.tensors
            && self.vars == other.vars
            && self.stmts == other.stmts
            && self.items == other.items
    }
}

impl Kernel {
    pub fn tensor_id(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn var_id(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &TensorDecl> {
        self.tensors.iter().filter(|t| t.role == Role::Input)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &TensorDecl> {
        self.tensors.iter().filter(|t| t.role == Role::Output)
    }

    /// Every tensor reference as `(statement, ref, is_destination)`.
    pub fn all_refs(&self) -> Vec<(usize, &TensorRef, bool)> {
        let mut out = Vec::new();
        for (s, st) in self.stmts.iter().enumerate() {
            out.push((s, &st.dst, true));
            for r in st.rhs.refs() {
                out.push((s, r, false));
            }
        }
        out
    }

    /// Statements writing tensor `t`.
    pub fn writers(&self, t: TensorId) -> Vec<usize> {
        (0..self.stmts.len())
            .filter(|&s| self.stmts[s].dst.tensor == t)
            .collect()
    }

    /// `T[b+1][i*2]` style rendering of a reference.
    pub fn render_ref(&self, r: &TensorRef) -> String {
        let mut s = self.tensors[r.tensor].name.clone();
        for e in &r.index {
            s.push('[');
            s.push_str(&e.render(self));
            s.push(']');
        }
        s
    }

    /// `A0` style name of a tensor dimension.
    pub fn dim_name(&self, t: TensorId, d: usize) -> String {
        format!("{}{}", self.tensors[t].name, d)
    }

    /// Statements grouped by the loop body that directly contains them.
    pub(crate) fn sibling_groups(&self) -> Vec<Vec<usize>> {
        fn walk(items: &[Item], out: &mut Vec<Vec<usize>>) {
            let direct: Vec<usize> = items
                .iter()
                .filter_map(|i| match i {
                    Item::Stmt(s) => Some(*s),
                    _ => None,
                })
                .collect();
            if direct.len() > 1 {
                out.push(direct);
            }
            for i in items {
                if let Item::Loop { body, .. } = i {
                    walk(body, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.items, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_rendering() {
        let k = parse_kernel(
            "kernel t\ntensor A [12][16] : input\ntensor C [11][8] : output\n\
             for b in 0..11 { for i in 0..8 { C[b][i] = A[b+1][i*2] } }",
        )
        .unwrap();
        let r = &k.stmts[0].rhs.refs()[0].index;
        assert_eq!(r[0].render(&k), "b+1");
        assert_eq!(r[1].render(&k), "i*2");
        assert_eq!(k.render_ref(k.stmts[0].rhs.refs()[0]), "A[b+1][i*2]");
    }
}
