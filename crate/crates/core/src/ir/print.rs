use super::*;

/// Render a kernel back to DSL source that parses to an equal kernel.
pub fn print_kernel(k: &Kernel) -> String {
    let mut out = format!("kernel {}\n", k.name);
    for t in &k.tensors {
        out.push_str(&format!("tensor {} ", t.name));
        for d in &t.dims {
            out.push_str(&format!("[{d}]"));
        }
        out.push_str(&format!(" : {}\n", t.role));
    }
    for item in &k.items {
        print_item(k, item, 0, &mut out);
    }
    out
}

fn print_item(k: &Kernel, item: &Item, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    match item {
        Item::Loop { var, body } => {
            let v = &k.vars[*var];
            out.push_str(&format!("{pad}for {} in 0..{} {{\n", v.name, v.extent));
            for i in body {
                print_item(k, i, depth + 1, out);
            }
            out.push_str(&format!("{pad}}}\n"));
        }
        Item::Stmt(s) => {
            let st = &k.stmts[*s];
            let op = match st.op {
                AssignOp::Assign => "=",
                AssignOp::Accumulate => "+=",
            };
            out.push_str(&format!(
                "{pad}{} {op} {}\n",
                k.render_ref(&st.dst),
                print_expr(k, &st.rhs)
            ));
        }
    }
}

fn print_const(v: f64) -> String {
    let s = format!("{v:?}");
    // The lexer wants a '.' before any exponent.
    match s.find('e') {
        Some(p) if !s[..p].contains('.') => format!("{}.0{}", &s[..p], &s[p..]),
        _ => s,
    }
}

pub(crate) fn print_expr(k: &Kernel, e: &Expr) -> String {
    match e {
        Expr::Ref(r) => k.render_ref(r),
        Expr::Const(v) => print_const(*v),
        Expr::Add(a, b) => {
            let rhs = print_expr(k, b);
            let rhs = if matches!(**b, Expr::Add(..)) {
                format!("({rhs})")
            } else {
                rhs
            };
            format!("{} + {rhs}", print_expr(k, a))
        }
        Expr::Mul(a, b) => {
            let wrap = |x: &Expr, right: bool| {
                let s = print_expr(k, x);
                if matches!(x, Expr::Add(..)) || (right && matches!(x, Expr::Mul(..))) {
                    format!("({s})")
                } else {
                    s
                }
            };
            format!("{} * {}", wrap(a, false), wrap(b, true))
        }
        Expr::Max(a, b) => format!("max({}, {})", print_expr(k, a), print_expr(k, b)),
        Expr::Exp(a) => format!("exp({})", print_expr(k, a)),
        Expr::Softmax { axis, arg } => {
            format!("softmax[{}]({})", k.vars[*axis].name, k.render_ref(arg))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_round_trip() {
        for (name, ext) in [
            ("gemv", vec![2, 8, 16]),
            ("red", vec![1, 32]),
            ("va", vec![8]),
            ("relu", vec![8]),
            ("attn", vec![2, 4, 8]),
        ] {
            let k = builtin(name, &ext).unwrap();
            let again = parse_kernel(&print_kernel(&k)).unwrap();
            assert_eq!(again, k, "{name}");
        }
    }

    #[test]
    fn constants_with_exponent_reparse() {
        assert_eq!(print_const(1e-7), "1.0e-7");
        assert_eq!(print_const(2.5), "2.5");
        assert_eq!(print_const(-3.0), "-3.0");
    }
}
