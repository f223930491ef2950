//! Builtin kernel templates, instantiated by generating DSL text.

use super::{parse_kernel, Kernel};
use crate::error::{Error, Result};

pub const BUILTIN_NAMES: &[&str] = &["gemv", "red", "va", "relu", "attn"];

/// Template name and the extents it takes.
pub fn builtin_kernels() -> Vec<(&'static str, &'static [&'static str])> {
    vec![
        ("gemv", &["batch", "in", "out"]),
        ("red", &["batch", "n"]),
        ("va", &["n"]),
        ("relu", &["n"]),
        ("attn", &["heads", "seq", "dim"]),
    ]
}

/// Instantiate a builtin. `red` also accepts a single extent (batch 1).
pub fn builtin(name: &str, extents: &[usize]) -> Result<Kernel> {
    let ext: Vec<usize> = match (name, extents) {
        ("red", [n]) => vec![1, *n],
        _ => extents.to_vec(),
    };
    let Some((_, params)) = builtin_kernels().into_iter().find(|(n, _)| *n == name) else {
        return Err(Error::Precondition(format!(
            "unknown builtin kernel `{name}` (known: {})",
            BUILTIN_NAMES.join(", ")
        )));
    };
    if ext.len() != params.len() {
        return Err(Error::Precondition(format!(
            "`{name}` takes {} extents ({}), got {}",
            params.len(),
            params.join(","),
            ext.len()
        )));
    }
    if ext.contains(&0) {
        return Err(Error::Precondition("extents must be at least 1".into()));
    }
    parse_kernel(&source(name, &ext))
}

fn source(name: &str, e: &[usize]) -> String {
    match name {
        "gemv" => format!(
            "kernel gemv
tensor A [{b}][{i}] : input
tensor B [{i}][{o}] : input
tensor C [{b}][{o}] : output
for b in 0..{b} {{
  for i in 0..{i} {{
    for k in 0..{o} {{
      C[b][k] += A[b][i] * B[i][k]
    }}
  }}
}}
",
            b = e[0],
            i = e[1],
            o = e[2]
        ),
        "red" => format!(
            "kernel red
tensor A [{b}][{n}] : input
tensor S [{b}] : output
for b in 0..{b} {{
  for i in 0..{n} {{
    S[b] += A[b][i]
  }}
}}
",
            b = e[0],
            n = e[1]
        ),
        "va" => format!(
            "kernel va
tensor A [{n}] : input
tensor B [{n}] : input
tensor C [{n}] : output
for i in 0..{n} {{
  C[i] = A[i] + B[i]
}}
",
            n = e[0]
        ),
        "relu" => format!(
            "kernel relu
tensor X [{n}] : input
tensor Y [{n}] : output
for i in 0..{n} {{
  Y[i] = max(X[i], 0.0)
}}
",
            n = e[0]
        ),
        "attn" => format!(
            "kernel attn
tensor Q [{h}][{d}] : input
tensor K [{h}][{s}][{d}] : input
tensor V [{h}][{s}][{d}] : input
tensor SC [{h}][{s}] : temp
tensor P [{h}][{s}] : temp
tensor O [{h}][{d}] : output
for h in 0..{h} {{
  for j in 0..{s} {{
    for d in 0..{d} {{
      SC[h][j] += Q[h][d] * K[h][j][d]
    }}
  }}
}}
for h in 0..{h} {{
  for j in 0..{s} {{
    P[h][j] = softmax[j](SC[h][j])
  }}
}}
for h in 0..{h} {{
  for j in 0..{s} {{
    for d in 0..{d} {{
      O[h][d] += P[h][j] * V[h][j][d]
    }}
  }}
}}
",
            h = e[0],
            s = e[1],
            d = e[2]
        ),
        _ => unreachable!("checked by caller"),
    }
}

/// The worked GEMV-like example: A is read both as `A[b][i]` and
/// `A[b+1][i*2]`, so A0 = {b, b+1} and A1 = {i, i*2}. The two products are
/// summed into C; only the reference sets matter to the schedule generator.
pub const FIG4_SOURCE: &str = "kernel fig4
tensor A [12][16] : input
tensor B [8][16] : input
tensor C [11][16] : output
for b in 0..11 {
  for i in 0..8 {
    for k in 0..16 {
      C[b][k] += A[b][i] * B[i][k]
      C[b][k] += A[b+1][i*2] * B[i][k]
    }
  }
}
";

pub fn fig4_kernel() -> Kernel {
    parse_kernel(FIG4_SOURCE).expect("fixture parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemv_template_shape() {
        let k = builtin("gemv", &[1, 128, 64]).unwrap();
        assert_eq!(k.vars.len(), 3);
        assert_eq!(k.tensors[0].dims, vec![1, 128]);
    }

    #[test]
    fn relu_is_one_loop_with_max() {
        let k = builtin("relu", &[8]).unwrap();
        assert_eq!(k.vars.len(), 1);
        assert!(matches!(k.stmts[0].rhs, super::super::Expr::Max(..)));
    }

    #[test]
    fn attn_has_score_softmax_value_statements() {
        let k = builtin("attn", &[2, 4, 8]).unwrap();
        assert_eq!(k.stmts.len(), 3);
        assert!(k.stmts[1].is_softmax());
        assert_eq!(k.stmts[0].reduction_vars(), vec![k.var_id("d").unwrap()]);
        assert_eq!(k.stmts[2].reduction_vars(), vec![k.var_id("j").unwrap()]);
    }

    #[test]
    fn wrong_arity_is_a_precondition_error() {
        assert!(builtin("gemv", &[4]).is_err());
        assert!(builtin("nope", &[4]).is_err());
        assert!(builtin("red", &[16]).is_ok());
    }

    #[test]
    fn fixture_parses() {
        let k = fig4_kernel();
        assert_eq!(k.stmts.len(), 2);
    }
}
