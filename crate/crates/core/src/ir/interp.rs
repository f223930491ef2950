//! Sequential reference interpreter; the functional oracle for every check.

use super::*;
use crate::error::{Error, Result};
use crate::tensor::{TensorMap, TensorValue};

/// Run the loop nest in source order and return the output tensors.
///
/// Temp and output tensors start zeroed.
pub fn reference_execute(k: &Kernel, inputs: &TensorMap) -> Result<TensorMap> {
    let all = execute_all(k, inputs)?;
    Ok(k.tensors
        .iter()
        .zip(all)
        .filter(|(d, _)| d.role == Role::Output)
        .map(|(d, v)| (d.name.clone(), v))
        .collect())
}

/// Like [`reference_execute`] but returns every tensor, temps included.
pub fn execute_all(k: &Kernel, inputs: &TensorMap) -> Result<Vec<TensorValue>> {
    let mut store = Vec::with_capacity(k.tensors.len());
    for decl in &k.tensors {
        if decl.role == Role::Input {
            let v = inputs.get(&decl.name).ok_or_else(|| {
                Error::Precondition(format!("missing input tensor `{}`", decl.name))
            })?;
            if v.dims != decl.dims {
                return Err(Error::Precondition(format!(
                    "input `{}` has shape {:?}, declared {:?}",
                    decl.name, v.dims, decl.dims
                )));
            }
            store.push(v.clone());
        } else {
            store.push(TensorValue::zeros(&decl.dims));
        }
    }
    let mut env = vec![0i64; k.vars.len()];
    for item in &k.items {
        run_item(k, item, &mut env, &mut store);
    }
    Ok(store)
}

fn run_item(k: &Kernel, item: &Item, env: &mut Vec<i64>, store: &mut [TensorValue]) {
    match item {
        Item::Loop { var, body } => {
            for v in 0..k.vars[*var].extent as i64 {
                env[*var] = v;
                for i in body {
                    run_item(k, i, env, store);
                }
            }
        }
        Item::Stmt(s) => {
            let st = &k.stmts[*s];
            let val = eval_rhs(k, &st.rhs, env, store);
            let at = offset(&store[st.dst.tensor], &st.dst, env);
            let slot = &mut store[st.dst.tensor].data[at];
            match st.op {
                AssignOp::Assign => *slot = val,
                AssignOp::Accumulate => *slot += val,
            }
        }
    }
}

pub(crate) fn offset(t: &TensorValue, r: &TensorRef, env: &[i64]) -> usize {
    let mut off = 0usize;
    for (d, e) in r.index.iter().enumerate() {
        off = off * t.dims[d] + e.eval(env[e.var]) as usize;
    }
    off
}

fn eval_rhs(k: &Kernel, e: &Expr, env: &mut [i64], store: &[TensorValue]) -> f64 {
    match e {
        Expr::Softmax { axis, arg } => {
            let t = &store[arg.tensor];
            let here = env[*axis];
            let n = k.vars[*axis].extent as i64;
            let vals: Vec<f64> = (0..n)
                .map(|j| {
                    env[*axis] = j;
                    t.data[offset(t, arg, env)]
                })
                .collect();
            env[*axis] = here;
            softmax_at(&vals, here as usize)
        }
        _ => eval(e, env, store),
    }
}

/// Numerically stable softmax of `vals` at position `at`.
pub(crate) fn softmax_at(vals: &[f64], at: usize) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = vals.iter().map(|v| (v - m).exp()).sum();
    (vals[at] - m).exp() / sum
}

fn eval(e: &Expr, env: &[i64], store: &[TensorValue]) -> f64 {
    match e {
        Expr::Ref(r) => {
            let t = &store[r.tensor];
            t.data[offset(t, r, env)]
        }
        Expr::Const(v) => *v,
        Expr::Add(a, b) => eval(a, env, store) + eval(b, env, store),
        Expr::Mul(a, b) => eval(a, env, store) * eval(b, env, store),
        Expr::Max(a, b) => eval(a, env, store).max(eval(b, env, store)),
        Expr::Exp(a) => eval(a, env, store).exp(),
        Expr::Softmax { .. } => unreachable!("softmax is only a whole right-hand side"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(entries: &[(&str, &[usize], Vec<f64>)]) -> TensorMap {
        entries
            .iter()
            .map(|(n, d, v)| (n.to_string(), TensorValue::from_vec(d, v.clone())))
            .collect()
    }

    #[test]
    fn vector_add() {
        let k = builtin("va", &[2]).unwrap();
        let out = reference_execute(
            &k,
            &map(&[("A", &[2], vec![1.0, 2.0]), ("B", &[2], vec![3.0, 4.0])]),
        )
        .unwrap();
        assert_eq!(out["C"].data, vec![4.0, 6.0]);
    }

    #[test]
    fn reduction() {
        let k = builtin("red", &[1, 4]).unwrap();
        let out = reference_execute(&k, &map(&[("A", &[1, 4], vec![1.0, 2.0, 3.0, 4.0])])).unwrap();
        assert_eq!(out["S"].data, vec![10.0]);
    }

    #[test]
    fn relu_clamps() {
        let k = builtin("relu", &[3]).unwrap();
        let out = reference_execute(&k, &map(&[("X", &[3], vec![-1.0, 0.5, 2.0])])).unwrap();
        assert_eq!(out["Y"].data, vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn gemv_matches_triple_loop() {
        let k = builtin("gemv", &[1, 4, 4]).unwrap();
        let inputs = crate::tensor::random_inputs(&k, 0);
        let out = reference_execute(&k, &inputs).unwrap();
        let (a, b) = (&inputs["A"].data, &inputs["B"].data);
        for kk in 0..4 {
            let mut want = 0.0;
            for i in 0..4 {
                want += a[i] * b[i * 4 + kk];
            }
            assert_eq!(out["C"].data[kk], want);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let k = builtin("attn", &[2, 5, 3]).unwrap();
        let inputs = crate::tensor::random_inputs(&k, 7);
        let all = execute_all(&k, &inputs).unwrap();
        let p = &all[k.tensor_id("P").unwrap()];
        for h in 0..2 {
            let s: f64 = p.data[h * 5..h * 5 + 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_input_is_reported() {
        let k = builtin("va", &[2]).unwrap();
        assert!(matches!(
            reference_execute(&k, &TensorMap::new()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn runs_are_bit_identical() {
        let k = builtin("attn", &[2, 6, 4]).unwrap();
        let inputs = crate::tensor::random_inputs(&k, 3);
        let a = reference_execute(&k, &inputs).unwrap();
        let b = reference_execute(&k, &inputs).unwrap();
        assert_eq!(a, b);
    }
}
