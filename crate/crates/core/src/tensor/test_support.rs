//! Gradient-checking oracle shared by unit, integration and acceptance tests.

use super::{Matrix, Tape, Var};

/// Central finite-difference gradient check for a scalar-valued graph.
///
/// `build` must construct the same graph for any input values; every input
/// coordinate is probed with h = 1e-6 against the analytic backward pass.
/// The comparison is relative with a small absolute floor that sits an order
/// of magnitude above f64 central-difference noise.
pub fn fd_check<F>(inputs: &[Matrix<f64>], tol: f64, build: F)
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let h = 1e-6;
    let eval = |values: &[Matrix<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&tape, &vars);
        assert_eq!(tape.shape(out), (1, 1), "fd_check needs a scalar output");
        tape.value(out).data[0]
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&tape, &vars);
    let grads = tape.backward(out);

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i], &tape);
        for k in 0..input.data.len() {
            let mut up = inputs.to_vec();
            up[i].data[k] += h;
            let mut dn = inputs.to_vec();
            dn[i].data[k] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let an = analytic.data[k];
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / scale <= tol,
                "input {i} coord {k}: fd {fd} vs analytic {an}"
            );
        }
    }
}
