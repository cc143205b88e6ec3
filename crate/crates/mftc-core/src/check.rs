//! Finite-difference gradient verification. Analytic gradients from
//! `Graph::backward` are compared against central differences of a freshly
//! rebuilt forward pass, so the check exercises the exact code path training
//! uses rather than a copy of it.

use crate::graph::{Graph, Var};

/// Relative error with an absolute floor: tiny gradients that agree to within
/// the floor are not flagged just because their ratio is ill-conditioned.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference step. With f64 values of order one this balances
/// truncation (h²) against round-off (eps/h) near 1e-10.
pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `build`'s scalar output against central
/// finite differences for every input tensor. At most `max_coords_per_input`
/// coordinates per tensor are probed (evenly strided) to bound runtime on
/// large tensors; pass `usize::MAX` to probe everything.
pub fn check_gradients<B>(
    build: &B,
    inputs: &[(Vec<usize>, Vec<f64>)],
    max_coords_per_input: usize,
    h: f64,
) -> FdReport
where
    B: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(inputs)
            .map(|(d, (s, _))| g.leaf(d.clone(), s.clone(), false))
            .collect();
        let root = build(&mut g, &vars);
        assert_eq!(g.data(root).len(), 1, "fd check requires a scalar output");
        g.data(root)[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| g.leaf(d.clone(), s.clone(), true))
        .collect();
    let root = build(&mut g, &vars);
    assert_eq!(g.data(root).len(), 1, "fd check requires a scalar output");
    let grads = g.backward(root);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, d))| grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut report = FdReport::default();
    for (ii, (_, data)) in inputs.iter().enumerate() {
        let n = data.len();
        if n == 0 {
            continue;
        }
        let step = (n / max_coords_per_input.max(1)).max(1);
        for ci in (0..n).step_by(step) {
            let mut hi = base.clone();
            hi[ii][ci] += h;
            let mut lo = base.clone();
            lo[ii][ci] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            let e = rel_err(analytic[ii][ci], fd);
            if e > report.max_rel {
                report.max_rel = e;
            }
            report.checked += 1;
        }
    }
    report
}
