use bilevel::nlp::{solve_subproblem, NlpOptions, NlpProgram};
use bilevel::parse::parse_problem;
use bilevel::reformulate::build_svf;
use bilevel::smoothing::smooth_instance;

fn main() {
    let src = std::fs::read_to_string("/tmp/isolated.blp").unwrap();
    let prob = parse_problem(&src).unwrap();
    let base = build_svf(&prob);
    // warm point near the solution from the earlier run
    let w = vec![
        0.0022481108746571646,
        -1.9999996547362324,
        0.00299615475286992,
        2.4986517811845745,
        1.497751889843906,
        0.6246175911184838,
        3.0033687796196944e-14,
        0.006203708962522935,
    ];
    for r in [1e-4, 1e-5, 1e-6] {
        let sm = smooth_instance(&base, r, 0.01).unwrap();
        let opts = NlpOptions::for_continuation(r);
        println!("== r = {r:e}, grad_tol = {:e}, feas_tol = {:e}", opts.grad_tol, opts.feas_tol);
        let res = solve_subproblem(&sm, &w, &opts).unwrap();
        println!("   status={:?} kkt={:.3e} eq={:.3e} ineq={:.3e} inner={}",
                 res.status, res.kkt_residual, res.equality_residual,
                 res.inequality_violation, res.inner_iterations);
        let mut h = vec![0.0; sm.num_eq()];
        NlpProgram::eq_values(&sm, &res.w, &mut h).unwrap();
        println!("   eq rows: {:?}", h.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>());
        println!("   w = {:?}", res.w);
    }
}
