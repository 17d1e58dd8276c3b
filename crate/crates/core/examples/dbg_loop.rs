use bilevel::nlp::{self, NlpOptions, NlpStatus};
use bilevel::parse::parse_problem;
use bilevel::reformulate::{build_svf, mpec_residual};
use bilevel::smoothing::smooth_instance;

fn main() {
    let src = std::fs::read_to_string("/tmp/isolated.blp").unwrap();
    let prob = parse_problem(&src).unwrap();
    let base = build_svf(&prob);
    let s0 = {
        let mut rng = bilevel::rng::Xorshift64Star::new(42);
        (0..3).map(|_| rng.next_f64()).collect::<Vec<_>>()
    };
    let mut w = base.pack(&[0.0], &[-2.0, 0.0], Some(&[-2.0, 0.0]), &s0);
    let mut warm: Option<nlp::WarmStart> = None;
    for k in 0..14 {
        let r = 0.1f64.powi(k);
        let rho = 0.1f64.powi(k).max(0.01);
        let sm = smooth_instance(&base, r, rho).unwrap();
        let opts = NlpOptions::for_continuation(r);
        let res = nlp::solve_subproblem_warm(&sm, &w, &opts, warm.as_ref()).unwrap();
        w = res.w.clone();
        warm = Some(nlp::WarmStart::from_result(&res));
        let audit = mpec_residual(&base, &w).unwrap();
        println!(
            "k={k:2} r={r:.0e} kkt={:9.2e} sub_eq={:9.2e} sub_ineq={:9.2e} | audit eq={:9.2e} ineq={:9.2e} comp={:9.2e} dom={:9.2e} | {:?} beta={:.0e} it={}",
            res.kkt_residual, res.equality_residual, res.inequality_violation,
            audit.equality_inf_norm, audit.inequality_violation_inf_norm,
            audit.complementarity_inf_norm, audit.dominance_violation,
            res.status, res.penalty, res.inner_iterations
        );
        if res.status == NlpStatus::LineSearchFailure { }
    }
    println!("final w = {w:?}");
}
