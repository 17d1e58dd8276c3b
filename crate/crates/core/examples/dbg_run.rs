use bilevel::driver::{solve_svf_sbal, ScheduleParams};
use bilevel::parse::parse_problem;

fn main() {
    let src = std::fs::read_to_string("/tmp/isolated.blp").unwrap();
    let mut src = src;
    src.push_str("");
    let prob = parse_problem(&src).unwrap();
    let report = solve_svf_sbal(&prob, (&[0.0], &[-2.0, 0.0]), &ScheduleParams::default(), 42).unwrap();
    println!("criterion = {}", report.criterion);
    println!("strategy  = {}", report.u0_strategy);
    println!("x = {:?}", report.x);
    println!("y = {:?}", report.y);
    println!("u = {:?}", report.u);
    println!("s = {:?}", report.s);
    println!("F = {}, f = {}", report.objective_upper, report.objective_lower);
    println!("status = {}, failures = {}", report.final_status, report.subproblem_failures);
    println!("trace ({} entries):", report.res_trace.len());
    for (k, r) in report.res_trace.iter().enumerate() {
        println!("  Res_{k} = {r:.6e}");
    }
}
