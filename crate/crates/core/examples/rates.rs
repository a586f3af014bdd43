use divdiv::biharmonic::*;
use divdiv::sparse::SpdSolver;
use std::time::Instant;

fn main() {
    let case = ManufacturedCase::new(CaseId::SinSq, 2);
    for k in [2usize, 3] {
        let levels = [8usize, 16, 32];
        let t0 = Instant::now();
        let rows = convergence_study_cdg(2, k, &case, &levels, SpdSolver::Cholesky).unwrap();
        println!("cdg k = {k} took {:.2}s", t0.elapsed().as_secs_f64());
        for w in rows.windows(2) {
            let r_e = (w[0].err_hess / w[1].err_hess).log2();
            let r_l2 = (w[0].err_pp_l2 / w[1].err_pp_l2).log2();
            println!("  h={:.4}: energy {:.3e} ({r_e:.2}) l2 {:.3e} ({r_l2:.2}) [asm {:.1}s solve {:.1}s]",
                w[1].h, w[1].err_hess, w[1].err_pp_l2, w[1].assemble_seconds, w[1].solve_seconds);
        }
    }
}
