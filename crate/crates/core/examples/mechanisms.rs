//! Runs one mechanism experiment (or all three) and prints its comparisons.
//!
//!     cargo run --release --example mechanisms -- m1 [replicate.toml] [out_dir]

use std::path::PathBuf;

use wdlab::harness::replicate::{self, ReplicateConfig};

fn main() -> wdlab::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let which = args.first().map_or("all", String::as_str);
    let rc = match args.get(1) {
        Some(p) => ReplicateConfig::load(p.as_ref())?,
        None => ReplicateConfig::default(),
    };
    let out = PathBuf::from(args.get(2).map_or("runs/mechanisms", String::as_str));
    let data = replicate::load(&rc)?;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    if matches!(which, "m1" | "all") {
        let s = replicate::run_m1(&rc, &data, jobs, Some(&out))?;
        println!("M1 mean final test acc: {:?}", s.mean_final_test_acc);
        println!(
            "M1 norms below baseline: {} (hidden only: {}); transfer gap {:.2} pp, above baseline {} [{:.0}s]",
            s.norms_below_baseline, s.hidden_norms_below_baseline, s.transfer_gap_pp, s.transfer_above_baseline, s.elapsed_secs
        );
    }
    if matches!(which, "m2" | "all") {
        let s = replicate::run_m2(&rc, &data, jobs, Some(&out))?;
        for a in &s.arms {
            println!(
                "  {:<18} train {:.4} test {:.4} |J|^2 {:.4e} kfac-gn {:.4e}",
                a.arm, a.final_train_acc, a.final_test_acc, a.final_jacobian_sq_norm, a.final_kfac_gn_norm
            );
        }
        println!(
            "M2 Jacobian ratio sgd {:.3}, kfac-g {:.3}; r = {:.3} over {} fitted nets [{:.0}s]",
            s.sgd_jacobian_ratio, s.kfac_g_jacobian_ratio, s.correlation, s.fitted_nets, s.elapsed_secs
        );
    }
    if matches!(which, "m3" | "all") {
        let s = replicate::run_m3(&rc, &data, jobs, Some(&out))?;
        println!(
            "M3 fisher decay {:?}, gn change {:?}, min train acc {:.4}, damping ordered {} [{:.0}s]",
            s.fisher_decay, s.gn_change, s.min_final_train_acc, s.damping_no_wd_above_wd, s.elapsed_secs
        );
    }
    Ok(())
}
