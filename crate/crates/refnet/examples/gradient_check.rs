//! Verify the analytic gradients of the combined training loss against
//! central finite differences on a small model, in 64-bit.

fn main() -> refnet::Result<()> {
    let report = refnet::gradcheck::mini_total_loss_check(1e-5, 1e-4)?;
    println!("{:<24} {:>12} {:>12} {:>10}", "parameter", "norm rel", "elem rel", "unresolved");
    for e in &report.entries {
        println!(
            "{:<24} {:>12.3e} {:>12.3e} {:>10}",
            e.name, e.norm_rel_err, e.max_rel_err, e.unresolved
        );
    }
    println!(
        "\nmax elementwise {:.3e}, max per-parameter norm {:.3e}, tolerance {:.0e}: {}",
        report.max_rel_err,
        report.max_norm_rel_err,
        report.tol,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(())
}
