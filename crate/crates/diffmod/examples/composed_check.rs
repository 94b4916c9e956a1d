// temporary: verify the composed objective gradient check passes and time it
fn main() {
    let t0 = std::time::Instant::now();
    let entry = diffmod::pipeline::gradsuite::composed_objective_check().unwrap();
    eprintln!(
        "{}: error {:.3e} (threshold {:.0e}) in {:?} -> {}",
        entry.name,
        entry.error,
        entry.threshold,
        t0.elapsed(),
        if entry.passed() { "PASS" } else { "FAIL" }
    );
}
