use ricau::gradcheck;

#[test]
fn every_operation_passes_finite_differences() {
    let reports = gradcheck::full_suite(11).unwrap();
    print!("{}", gradcheck::render_table(&reports));
    for r in &reports {
        assert!(r.passed(), "{} failed: {:.3e}", r.name, r.max_rel_err);
    }
}
