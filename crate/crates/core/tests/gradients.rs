use mrs_core::gradcheck::GradCase;

#[test]
fn every_case_passes_for_an_extra_seed() {
    for case in GradCase::ALL {
        let t = std::time::Instant::now();
        let r = case.run(4, 1e-4).unwrap();
        let worst = r.samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
        println!("{:6} max_rel_err={:.2e} ({} samples, {:?}) worst={:?}", case.name(), r.max_rel_err, r.samples.len(), t.elapsed(), worst);
        assert!(r.passed, "{}", case.name());
    }
}
