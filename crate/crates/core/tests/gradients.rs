use avparse::tensorgrad::{GradCheckConfig, OpKind, Tape, Tensor};
use avparse::verify;

#[test]
fn all_suites_pass_over_ten_seeds() {
    let seeds: Vec<u64> = (1..=10).collect();
    let reports = verify::run_all(&seeds, 40, &GradCheckConfig::default()).unwrap();
    for r in &reports {
        assert!(r.checked > 0, "{} checked nothing", r.name);
        assert!(
            r.passed(),
            "{}: max rel err {:.3e}, failures {:?}",
            r.name,
            r.max_rel_err,
            r.failures.iter().take(5).collect::<Vec<_>>()
        );
    }
}

#[test]
fn injected_fault_is_reported_by_op_name() {
    for op in [OpKind::Softmax, OpKind::MatMul, OpKind::LayerNorm, OpKind::Cosine] {
        let cfg = GradCheckConfig {
            fault: Some(op),
            ..Default::default()
        };
        let reports = verify::primitive_suite(1, &cfg).unwrap();
        let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failing.contains(&op.name()), "{op}: failing cases {failing:?}");
    }
}

#[test]
fn gradient_reversal_is_identity_forward_and_negated_backward() {
    let x = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin());
    let w = Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.3).cos());
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let reversed = leaf.grad_reverse(0.4).unwrap();
    assert_eq!(reversed.value().data(), x.data());
    let loss = reversed.mul(tape.constant(w.clone())).unwrap().sum();
    let g = tape.backward(loss).unwrap().get_or_zeros(leaf);
    for (gi, wi) in g.data().iter().zip(w.data()) {
        assert_eq!(*gi, -0.4 * wi);
    }
}
