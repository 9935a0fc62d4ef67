use fracvit::tensor::Tape;
use fracvit::tensor::Tensor;
use fracvit::vit::ViTConfig;
use fracvit_oracles::gradcheck::{cases, perturbed_model, run, small_vit_config, vit_loss_check, STEP, TOL};
use fracvit_oracles::{central_diff, random_vec, rel_err, rng, softmax64, to64};

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in cases() {
        let worst = run(&case);
        println!("{:<20} max relative error {worst:.2e}", case.name);
        if worst > TOL {
            failures.push((case.name, worst));
        }
    }
    assert!(failures.is_empty(), "gradient check failures: {failures:?}");
}

#[test]
fn cross_entropy_three_by_four_gradient() {
    let mut r = rng(5);
    let logits = random_vec(&mut r, 12, -2.0, 2.0);
    let targets = [1usize, 3, 0];
    let t = Tensor::new(vec![3, 4], logits.clone()).unwrap().with_requires_grad(true);
    let mut tape = Tape::new();
    let x = tape.leaf(&t);
    let loss = tape.cross_entropy(x, &targets, None).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();
    let f = |x: &[f64]| {
        x.chunks(4)
            .enumerate()
            .map(|(i, row)| -softmax64(row)[targets[i]].ln())
            .sum::<f64>()
            / 3.0
    };
    let numeric = central_diff(&to64(&logits), STEP, &f);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_err(*a as f64, *n, 1e-3) < TOL, "{a} vs {n}");
    }
}

#[test]
fn small_classifier_full_sweep() {
    let model = perturbed_model(small_vit_config(), 3);
    assert!(model.parameter_count() <= 5000);
    let report = vit_loss_check(&model, 4, 11, None);
    let bad: Vec<_> = report.iter().filter(|c| c.worst > 1e-3).collect();
    assert!(bad.is_empty(), "parameters failing the sweep: {bad:?}");
    assert_eq!(report.iter().map(|c| c.checked).sum::<usize>(), model.parameter_count());
}

#[test]
fn tiny_preset_sampled_coordinates() {
    let model = perturbed_model(ViTConfig::tiny(), 4);
    let report = vit_loss_check(&model, 3, 12, Some(4));
    let bad: Vec<_> = report.iter().filter(|c| c.worst > 1e-3).collect();
    assert!(bad.is_empty(), "parameters failing the check: {bad:?}");
}
