//! Adam trajectory against an independent scalar reference implementation.

use kwspot::nn::{AdamState, CnnModel, Gradients, LayerSpec, LrSchedule};
use kwspot::testkit::ScalarAdamRef;

/// Drive a single scalar parameter through 100 Adam steps on the quadratic
/// loss f(p) = (p - 3)^2 / 2 (gradient p - 3) and compare against the
/// reference update rule at every step.
#[test]
fn hundred_steps_on_scalar_quadratic_match_reference() {
    // A 1x1 dense model gives one weight to track; zero out the bias's
    // gradient so only the weight moves.
    let mut model = CnnModel::<f64>::new(
        1,
        vec![
            LayerSpec::GlobalMaxPoolTime,
            LayerSpec::Dense { units: 1 },
            LayerSpec::Sigmoid,
        ],
        12,
    )
    .unwrap();
    let schedule = LrSchedule {
        lr_start: 1e-2,
        lr_end: 1e-3,
        total_steps: 100,
    };
    let mut adam = AdamState::new(&model, schedule);
    let mut reference = ScalarAdamRef::new(adam.beta1, adam.beta2, adam.epsilon);
    let mut ref_param = model.params()[1].as_ref().unwrap().weights.as_slice().unwrap()[0];
    let initial_gap = (ref_param - 3.0).abs();

    for step in 0..100u64 {
        let current = model.params()[1].as_ref().unwrap().weights.as_slice().unwrap()[0];
        let g = current - 3.0;
        let mut grads = Gradients::zeros_like(&model);
        grads.0[1].as_mut().unwrap().weights.as_slice_mut().unwrap()[0] = g;
        let lr = schedule.lr_at(step);
        adam.step(&mut model, &grads);
        ref_param = reference.step(ref_param, ref_param - 3.0, lr);
        let updated = model.params()[1].as_ref().unwrap().weights.as_slice().unwrap()[0];
        assert!(
            (updated - ref_param).abs() < 1e-10,
            "step {step}: model {updated} vs reference {ref_param}"
        );
    }
    // After 100 steps on a quadratic the parameter should have moved toward 3.
    assert!(
        (ref_param - 3.0).abs() < initial_gap,
        "no progress toward minimum"
    );
}

/// Descent sanity: one small-lr step on a nonzero gradient strictly decreases
/// the quadratic loss.
#[test]
fn single_small_step_decreases_scalar_loss() {
    let mut reference = ScalarAdamRef::new(0.9, 0.999, 1e-8);
    let p0 = 5.0;
    let loss = |p: f64| (p - 3.0) * (p - 3.0) / 2.0;
    let p1 = reference.step(p0, p0 - 3.0, 1e-6);
    assert!(loss(p1) < loss(p0));
}
