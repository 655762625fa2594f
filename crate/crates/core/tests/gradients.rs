mod common;

use common::*;

#[test]
fn end_to_end_loss_gradient_matches_central_differences() {
    for seed in 0..20 {
        let p = random_problem(seed);
        let err = max_fd_error(&p.params, &p.gradient(), 1e-5, |q| p.loss(q));
        assert!(err < 1e-3, "config {seed}: relative error {err:e}");
    }
}

#[test]
fn field_outputs_gradient_matches_central_differences() {
    for seed in 100..120 {
        let err = field_only_error(seed, 1e-4);
        assert!(err < 1e-4, "field {seed}: relative error {err:e}");
    }
}

#[test]
fn single_ray_batch_gradient_is_mean_of_per_ray_gradients() {
    use nbv_core::train::batch_loss;
    use nbv_core::Formulation::SingleRay;
    let p = random_problem(7);
    let mut batch = p.batch.clone();
    for rt in &mut batch {
        rt.depth_valid = true;
    }
    let mut all = vec![0.0; p.params.len()];
    batch_loss(&p.params, &batch, &p.settings, SingleRay, 1.0, Some(&mut all)).unwrap();
    let mut mean = vec![0.0; p.params.len()];
    for rt in &batch {
        let mut g = vec![0.0; p.params.len()];
        batch_loss(&p.params, std::slice::from_ref(rt), &p.settings, SingleRay, 1.0, Some(&mut g)).unwrap();
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / batch.len() as f64;
        }
    }
    for (a, m) in all.iter().zip(&mean) {
        assert!((a - m).abs() < 1e-10 * a.abs().max(1.0), "{a} vs {m}");
    }
}
