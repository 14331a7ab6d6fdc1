mod common;

use common::{gradient_check, gradient_check_with};
use photon_vae::vae::ClassifierInput;

#[test]
fn analytic_gradients_match_central_differences() {
    for input_dim in [5, 6] {
        for classes in [2, 4] {
            for seed in [1, 2, 3] {
                let r = gradient_check(input_dim, classes, seed, 1e-4);
                assert!(
                    r.passes(1e-4),
                    "dim {input_dim} classes {classes} seed {seed}: max rel {:e} over {} params (worst {}), {} skipped at kinks",
                    r.max_rel_error,
                    r.checked,
                    r.worst,
                    r.kinks
                );
                eprintln!("dim {input_dim} classes {classes} seed {seed}: max rel {:e}, {} refined, {} skipped / {}", r.max_rel_error, r.refined, r.kinks, r.checked);
            }
        }
    }
}

#[test]
fn sampled_classifier_input_gradients() {
    for (input_dim, classes) in [(5, 2), (6, 4)] {
        let r = gradient_check_with(input_dim, classes, ClassifierInput::Sample, 4, 1e-4);
        assert!(r.passes(1e-4), "dim {input_dim} classes {classes}: max rel {:e} (worst {})", r.max_rel_error, r.worst);
    }
}
