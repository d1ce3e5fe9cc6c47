mod support;

use support::oracles;

macro_rules! oracle_tests {
    ($($name:ident),* $(,)?) => {
        $(#[test]
        fn $name() {
            oracles::$name();
        })*
    };
}

oracle_tests!(
    mlp_forward_matches_nested_loops,
    backprop_matches_finite_differences,
    objective_gradients_match_finite_differences,
    forward_noise_marginal_moments,
    moment_match_matches_two_pass_loop,
    entropy_matches_monte_carlo,
    frechet_matches_closed_form_two_by_two,
    manifold_scores_match_brute_force,
    spearman_extremes_are_exact,
    per_condition_means_pass_a_permutation_test,
    collapsed_posterior_scores_the_noise_floor,
    signed_permutation_projection_leaves_entropy_unchanged,
    orthonormal_projection_preserves_full_covariance_entropy,
    diagonal_fisher_matches_per_example_gradients,
);
