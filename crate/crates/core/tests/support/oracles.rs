//! Independent oracles for the closed-form pieces: every check recomputes
//! the quantity by a different route than the library does. Each one panics
//! on a mismatch.

use genunc::dataset::ModeSpec;
use genunc::diffusion::{
    forward_noise, loss_at_draws, Checkpoint, NoiseSchedule, Objective, SamplerSpec, SeedBundle, TrainingDraws,
};
use genunc::metrics::{frechet_from_moments, precision_recall, spearman, ManifoldIndex};
use genunc::numeric::gradcheck::{central_differences, max_relative_error, richardson_differences};
use genunc::numeric::{time_embedding, Activation, Matrix, Mlp, MlpConfig, ParamVector};
use genunc::posterior::{last_layer_fisher, per_example_draws};
use genunc::rng::RngState;
use genunc::uncertainty::{
    aggregate_by_condition, gaussian_entropy, moment_match, pixelwise_uncertainty, FeatureMap, ScoreRule, Scorer,
    UncertaintyRecord,
};
use nalgebra::DMatrix;
use std::f64::consts::PI;

fn net(input: usize, hidden: &[usize], output: usize, embed: usize, cond: usize, act: Activation) -> Mlp {
    Mlp::new(MlpConfig {
        input_dim: input,
        hidden_dims: hidden.to_vec(),
        output_dim: output,
        activation: act,
        time_embed_dim: embed,
        condition_count: cond,
    })
    .unwrap()
}

fn with_values(p: &ParamVector, v: &[f64]) -> ParamVector {
    let mut q = p.clone();
    q.values_mut().copy_from_slice(v);
    q
}

/// Plain nested loops over the named blocks.
fn naive_forward(mlp: &Mlp, p: &ParamVector, x: &[f64], t: f64, cond: Option<usize>) -> Vec<f64> {
    let cfg = mlp.config();
    let mut emb = time_embedding(t, cfg.time_embed_dim);
    if let Some(c) = cond {
        let table = p.block("cond_embed").unwrap();
        for (j, e) in emb.iter_mut().enumerate() {
            *e += table[c * cfg.time_embed_dim + j];
        }
    }
    let mut h: Vec<f64> = x.iter().copied().chain(emb).collect();
    let layers = cfg.hidden_dims.len() + 1;
    for i in 0..layers {
        let (w, b) = if i + 1 == layers {
            (p.block("out.weight").unwrap(), p.block("out.bias").unwrap())
        } else {
            (
                p.block(&format!("hidden.{i}.weight")).unwrap(),
                p.block(&format!("hidden.{i}.bias")).unwrap(),
            )
        };
        let mut next = Vec::with_capacity(b.len());
        for o in 0..b.len() {
            let mut z = b[o];
            for (j, hv) in h.iter().enumerate() {
                z += w[o * h.len() + j] * hv;
            }
            next.push(if i + 1 == layers { z } else { cfg.activation.apply(z) });
        }
        h = next;
    }
    h
}

pub fn mlp_forward_matches_nested_loops() {
    for (act, cond) in [(Activation::Relu, 0), (Activation::Silu, 3), (Activation::Tanh, 0)] {
        let mlp = net(2, &[7, 5], 2, 6, cond, act);
        let p = mlp.init(&mut RngState::new(3));
        let mut rng = RngState::new(4);
        for k in 0..10 {
            let x = rng.normal_vec(2);
            let t = 37.0 * k as f64;
            let c = (cond > 0).then(|| k % cond);
            let fast = mlp.forward(&p, &x, t, c).unwrap();
            let slow = naive_forward(&mlp, &p, &x, t, c);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{act}: {a} vs {b}");
            }
        }
    }
}

pub fn backprop_matches_finite_differences() {
    for cond in [0, 3] {
        let mlp = net(2, &[16, 16], 2, 4, cond, Activation::Tanh);
        let p = mlp.init(&mut RngState::new(11));
        let mut rng = RngState::new(12);
        let x = rng.gaussian_sample(4, 2);
        let t = [3.0, 250.0, 600.0, 999.0];
        let c = [0usize, 2, 1, 2];
        let c = (cond > 0).then_some(&c[..]);
        let dout = rng.gaussian_sample(4, 2);
        // Scalar L = Σ <dout, f>; its gradient is what backward returns.
        let scalar = |v: &[f64]| {
            let out = mlp.predict(&with_values(&p, v), &x, &t, c).unwrap();
            out.as_slice()
                .iter()
                .zip(dout.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, cache) = mlp.forward_batch(&p, &x, &t, c).unwrap();
        let analytic = mlp.backward(&p, &cache, &dout).unwrap();
        // Plain central differences at h = 1e-4 leave an O(h²) truncation
        // term that exceeds 1e-4 relative on sub-1e-6 coordinates.
        let numeric = richardson_differences(scalar, p.values(), 1e-4);
        let err = max_relative_error(analytic.values(), &numeric, 1e-6);
        assert!(err < 1e-4, "cond={cond}: relative error {err}");
    }
}

pub fn objective_gradients_match_finite_differences() {
    let schedule = NoiseSchedule::linear(100).unwrap();
    for objective in [Objective::EpsilonPrediction, Objective::FlowVelocity] {
        let mlp = net(2, &[8], 2, 4, 0, Activation::Silu);
        let p = mlp.init(&mut RngState::new(21));
        let mut rng = RngState::new(22);
        let data = rng.gaussian_sample(6, 2);
        let draws = TrainingDraws::draw(objective, &schedule, 6, 2, &mut rng);
        let out = loss_at_draws(&mlp, &p, objective, &schedule, &data, None, &draws).unwrap();
        let f = |v: &[f64]| {
            loss_at_draws(&mlp, &with_values(&p, v), objective, &schedule, &data, None, &draws)
                .unwrap()
                .loss
        };
        assert!((f(p.values()) - out.loss).abs() < 1e-14);
        let numeric = central_differences(f, p.values(), 1e-5);
        let err = max_relative_error(out.grad.values(), &numeric, 1e-6);
        assert!(err < 1e-4, "{objective}: relative error {err}");
    }
}

pub fn forward_noise_marginal_moments() {
    let schedule = NoiseSchedule::linear(1000).unwrap();
    let x0 = [1.5, -0.5];
    let mut rng = RngState::new(31);
    for t in [1usize, 250, 1000] {
        let ab = schedule.alpha_bar(t);
        let n = 40_000;
        let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let x = forward_noise(&schedule, &x0, t, &rng.normal_vec(2)).unwrap();
            for j in 0..2 {
                s[j] += x[j];
                s2[j] += x[j] * x[j];
            }
        }
        for j in 0..2 {
            let mean = s[j] / n as f64;
            let var = s2[j] / n as f64 - mean * mean;
            // Standard errors at n = 40k are ~0.005.
            assert!((mean - ab.sqrt() * x0[j]).abs() < 0.03, "t={t}");
            assert!((var - (1.0 - ab)).abs() < 0.03 + 0.03 * (1.0 - ab), "t={t}");
        }
    }
}

pub fn moment_match_matches_two_pass_loop() {
    let mut rng = RngState::new(41);
    let vecs: Vec<Vec<f64>> = (0..7)
        .map(|_| rng.normal_vec(5).into_iter().map(|v| 3.0 * v + 1.0).collect())
        .collect();
    let sigma2 = 1e-3;
    let g = moment_match(&vecs, sigma2).unwrap();
    for j in 0..5 {
        let mut mean = 0.0;
        for v in &vecs {
            mean += v[j];
        }
        mean /= 7.0;
        let mut var = 0.0;
        for v in &vecs {
            var += (v[j] - mean).powi(2);
        }
        var = var / 7.0 + sigma2;
        assert!((g.mean[j] - mean).abs() <= 1e-12);
        assert!((g.variance[j] - var).abs() <= 1e-12);
    }
    let pix = pixelwise_uncertainty(&vecs, sigma2).unwrap();
    assert_eq!(pix, g.variance);
}

pub fn entropy_matches_monte_carlo() {
    let var = [0.5, 2.0, 1.0];
    let g = genunc::uncertainty::PredictiveGaussian {
        mean: vec![0.3, -1.0, 2.0],
        variance: var.to_vec(),
        noise_var: 1e-3,
    };
    let h = gaussian_entropy(&g).unwrap();
    let mut rng = RngState::new(51);
    let n = 200_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let mut logp = 0.0;
        for (j, v) in var.iter().enumerate() {
            let x = g.mean[j] + v.sqrt() * rng.standard_normal();
            logp += -0.5 * (2.0 * PI * v).ln() - (x - g.mean[j]).powi(2) / (2.0 * v);
        }
        acc -= logp;
    }
    let mc = acc / n as f64;
    assert!((h - mc).abs() < 0.01, "{h} vs {mc}");
}

fn sqrt2x2(m: &DMatrix<f64>) -> DMatrix<f64> {
    // For SPD 2×2 M: √M = (M + √det I) / √(tr + 2√det).
    let s = m.determinant().sqrt();
    let t = (m.trace() + 2.0 * s).sqrt();
    (m + DMatrix::identity(2, 2) * s) / t
}

pub fn frechet_matches_closed_form_two_by_two() {
    let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
    let b = DMatrix::from_row_slice(2, 2, &[1.0, -0.4, -0.4, 1.5]);
    let (ma, mb) = ([0.0, 1.0], [0.5, -0.5]);
    let ra = sqrt2x2(&a);
    let inner = &ra * &b * &ra;
    let expected = 0.25 + 2.25 + (a.trace() + b.trace() - 2.0 * sqrt2x2(&inner).trace());
    let fd = frechet_from_moments(&ma, &a, &mb, &b).unwrap();
    assert!((fd - expected).abs() < 1e-10, "{fd} vs {expected}");
    let same = frechet_from_moments(&ma, &a, &ma, &a).unwrap();
    assert!(same.abs() <= 1e-8, "identity case {same}");
}

fn d(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// k-th neighbour radius by sorting every distance.
fn brute_radii(x: &Matrix, k: usize) -> Vec<f64> {
    (0..x.rows())
        .map(|i| {
            let mut ds: Vec<f64> = (0..x.rows())
                .filter(|&j| j != i)
                .map(|j| d(x.row(i), x.row(j)))
                .collect();
            ds.sort_by(f64::total_cmp);
            ds[k - 1]
        })
        .collect()
}

pub fn manifold_scores_match_brute_force() {
    let mut rng = RngState::new(61);
    let reference = rng.gaussian_sample(150, 2);
    let mut generated = rng.gaussian_sample(120, 2);
    generated.as_mut_slice().iter_mut().for_each(|v| *v = *v * 1.3 + 0.2);
    for k in [1, 3, 5] {
        let idx = ManifoldIndex::new(reference.clone(), k).unwrap();
        let rr = brute_radii(&reference, k);
        assert_eq!(idx.radii(), rr.as_slice());
        let gr = brute_radii(&generated, k);
        let mut inside_ref = 0;
        for q in generated.iter_rows() {
            let mut best_realism = f64::NEG_INFINITY;
            let mut rarity = f64::INFINITY;
            let mut inside = false;
            for (s, r) in reference.iter_rows().zip(&rr) {
                let dist = d(q, s);
                best_realism = best_realism.max(r / dist.max(1e-12));
                if dist <= *r {
                    inside = true;
                    rarity = rarity.min(*r);
                }
            }
            inside_ref += inside as usize;
            assert_eq!(idx.realism(q).unwrap(), best_realism);
            assert_eq!(idx.rarity(q).unwrap(), rarity);
        }
        let inside_gen = reference
            .iter_rows()
            .filter(|q| generated.iter_rows().zip(&gr).any(|(s, r)| d(q, s) <= *r))
            .count();
        let (p, r) = precision_recall(&generated, &reference, k).unwrap();
        assert_eq!(p, inside_ref as f64 / 120.0);
        assert_eq!(r, inside_gen as f64 / 150.0);
    }
}

pub fn spearman_extremes_are_exact() {
    let a = [0.3, 1.0, -2.0, 7.5, 4.0];
    let up: Vec<f64> = a.iter().map(|v| v * v * v + 10.0).collect();
    let down: Vec<f64> = a.iter().map(|v| -v.exp()).collect();
    assert_eq!(spearman(&a, &up).unwrap(), 1.0);
    assert_eq!(spearman(&a, &down).unwrap(), -1.0);
}

fn record(seed_id: u64, cond: usize, score: f64) -> UncertaintyRecord {
    UncertaintyRecord {
        seed_id,
        cond: Some(cond),
        sample: vec![0.0, 0.0],
        replicas: vec![],
        features: vec![],
        variance: vec![],
        score,
    }
}

pub fn per_condition_means_pass_a_permutation_test() {
    let mut rng = RngState::new(71);
    let n = 5_000;
    let records: Vec<UncertaintyRecord> = (0..n)
        .map(|i| record(i as u64, rng.below(25), rng.standard_normal() * 0.7 + 2.0))
        .collect();
    let observed = aggregate_by_condition(&records);
    let global = records.iter().map(|r| r.score).sum::<f64>() / n as f64;
    // Null distribution of each class mean by reshuffling the labels.
    let labels: Vec<usize> = records.iter().map(|r| r.cond.unwrap()).collect();
    let rounds = 200;
    let mut dev: Vec<Vec<f64>> = vec![vec![]; 25];
    for _ in 0..rounds {
        let mut perm = labels.clone();
        rng.shuffle(&mut perm);
        let shuffled: Vec<UncertaintyRecord> = records
            .iter()
            .zip(&perm)
            .map(|(r, &c)| record(r.seed_id, c, r.score))
            .collect();
        for (c, m) in aggregate_by_condition(&shuffled) {
            dev[c].push(m - global);
        }
    }
    for (c, m) in observed {
        let sd = (dev[c].iter().map(|v| v * v).sum::<f64>() / rounds as f64).sqrt();
        assert!((m - global).abs() <= 3.0 * sd, "class {c}: {m} vs {global} (sd {sd})");
    }
}

fn score_with(
    features: &FeatureMap,
    replicas: &[ParamVector],
    base: &ParamVector,
    mlp: &Mlp,
    rule: ScoreRule,
) -> Vec<f64> {
    let schedule = NoiseSchedule::linear(50).unwrap();
    let gen = SamplerSpec::ddpm_respaced(&schedule, 10).unwrap();
    let sc = SamplerSpec::ddpm_respaced(&schedule, 5).unwrap();
    let bundles: Vec<SeedBundle> = (0..30).map(|i| SeedBundle::draw(5, i, 2, gen.noise_rows())).collect();
    let scorer = Scorer {
        mlp,
        pretrained: base,
        replicas,
        schedule: &schedule,
        generation: &gen,
        scoring: &sc,
        features,
        noise_var: 1e-3,
        rule,
    };
    scorer
        .score_batch(&bundles, &vec![None; 30])
        .unwrap()
        .into_iter()
        .map(|r| r.score)
        .collect()
}

pub fn collapsed_posterior_scores_the_noise_floor() {
    let mlp = net(2, &[8], 2, 4, 0, Activation::Silu);
    let base = mlp.init(&mut RngState::new(81));
    let replicas = vec![base.clone(); 4];
    let floor = (2.0 * PI * std::f64::consts::E * 1e-3).ln();
    for s in score_with(&FeatureMap::identity(2), &replicas, &base, &mlp, ScoreRule::Entropy) {
        assert_eq!(s, floor);
    }
}

pub fn signed_permutation_projection_leaves_entropy_unchanged() {
    let mlp = net(2, &[8], 2, 4, 0, Activation::Silu);
    let base = mlp.init(&mut RngState::new(91));
    let replicas: Vec<ParamVector> = (0..4).map(|m| mlp.init(&mut RngState::new(100 + m))).collect();
    let swap = FeatureMap::Projection {
        matrix: Matrix::from_rows(&[[0.0, -1.0], [1.0, 0.0]], 2).unwrap(),
    };
    let a = score_with(&FeatureMap::identity(2), &replicas, &base, &mlp, ScoreRule::Entropy);
    let b = score_with(&swap, &replicas, &base, &mlp, ScoreRule::Entropy);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

/// `½ log det(2πe Σ)` with the full sample covariance plus `σ² I`.
fn full_covariance_entropy(f: &[Vec<f64>], sigma2: f64) -> f64 {
    let dim = f[0].len();
    let m = f.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| f.iter().map(|v| v[j]).sum::<f64>() / m).collect();
    let mut c = DMatrix::identity(dim, dim) * sigma2;
    for v in f {
        for i in 0..dim {
            for j in 0..dim {
                c[(i, j)] += (v[i] - mean[i]) * (v[j] - mean[j]) / m;
            }
        }
    }
    0.5 * ((2.0 * PI * std::f64::consts::E).powi(dim as i32) * c.determinant()).ln()
}

pub fn orthonormal_projection_preserves_full_covariance_entropy() {
    // The full-covariance Gaussian entropy is invariant under any orthonormal
    // map; the diagonal moment match is only invariant under signed
    // permutations, which the previous test covers.
    let mut rng = RngState::new(95);
    let proj = FeatureMap::random_projection(4, 4, &mut rng).unwrap();
    let id = FeatureMap::identity(4);
    for _ in 0..20 {
        let feats: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4)).collect();
        let projected: Vec<Vec<f64>> = feats.iter().map(|x| proj.apply("s:0", x).unwrap()).collect();
        let plain: Vec<Vec<f64>> = feats.iter().map(|x| id.apply("s:0", x).unwrap()).collect();
        let a = full_covariance_entropy(&plain, 1e-3);
        let b = full_covariance_entropy(&projected, 1e-3);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

pub fn diagonal_fisher_matches_per_example_gradients() {
    for objective in [Objective::EpsilonPrediction, Objective::FlowVelocity] {
        let mut model = MlpConfig::denoiser(2);
        model.hidden_dims = vec![6, 5];
        model.time_embed_dim = 4;
        let mlp = Mlp::new(model.clone()).unwrap();
        let params = mlp.init(&mut RngState::new(7));
        let ck = Checkpoint {
            model,
            ema: params.clone(),
            params,
            schedule: NoiseSchedule::linear(100).unwrap(),
            objective,
            seed: 7,
            epochs: 0,
        };
        let data = ModeSpec::grid(2, 1.0, 0.1).unwrap().sample(40, &mut RngState::new(1));
        let rows: Vec<usize> = (0..data.len()).collect();
        let fast = last_layer_fisher(&ck, &data, &rows, 11).unwrap();
        let range = mlp.last_layer_range();
        let mut brute = vec![0.0; range.len()];
        // Full backward pass one example at a time, summed in reverse order.
        for &i in rows.iter().rev() {
            let draws = per_example_draws(&ck, &data, &[i], 11);
            let x = data.points.select_rows(&[i]);
            let out = loss_at_draws(&mlp, &ck.ema, objective, &ck.schedule, &x, None, &draws).unwrap();
            for (b, v) in brute.iter_mut().zip(&out.grad.values()[range.clone()]) {
                *b += v * v;
            }
        }
        for (a, b) in fast.diag().iter().zip(&brute) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

/// Every oracle by name.
pub const ALL: &[(&str, fn())] = &[
    ("mlp_forward_matches_nested_loops", mlp_forward_matches_nested_loops),
    (
        "backprop_matches_finite_differences",
        backprop_matches_finite_differences,
    ),
    (
        "objective_gradients_match_finite_differences",
        objective_gradients_match_finite_differences,
    ),
    ("forward_noise_marginal_moments", forward_noise_marginal_moments),
    ("moment_match_matches_two_pass_loop", moment_match_matches_two_pass_loop),
    ("entropy_matches_monte_carlo", entropy_matches_monte_carlo),
    (
        "frechet_matches_closed_form_two_by_two",
        frechet_matches_closed_form_two_by_two,
    ),
    ("manifold_scores_match_brute_force", manifold_scores_match_brute_force),
    ("spearman_extremes_are_exact", spearman_extremes_are_exact),
    (
        "per_condition_means_pass_a_permutation_test",
        per_condition_means_pass_a_permutation_test,
    ),
    (
        "collapsed_posterior_scores_the_noise_floor",
        collapsed_posterior_scores_the_noise_floor,
    ),
    (
        "signed_permutation_projection_leaves_entropy_unchanged",
        signed_permutation_projection_leaves_entropy_unchanged,
    ),
    (
        "orthonormal_projection_preserves_full_covariance_entropy",
        orthonormal_projection_preserves_full_covariance_entropy,
    ),
    (
        "diagonal_fisher_matches_per_example_gradients",
        diagonal_fisher_matches_per_example_gradients,
    ),
];
