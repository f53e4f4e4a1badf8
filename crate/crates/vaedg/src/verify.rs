//! Self-check suite: independent oracles for the numerical core.
//!
//! Each check re-derives a quantity along a route that shares no code with
//! the implementation it judges — Monte-Carlo estimation against the
//! closed-form KL, central finite differences against backpropagation,
//! frequency counts against the resampler. The `verify` CLI subcommand runs
//! all of them; the acceptance tests call them individually.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ExperimentConfig;
use crate::data::sampler::{pooled_batch, BalancedStream, ResampleMode};
use crate::data::synth::generate_synthetic_domains;
use crate::data::{DomainDataset, LabeledExample};
use crate::error::Result;
use crate::losses::{
    classification_loss_grad, gaussian_kl, gaussian_kl_batch_grads, reconstruction_loss_grad,
    vae_dg_loss, LatentPosterior,
};
use crate::model::{Backbone, LatentMode, Model, ModelConfig, OutputGrads};
use crate::rng::{derive_rng, tag};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }
}

/// Monte-Carlo estimate of `KL(q || N(0, I))` by sampling
/// `z = mu + sigma * eps` and averaging `log q(z) - log p(z)`. Never touches
/// the closed form.
pub fn mc_kl_estimate(posterior: &LatentPosterior, samples: usize, seed: u64) -> f64 {
    let mut rng = derive_rng(&[seed, tag("mc-kl")]);
    let normal = StandardNormal;
    let dim = posterior.dim();
    let sigmas: Vec<f64> = posterior.logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_q = 0.0;
        let mut log_p = 0.0;
        for j in 0..dim {
            let eps: f64 = normal.sample(&mut rng);
            let z = posterior.mu[j] + sigmas[j] * eps;
            // log N(z; mu, sigma^2) and log N(z; 0, 1), 2pi terms cancel
            log_q += -0.5 * eps * eps - sigmas[j].ln();
            log_p += -0.5 * z * z;
        }
        acc += log_q - log_p;
    }
    acc / samples as f64
}

/// Closed-form KL against the Monte-Carlo oracle on random posteriors.
/// Passes when every case agrees within `rel_tol` of
/// `max(closed_form, 0.01)` and the prior maps to exactly zero.
pub fn check_kl_oracle(cases: usize, samples: usize, rel_tol: f64, seed: u64) -> CheckOutcome {
    let zero = LatentPosterior::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
    if gaussian_kl(&zero).unwrap() != 0.0 {
        return CheckOutcome::new("kl-oracle", false, "KL at the prior is not exactly 0".into());
    }
    let mut rng = derive_rng(&[seed, tag("kl-cases")]);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let dim = 1 + (case % 8);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logvar: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let posterior = LatentPosterior::new(mu, logvar).unwrap();
        let closed = gaussian_kl(&posterior).unwrap();
        let mc = mc_kl_estimate(&posterior, samples, seed ^ case as u64);
        let rel = (closed - mc).abs() / closed.max(0.01);
        worst = worst.max(rel);
        if rel >= rel_tol {
            return CheckOutcome::new(
                "kl-oracle",
                false,
                format!("case {case}: closed {closed} vs MC {mc} (rel {rel:.4})"),
            );
        }
    }
    CheckOutcome::new(
        "kl-oracle",
        true,
        format!("{cases} posteriors, {samples} samples each, worst rel err {worst:.4}"),
    )
}

/// Small fixed instance for end-to-end gradient checking: 8x8 single-channel
/// images, latent 4, two examples.
pub fn grad_check_model(seed: u64) -> Result<(Model, Array4<f64>, Vec<usize>)> {
    let config = ModelConfig {
        latent_dim: 4,
        image_side: 8,
        channels: 1,
        num_classes: 5,
        conv_channels: vec![4, 8],
        backbone: Backbone::SmallCnn,
    };
    let model = Model::new(config, seed)?;
    let mut rng = derive_rng(&[seed, tag("grad-x")]);
    let x = Array4::from_shape_simple_fn((2, 1, 8, 8), || rng.random_range(0.0..1.0));
    Ok((model, x, vec![1, 3]))
}

/// End-to-end analytic gradient of the weighted objective against central
/// finite differences with the given `h`. Passes when more than `min_ok` of
/// coordinates sit within `rel_tol`.
pub fn check_end_to_end_gradients(
    h: f64,
    rel_tol: f64,
    min_ok: f64,
    seed: u64,
) -> CheckOutcome {
    let (mut model, x, labels) = match grad_check_model(seed) {
        Ok(v) => v,
        Err(e) => return CheckOutcome::new("gradient-check", false, e.to_string()),
    };
    let eps = {
        let mut rng = derive_rng(&[seed, tag("grad-eps")]);
        model.draw_noise(2, &mut rng)
    };
    let (beta, alpha) = (0.7, 1.3);
    let total = |m: &Model| -> f64 {
        let cache = m
            .forward_cached(&x, LatentMode::Sampled, Some(eps.clone()), true)
            .unwrap();
        let out = m.outputs(&cache);
        vae_dg_loss(
            x.view(),
            &labels,
            out.x_prime.view(),
            &out.posterior,
            out.logits.view(),
            beta,
            alpha,
        )
        .unwrap()
        .total
    };

    let cache = model
        .forward_cached(&x, LatentMode::Sampled, Some(eps.clone()), true)
        .unwrap();
    let out = model.outputs(&cache);
    let (kl_dmu, kl_dlv) = gaussian_kl_batch_grads(&out.posterior);
    let grads = OutputGrads {
        d_x_prime: Some(reconstruction_loss_grad(x.view(), out.x_prime.view())),
        d_logits: Some(classification_loss_grad(out.logits.view(), &labels).mapv(|v| v * alpha)),
        d_mu: Some(kl_dmu.mapv(|v| v * beta)),
        d_logvar: Some(kl_dlv.mapv(|v| v * beta)),
    };
    let analytic = model.backward(&cache, &grads);

    let n = model.params.layout.total_len;
    let mut bad = 0usize;
    for i in 0..n {
        let orig = model.params.values[i];
        model.params.values[i] = orig + h;
        let fp = total(&model);
        model.params.values[i] = orig - h;
        let fm = total(&model);
        model.params.values[i] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ana = analytic.values[i];
        let denom = ana.abs().max(num.abs()).max(1e-4);
        if (ana - num).abs() / denom >= rel_tol {
            bad += 1;
        }
    }
    let ok = 1.0 - bad as f64 / n as f64;
    CheckOutcome::new(
        "gradient-check",
        ok > min_ok,
        format!("{:.2}% of {n} coordinates within {rel_tol} (h = {h})", 100.0 * ok),
    )
}

/// Reduction identities of the weighted objective.
pub fn check_reduction_identities(seed: u64) -> CheckOutcome {
    let (model, x, labels) = match grad_check_model(seed) {
        Ok(v) => v,
        Err(e) => return CheckOutcome::new("reduction-identities", false, e.to_string()),
    };
    let mut rng = derive_rng(&[seed, tag("reduce")]);
    let out = model.forward(&x, LatentMode::Sampled, &mut rng).unwrap();
    let unit = vae_dg_loss(
        x.view(),
        &labels,
        out.x_prime.view(),
        &out.posterior,
        out.logits.view(),
        1.0,
        0.0,
    )
    .unwrap();
    let vae = crate::losses::vae_loss(x.view(), out.x_prime.view(), &out.posterior).unwrap();
    if unit.total != vae {
        return CheckOutcome::new(
            "reduction-identities",
            false,
            format!("beta=1, alpha=0 total {} != plain objective {}", unit.total, vae),
        );
    }
    let bare = vae_dg_loss(
        x.view(),
        &labels,
        out.x_prime.view(),
        &out.posterior,
        out.logits.view(),
        0.0,
        0.0,
    )
    .unwrap();
    if bare.total != bare.recon {
        return CheckOutcome::new(
            "reduction-identities",
            false,
            format!("beta=alpha=0 total {} != recon {}", bare.total, bare.recon),
        );
    }
    CheckOutcome::new(
        "reduction-identities",
        true,
        "unit-beta matches the plain objective; zero weights leave reconstruction".into(),
    )
}

/// Resampling marginal: heavily imbalanced counts draw near-uniformly.
pub fn check_resampling(draws: usize, tol: f64, seed: u64) -> CheckOutcome {
    let mut examples = Vec::new();
    for (label, n) in [(0usize, 100usize), (1, 1), (2, 1), (3, 1), (4, 1)] {
        for _ in 0..n {
            examples.push(LabeledExample {
                image: ndarray::Array3::zeros((1, 2, 2)),
                label,
                domain_id: 0,
            });
        }
    }
    let ds = DomainDataset::from_examples(0, "imbalanced", examples).unwrap();
    let mut stream = BalancedStream::new(&ds, ResampleMode::UniformClass, seed).unwrap();
    let mut freq = [0usize; 5];
    for _ in 0..draws {
        freq[ds.examples[stream.next_index()].label] += 1;
    }
    let mut worst: f64 = 0.0;
    for &f in &freq {
        worst = worst.max((f as f64 / draws as f64 - 0.2).abs());
    }
    CheckOutcome::new(
        "resampling",
        worst < tol,
        format!("counts [100,1,1,1,1], {draws} draws, worst deviation {worst:.4} (tol {tol})"),
    )
}

/// Pooled batch contract: 3 sources x 22 per domain gives 66 with exact
/// per-domain counts.
pub fn check_batch_contract(seed: u64) -> CheckOutcome {
    let spec = crate::data::synth::ShiftSpec {
        image_side: 8,
        ..crate::data::synth::ShiftSpec::default_desk(3, 0.5)
    };
    let datasets = match generate_synthetic_domains(&spec, 3, 30, seed) {
        Ok(d) => d,
        Err(e) => return CheckOutcome::new("batch-contract", false, e.to_string()),
    };
    let mut streams: Vec<(usize, BalancedStream)> = datasets
        .iter()
        .enumerate()
        .map(|(i, d)| (i, BalancedStream::new(d, ResampleMode::UniformClass, seed).unwrap()))
        .collect();
    for round in 0..10 {
        let batch = match pooled_batch(&mut streams, &datasets, 22) {
            Ok(b) => b,
            Err(e) => return CheckOutcome::new("batch-contract", false, e.to_string()),
        };
        if batch.len() != 66 {
            return CheckOutcome::new(
                "batch-contract",
                false,
                format!("round {round}: batch size {} != 66", batch.len()),
            );
        }
        for d in 0..3 {
            let count = batch.domains.iter().filter(|&&x| x == d).count();
            if count != 22 {
                return CheckOutcome::new(
                    "batch-contract",
                    false,
                    format!("round {round}: domain {d} contributed {count} != 22"),
                );
            }
        }
    }
    CheckOutcome::new(
        "batch-contract",
        true,
        "10 pooled batches of 66 with exact {22, 22, 22} splits".into(),
    )
}

/// Baseline unit oracles: penalty fixtures and averaging identities.
pub fn check_baseline_oracles() -> CheckOutcome {
    use crate::baselines::{GradientVarianceState, WeightAverageWindow};
    use std::collections::BTreeMap;

    let same = GradientVarianceState::from_variances(
        0.95,
        BTreeMap::from([(0, vec![2.0, 3.0]), (1, vec![2.0, 3.0])]),
    )
    .unwrap();
    if same.penalty().unwrap() != 0.0 {
        return CheckOutcome::new("baseline-oracles", false, "penalty not 0 on equal variances".into());
    }
    let base = GradientVarianceState::from_variances(
        0.95,
        BTreeMap::from([(0, vec![1.0, 1.0]), (1, vec![3.0, 3.0])]),
    )
    .unwrap();
    let scaled = GradientVarianceState::from_variances(
        0.95,
        BTreeMap::from([(0, vec![5.0, 5.0]), (1, vec![15.0, 15.0])]),
    )
    .unwrap();
    let (p, q) = (base.penalty().unwrap(), scaled.penalty().unwrap());
    if p != 1.0 || (q - 25.0 * p).abs() > 1e-9 {
        return CheckOutcome::new(
            "baseline-oracles",
            false,
            format!("fixture penalty {p} (want 1.0), scaling {q} vs {}", 25.0 * p),
        );
    }

    let mut constant = WeightAverageWindow::new(0, 10, 3).unwrap();
    let params = vec![0.5, -1.25, 2.0];
    for step in [0u64, 5, 10] {
        constant.absorb(step, &params).unwrap();
    }
    if constant.finalize().unwrap() != params {
        return CheckOutcome::new("baseline-oracles", false, "constant average not identity".into());
    }
    let mut two = WeightAverageWindow::new(0, 1, 2).unwrap();
    two.absorb(0, &[0.0, 0.0]).unwrap();
    two.absorb(1, &[2.0, 2.0]).unwrap();
    if two.finalize().unwrap() != vec![1.0, 1.0] {
        return CheckOutcome::new("baseline-oracles", false, "two-point midpoint wrong".into());
    }
    CheckOutcome::new(
        "baseline-oracles",
        true,
        "penalty fixtures and averaging identities hold".into(),
    )
}

/// Checkpoint round trip at the bit level.
pub fn check_checkpoint_roundtrip(seed: u64) -> CheckOutcome {
    let (model, _, _) = match grad_check_model(seed) {
        Ok(v) => v,
        Err(e) => return CheckOutcome::new("checkpoint-roundtrip", false, e.to_string()),
    };
    let dir = std::env::temp_dir().join(format!("vaedg-verify-ckpt-{seed}-{}", std::process::id()));
    let meta = crate::checkpoint::CheckpointMeta {
        step: 17,
        seed,
        config_digest: "verify".into(),
    };
    let outcome = (|| -> Result<bool> {
        crate::checkpoint::save_checkpoint(&dir, &model.params, &meta)?;
        let (restored, rmeta) = crate::checkpoint::load_checkpoint(&dir, model.layout())?;
        Ok(restored.values == model.params.values && rmeta == meta)
    })();
    let _ = std::fs::remove_dir_all(&dir);
    match outcome {
        Ok(true) => CheckOutcome::new("checkpoint-roundtrip", true, "bit-exact".into()),
        Ok(false) => CheckOutcome::new("checkpoint-roundtrip", false, "values differ".into()),
        Err(e) => CheckOutcome::new("checkpoint-roundtrip", false, e.to_string()),
    }
}

/// Short two-step determinism probe: identical config implies identical
/// records.
pub fn check_run_determinism(seed: u64) -> CheckOutcome {
    let config = ExperimentConfig {
        steps: 3,
        eval_every: 1,
        latent_dim: 4,
        image_side: 16,
        conv_channels: vec![4, 8],
        per_domain: 3,
        per_domain_count: 15,
        num_domains: 3,
        seed,
        ..ExperimentConfig::desk()
    };
    let outcome = (|| -> Result<bool> {
        let datasets = crate::harness::synthetic_domains_for(&config)?;
        let split = crate::harness::make_split(&datasets, 0, config.val_fraction, seed)?;
        let a = crate::harness::train(&config, &datasets, &split, None)?;
        let b = crate::harness::train(&config, &datasets, &split, None)?;
        Ok(serde_json::to_string(&a)? == serde_json::to_string(&b)?)
    })();
    match outcome {
        Ok(true) => CheckOutcome::new("run-determinism", true, "identical records".into()),
        Ok(false) => CheckOutcome::new("run-determinism", false, "records differ".into()),
        Err(e) => CheckOutcome::new("run-determinism", false, e.to_string()),
    }
}

/// Run the full suite with a fixed seed.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_kl_oracle(100, 100_000, 0.05, seed),
        check_end_to_end_gradients(1e-4, 1e-3, 0.99, seed),
        check_reduction_identities(seed),
        check_resampling(50_000, 0.02, seed),
        check_batch_contract(seed),
        check_baseline_oracles(),
        check_checkpoint_roundtrip(seed),
        check_run_determinism(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mc_estimator_tracks_known_values() {
        // KL of N(1, 1) from N(0, 1) is 0.5
        let p = LatentPosterior::new(vec![1.0], vec![0.0]).unwrap();
        let mc = mc_kl_estimate(&p, 200_000, 3);
        assert!((mc - 0.5).abs() < 0.01, "MC {mc}");
        // inflated variance case: 0.5 * (e - 2)
        let p = LatentPosterior::new(vec![0.0], vec![1.0]).unwrap();
        let mc = mc_kl_estimate(&p, 200_000, 4);
        assert!((mc - 0.5 * (std::f64::consts::E - 2.0)).abs() < 0.01, "MC {mc}");
    }

    #[test]
    fn quick_suite_passes() {
        // trimmed sample counts keep this test fast; the acceptance suite
        // runs the full budgets
        let checks = vec![
            check_kl_oracle(20, 20_000, 0.05, 0),
            check_reduction_identities(0),
            check_resampling(50_000, 0.02, 0),
            check_batch_contract(0),
            check_baseline_oracles(),
            check_checkpoint_roundtrip(0),
        ];
        for c in checks {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }
}
