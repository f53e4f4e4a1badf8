//! Leave-one-domain-out experiment protocol: splits, the training loop,
//! model selection, evaluation, and the full protocol grid.
//!
//! One training run is single-threaded and bit-deterministic given its
//! config. The protocol grid may run cells in parallel threads; cells share
//! only the read-only datasets and write distinct record files.
//!
//! Model selection is blind by type: the training-domain-validation selector
//! consumes [`ValPoint`]s, which carry no target-domain metric at all. Target
//! accuracies are recorded alongside for the oracle reference rows only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baselines::{fishr_step, GradientVarianceState, WeightAverageWindow};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::{Algorithm, ExperimentConfig};
use crate::data::sampler::{pooled_batch, BalancedStream};
use crate::data::synth::generate_synthetic_domains;
use crate::data::{Batch, DatasetSummary, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, classification_loss_grad, gaussian_kl_batch, gaussian_kl_batch_grads,
    reconstruction_loss, reconstruction_loss_grad, softmax_probs, LossBreakdown,
};
use crate::model::{accuracy, LatentMode, Model, OutputGrads};
use crate::nn::{Optimizer, ParamGroup, ParameterSet};
use crate::rng::{derive_rng, tag};

/// Per-source-domain train/validation index lists plus the untouched target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub target_domain: usize,
    /// `(domain_id, example indices)` per source domain, ascending by id.
    pub train: Vec<(usize, Vec<usize>)>,
    pub val: Vec<(usize, Vec<usize>)>,
}

/// Shuffled per-source-domain partition: `round(val_fraction * n)` examples
/// go to validation, the rest to training; the target domain appears in
/// neither.
pub fn make_split(
    domains: &[DomainDataset],
    target_id: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if domains.len() < 2 {
        return Err(Error::invalid("need at least 2 domains"));
    }
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if !domains.iter().any(|d| d.domain_id == target_id) {
        return Err(Error::invalid(format!("unknown target domain {target_id}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut sources: Vec<&DomainDataset> =
        domains.iter().filter(|d| d.domain_id != target_id).collect();
    sources.sort_by_key(|d| d.domain_id);
    for source in sources {
        let n = source.len();
        let mut indices: Vec<usize> = (0..n).collect();
        // Fisher-Yates with a per-domain stream
        let mut rng = derive_rng(&[seed, tag("split"), source.domain_id as u64]);
        for i in (1..n).rev() {
            use rand::Rng;
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let val_n = (val_fraction * n as f64).round() as usize;
        val.push((source.domain_id, indices[..val_n].to_vec()));
        train.push((source.domain_id, indices[val_n..].to_vec()));
    }
    Ok(Split {
        target_domain: target_id,
        train,
        val,
    })
}

/// Fraction of examples whose argmax logit matches the label, computed with
/// `z = mu` (no sampling noise). Order-independent.
pub fn evaluate(model: &Model, examples: &[&crate::data::LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(64) {
        let batch = Batch::from_examples(chunk.iter().copied())?;
        let logits = model.logits_eval(&batch.x)?;
        correct += (accuracy(logits.view(), &batch.labels) * batch.len() as f64).round() as usize;
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Accuracy over a whole domain dataset.
pub fn evaluate_dataset(model: &Model, dataset: &DomainDataset) -> Result<f64> {
    let refs: Vec<&crate::data::LabeledExample> = dataset.examples.iter().collect();
    evaluate(model, &refs)
}

/// One recorded evaluation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    /// Objective terms measured on a fixed probe batch.
    pub loss: LossBreakdown,
    /// Present exactly for penalty-bearing algorithms.
    pub fishr_penalty: Option<f64>,
    pub val_accuracy: f64,
    pub target_accuracy: f64,
    pub checkpoint_id: String,
}

/// Validation-only view of an evaluation point. This type is the entire
/// input of the training-domain-validation selector; it has no field that
/// could leak target metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: u64,
    pub checkpoint_id: String,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OraclePoint {
    pub step: u64,
    pub checkpoint_id: String,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    TrainingDomainValidation,
    Oracle,
}

/// Argmax of validation accuracy; ties break toward the earliest step.
pub fn select_by_validation(points: &[ValPoint]) -> Result<&ValPoint> {
    if points.is_empty() {
        return Err(Error::invalid("no evaluations to select from"));
    }
    Ok(points
        .iter()
        .fold(None::<&ValPoint>, |best, p| match best {
            Some(b) if p.val_accuracy > b.val_accuracy => Some(p),
            None => Some(p),
            other => other,
        })
        .unwrap())
}

/// Argmax of target accuracy; ties break toward the earliest step.
pub fn select_by_oracle(points: &[OraclePoint]) -> Result<&OraclePoint> {
    if points.is_empty() {
        return Err(Error::invalid("no evaluations to select from"));
    }
    Ok(points
        .iter()
        .fold(None::<&OraclePoint>, |best, p| match best {
            Some(b) if p.target_accuracy > b.target_accuracy => Some(p),
            None => Some(p),
            other => other,
        })
        .unwrap())
}

/// Select a checkpoint id from a record under the given criterion. The
/// validation path first projects the record onto [`ValPoint`]s, so target
/// metrics cannot influence it.
pub fn select_model(record: &RunRecord, criterion: SelectionCriterion) -> Result<String> {
    match criterion {
        SelectionCriterion::TrainingDomainValidation => {
            let points: Vec<ValPoint> = record
                .evals
                .iter()
                .map(|e| ValPoint {
                    step: e.step,
                    checkpoint_id: e.checkpoint_id.clone(),
                    val_accuracy: e.val_accuracy,
                })
                .collect();
            Ok(select_by_validation(&points)?.checkpoint_id.clone())
        }
        SelectionCriterion::Oracle => {
            let points: Vec<OraclePoint> = record
                .evals
                .iter()
                .map(|e| OraclePoint {
                    step: e.step,
                    checkpoint_id: e.checkpoint_id.clone(),
                    target_accuracy: e.target_accuracy,
                })
                .collect();
            Ok(select_by_oracle(&points)?.checkpoint_id.clone())
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub checkpoint_id: String,
    pub step: u64,
    pub val_accuracy: f64,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwadOutcome {
    pub start_step: u64,
    pub end_step: u64,
    pub absorbed: u64,
    pub val_accuracy: f64,
    pub target_accuracy: f64,
}

/// Everything one training run produces. Serialized as JSON; byte-identical
/// across repeats of the same `(config, seed)` (wall time is not persisted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub variant: String,
    pub target_domain: usize,
    pub seed: u64,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub datasets: Vec<DatasetSummary>,
    pub evals: Vec<EvalPoint>,
    pub selected_validation: SelectionOutcome,
    pub selected_oracle: SelectionOutcome,
    pub swad: Option<SwadOutcome>,
    /// Reported target accuracy per criterion. For weight-averaging
    /// algorithms both equal the averaged model's accuracy.
    pub final_target_accuracy_validation: f64,
    pub final_target_accuracy_oracle: f64,
    /// Training examples seen per domain id; the target id must map to 0.
    pub domain_exposure: BTreeMap<usize, u64>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunRecord {
    /// Reported accuracy under a criterion (averaged model for +SWAD runs).
    pub fn reported_accuracy(&self, criterion: SelectionCriterion) -> f64 {
        match criterion {
            SelectionCriterion::TrainingDomainValidation => self.final_target_accuracy_validation,
            SelectionCriterion::Oracle => self.final_target_accuracy_oracle,
        }
    }
}

/// Objective gates derived from the algorithm and config.
#[derive(Debug, Clone, Copy)]
struct TermGates {
    run_decoder: bool,
    recon_weight: f64,
    beta_eff: f64,
    alpha_eff: f64,
    compute_kl: bool,
    train_latent_mode: LatentMode,
}

impl TermGates {
    fn from_config(config: &ExperimentConfig) -> Self {
        if config.algorithm.uses_vae() {
            TermGates {
                run_decoder: config.recon_weight > 0.0,
                recon_weight: config.recon_weight,
                beta_eff: config.effective_beta(),
                alpha_eff: config.effective_alpha(),
                compute_kl: true,
                train_latent_mode: config.latent_mode,
            }
        } else {
            // cross-entropy only; the classifier consumes the deterministic
            // encoder features
            TermGates {
                run_decoder: false,
                recon_weight: 0.0,
                beta_eff: 0.0,
                alpha_eff: 1.0,
                compute_kl: false,
                train_latent_mode: LatentMode::FixedMu,
            }
        }
    }
}

/// Outcome of a single optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: u64,
    pub loss: LossBreakdown,
    pub fishr_penalty: Option<f64>,
}

/// Single-run trainer. Drives pooled batches from the source-domain streams
/// through the model and optimizer; see [`train`] for the packaged loop.
pub struct Trainer<'a> {
    config: &'a ExperimentConfig,
    datasets: &'a [DomainDataset],
    split: &'a Split,
    gates: TermGates,
    pub model: Model,
    optimizer: Optimizer,
    train_views: Vec<DomainDataset>,
    streams: Vec<(usize, BalancedStream)>,
    noise_rng: rand_chacha::ChaCha8Rng,
    frozen_eps: Option<Vec<f64>>,
    fishr: Option<GradientVarianceState>,
    swad: Option<WeightAverageWindow>,
    swad_absorbed: u64,
    probe: Batch,
    probe_eps: Array2<f64>,
    /// 0-based index of the next update.
    next_update: u64,
    exposure: BTreeMap<usize, u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &'a ExperimentConfig,
        datasets: &'a [DomainDataset],
        split: &'a Split,
    ) -> Result<Self> {
        config.validate()?;
        let gates = TermGates::from_config(config);
        let model = Model::new(config.model_config(), config.seed)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.layout());

        // materialize the training subsets so streams resample over exactly
        // the training examples
        let mut train_views = Vec::new();
        for (domain_id, indices) in &split.train {
            let src = datasets
                .iter()
                .find(|d| d.domain_id == *domain_id)
                .ok_or_else(|| Error::invalid(format!("split names unknown domain {domain_id}")))?;
            let examples: Vec<_> = indices.iter().map(|&i| src.examples[i].clone()).collect();
            train_views.push(DomainDataset::from_examples(
                *domain_id,
                format!("{}-train", src.name),
                examples,
            )?);
        }
        let streams: Vec<(usize, BalancedStream)> = train_views
            .iter()
            .enumerate()
            .map(|(i, view)| {
                BalancedStream::new(view, config.resample, config.seed).map(|s| (i, s))
            })
            .collect::<Result<_>>()?;

        // fixed probe batch from an independent stream, measured at every
        // evaluation point
        let mut probe_streams: Vec<(usize, BalancedStream)> = train_views
            .iter()
            .enumerate()
            .map(|(i, view)| {
                BalancedStream::new(view, config.resample, config.seed ^ tag("probe"))
                    .map(|s| (i, s))
            })
            .collect::<Result<_>>()?;
        let probe = pooled_batch(&mut probe_streams, &train_views, config.per_domain)?;

        let mut model_for_noise = derive_rng(&[config.seed, tag("probe-eps")]);
        let probe_eps = model.draw_noise(probe.len(), &mut model_for_noise);

        let frozen_eps = if config.frozen_noise {
            let mut rng = derive_rng(&[config.seed, tag("frozen-eps")]);
            Some(
                model
                    .draw_noise(1, &mut rng)
                    .row(0)
                    .to_vec(),
            )
        } else {
            None
        };

        let fishr = if config.algorithm.uses_fishr() {
            Some(GradientVarianceState::new(config.fishr_decay)?)
        } else {
            None
        };
        let swad = if config.algorithm.uses_swad() {
            Some(WeightAverageWindow::new(
                config.swad_start_step(),
                config.steps,
                model.layout().total_len,
            )?)
        } else {
            None
        };

        Ok(Self {
            config,
            datasets,
            split,
            gates,
            model,
            optimizer,
            train_views,
            streams,
            noise_rng: derive_rng(&[config.seed, tag("noise")]),
            frozen_eps,
            fishr,
            swad,
            swad_absorbed: 0,
            probe,
            probe_eps,
            next_update: 0,
            exposure: BTreeMap::new(),
        })
    }

    /// Start from explicit parameter values instead of the seeded init
    /// (resuming, or fault-injection in tests).
    pub fn with_initial_params(mut self, params: ParameterSet) -> Result<Self> {
        self.model.set_params(params.values)?;
        Ok(self)
    }

    fn noise_for(&mut self, batch_len: usize) -> Option<Array2<f64>> {
        match self.gates.train_latent_mode {
            LatentMode::FixedMu => None,
            LatentMode::Sampled => Some(match &self.frozen_eps {
                Some(row) => {
                    let mut eps = Array2::zeros((batch_len, row.len()));
                    for mut r in eps.outer_iter_mut() {
                        r.assign(&ndarray::ArrayView1::from(row.as_slice()));
                    }
                    eps
                }
                None => self.model.draw_noise(batch_len, &mut self.noise_rng),
            }),
        }
    }

    /// Compute the gated objective terms for a batch under the current
    /// parameters, without updating anything.
    fn measure(&self, batch: &Batch, eps: Option<Array2<f64>>) -> Result<(LossBreakdown, Option<f64>)> {
        let mode = if eps.is_some() {
            LatentMode::Sampled
        } else {
            LatentMode::FixedMu
        };
        let cache = self
            .model
            .forward_cached(&batch.x, mode, eps, self.gates.run_decoder)?;
        let out = self.model.outputs(&cache);
        let recon = if self.gates.run_decoder {
            self.gates.recon_weight * reconstruction_loss(batch.x.view(), out.x_prime.view())?
        } else {
            0.0
        };
        let kl = if self.gates.compute_kl {
            gaussian_kl_batch(&out.posterior)?
        } else {
            0.0
        };
        let cls = classification_loss(out.logits.view(), &batch.labels)?;
        let breakdown = LossBreakdown::compose(recon, kl, cls, self.gates.beta_eff, self.gates.alpha_eff);
        let penalty = match &self.fishr {
            Some(state) if state.num_domains() >= 2 => Some(state.penalty()?),
            Some(_) => Some(0.0),
            None => None,
        };
        Ok((breakdown, penalty))
    }

    /// Draw one pooled batch, take one optimizer step, return the measured
    /// terms. Aborts on a non-finite objective.
    pub fn step_once(&mut self) -> Result<StepOutcome> {
        let update_index = self.next_update;
        let batch = pooled_batch(&mut self.streams, &self.train_views, self.config.per_domain)?;
        for &d in &batch.domains {
            assert_ne!(
                d, self.split.target_domain,
                "target-domain example reached a training batch"
            );
            *self.exposure.entry(d).or_insert(0) += 1;
        }

        let eps = self.noise_for(batch.len());
        let mode = if eps.is_some() {
            LatentMode::Sampled
        } else {
            LatentMode::FixedMu
        };
        let cache = self
            .model
            .forward_cached(&batch.x, mode, eps, self.gates.run_decoder)?;
        let out = self.model.outputs(&cache);

        let recon = if self.gates.run_decoder {
            self.gates.recon_weight * reconstruction_loss(batch.x.view(), out.x_prime.view())?
        } else {
            0.0
        };
        let kl = if self.gates.compute_kl {
            gaussian_kl_batch(&out.posterior)?
        } else {
            0.0
        };
        let cls = classification_loss(out.logits.view(), &batch.labels)?;
        let breakdown =
            LossBreakdown::compose(recon, kl, cls, self.gates.beta_eff, self.gates.alpha_eff);

        // penalty state update and gradient (on the live head parameters)
        let mut fishr_penalty = None;
        let mut fishr_grads = None;
        if let Some(state) = &mut self.fishr {
            let probs = softmax_probs(out.logits.view());
            let step = fishr_step(state, &out.z, &probs, &batch.labels, &batch.domains)?;
            fishr_penalty = Some(step.penalty);
            if update_index >= self.config.fishr_warmup {
                fishr_grads = Some((step.d_head_w, step.d_head_b));
            }
        }

        let objective = breakdown.total
            + fishr_penalty
                .filter(|_| fishr_grads.is_some())
                .map(|p| self.config.fishr_lambda * p)
                .unwrap_or(0.0);
        if !objective.is_finite() || !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: update_index,
                recon: breakdown.recon,
                kl: breakdown.kl,
                cls: breakdown.cls,
                total: objective,
            });
        }

        let mut grads_spec = OutputGrads {
            d_logits: Some(
                classification_loss_grad(out.logits.view(), &batch.labels)
                    .mapv(|v| v * self.gates.alpha_eff),
            ),
            ..Default::default()
        };
        if self.gates.run_decoder {
            grads_spec.d_x_prime = Some(
                reconstruction_loss_grad(batch.x.view(), out.x_prime.view())
                    .mapv(|v| v * self.gates.recon_weight),
            );
        }
        if self.gates.compute_kl && self.gates.beta_eff > 0.0 {
            let (dmu, dlv) = gaussian_kl_batch_grads(&out.posterior);
            grads_spec.d_mu = Some(dmu.mapv(|v| v * self.gates.beta_eff));
            grads_spec.d_logvar = Some(dlv.mapv(|v| v * self.gates.beta_eff));
        }
        let mut grads = self.model.backward(&cache, &grads_spec);
        if let Some((dw, db)) = fishr_grads {
            let lambda = self.config.fishr_lambda;
            let w_idx = self.model.layout().index_of("head.fc.weight").unwrap();
            let b_idx = self.model.layout().index_of("head.fc.bias").unwrap();
            for (g, d) in grads.slice_mut(w_idx).iter_mut().zip(dw.iter()) {
                *g += lambda * d;
            }
            for (g, d) in grads.slice_mut(b_idx).iter_mut().zip(db.iter()) {
                *g += lambda * d;
            }
        }

        let alternate = self.config.alternate_optimization;
        self.optimizer.step(&mut self.model.params, &grads, |group| {
            if !alternate {
                return true;
            }
            if update_index % 2 == 0 {
                group == ParamGroup::Encoder
            } else {
                group != ParamGroup::Encoder
            }
        });
        self.next_update += 1;

        // dense weight averaging absorbs one snapshot per evaluation cadence
        let completed = self.next_update;
        if let Some(window) = &mut self.swad {
            if window.contains(completed)
                && (completed % self.config.eval_every == 0 || completed == self.config.steps)
            {
                window.absorb(completed, &self.model.params.values)?;
                self.swad_absorbed += 1;
            }
        }

        Ok(StepOutcome {
            step: completed,
            loss: breakdown,
            fishr_penalty,
        })
    }

    fn val_refs(&self) -> Vec<&crate::data::LabeledExample> {
        let mut refs = Vec::new();
        for (domain_id, indices) in &self.split.val {
            let src = self
                .datasets
                .iter()
                .find(|d| d.domain_id == *domain_id)
                .expect("validated in new()");
            for &i in indices {
                refs.push(&src.examples[i]);
            }
        }
        refs
    }

    fn target_refs(&self) -> Vec<&crate::data::LabeledExample> {
        let target = self
            .datasets
            .iter()
            .find(|d| d.domain_id == self.split.target_domain)
            .expect("validated in new()");
        target.examples.iter().collect()
    }

    fn eval_point(&self, step: u64) -> Result<EvalPoint> {
        let eps = match self.gates.train_latent_mode {
            LatentMode::Sampled => Some(self.probe_eps.clone()),
            LatentMode::FixedMu => None,
        };
        let (loss, fishr_penalty) = self.measure(&self.probe, eps)?;
        let val_accuracy = evaluate(&self.model, &self.val_refs())?;
        let target_accuracy = evaluate(&self.model, &self.target_refs())?;
        Ok(EvalPoint {
            step,
            loss,
            fishr_penalty,
            val_accuracy,
            target_accuracy,
            checkpoint_id: format!("step-{step:06}"),
        })
    }

    pub fn exposure(&self) -> &BTreeMap<usize, u64> {
        &self.exposure
    }
}

/// Run the full training loop for one cell and assemble its record.
/// When `out_dir` is given, the selected checkpoints land under
/// `out_dir/checkpoints/<cell>/<criterion>` and the record under
/// `out_dir/records/<cell>.json`.
pub fn train(
    config: &ExperimentConfig,
    datasets: &[DomainDataset],
    split: &Split,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    let started = Instant::now();
    let mut trainer = Trainer::new(config, datasets, split)?;

    let mut evals = vec![trainer.eval_point(0)?];
    // snapshots for the running argmax per criterion
    let mut best_val: (usize, Vec<f64>) = (0, trainer.model.params.values.clone());
    let mut best_oracle: (usize, Vec<f64>) = (0, trainer.model.params.values.clone());

    for _ in 0..config.steps {
        let outcome = trainer.step_once()?;
        let s = outcome.step;
        if s % config.eval_every == 0 || s == config.steps {
            let mut point = trainer.eval_point(s)?;
            // keep the live training-batch penalty visible too; the probe
            // measurement reflects the same state
            if point.fishr_penalty.is_none() {
                point.fishr_penalty = outcome.fishr_penalty;
            }
            if point.val_accuracy > evals[best_val.0].val_accuracy {
                best_val = (evals.len(), trainer.model.params.values.clone());
            }
            if point.target_accuracy > evals[best_oracle.0].target_accuracy {
                best_oracle = (evals.len(), trainer.model.params.values.clone());
            }
            evals.push(point);
        }
    }

    let outcome_of = |idx: usize| -> SelectionOutcome {
        let e = &evals[idx];
        SelectionOutcome {
            checkpoint_id: e.checkpoint_id.clone(),
            step: e.step,
            val_accuracy: e.val_accuracy,
            target_accuracy: e.target_accuracy,
        }
    };
    let selected_validation = outcome_of(best_val.0);
    let selected_oracle = outcome_of(best_oracle.0);

    // averaged-model evaluation for the +SWAD algorithms
    let swad_outcome = if let Some(window) = &trainer.swad {
        let averaged = window.finalize_params(&trainer.model.params)?;
        let mut eval_model = Model::new(config.model_config(), config.seed)?;
        eval_model.set_params(averaged.values.clone())?;
        let val_accuracy = evaluate(&eval_model, &trainer.val_refs())?;
        let target_accuracy = evaluate(&eval_model, &trainer.target_refs())?;
        Some((
            SwadOutcome {
                start_step: config.swad_start_step(),
                end_step: config.steps,
                absorbed: window.count(),
                val_accuracy,
                target_accuracy,
            },
            averaged,
        ))
    } else {
        None
    };

    let (final_val, final_oracle) = match &swad_outcome {
        Some((s, _)) => (s.target_accuracy, s.target_accuracy),
        None => (
            selected_validation.target_accuracy,
            selected_oracle.target_accuracy,
        ),
    };

    let mut exposure = trainer.exposure().clone();
    exposure.entry(split.target_domain).or_insert(0);

    let record = RunRecord {
        algorithm: config.algorithm,
        variant: config.variant.clone(),
        target_domain: split.target_domain,
        seed: config.seed,
        config_digest: config.digest(),
        config: config.clone(),
        datasets: datasets.iter().map(DatasetSummary::from).collect(),
        evals,
        selected_validation,
        selected_oracle,
        swad: swad_outcome.as_ref().map(|(s, _)| s.clone()),
        final_target_accuracy_validation: final_val,
        final_target_accuracy_oracle: final_oracle,
        domain_exposure: exposure,
        wall_seconds: started.elapsed().as_secs_f64(),
    };

    if let Some(out) = out_dir {
        persist_record(&record, out)?;
        let cell = config.cell_name();
        let base = out.join("checkpoints").join(&cell);
        let save = |name: &str, step: u64, values: &[f64]| -> Result<()> {
            let params = ParameterSet {
                layout: trainer.model.layout().clone(),
                values: values.to_vec(),
            };
            save_checkpoint(
                &base.join(name),
                &params,
                &CheckpointMeta {
                    step,
                    seed: config.seed,
                    config_digest: config.digest(),
                },
            )
        };
        save(
            "validation",
            record.selected_validation.step,
            &best_val.1,
        )?;
        save("oracle", record.selected_oracle.step, &best_oracle.1)?;
        if let Some((s, averaged)) = &swad_outcome {
            save("swad", s.end_step, &averaged.values)?;
        }
    }

    Ok(record)
}

/// Record file path for a cell.
pub fn record_path(out_dir: &Path, config: &ExperimentConfig) -> PathBuf {
    out_dir
        .join("records")
        .join(format!("{}.json", config.cell_name()))
}

pub fn persist_record(record: &RunRecord, out_dir: &Path) -> Result<()> {
    let path = record_path(out_dir, &record.config);
    std::fs::create_dir_all(path.parent().unwrap())?;
    let json = serde_json::to_string_pretty(record)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Generate (or reuse) the synthetic domains a config describes.
pub fn synthetic_domains_for(config: &ExperimentConfig) -> Result<Vec<DomainDataset>> {
    generate_synthetic_domains(
        &config.shift_spec(),
        config.num_domains,
        config.per_domain_count,
        config.data_seed,
    )
}

/// Run every `(target domain, seed)` cell of the protocol for one base
/// config. Existing record files with a matching digest are reused, so a
/// partial grid resumes where it stopped. `jobs > 1` runs cells in threads;
/// each run stays single-threaded and deterministic.
pub fn run_protocol(
    base: &ExperimentConfig,
    datasets: &[DomainDataset],
    seeds: &[u64],
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    if datasets.len() < 2 {
        return Err(Error::invalid("need at least 2 domains"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    let mut targets: Vec<usize> = datasets.iter().map(|d| d.domain_id).collect();
    targets.sort_unstable();

    let mut cells = Vec::new();
    for &target in &targets {
        for &seed in seeds {
            let mut config = base.clone();
            config.target_domain = target;
            config.seed = seed;
            cells.push(config);
        }
    }

    let jobs = jobs.max(1).min(cells.len());
    let results: Vec<std::sync::Mutex<Option<Result<RunRecord>>>> =
        cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let config = &cells[i];
                let outcome = run_cell(config, datasets, out_dir);
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("cell executed"))
        .collect()
}

fn run_cell(
    config: &ExperimentConfig,
    datasets: &[DomainDataset],
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    if let Some(out) = out_dir {
        let path = record_path(out, config);
        if path.exists() {
            let record = load_record(&path)?;
            if record.config_digest != config.digest() {
                return Err(Error::Config(format!(
                    "existing record {} was produced by a different config; \
                     move it aside or change --out-dir",
                    path.display()
                )));
            }
            return Ok(record);
        }
    }
    let split = make_split(
        datasets,
        config.target_domain,
        config.val_fraction,
        config.seed,
    )?;
    train(config, datasets, &split, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::ShiftSpec;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            steps: 4,
            eval_every: 2,
            latent_dim: 6,
            image_side: 16,
            conv_channels: vec![4, 8],
            per_domain: 4,
            per_domain_count: 20,
            num_domains: 3,
            fishr_warmup: 0,
            ..ExperimentConfig::desk()
        }
    }

    fn tiny_domains(config: &ExperimentConfig) -> Vec<DomainDataset> {
        let mut spec = ShiftSpec::default_desk(config.num_domains, config.shift_strength);
        spec.image_side = config.image_side;
        generate_synthetic_domains(&spec, config.num_domains, config.per_domain_count, 0).unwrap()
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let config = ExperimentConfig {
            num_domains: 4,
            per_domain_count: 100,
            ..tiny_config()
        };
        let domains = tiny_domains(&config);
        let split = make_split(&domains, 0, 0.2, 7).unwrap();
        assert_eq!(split.train.len(), 3);
        assert_eq!(split.val.len(), 3);
        for (_, idx) in &split.train {
            assert_eq!(idx.len(), 80);
        }
        for (_, idx) in &split.val {
            assert_eq!(idx.len(), 20);
        }
        // disjoint per domain
        for ((d, tr), (_, va)) in split.train.iter().zip(&split.val) {
            assert_ne!(*d, 0);
            let mut all: Vec<usize> = tr.iter().chain(va).cloned().collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 100);
        }
        let again = make_split(&domains, 0, 0.2, 7).unwrap();
        assert_eq!(split.train, again.train);
        assert_eq!(split.val, again.val);
        // every leave-one-out configuration is constructible
        for t in 0..4 {
            assert!(make_split(&domains, t, 0.2, 7).is_ok());
        }
        assert!(make_split(&domains, 9, 0.2, 7).is_err());
        assert!(make_split(&domains, 0, 1.2, 7).is_err());
    }

    #[test]
    fn selection_rules() {
        let points = vec![
            ValPoint { step: 100, checkpoint_id: "step-000100".into(), val_accuracy: 0.5 },
            ValPoint { step: 200, checkpoint_id: "step-000200".into(), val_accuracy: 0.7 },
            ValPoint { step: 300, checkpoint_id: "step-000300".into(), val_accuracy: 0.6 },
        ];
        assert_eq!(select_by_validation(&points).unwrap().step, 200);
        let tied = vec![
            ValPoint { step: 100, checkpoint_id: "a".into(), val_accuracy: 0.7 },
            ValPoint { step: 200, checkpoint_id: "b".into(), val_accuracy: 0.7 },
        ];
        assert_eq!(select_by_validation(&tied).unwrap().step, 100);
        assert!(select_by_validation(&[]).is_err());
    }

    #[test]
    fn zero_steps_yields_initial_evaluation_only() {
        let config = ExperimentConfig {
            steps: 0,
            ..tiny_config()
        };
        let domains = tiny_domains(&config);
        let split = make_split(&domains, 0, 0.2, config.seed).unwrap();
        let record = train(&config, &domains, &split, None).unwrap();
        assert_eq!(record.evals.len(), 1);
        assert_eq!(record.evals[0].step, 0);
        assert_eq!(record.selected_validation.step, 0);
    }

    #[test]
    fn alternate_optimization_masks_parameter_groups() {
        let config = ExperimentConfig {
            alternate_optimization: true,
            ..tiny_config()
        };
        let domains = tiny_domains(&config);
        let split = make_split(&domains, 0, 0.2, config.seed).unwrap();
        let mut trainer = Trainer::new(&config, &domains, &split).unwrap();

        let group_deltas = |before: &[f64], after: &[f64], model: &Model| -> BTreeMap<&'static str, f64> {
            let mut deltas = BTreeMap::new();
            for entry in &model.layout().entries {
                let key = match entry.group {
                    ParamGroup::Encoder => "encoder",
                    ParamGroup::Decoder => "decoder",
                    ParamGroup::Head => "head",
                };
                let d: f64 = (entry.offset..entry.offset + entry.len)
                    .map(|i| (after[i] - before[i]).abs())
                    .sum();
                *deltas.entry(key).or_insert(0.0) += d;
            }
            deltas
        };

        // update 0 (even): encoder only
        let before = trainer.model.params.values.clone();
        trainer.step_once().unwrap();
        let after = trainer.model.params.values.clone();
        let d0 = group_deltas(&before, &after, &trainer.model);
        assert!(d0["encoder"] > 0.0);
        assert_eq!(d0["decoder"], 0.0);
        assert_eq!(d0["head"], 0.0);

        // update 1 (odd): decoder and head only
        let before = after;
        trainer.step_once().unwrap();
        let after = trainer.model.params.values.clone();
        let d1 = group_deltas(&before, &after, &trainer.model);
        assert_eq!(d1["encoder"], 0.0);
        assert!(d1["decoder"] > 0.0);
        assert!(d1["head"] > 0.0);
    }

    #[test]
    fn erm_record_zeroes_vae_terms_and_penalty_presence_tracks_algorithm() {
        let domains = tiny_domains(&tiny_config());
        for (algorithm, expect_penalty) in [
            (Algorithm::Erm, false),
            (Algorithm::Fishr, true),
            (Algorithm::Drgen, true),
        ] {
            let config = ExperimentConfig {
                algorithm,
                ..tiny_config()
            };
            let split = make_split(&domains, 0, 0.2, config.seed).unwrap();
            let record = train(&config, &domains, &split, None).unwrap();
            for e in &record.evals {
                assert_eq!(e.loss.recon, 0.0);
                assert_eq!(e.loss.kl, 0.0);
                assert!(e.loss.cls > 0.0);
                assert_eq!(e.loss.total, e.loss.cls);
                assert_eq!(e.fishr_penalty.is_some(), expect_penalty);
            }
        }
    }

    #[test]
    fn nan_guard_aborts_with_diagnostic() {
        let config = tiny_config();
        let domains = tiny_domains(&config);
        let split = make_split(&domains, 0, 0.2, config.seed).unwrap();
        let trainer = Trainer::new(&config, &domains, &split).unwrap();
        let mut params = trainer.model.params.clone();
        // poison the head bias: it reaches the loss with no rectifier in
        // between to mask the NaN
        let idx = params.layout.index_of("head.fc.bias").unwrap();
        let at = params.layout.range(idx).start;
        params.values[at] = f64::NAN;
        let mut poisoned = Trainer::new(&config, &domains, &split)
            .unwrap()
            .with_initial_params(params)
            .unwrap();
        match poisoned.step_once() {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn frozen_noise_reuses_one_draw() {
        let config = ExperimentConfig {
            frozen_noise: true,
            steps: 2,
            ..tiny_config()
        };
        let domains = tiny_domains(&config);
        let split = make_split(&domains, 0, 0.2, config.seed).unwrap();
        let mut trainer = Trainer::new(&config, &domains, &split).unwrap();
        let a = trainer.noise_for(3).unwrap();
        let b = trainer.noise_for(5).unwrap();
        for row in a.outer_iter() {
            assert_eq!(row, a.row(0));
        }
        assert_eq!(a.row(0), b.row(0));
    }
}
