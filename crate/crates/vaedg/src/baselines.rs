//! Comparison algorithm building blocks: the Fishr gradient-variance penalty
//! and SWAD dense weight averaging. The training loop composes these with the
//! shared harness (plain ERM is cross-entropy alone; the combined method is
//! ERM + Fishr penalty + SWAD averaging).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::losses::classification_loss;
use crate::nn::ParameterSet;

/// Plain pooled-batch cross-entropy, the whole of the ERM objective.
pub fn erm_step_loss(logits: ndarray::ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    classification_loss(logits, labels)
}

/// Per-domain exponential moving averages of the per-sample gradient second
/// moments (variances) of the classifier-head parameters.
#[derive(Debug, Clone)]
pub struct GradientVarianceState {
    decay: f64,
    ema: BTreeMap<usize, Vec<f64>>,
}

impl GradientVarianceState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(format!(
                "EMA decay must lie in [0, 1), got {decay}"
            )));
        }
        Ok(Self {
            decay,
            ema: BTreeMap::new(),
        })
    }

    /// Fixture constructor from raw per-domain variance vectors.
    pub fn from_variances(decay: f64, variances: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let mut state = Self::new(decay)?;
        let mut len = None;
        for v in variances.values() {
            match len {
                None => len = Some(v.len()),
                Some(l) if l == v.len() => {}
                _ => return Err(Error::invalid("variance vectors must share one length")),
            }
        }
        state.ema = variances;
        Ok(state)
    }

    pub fn num_domains(&self) -> usize {
        self.ema.len()
    }

    /// EMA-update one domain with a fresh batch variance vector. Returns the
    /// weight the new observation received (1 for a first observation,
    /// `1 - decay` afterwards), needed for exact penalty gradients.
    pub fn observe(&mut self, domain: usize, variance: Vec<f64>) -> f64 {
        match self.ema.get_mut(&domain) {
            Some(old) => {
                for (o, n) in old.iter_mut().zip(&variance) {
                    *o = self.decay * *o + (1.0 - self.decay) * n;
                }
                1.0 - self.decay
            }
            None => {
                self.ema.insert(domain, variance);
                1.0
            }
        }
    }

    pub fn variance_of(&self, domain: usize) -> Option<&[f64]> {
        self.ema.get(&domain).map(|v| v.as_slice())
    }

    /// Mean over domains of the mean squared per-element distance between the
    /// domain's variance vector and the cross-domain mean variance vector.
    /// Zero exactly when all tracked variances agree.
    pub fn penalty(&self) -> Result<f64> {
        let d_n = self.ema.len();
        if d_n < 2 {
            return Err(Error::invalid(format!(
                "gradient-variance penalty needs at least 2 domains, have {d_n}"
            )));
        }
        let k_n = self.ema.values().next().unwrap().len();
        let mut mean = vec![0.0; k_n];
        for v in self.ema.values() {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= d_n as f64;
        }
        let mut acc = 0.0;
        for v in self.ema.values() {
            for (x, m) in v.iter().zip(&mean) {
                let d = x - m;
                acc += d * d;
            }
        }
        Ok(acc / (d_n * k_n) as f64)
    }
}

/// The penalty as a free function over the state.
pub fn fishr_penalty(state: &GradientVarianceState) -> Result<f64> {
    state.penalty()
}

/// Result of one penalty step: the value after the EMA update, and its exact
/// gradient with respect to the head weight matrix and bias (latent inputs
/// are treated as constants).
#[derive(Debug, Clone)]
pub struct FishrStep {
    pub penalty: f64,
    pub d_head_w: Array2<f64>,
    pub d_head_b: Array1<f64>,
}

/// Update per-domain gradient variances from one pooled batch and return the
/// penalty with its head-parameter gradient.
///
/// Per-sample head gradients are `u_i z_i^T` for the weight and `u_i` for the
/// bias, `u_i = softmax(logits_i) - onehot(y_i)`. The gradient of the penalty
/// flows through the current batch's variance contribution (past EMA content
/// is constant) and through the softmax Jacobian into the parameters.
pub fn fishr_step(
    state: &mut GradientVarianceState,
    z: &Array2<f64>,
    probs: &Array2<f64>,
    labels: &[usize],
    domains: &[usize],
) -> Result<FishrStep> {
    let (b_n, c_n) = probs.dim();
    let l_n = z.ncols();
    if z.nrows() != b_n || labels.len() != b_n || domains.len() != b_n {
        return Err(Error::shape(
            format!("batch of {b_n}"),
            format!(
                "z {:?}, labels {}, domains {}",
                z.dim(),
                labels.len(),
                domains.len()
            ),
        ));
    }
    let k_n = c_n * l_n + c_n;

    // u_i = p_i - e_{y_i}
    let mut u = probs.clone();
    for (mut row, &y) in u.outer_iter_mut().zip(labels.iter()) {
        row[y] -= 1.0;
    }

    // group samples by domain (sorted ids for a fixed iteration order)
    let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        by_domain.entry(d).or_default().push(i);
    }
    if by_domain.len() < 2 && state.num_domains() < 2 {
        return Err(Error::invalid(
            "gradient-variance penalty needs at least 2 domains",
        ));
    }

    let g_of = |i: usize, k: usize| -> f64 {
        if k < c_n * l_n {
            let (c, l) = (k / l_n, k % l_n);
            u[[i, c]] * z[[i, l]]
        } else {
            u[[i, k - c_n * l_n]]
        }
    };

    // per-domain batch variance, mean, and EMA weight
    struct DomainBatch {
        idx: Vec<usize>,
        g_mean: Vec<f64>,
        ema_weight: f64,
    }
    let mut batches: Vec<(usize, DomainBatch)> = Vec::new();
    for (&d, idx) in &by_domain {
        let n = idx.len() as f64;
        let mut g_mean = vec![0.0; k_n];
        for &i in idx {
            for (k, gm) in g_mean.iter_mut().enumerate() {
                *gm += g_of(i, k);
            }
        }
        for gm in &mut g_mean {
            *gm /= n;
        }
        let mut var = vec![0.0; k_n];
        for &i in idx {
            for (k, v) in var.iter_mut().enumerate() {
                let dv = g_of(i, k) - g_mean[k];
                *v += dv * dv;
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let ema_weight = state.observe(d, var);
        batches.push((
            d,
            DomainBatch {
                idx: idx.clone(),
                g_mean,
                ema_weight,
            },
        ));
    }

    let penalty = state.penalty()?;

    // cross-domain mean of the EMA variances
    let d_total = state.num_domains();
    let mut vbar = vec![0.0; k_n];
    for v in state.ema.values() {
        for (m, x) in vbar.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut vbar {
        *m /= d_total as f64;
    }

    let mut d_w = Array2::<f64>::zeros((c_n, l_n));
    let mut d_b = Array1::<f64>::zeros(c_n);
    let norm = 2.0 / (d_total * k_n) as f64;
    for (d, batch) in &batches {
        let v_ema = state.ema.get(d).unwrap();
        let n = batch.idx.len() as f64;
        for &i in &batch.idx {
            // sensitivity of the penalty to this sample's gradient vector,
            // then to u_i via q, then through the softmax Jacobian
            let mut q = vec![0.0; c_n];
            for k in 0..k_n {
                let dp_dv = norm * (v_ema[k] - vbar[k]);
                let dv_dg = batch.ema_weight * 2.0 / n * (g_of(i, k) - batch.g_mean[k]);
                let dp_dg = dp_dv * dv_dg;
                if k < c_n * l_n {
                    let (c, l) = (k / l_n, k % l_n);
                    q[c] += dp_dg * z[[i, l]];
                } else {
                    q[k - c_n * l_n] += dp_dg;
                }
            }
            let dot: f64 = (0..c_n).map(|c| q[c] * probs[[i, c]]).sum();
            for c in 0..c_n {
                let da = probs[[i, c]] * (q[c] - dot);
                for l in 0..l_n {
                    d_w[[c, l]] += da * z[[i, l]];
                }
                d_b[c] += da;
            }
        }
    }

    Ok(FishrStep {
        penalty,
        d_head_w: d_w,
        d_head_b: d_b,
    })
}

/// Running elementwise sum of parameter snapshots over a step window.
#[derive(Debug, Clone)]
pub struct WeightAverageWindow {
    pub start_step: u64,
    pub end_step: u64,
    sum: Vec<f64>,
    count: u64,
}

impl WeightAverageWindow {
    pub fn new(start_step: u64, end_step: u64, param_len: usize) -> Result<Self> {
        if start_step > end_step {
            return Err(Error::invalid(format!(
                "window start {start_step} after end {end_step}"
            )));
        }
        Ok(Self {
            start_step,
            end_step,
            sum: vec![0.0; param_len],
            count: 0,
        })
    }

    pub fn contains(&self, step: u64) -> bool {
        (self.start_step..=self.end_step).contains(&step)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Absorb a checkpoint taken at `step`.
    pub fn absorb(&mut self, step: u64, values: &[f64]) -> Result<()> {
        if !self.contains(step) {
            return Err(Error::invalid(format!(
                "step {step} outside window [{}, {}]",
                self.start_step, self.end_step
            )));
        }
        if values.len() != self.sum.len() {
            return Err(Error::shape(
                format!("{} parameter values", self.sum.len()),
                format!("{}", values.len()),
            ));
        }
        for (s, v) in self.sum.iter_mut().zip(values) {
            *s += v;
        }
        self.count += 1;
        Ok(())
    }

    /// Elementwise mean of everything absorbed, quantized to f32 precision
    /// like every other parameter set.
    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::invalid("cannot finalize an empty averaging window"));
        }
        Ok(self
            .sum
            .iter()
            .map(|s| (s / self.count as f64) as f32 as f64)
            .collect())
    }

    /// Finalize into a [`ParameterSet`] sharing the given layout.
    pub fn finalize_params(&self, like: &ParameterSet) -> Result<ParameterSet> {
        let values = self.finalize()?;
        if values.len() != like.layout.total_len {
            return Err(Error::shape(
                format!("{}", like.layout.total_len),
                format!("{}", values.len()),
            ));
        }
        Ok(ParameterSet {
            layout: like.layout.clone(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn state_from(pairs: &[(usize, Vec<f64>)]) -> GradientVarianceState {
        GradientVarianceState::from_variances(
            0.95,
            pairs.iter().cloned().collect::<BTreeMap<_, _>>(),
        )
        .unwrap()
    }

    #[test]
    fn penalty_zero_on_identical_variances() {
        let s = state_from(&[(0, vec![2.0, 3.0]), (1, vec![2.0, 3.0]), (2, vec![2.0, 3.0])]);
        assert_eq!(s.penalty().unwrap(), 0.0);
    }

    #[test]
    fn penalty_two_domain_fixture() {
        // variance vectors [1,1] and [3,3]; mean [2,2]; squared distances 2
        // and 2; mean over domains then per element gives 1.0
        let s = state_from(&[(0, vec![1.0, 1.0]), (1, vec![3.0, 3.0])]);
        assert_eq!(s.penalty().unwrap(), 1.0);
    }

    #[test]
    fn penalty_scales_quadratically() {
        let base = state_from(&[(0, vec![1.0, 0.5]), (1, vec![2.5, 4.0])]);
        let scaled = state_from(&[(0, vec![3.0, 1.5]), (1, vec![7.5, 12.0])]);
        let p = base.penalty().unwrap();
        let q = scaled.penalty().unwrap();
        assert!((q - 9.0 * p).abs() < 1e-12, "{q} vs 9 * {p}");
    }

    #[test]
    fn penalty_invariant_under_domain_permutation() {
        let a = state_from(&[(0, vec![1.0, 2.0]), (1, vec![0.5, 0.1]), (2, vec![3.0, 1.0])]);
        let b = state_from(&[(2, vec![1.0, 2.0]), (0, vec![0.5, 0.1]), (1, vec![3.0, 1.0])]);
        assert!((a.penalty().unwrap() - b.penalty().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn penalty_needs_two_domains() {
        let s = state_from(&[(0, vec![1.0])]);
        assert!(s.penalty().is_err());
    }

    #[test]
    fn ema_update_blends() {
        let mut s = GradientVarianceState::new(0.9).unwrap();
        assert_eq!(s.observe(0, vec![1.0]), 1.0);
        let w = s.observe(0, vec![2.0]);
        assert!((w - 0.1).abs() < 1e-12);
        let v = s.variance_of(0).unwrap();
        assert!((v[0] - (0.9 * 1.0 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_label_noise_gives_positive_penalty() {
        // two domains whose label assignments disagree produce different
        // per-sample gradient statistics at a random head
        let mut rng = derive_rng(&[77]);
        let b = 16;
        let z = Array2::from_shape_simple_fn((b, 3), || rng.random_range(-1.0..1.0));
        let logits = Array2::from_shape_simple_fn((b, 4), || rng.random_range(-1.0..1.0));
        let probs = crate::losses::softmax_probs(logits.view());
        let labels: Vec<usize> = (0..b).map(|i| if i < 8 { i % 4 } else { 3 - i % 4 }).collect();
        let domains: Vec<usize> = (0..b).map(|i| if i < 8 { 0 } else { 1 }).collect();
        let mut state = GradientVarianceState::new(0.95).unwrap();
        let step = fishr_step(&mut state, &z, &probs, &labels, &domains).unwrap();
        assert!(step.penalty > 0.0);
    }

    /// The analytic penalty gradient against central finite differences on a
    /// small head. Each evaluation rebuilds the state from scratch so the
    /// function differentiated is exactly penalty-after-one-observation.
    #[test]
    fn fishr_gradient_matches_finite_differences() {
        use crate::losses::softmax_probs;
        use crate::nn::ops::linear_forward;
        use ndarray::Array1;

        let mut rng = derive_rng(&[78]);
        let (b, l, c) = (6usize, 3usize, 4usize);
        let z = Array2::from_shape_simple_fn((b, l), || rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let domains: Vec<usize> = (0..b).map(|i| i % 2).collect();
        let mut w: Vec<f64> = (0..c * l).map(|_| rng.random_range(-0.8..0.8)).collect();
        let mut bias: Vec<f64> = (0..c).map(|_| rng.random_range(-0.3..0.3)).collect();

        let eval = |w_s: &[f64], b_s: &[f64]| -> f64 {
            let wv = ndarray::ArrayView2::from_shape((c, l), w_s).unwrap();
            let bv = ndarray::ArrayView1::from_shape(c, b_s).unwrap();
            let logits = linear_forward(z.view(), wv, bv);
            let probs = softmax_probs(logits.view());
            let mut state = GradientVarianceState::new(0.95).unwrap();
            fishr_step(&mut state, &z, &probs, &labels, &domains)
                .unwrap()
                .penalty
        };

        let wv = Array2::from_shape_vec((c, l), w.clone()).unwrap();
        let bv = Array1::from_vec(bias.clone());
        let logits = linear_forward(z.view(), wv.view(), bv.view());
        let probs = softmax_probs(logits.view());
        let mut state = GradientVarianceState::new(0.95).unwrap();
        let step = fishr_step(&mut state, &z, &probs, &labels, &domains).unwrap();

        let h = 1e-6;
        for i in 0..w.len() {
            let orig = w[i];
            w[i] = orig + h;
            let fp = eval(&w, &bias);
            w[i] = orig - h;
            let fm = eval(&w, &bias);
            w[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = step.d_head_w.as_slice().unwrap()[i];
            let denom = ana.abs().max(num.abs()).max(1e-8);
            assert!(
                (ana - num).abs() / denom < 1e-4,
                "dW[{i}]: analytic {ana} vs numeric {num}"
            );
        }
        for i in 0..bias.len() {
            let orig = bias[i];
            bias[i] = orig + h;
            let fp = eval(&w, &bias);
            bias[i] = orig - h;
            let fm = eval(&w, &bias);
            bias[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = step.d_head_b[i];
            let denom = ana.abs().max(num.abs()).max(1e-8);
            assert!(
                (ana - num).abs() / denom < 1e-4,
                "db[{i}]: analytic {ana} vs numeric {num}"
            );
        }
    }

    #[test]
    fn swad_mean_is_idempotent_and_exact_midpoint() {
        let mut win = WeightAverageWindow::new(100, 200, 4).unwrap();
        let p = vec![0.25, -1.5, 3.0, 0.0];
        for step in [100u64, 150, 200] {
            win.absorb(step, &p).unwrap();
        }
        assert_eq!(win.finalize().unwrap(), p);

        let mut win2 = WeightAverageWindow::new(0, 10, 3).unwrap();
        win2.absorb(0, &[0.0, 0.0, 0.0]).unwrap();
        win2.absorb(10, &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(win2.finalize().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn swad_window_guards() {
        let mut win = WeightAverageWindow::new(10, 20, 2).unwrap();
        assert!(win.absorb(5, &[0.0, 0.0]).is_err());
        assert!(win.finalize().is_err());
        assert!(WeightAverageWindow::new(20, 10, 2).is_err());
        win.absorb(15, &[1.0, 1.0]).unwrap();
        assert!(win.absorb(15, &[1.0]).is_err());
    }

    #[test]
    fn swad_commutes_with_affine_reparameterization() {
        let mut rng = derive_rng(&[80]);
        let snaps: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0) as f32 as f64).collect())
            .collect();
        let (a, b) = (1.75, -0.4);
        let mut plain = WeightAverageWindow::new(0, 10, 6).unwrap();
        let mut mapped = WeightAverageWindow::new(0, 10, 6).unwrap();
        for (i, s) in snaps.iter().enumerate() {
            plain.absorb(i as u64, s).unwrap();
            let m: Vec<f64> = s.iter().map(|v| a * v + b).collect();
            mapped.absorb(i as u64, &m).unwrap();
        }
        let lhs = mapped.finalize().unwrap();
        let rhs: Vec<f64> = plain.finalize().unwrap().iter().map(|v| a * v + b).collect();
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn erm_loss_is_classification_loss() {
        let logits = ndarray::arr2(&[[0.1, -0.4, 1.0], [0.0, 0.0, 0.0]]);
        let labels = [2usize, 0];
        assert_eq!(
            erm_step_loss(logits.view(), &labels).unwrap(),
            classification_loss(logits.view(), &labels).unwrap()
        );
    }
}
