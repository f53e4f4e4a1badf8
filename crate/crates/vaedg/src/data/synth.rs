//! Synthetic multi-domain image generation with controllable shift.
//!
//! Class identity is carried by domain-independent render parameters (counts
//! and sizes of bright and dark blobs on a disc background, monotone in the
//! class index); domain identity is carried purely by photometric transforms
//! (brightness, contrast, hue rotation, blur, vignetting). Randomness is
//! counter-based per `(seed, domain, index)`, so generation is reproducible
//! and order-independent.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, LabeledExample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// Per-domain photometric transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    /// Added to every channel.
    pub brightness: f64,
    /// Gain around mid-gray: `x -> (x - 0.5) * contrast + 0.5`.
    pub contrast: f64,
    /// Rotation (radians) of RGB values about the gray axis.
    pub hue_rotation: f64,
    /// Gaussian blur standard deviation in pixels; zero disables.
    pub blur_sigma: f64,
    /// Radial darkening strength: `x *= 1 - vignette * (r / r_max)^2`.
    pub vignette: f64,
}

impl PhotometricParams {
    pub fn neutral() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            hue_rotation: 0.0,
            blur_sigma: 0.0,
            vignette: 0.0,
        }
    }
}

/// Per-class render parameters. Shared across domains so label semantics are
/// domain-invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRenderParams {
    pub bright_blobs: usize,
    pub bright_radius: f64,
    pub dark_blobs: usize,
    pub dark_radius: f64,
}

/// Full generation spec: per-domain photometrics, per-class signal, optional
/// `(domain, class)` masks for domains that lack a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub image_side: usize,
    pub domains: Vec<PhotometricParams>,
    pub classes: Vec<ClassRenderParams>,
    pub masked: Vec<(usize, usize)>,
    pub noise_sigma: f64,
}

impl ShiftSpec {
    /// Desk-scale default: five classes with monotone blob counts and one
    /// distinct photometric profile per domain, scaled by `strength`
    /// (zero means no shift at all).
    pub fn default_desk(num_domains: usize, strength: f64) -> Self {
        // diverse base profiles, cycled if more domains are asked for
        let base = [
            (0.00, 1.00, 0.0, 0.0, 0.05),
            (-0.10, 0.85, 0.9, 1.0, 0.35),
            (0.10, 1.20, -0.8, 0.0, 0.00),
            (-0.04, 1.10, 0.4, 1.6, 0.50),
            (0.06, 0.75, -1.2, 0.6, 0.20),
            (-0.12, 1.25, 1.4, 0.3, 0.10),
        ];
        let domains = (0..num_domains)
            .map(|d| {
                let (br, ct, hue, blur, vig) = base[d % base.len()];
                PhotometricParams {
                    brightness: br * strength,
                    contrast: 1.0 + (ct - 1.0) * strength,
                    hue_rotation: hue * strength,
                    blur_sigma: blur * strength,
                    vignette: vig * strength,
                }
            })
            .collect();
        let classes = (0..NUM_CLASSES)
            .map(|c| ClassRenderParams {
                bright_blobs: 2 * c,
                bright_radius: 1.6,
                dark_blobs: c.saturating_sub(2) * 2,
                dark_radius: 1.3,
            })
            .collect();
        Self {
            image_side: 32,
            domains,
            classes,
            masked: Vec::new(),
            noise_sigma: 0.01,
        }
    }

    /// Classes present in the given domain after masking.
    pub fn present_classes(&self, domain: usize) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| !self.masked.contains(&(domain, c)))
            .collect()
    }

    pub fn validate(&self, num_domains: usize, per_domain_count: usize) -> Result<()> {
        if num_domains < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 domains, got {num_domains}"
            )));
        }
        if per_domain_count == 0 {
            return Err(Error::invalid("per_domain_count must be positive"));
        }
        if self.domains.len() < num_domains {
            return Err(Error::invalid(format!(
                "spec covers {} domains, {num_domains} requested",
                self.domains.len()
            )));
        }
        if self.classes.is_empty() || self.classes.len() > NUM_CLASSES {
            return Err(Error::invalid("class parameter list must cover 1..=5 classes"));
        }
        if self.image_side == 0 {
            return Err(Error::invalid("image_side must be positive"));
        }
        for d in 0..num_domains {
            if self.present_classes(d).is_empty() {
                return Err(Error::invalid(format!("domain {d} has every class masked")));
            }
            if per_domain_count < self.present_classes(d).len() {
                return Err(Error::invalid(
                    "per_domain_count smaller than the number of present classes",
                ));
            }
        }
        Ok(())
    }
}

/// Render the class signal for one example: disc background plus class blobs,
/// before any domain transform. Consumes only `rng`, never domain state.
pub fn render_class_image(
    class: &ClassRenderParams,
    side: usize,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((3, side, side));
    let center = (side as f64 - 1.0) / 2.0;
    let disc_r = 0.45 * side as f64;

    // warm disc with slight instance jitter and radial falloff
    let jitter: f64 = rng.random_range(-0.04..0.04);
    let base = [0.55 + jitter, 0.30 + 0.5 * jitter, 0.12];
    for h in 0..side {
        for w in 0..side {
            let dy = h as f64 - center;
            let dx = w as f64 - center;
            let r = (dx * dx + dy * dy).sqrt();
            let inside = r <= disc_r;
            for (c, &b) in base.iter().enumerate() {
                img[[c, h, w]] = if inside {
                    b * (1.0 - 0.4 * (r / disc_r).powi(2))
                } else {
                    0.02
                };
            }
        }
    }

    let mut stamp = |count: usize, radius: f64, tint: [f64; 3], rng: &mut ChaCha8Rng| {
        for _ in 0..count {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dist: f64 = rng.random_range(0.0..0.75) * disc_r;
            let (cy, cx) = (center + dist * angle.sin(), center + dist * angle.cos());
            let rad = radius * rng.random_range(0.8..1.2);
            let lo_h = (cy - 3.0 * rad).floor().max(0.0) as usize;
            let hi_h = ((cy + 3.0 * rad).ceil() as usize).min(side - 1);
            let lo_w = (cx - 3.0 * rad).floor().max(0.0) as usize;
            let hi_w = ((cx + 3.0 * rad).ceil() as usize).min(side - 1);
            for h in lo_h..=hi_h {
                for w in lo_w..=hi_w {
                    let d2 = (h as f64 - cy).powi(2) + (w as f64 - cx).powi(2);
                    let fall = (-d2 / (2.0 * rad * rad)).exp();
                    for (c, &t) in tint.iter().enumerate() {
                        img[[c, h, w]] += t * fall;
                    }
                }
            }
        }
    };
    // bright exudate-like blobs, then dark hemorrhage-like blobs
    stamp(class.bright_blobs, class.bright_radius, [0.38, 0.36, 0.10], rng);
    stamp(class.dark_blobs, class.dark_radius, [-0.30, -0.22, -0.06], rng);

    if noise_sigma > 0.0 {
        let normal = rand_distr::Normal::new(0.0, noise_sigma).unwrap();
        use rand_distr::Distribution;
        for v in img.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Apply one domain's photometric transform. Order: blur, hue rotation,
/// contrast, brightness, vignette, clamp.
pub fn apply_photometric(img: &mut Array3<f64>, p: &PhotometricParams) {
    let (channels, side_h, side_w) = img.dim();
    if p.blur_sigma > 1e-9 {
        gaussian_blur(img, p.blur_sigma);
    }
    if channels == 3 && p.hue_rotation.abs() > 1e-12 {
        let m = hue_rotation_matrix(p.hue_rotation);
        for h in 0..side_h {
            for w in 0..side_w {
                let rgb = [img[[0, h, w]], img[[1, h, w]], img[[2, h, w]]];
                for c in 0..3 {
                    img[[c, h, w]] = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
                }
            }
        }
    }
    if (p.contrast - 1.0).abs() > 1e-12 {
        img.mapv_inplace(|v| (v - 0.5) * p.contrast + 0.5);
    }
    if p.brightness.abs() > 1e-12 {
        img.mapv_inplace(|v| v + p.brightness);
    }
    if p.vignette.abs() > 1e-12 {
        let center_h = (side_h as f64 - 1.0) / 2.0;
        let center_w = (side_w as f64 - 1.0) / 2.0;
        let r_max2 = center_h * center_h + center_w * center_w;
        for c in 0..channels {
            for h in 0..side_h {
                for w in 0..side_w {
                    let r2 = (h as f64 - center_h).powi(2) + (w as f64 - center_w).powi(2);
                    img[[c, h, w]] *= 1.0 - p.vignette * r2 / r_max2;
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Rotation of RGB space about the gray axis by `theta` radians.
fn hue_rotation_matrix(theta: f64) -> [[f64; 3]; 3] {
    let c = theta.cos();
    let s = theta.sin();
    let t = (1.0 - c) / 3.0;
    let k = s / 3.0_f64.sqrt();
    [
        [c + t, t - k, t + k],
        [t + k, c + t, t - k],
        [t - k, t + k, c + t],
    ]
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(img: &mut Array3<f64>, sigma: f64) {
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (channels, height, width) = img.dim();
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i as usize
    };
    let mut tmp = img.clone();
    for c in 0..channels {
        for h in 0..height {
            for w in 0..width {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let src = reflect(w as isize + j as isize - radius, width as isize);
                    acc += kv * img[[c, h, src]];
                }
                tmp[[c, h, w]] = acc;
            }
        }
    }
    for c in 0..channels {
        for w in 0..width {
            for h in 0..height {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let src = reflect(h as isize + j as isize - radius, height as isize);
                    acc += kv * tmp[[c, src, w]];
                }
                img[[c, h, w]] = acc;
            }
        }
    }
}

/// Generate `num_domains` datasets of `per_domain_count` examples each.
///
/// Per example, the label is fixed first (a round-robin prefix guarantees
/// every present class appears, the remainder is drawn uniformly), the class
/// signal is rendered, and the domain photometric transform is applied last.
pub fn generate_synthetic_domains(
    spec: &ShiftSpec,
    num_domains: usize,
    per_domain_count: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    spec.validate(num_domains, per_domain_count)?;
    let mut out = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let present = spec.present_classes(d);
        let mut examples = Vec::with_capacity(per_domain_count);
        for i in 0..per_domain_count {
            let mut rng = derive_rng(&[seed, tag("synth"), d as u64, i as u64]);
            let label = if i < present.len() {
                present[i]
            } else {
                present[rng.random_range(0..present.len())]
            };
            let mut image =
                render_class_image(&spec.classes[label], spec.image_side, spec.noise_sigma, &mut rng);
            apply_photometric(&mut image, &spec.domains[d]);
            examples.push(LabeledExample {
                image,
                label,
                domain_id: d,
            });
        }
        out.push(DomainDataset::from_examples(d, format!("synth{d}"), examples)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::{linear_backward, linear_forward};
    use ndarray::{Array1, Array2};

    #[test]
    fn generation_is_deterministic() {
        let spec = ShiftSpec::default_desk(3, 1.0);
        let a = generate_synthetic_domains(&spec, 3, 12, 0).unwrap();
        let b = generate_synthetic_domains(&spec, 3, 12, 0).unwrap();
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.class_counts, db.class_counts);
            for (ea, eb) in da.examples.iter().zip(&db.examples) {
                assert_eq!(ea.label, eb.label);
                assert_eq!(ea.image, eb.image);
            }
        }
        let c = generate_synthetic_domains(&spec, 3, 12, 1).unwrap();
        assert_ne!(a[0].examples[0].image, c[0].examples[0].image);
    }

    #[test]
    fn every_present_class_appears() {
        let mut spec = ShiftSpec::default_desk(3, 1.0);
        spec.masked.push((1, 4)); // domain 1 lacks the last grade
        let data = generate_synthetic_domains(&spec, 3, 20, 0).unwrap();
        for d in &data {
            for c in 0..NUM_CLASSES {
                let masked = spec.masked.contains(&(d.domain_id, c));
                if masked {
                    assert_eq!(d.class_counts[c], 0, "masked class generated");
                } else {
                    assert!(d.class_counts[c] > 0, "class {c} missing in domain {}", d.domain_id);
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let spec = ShiftSpec::default_desk(4, 1.0);
        assert!(generate_synthetic_domains(&spec, 1, 10, 0).is_err());
        assert!(generate_synthetic_domains(&spec, 4, 0, 0).is_err());
        assert!(generate_synthetic_domains(&spec, 9, 10, 0).is_err());
    }

    #[test]
    fn labels_are_domain_invariant_by_construction() {
        // Same class and instance stream under two different photometric
        // profiles: pixels differ, label semantics cannot.
        let spec = ShiftSpec::default_desk(2, 1.0);
        let mut rng_a = derive_rng(&[5, tag("invariance")]);
        let mut rng_b = derive_rng(&[5, tag("invariance")]);
        let base_a = render_class_image(&spec.classes[3], 32, 0.01, &mut rng_a);
        let base_b = render_class_image(&spec.classes[3], 32, 0.01, &mut rng_b);
        assert_eq!(base_a, base_b);
        let mut shifted_a = base_a.clone();
        let mut shifted_b = base_b;
        apply_photometric(&mut shifted_a, &spec.domains[0]);
        apply_photometric(&mut shifted_b, &spec.domains[1]);
        assert_ne!(shifted_a, shifted_b);
    }

    #[test]
    fn all_pixels_stay_in_unit_interval() {
        let spec = ShiftSpec::default_desk(4, 1.5);
        let data = generate_synthetic_domains(&spec, 4, 10, 3).unwrap();
        for d in &data {
            for ex in &d.examples {
                assert!(ex.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    /// Two-sample Kolmogorov-Smirnov p-value (asymptotic).
    fn ks_p_value(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (n1, n2) = (a.len() as f64, b.len() as f64);
        let mut d: f64 = 0.0;
        let (mut i, mut j) = (0usize, 0usize);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let cdf1 = i as f64 / n1;
            let cdf2 = j as f64 / n2;
            d = d.max((cdf1 - cdf2).abs());
        }
        let ne = (n1 * n2 / (n1 + n2)).sqrt();
        let lambda = (ne + 0.12 + 0.11 / ne) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
            p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn zero_shift_gives_matching_pixel_mean_distributions() {
        let spec = ShiftSpec::default_desk(2, 0.0);
        let data = generate_synthetic_domains(&spec, 2, 150, 7).unwrap();
        let means: Vec<Vec<f64>> = data
            .iter()
            .map(|d| d.examples.iter().map(|e| e.image.mean().unwrap()).collect())
            .collect();
        let p = ks_p_value(means[0].clone(), means[1].clone());
        assert!(p > 0.01, "KS p-value {p} too small for identical photometrics");
    }

    /// A two-layer probe trained on raw pixels should recover the domain id
    /// almost perfectly once the shift is on.
    #[test]
    fn probe_distinguishes_domains_under_shift() {
        use rand::Rng;
        let num_domains = 4usize;
        let spec = ShiftSpec::default_desk(num_domains, 1.0);
        let data = generate_synthetic_domains(&spec, num_domains, 150, 11).unwrap();
        let side = spec.image_side;
        let in_dim = 3 * side * side;
        let hidden = 16;

        let flat = |ex: &LabeledExample| -> Vec<f64> {
            ex.image.iter().cloned().collect()
        };
        let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
        let mut held: Vec<(Vec<f64>, usize)> = Vec::new();
        for d in &data {
            for (i, ex) in d.examples.iter().enumerate() {
                if i < 110 {
                    train.push((flat(ex), d.domain_id));
                } else {
                    held.push((flat(ex), d.domain_id));
                }
            }
        }

        // tiny 2-layer MLP trained with plain SGD
        let mut rng = derive_rng(&[11, tag("probe")]);
        let mut w1 = Array2::from_shape_simple_fn((hidden, in_dim), || {
            rng.random_range(-0.02..0.02)
        });
        let mut b1 = Array1::<f64>::zeros(hidden);
        let mut w2 = Array2::from_shape_simple_fn((num_domains, hidden), || {
            rng.random_range(-0.3..0.3)
        });
        let mut b2 = Array1::<f64>::zeros(num_domains);

        let batch = 64;
        for step in 0..400 {
            let mut rng_b = derive_rng(&[11, tag("probe-batch"), step]);
            let mut x = Array2::<f64>::zeros((batch, in_dim));
            let mut y = Vec::with_capacity(batch);
            for bi in 0..batch {
                let pick = rng_b.random_range(0..train.len());
                x.row_mut(bi).assign(&Array1::from_vec(train[pick].0.clone()));
                y.push(train[pick].1);
            }
            let mut h1 = linear_forward(x.view(), w1.view(), b1.view());
            crate::nn::ops::relu_inplace(&mut h1);
            let logits = linear_forward(h1.view(), w2.view(), b2.view());
            let dlogits = crate::losses::classification_loss_grad(logits.view(), &y);
            let mut dw2 = Array2::<f64>::zeros(w2.dim());
            let mut db2 = Array1::<f64>::zeros(num_domains);
            let mut dh1 = linear_backward(h1.view(), dlogits.view(), w2.view(), dw2.view_mut(), db2.view_mut());
            crate::nn::ops::relu_backward(&mut dh1, &h1);
            let mut dw1 = Array2::<f64>::zeros(w1.dim());
            let mut db1 = Array1::<f64>::zeros(hidden);
            let _ = linear_backward(x.view(), dh1.view(), w1.view(), dw1.view_mut(), db1.view_mut());
            let lr = 0.05;
            w1.zip_mut_with(&dw1, |p, &g| *p -= lr * g);
            b1.zip_mut_with(&db1, |p, &g| *p -= lr * g);
            w2.zip_mut_with(&dw2, |p, &g| *p -= lr * g);
            b2.zip_mut_with(&db2, |p, &g| *p -= lr * g);
        }

        let mut correct = 0usize;
        for (xv, d) in &held {
            let x = Array2::from_shape_vec((1, in_dim), xv.clone()).unwrap();
            let mut h1 = linear_forward(x.view(), w1.view(), b1.view());
            crate::nn::ops::relu_inplace(&mut h1);
            let logits = linear_forward(h1.view(), w2.view(), b2.view());
            let row = logits.row(0);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            if best == *d {
                correct += 1;
            }
        }
        let acc = correct as f64 / held.len() as f64;
        assert!(acc > 0.9, "domain probe accuracy {acc} too low; shift not learnable");
    }
}
