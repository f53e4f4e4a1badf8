//! Flat parameter storage and optimizers.
//!
//! All trainable tensors of a model live in one contiguous `Vec<f64>` behind
//! a [`ParamLayout`] that names each entry, records its shape, and assigns it
//! to a parameter group (encoder, decoder, head). Layers construct ndarray
//! views into the flat buffer on demand. This makes optimizer updates, weight
//! averaging, checkpointing, group masking, and finite-difference probing all
//! operate on plain slices in one fixed order.
//!
//! Parameter values are quantized to `f32` precision after initialization and
//! after every optimizer update (compute stays `f64`): the checkpoint format
//! stores 32-bit floats, and keeping values exactly representable makes the
//! save/restore round trip bit-exact.

pub mod ops;

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, ArrayViewMut2, ArrayViewMut4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Head,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total_len: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> usize {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let len: usize = shape.iter().product();
        let entry = ParamEntry {
            name,
            group,
            shape: shape.to_vec(),
            offset: self.total_len,
            len,
        };
        self.total_len += len;
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Flat index range of entry `idx`.
    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let e = &self.entries[idx];
        e.offset..e.offset + e.len
    }
}

/// Named, grouped parameter tensors backed by one flat buffer.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub layout: Arc<ParamLayout>,
    pub values: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len];
        Self { layout, values }
    }

    /// Fan-in scaled uniform init for weight matrices/filters, zero biases,
    /// quantized to f32 precision. `fan_in` is inferred from the shape:
    /// product of all dims but the first for >=2-d entries.
    pub fn init_uniform(layout: Arc<ParamLayout>, seed: u64) -> Self {
        use rand::Rng;
        let mut set = Self::zeros(layout.clone());
        for (idx, entry) in layout.entries.iter().enumerate() {
            if entry.shape.len() < 2 {
                continue; // biases start at zero
            }
            let fan_in: usize = entry.shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng::derive_rng(&[seed, rng::tag("init"), idx as u64]);
            for v in &mut set.values[entry.offset..entry.offset + entry.len] {
                *v = rng.random_range(-bound..bound);
            }
        }
        set.round_to_f32();
        set
    }

    /// Quantize every value to the nearest f32. Keeps the 32-bit checkpoint
    /// encoding lossless.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    pub fn slice(&self, idx: usize) -> &[f64] {
        &self.values[self.layout.range(idx)]
    }

    pub fn slice_mut(&mut self, idx: usize) -> &mut [f64] {
        let r = self.layout.range(idx);
        &mut self.values[r]
    }

    pub fn view1(&self, idx: usize) -> ArrayView1<'_, f64> {
        let e = &self.layout.entries[idx];
        ArrayView1::from_shape(e.shape[0], self.slice(idx)).unwrap()
    }

    pub fn view2(&self, idx: usize) -> ArrayView2<'_, f64> {
        let e = &self.layout.entries[idx];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(idx)).unwrap()
    }

    pub fn view4(&self, idx: usize) -> ArrayView4<'_, f64> {
        let e = &self.layout.entries[idx];
        ArrayView4::from_shape(
            (e.shape[0], e.shape[1], e.shape[2], e.shape[3]),
            self.slice(idx),
        )
        .unwrap()
    }

    /// Weight matrix viewed as `[rows, cols]` regardless of tensor rank
    /// (filters flatten trailing dims), for gemm-based layers.
    pub fn view_mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let e = &self.layout.entries[idx];
        let rows = e.shape[0];
        let cols: usize = e.shape[1..].iter().product();
        ArrayView2::from_shape((rows, cols), self.slice(idx)).unwrap()
    }

    pub fn group_of(&self, flat_index: usize) -> ParamGroup {
        // entries are offset-ordered
        for e in &self.layout.entries {
            if flat_index < e.offset + e.len {
                return e.group;
            }
        }
        unreachable!("flat index out of range")
    }
}

/// Gradient buffer sharing a [`ParamLayout`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub layout: Arc<ParamLayout>,
    pub values: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len];
        Self { layout, values }
    }

    pub fn slice_mut(&mut self, idx: usize) -> &mut [f64] {
        let r = self.layout.range(idx);
        &mut self.values[r]
    }

    pub fn view_mut1(&mut self, idx: usize) -> ArrayViewMut1<'_, f64> {
        let e = self.layout.entries[idx].clone();
        ArrayViewMut1::from_shape(e.shape[0], self.slice_mut(idx)).unwrap()
    }

    pub fn view_mut2(&mut self, idx: usize) -> ArrayViewMut2<'_, f64> {
        let e = self.layout.entries[idx].clone();
        ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), self.slice_mut(idx)).unwrap()
    }

    pub fn view_mut4(&mut self, idx: usize) -> ArrayViewMut4<'_, f64> {
        let e = self.layout.entries[idx].clone();
        ArrayViewMut4::from_shape(
            (e.shape[0], e.shape[1], e.shape[2], e.shape[3]),
            self.slice_mut(idx),
        )
        .unwrap()
    }

    pub fn view_mut_mat(&mut self, idx: usize) -> ArrayViewMut2<'_, f64> {
        let e = self.layout.entries[idx].clone();
        let rows = e.shape[0];
        let cols: usize = e.shape[1..].iter().product();
        ArrayViewMut2::from_shape((rows, cols), self.slice_mut(idx)).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam/SGD over the flat buffer, with optional per-group masking.
///
/// Moment and step state is tracked per entry, so masked-out entries do not
/// advance their bias-correction counters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step_counts: Vec<u64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, layout: &ParamLayout) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; layout.total_len],
            v: vec![0.0; layout.total_len],
            step_counts: vec![0; layout.entries.len()],
        }
    }

    /// Apply one update. Entries whose group is not accepted by `mask` are
    /// left untouched. Values are re-quantized to f32 precision afterwards.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &GradBuffer,
        mask: impl Fn(ParamGroup) -> bool,
    ) {
        for (idx, entry) in params.layout.entries.iter().enumerate() {
            if !mask(entry.group) {
                continue;
            }
            let range = entry.offset..entry.offset + entry.len;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in params.values[range.clone()]
                        .iter_mut()
                        .zip(&grads.values[range])
                    {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    self.step_counts[idx] += 1;
                    let t = self.step_counts[idx] as f64;
                    let bc1 = 1.0 - self.beta1.powf(t);
                    let bc2 = 1.0 - self.beta2.powf(t);
                    for i in range {
                        let g = grads.values[i];
                        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                        let m_hat = self.m[i] / bc1;
                        let v_hat = self.v[i] / bc2;
                        params.values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        params.round_to_f32();
    }
}

/// Parse an optimizer name from config text.
impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_layout() -> Arc<ParamLayout> {
        let mut l = ParamLayout::default();
        l.push("encoder.w", ParamGroup::Encoder, &[2, 3]);
        l.push("encoder.b", ParamGroup::Encoder, &[2]);
        l.push("head.w", ParamGroup::Head, &[4, 2]);
        Arc::new(l)
    }

    #[test]
    fn layout_offsets_are_contiguous() {
        let l = tiny_layout();
        assert_eq!(l.total_len, 6 + 2 + 8);
        assert_eq!(l.entries[1].offset, 6);
        assert_eq!(l.index_of("head.w"), Some(2));
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let l = tiny_layout();
        let a = ParameterSet::init_uniform(l.clone(), 0);
        let b = ParameterSet::init_uniform(l.clone(), 0);
        let c = ParameterSet::init_uniform(l, 1);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        for &v in &a.values {
            assert_eq!(v, v as f32 as f64);
        }
        // biases start at zero
        assert!(a.slice(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_masked_update_touches_only_group() {
        let l = tiny_layout();
        let mut p = ParameterSet::init_uniform(l.clone(), 3);
        let before = p.values.clone();
        let mut g = GradBuffer::zeros(l.clone());
        g.values.iter_mut().for_each(|v| *v = 1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &l);
        opt.step(&mut p, &g, |grp| grp == ParamGroup::Head);
        assert_eq!(&p.values[..8], &before[..8]);
        // updated values are re-quantized to f32, hence the loose tolerance
        for i in 8..16 {
            assert!((p.values[i] - (before[i] - 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let l = tiny_layout();
        let mut p = ParameterSet::zeros(l.clone());
        let mut g = GradBuffer::zeros(l.clone());
        g.values.iter_mut().for_each(|v| *v = 2.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &l);
        opt.step(&mut p, &g, |_| true);
        // First Adam step magnitude is ~lr regardless of gradient scale.
        for &v in &p.values {
            assert!((v + 0.1).abs() < 1e-6, "got {v}");
        }
    }
}
