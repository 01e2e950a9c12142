use std::sync::atomic::{AtomicU64, Ordering};

use super::{RngState, Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A model weight with its accumulated gradient.
///
/// Clones share the identity used to bind the parameter into a
/// [`Graph`](super::Graph); that is how best-epoch snapshots restore values.
#[derive(Clone, Debug)]
pub struct Parameter<F: Scalar = f32> {
    id: u64,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    trainable: bool,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), value, grad, trainable: true }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::new(Tensor::ones(shape))
    }

    /// Truncated normal (±2σ) initialisation.
    pub fn trunc_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut RngState) -> Self {
        let shape = shape.into();
        let n = shape.iter().product::<usize>();
        let data: Vec<f64> = (0..n).map(|_| rng.truncated_normal(std)).collect();
        Self::new(Tensor::from_f64(shape, &data).expect("shape matches data"))
    }

    pub fn normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut RngState) -> Self {
        let shape = shape.into();
        let n = shape.iter().product::<usize>();
        let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
        Self::new(Tensor::from_f64(shape, &data).expect("shape matches data"))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Freezing also clears any gradient already accumulated.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.grad.fill(F::zero());
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything owning named parameters.
///
/// Names are dot-separated paths (`blocks.0.attn.qkv.weight`); `prefix` is
/// prepended by the caller.
pub trait Module<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    /// `(trainable scalars, all scalars)`.
    fn param_counts(&self) -> (usize, usize) {
        let (mut trainable, mut total) = (0, 0);
        self.visit("", &mut |_, p| {
            total += p.len();
            if p.is_trainable() {
                trainable += p.len();
            }
        });
        (trainable, total)
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, p| p.set_trainable(trainable));
    }

    /// Snapshot of every value, by name.
    fn snapshot(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    /// Restores values captured by [`snapshot`](Module::snapshot).
    fn restore(&mut self, snapshot: &[(String, Tensor<F>)]) {
        let mut it = snapshot.iter();
        self.visit_mut("", &mut |n, p| {
            let (name, value) = it.next().expect("snapshot from the same model");
            debug_assert_eq!(name, n);
            p.value = value.clone();
        });
    }

    /// Stable 64-bit digest of all parameter bits (FNV-1a over names,
    /// shapes and little-endian values).
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        };
        self.visit("", &mut |n, p| {
            eat(n.as_bytes());
            for d in p.value.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        });
        h
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Copies values between modules of possibly different precision, matching
/// by position and checking names and shapes.
pub fn copy_params<F: Scalar, G: Scalar>(dst: &mut impl Module<F>, src: &impl Module<G>) -> crate::Result<()> {
    let mut values = Vec::new();
    src.visit("", &mut |n, p| values.push((n.to_string(), p.value.cast::<F>())));
    let mut err = None;
    let mut it = values.into_iter();
    dst.visit_mut("", &mut |n, p| {
        if err.is_some() {
            return;
        }
        match it.next() {
            Some((name, v)) if name == n && v.shape() == p.value.shape() => p.value = v,
            other => {
                err = Some(crate::Error::Checkpoint(format!(
                    "parameter {n} has no matching source ({:?})",
                    other.map(|(name, v)| (name, v.shape().to_vec()))
                )))
            }
        }
    });
    err.map_or(Ok(()), Err)
}
