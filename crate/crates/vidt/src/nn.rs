//! Parameter storage, initializers, linear layers, and the AdamW optimizer.
//!
//! Model parameters live outside any tape in a [`ParamStore`]; each forward
//! pass binds them onto a fresh tape as `requires_grad` leaves and the
//! trainer accumulates the resulting leaf gradients back into the store.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::{Result, Tape, TensorError, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.data.push(data);
        self.grads.push(vec![0.0; n]);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Insert every parameter onto `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, true)
    }

    /// Bind without gradient tracking (teacher / inference forwards).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let ids = self
            .data
            .iter()
            .zip(&self.shapes)
            .map(|(d, s)| tape.leaf(d.clone(), s, requires_grad).expect("param leaf"))
            .collect();
        Bound { ids }
    }

    /// Add `scale` times each bound leaf gradient into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound, scale: f64) {
        for (i, &tid) in bound.ids.iter().enumerate() {
            if let Some(g) = tape.grad(tid) {
                for (dst, &src) in self.grads[i].iter_mut().zip(g) {
                    *dst += scale * src;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Round every parameter to `f32` precision. Saving a checkpoint
    /// canonicalizes the training state this way so a resumed run continues
    /// bit-exactly from what the file holds.
    pub fn quantize_f32(&mut self) {
        for d in &mut self.data {
            for v in d.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        (0..self.names.len()).map(|i| (self.names[i].as_str(), self.shapes[i].as_slice(), self.data[i].as_slice()))
    }

    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data[id.0].len() {
            return Err(TensorError::Dimension(format!(
                "parameter {} expects {} values, got {}",
                self.names[id.0],
                self.data[id.0].len(),
                data.len()
            )));
        }
        self.data[id.0] = data;
        Ok(())
    }
}

/// Tape-local leaf ids for one binding of a [`ParamStore`].
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn get(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Everything a layer forward needs: the tape, the parameter binding, and
/// the dropout state shared across the model.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub rng: &'a mut ChaCha20Rng,
    pub dropout: f64,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, bound: &'a Bound, rng: &'a mut ChaCha20Rng, dropout: f64) -> Self {
        Fwd { tape, bound, rng, dropout }
    }

    pub fn dropout_node(&mut self, x: TensorId) -> Result<TensorId> {
        self.tape.dropout(x, self.dropout, self.rng)
    }
}

// ── Initializers ────────────────────────────────────────────────────

pub fn xavier_uniform(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect()
}

pub fn normal_init(rng: &mut ChaCha20Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller; two uniforms per normal keeps the stream deterministic.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

// ── Layers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Xavier,
    Normal(f64),
    Zero,
}

/// Affine map `x . W + b` with `W` stored `[in, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let w_data = match init {
            Init::Xavier => xavier_uniform(rng, in_dim, out_dim),
            Init::Normal(std) => normal_init(rng, in_dim * out_dim, std),
            Init::Zero => vec![0.0; in_dim * out_dim],
        };
        let w = store.add(format!("{name}.w"), &[in_dim, out_dim], w_data);
        let b = store.add(format!("{name}.b"), &[out_dim], vec![0.0; out_dim]);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        tape.affine(x, bound.get(self.w), bound.get(self.b))
    }
}

/// Learnable per-channel normalization over the last dim.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), &[dim], vec![1.0; dim]);
        let beta = store.add(format!("{name}.b"), &[dim], vec![0.0; dim]);
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        tape.layer_norm(x, bound.get(self.gamma), bound.get(self.beta), self.eps)
    }
}

// ── Optimizer ───────────────────────────────────────────────────────

/// AdamW with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let m = store.data.iter().map(|d| vec![0.0; d.len()]).collect();
        let v = store.data.iter().map(|d| vec![0.0; d.len()]).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    /// Apply one update from the store's accumulated gradients.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, clip: f64) -> f64 {
        let norm_sq: f64 = store
            .grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum();
        let norm = norm_sq.sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.data.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = &store.grads[i];
            let p = &mut store.data[i];
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        norm
    }

    pub fn state_entries(&self) -> impl Iterator<Item = (usize, &[f64], &[f64])> {
        (0..self.m.len()).map(|i| (i, self.m[i].as_slice(), self.v[i].as_slice()))
    }

    pub fn set_state(&mut self, index: usize, m: Vec<f64>, v: Vec<f64>, step_count: u64) {
        self.m[index] = m;
        self.v[index] = v;
        self.step_count = step_count;
    }

    pub fn quantize_f32(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in buf.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}
