//! Attention building blocks shared by the backbone and the neck: global
//! multi-head attention, shifted-window local attention with relative
//! position bias, point-wise FFN blocks, and 2-D positional encodings.

use std::rc::Rc;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Fwd, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Result, Tape, TensorError, TensorId};

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub dropout_p: f64,
}

impl MultiHeadConfig {
    pub fn new(embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed_dim == 0 || embed_dim % heads != 0 {
            return Err(TensorError::Parameter(format!(
                "embed dim {embed_dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(MultiHeadConfig {
            embed_dim,
            heads,
            dropout_p: 0.0,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Where the spatial encoding enters the cross-attention key/value path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialEncodingMode {
    None,
    SinPre,
    LearnPre,
    SinPost,
    LearnPost,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpatialEncodingConfig {
    pub mode: SpatialEncodingMode,
    pub temperature: f64,
}

impl Default for SpatialEncodingConfig {
    fn default() -> Self {
        SpatialEncodingConfig {
            mode: SpatialEncodingMode::SinPre,
            temperature: 10000.0,
        }
    }
}

/// Deterministic sinusoidal grid encoding: the first `d/2` channels encode
/// the row position, the rest the column, as interleaved sin/cos pairs over
/// geometrically spaced frequencies. Returns `[h*w, d]` row-major.
pub fn sinusoidal_2d(h: usize, w: usize, d: usize, temperature: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(TensorError::Parameter(format!(
            "sinusoidal encoding dim must be a positive multiple of 4, got {d}"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let base = (r * w + c) * d;
            for i in 0..half / 2 {
                let freq = temperature.powf(2.0 * i as f64 / half as f64);
                out[base + 2 * i] = (r as f64 / freq).sin();
                out[base + 2 * i + 1] = (r as f64 / freq).cos();
                out[base + half + 2 * i] = (c as f64 / freq).sin();
                out[base + half + 2 * i + 1] = (c as f64 / freq).cos();
            }
        }
    }
    Ok(out)
}

/// `[n, d] -> [heads, n, dh]`
pub fn split_heads(tape: &mut Tape, x: TensorId, heads: usize) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let r = tape.reshape(x, &[n, heads, d / heads])?;
    let p = tape.permute(r, &[1, 0, 2])?;
    tape.reshape(p, &[heads, n, d / heads])
}

/// `[heads, n, dh] -> [n, heads*dh]`
pub fn merge_heads(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let (heads, n, dh) = (shape[0], shape[1], shape[2]);
    let p = tape.permute(x, &[1, 0, 2])?;
    tape.reshape(p, &[n, heads * dh])
}

/// Scaled dot-product over batched heads. `q: [B, n, dh]`, `k/v: [B, m, dh]`.
/// `adjust` may rewrite the raw logits (bias or mask adds) before softmax.
/// Returns the merged context `[B, n, dh]` and the attention weights.
pub fn attention_core(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    scale: f64,
    adjust: impl FnOnce(&mut Tape, TensorId) -> Result<TensorId>,
) -> Result<(TensorId, TensorId)> {
    let scores = tape.batch_matmul(q, k, true)?;
    let scaled = tape.scale(scores, scale);
    let adjusted = adjust(tape, scaled)?;
    let attn = tape.softmax_lastdim(adjusted)?;
    let ctx = tape.batch_matmul(attn, v, false)?;
    Ok((ctx, attn))
}

/// Global multi-head attention with fused qkv and output projections.
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub cfg: MultiHeadConfig,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: MultiHeadConfig, rng: &mut ChaCha20Rng) -> Self {
        let d = cfg.embed_dim;
        MultiHeadAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, Init::Xavier, rng),
            cfg,
        }
    }

    /// Cross-attention with separate projection inputs. Returns the output
    /// tokens and the `[heads, n_q, n_k]` attention weights.
    pub fn forward_with_attn(
        &self,
        fx: &mut Fwd,
        q_in: TensorId,
        k_in: TensorId,
        v_in: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let d = self.cfg.embed_dim;
        let q_full = self.qkv.forward(fx.tape, fx.bound, q_in)?;
        let q = fx.tape.narrow_lastdim(q_full, 0, d)?;
        let (k, v) = if k_in == v_in {
            let kv_full = self.qkv.forward(fx.tape, fx.bound, k_in)?;
            (
                fx.tape.narrow_lastdim(kv_full, d, d)?,
                fx.tape.narrow_lastdim(kv_full, 2 * d, d)?,
            )
        } else {
            let k_full = self.qkv.forward(fx.tape, fx.bound, k_in)?;
            let v_full = self.qkv.forward(fx.tape, fx.bound, v_in)?;
            (
                fx.tape.narrow_lastdim(k_full, d, d)?,
                fx.tape.narrow_lastdim(v_full, 2 * d, d)?,
            )
        };
        let n_q = fx.tape.shape(q)[0] as u64;
        let n_k = fx.tape.shape(k)[0] as u64;
        let qh = split_heads(fx.tape, q, self.cfg.heads)?;
        let kh = split_heads(fx.tape, k, self.cfg.heads)?;
        let vh = split_heads(fx.tape, v, self.cfg.heads)?;
        let (ctx, attn) = attention_core(fx.tape, qh, kh, vh, self.cfg.scale(), |_, s| Ok(s))?;
        fx.tape.add_pairs(n_q * n_k);
        let merged = merge_heads(fx.tape, ctx)?;
        let out = self.out.forward(fx.tape, fx.bound, merged)?;
        Ok((out, attn))
    }

    pub fn forward(&self, fx: &mut Fwd, q_in: TensorId, k_in: TensorId, v_in: TensorId) -> Result<TensorId> {
        Ok(self.forward_with_attn(fx, q_in, k_in, v_in)?.0)
    }

    pub fn forward_self(&self, fx: &mut Fwd, x: TensorId) -> Result<TensorId> {
        self.forward(fx, x, x, x)
    }
}

// ── Shifted-window machinery ────────────────────────────────────────

/// Precomputed index and mask data for one (h, w, window, shift) geometry.
///
/// Padding to window multiples, the cyclic shift, and window partitioning
/// all collapse into a single row gather from the token matrix extended by
/// one zero row; the additive mask keeps softmax weight off padded cells and
/// off (query, key) pairs that the cyclic shift wrapped across the seam.
pub struct WindowPlan {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub shift: usize,
    pub wins: usize,
    pub partition_idx: Rc<Vec<usize>>,
    pub unpartition_idx: Rc<Vec<usize>>,
    /// additive `[wins, k*k, k*k]` logit mask; `None` when nothing is masked
    pub mask: Option<Vec<f64>>,
    /// relative-offset index into the bias table, `[k*k * k*k]`
    pub bias_idx: Rc<Vec<usize>>,
    /// unmasked (query, key) pairs with both ends on real tokens
    pub pair_count: u64,
}

impl WindowPlan {
    pub fn new(h: usize, w: usize, k: usize, shift: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(TensorError::Dimension(format!(
                "window plan over empty map {h}x{w}"
            )));
        }
        if k == 0 {
            return Err(TensorError::Parameter("window size must be positive".to_string()));
        }
        if shift != 0 && shift != k / 2 {
            return Err(TensorError::Parameter(format!(
                "window shift must be 0 or {}, got {shift}",
                k / 2
            )));
        }
        let ph = h.div_ceil(k) * k;
        let pw = w.div_ceil(k) * k;
        if k > ph || k > pw {
            return Err(TensorError::Parameter(format!(
                "window {k} larger than padded map {ph}x{pw}"
            )));
        }
        let wins = (ph / k) * (pw / k);
        let kk = k * k;
        let pad_row = h * w;

        // Region bands mirror the shifted partition: tokens whose pre-shift
        // windows differ must not attend to each other after the wrap.
        let band = |coord: usize, side: usize| -> usize {
            if shift == 0 || side <= k {
                return 0;
            }
            if coord < side - k {
                0
            } else if coord < side - shift {
                1
            } else {
                2
            }
        };

        let mut partition_idx = vec![0usize; wins * kk];
        let mut region = vec![0i64; wins * kk]; // -1 marks padding
        for wr in 0..ph / k {
            for wc in 0..pw / k {
                let win = wr * (pw / k) + wc;
                for i in 0..k {
                    for j in 0..k {
                        let pr = wr * k + i;
                        let pc = wc * k + j;
                        // invert the cyclic shift to find the source cell
                        let or = (pr + shift) % ph;
                        let oc = (pc + shift) % pw;
                        let slot = win * kk + i * k + j;
                        if or < h && oc < w {
                            partition_idx[slot] = or * w + oc;
                            region[slot] = (band(or, ph) * 3 + band(oc, pw)) as i64;
                        } else {
                            partition_idx[slot] = pad_row;
                            region[slot] = -1;
                        }
                    }
                }
            }
        }

        let mut unpartition_idx = vec![0usize; h * w];
        for r in 0..h {
            for c in 0..w {
                let rr = (r + ph - shift) % ph;
                let cc = (c + pw - shift) % pw;
                let win = (rr / k) * (pw / k) + (cc / k);
                unpartition_idx[r * w + c] = win * kk + (rr % k) * k + (cc % k);
            }
        }

        let needs_mask = region.iter().any(|&r| r == -1)
            || (shift > 0 && region.iter().any(|&r| r != region[0]));
        let mut pair_count = 0u64;
        let mask = if needs_mask {
            let mut m = vec![0.0; wins * kk * kk];
            for win in 0..wins {
                for q in 0..kk {
                    let rq = region[win * kk + q];
                    for key in 0..kk {
                        let rk = region[win * kk + key];
                        let visible = q == key || (rq >= 0 && rk >= 0 && rq == rk);
                        if !visible {
                            m[win * kk * kk + q * kk + key] = f64::NEG_INFINITY;
                        } else if rq >= 0 && rk >= 0 {
                            pair_count += 1;
                        }
                    }
                }
            }
            Some(m)
        } else {
            pair_count = (wins * kk * kk) as u64;
            None
        };

        let mut bias_idx = vec![0usize; kk * kk];
        for q in 0..kk {
            let (qr, qc) = (q / k, q % k);
            for key in 0..kk {
                let (kr, kc) = (key / k, key % k);
                let dr = qr + k - 1 - kr;
                let dc = qc + k - 1 - kc;
                bias_idx[q * kk + key] = dr * (2 * k - 1) + dc;
            }
        }

        Ok(WindowPlan {
            h,
            w,
            k,
            shift,
            wins,
            partition_idx: Rc::new(partition_idx),
            unpartition_idx: Rc::new(unpartition_idx),
            mask,
            bias_idx: Rc::new(bias_idx),
            pair_count,
        })
    }

    /// Gather `[h*w, c]` tokens into `[wins*k*k, c]` window-major order,
    /// sourcing padded cells from an appended zero row.
    pub fn partition(&self, tape: &mut Tape, tokens: TensorId) -> Result<TensorId> {
        let c = tape.shape(tokens)[1];
        let zero = tape.constant(vec![0.0; c], &[1, c])?;
        let extended = tape.concat(&[tokens, zero], 0)?;
        tape.gather_rows(extended, Rc::clone(&self.partition_idx))
    }

    pub fn unpartition(&self, tape: &mut Tape, windows: TensorId) -> Result<TensorId> {
        tape.gather_rows(windows, Rc::clone(&self.unpartition_idx))
    }
}

/// Window attention on pre-projected q/k/v token matrices `[h*w, c]`,
/// stopping before the output projection so callers can share it with other
/// attention branches. Adds relative position bias and the plan's mask.
pub fn windowed_attention_pre_out(
    fx: &mut Fwd,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    plan: &WindowPlan,
    bias_table: ParamId,
    heads: usize,
) -> Result<TensorId> {
    let c = fx.tape.shape(q)[1];
    if c % heads != 0 {
        return Err(TensorError::Parameter(format!(
            "channel dim {c} not divisible by heads {heads}"
        )));
    }
    let dh = c / heads;
    let kk = plan.k * plan.k;
    let wins = plan.wins;
    let scale = 1.0 / (dh as f64).sqrt();

    let to_batched = |fx: &mut Fwd, x: TensorId| -> Result<TensorId> {
        let part = plan.partition(fx.tape, x)?; // [wins*kk, c]
        let r = fx.tape.reshape(part, &[wins, kk, heads, dh])?;
        let p = fx.tape.permute(r, &[0, 2, 1, 3])?;
        fx.tape.reshape(p, &[wins * heads, kk, dh])
    };
    let qb = to_batched(fx, q)?;
    let kb = to_batched(fx, k)?;
    let vb = to_batched(fx, v)?;

    let bias = fx.tape.gather_rows(fx.bound.get(bias_table), Rc::clone(&plan.bias_idx))?;
    let bias = fx.tape.reshape(bias, &[kk, kk, heads])?;
    let bias = fx.tape.permute(bias, &[2, 0, 1])?; // [heads, kk, kk]
    let mask_t = match &plan.mask {
        Some(m) => Some(fx.tape.constant(m.clone(), &[wins, 1, kk, kk])?),
        None => None,
    };

    let (ctx, _attn) = attention_core(fx.tape, qb, kb, vb, scale, |tape, s| {
        let s4 = tape.reshape(s, &[wins, heads, kk, kk])?;
        let s4 = tape.add(s4, bias)?;
        let s4 = match mask_t {
            Some(m) => tape.add(s4, m)?,
            None => s4,
        };
        tape.reshape(s4, &[wins * heads, kk, kk])
    })?;
    fx.tape.add_pairs(plan.pair_count);

    let r = fx.tape.reshape(ctx, &[wins, heads, kk, dh])?;
    let p = fx.tape.permute(r, &[0, 2, 1, 3])?;
    let flat = fx.tape.reshape(p, &[wins * kk, c])?;
    plan.unpartition(fx.tape, flat)
}

/// Standalone shifted-window self-attention layer over a token grid.
pub struct WindowedSelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub bias_table: ParamId,
    pub heads: usize,
    pub k: usize,
    pub shift: usize,
}

impl WindowedSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        k: usize,
        shift: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, Init::Xavier, rng);
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, Init::Xavier, rng);
        let table = store.add(
            format!("{name}.rel_bias"),
            &[(2 * k - 1) * (2 * k - 1), heads],
            vec![0.0; (2 * k - 1) * (2 * k - 1) * heads],
        );
        WindowedSelfAttention {
            qkv,
            out,
            bias_table: table,
            heads,
            k,
            shift,
        }
    }

    pub fn forward(&self, fx: &mut Fwd, tokens: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let plan = WindowPlan::new(h, w, self.k, self.shift)?;
        self.forward_with_plan(fx, tokens, &plan)
    }

    pub fn forward_with_plan(&self, fx: &mut Fwd, tokens: TensorId, plan: &WindowPlan) -> Result<TensorId> {
        let d = fx.tape.shape(tokens)[1];
        let qkv = self.qkv.forward(fx.tape, fx.bound, tokens)?;
        let q = fx.tape.narrow_lastdim(qkv, 0, d)?;
        let k = fx.tape.narrow_lastdim(qkv, d, d)?;
        let v = fx.tape.narrow_lastdim(qkv, 2 * d, d)?;
        let ctx = windowed_attention_pre_out(fx, q, k, v, plan, self.bias_table, self.heads)?;
        self.out.forward(fx.tape, fx.bound, ctx)
    }
}

// ── Residual blocks ─────────────────────────────────────────────────

/// `LayerNorm(Dropout(sub) + x)` — the post-norm residual wrap.
pub fn residual_norm(fx: &mut Fwd, norm: &LayerNorm, x: TensorId, sub: TensorId) -> Result<TensorId> {
    let sub = fx.dropout_node(sub)?;
    let added = fx.tape.add(sub, x)?;
    norm.forward(fx.tape, fx.bound, added)
}

/// Point-wise feed-forward block: `LayerNorm(Dropout(W2 relu(W1 x)) + x)`.
pub struct FfnBlock {
    pub lin1: Linear,
    pub lin2: Linear,
    pub norm: LayerNorm,
}

impl FfnBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(TensorError::Parameter("ffn hidden dim must be positive".to_string()));
        }
        Ok(FfnBlock {
            lin1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::Xavier, rng),
            lin2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, Init::Xavier, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        })
    }

    pub fn forward(&self, fx: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let h = self.lin1.forward(fx.tape, fx.bound, x)?;
        let h = fx.tape.relu(h);
        let h = self.lin2.forward(fx.tape, fx.bound, h)?;
        residual_norm(fx, &self.norm, x, h)
    }
}
