//! Encoder-free decoder neck: detection-token self-attention, multi-scale
//! deformable cross-attention, per-layer detection heads, iterative box
//! refinement in logit space, and inference-time layer drop.
//!
//! Layer outputs form a prefix-consistent chain: entry `i` never depends on
//! layers above it, so dropping suffix layers is exact.


use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{residual_norm, FfnBlock, MultiHeadAttention, MultiHeadConfig};
use crate::backbone::PatchMap;
use crate::nn::{Fwd, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Result, Tape, TensorError, TensorId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeckConfig {
    /// decoder embedding width
    pub width: usize,
    /// deformable attention heads (M)
    pub heads: usize,
    /// sampled points per level per head (K)
    pub points: usize,
    /// feature levels (L)
    pub levels: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    /// iterative box refinement between layers
    pub refine: bool,
    /// share one detection head across layers instead of per-layer heads
    pub shared_heads: bool,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            width: 32,
            heads: 4,
            points: 4,
            levels: 4,
            layers: 6,
            ffn_hidden: 128,
            refine: true,
            shared_heads: false,
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.points == 0 || self.levels == 0 || self.layers == 0 {
            return Err(TensorError::Parameter("neck dims must be positive".to_string()));
        }
        if self.width % self.heads != 0 {
            return Err(TensorError::Parameter(format!(
                "neck width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Multi-scale deformable attention: each query predicts, per head, `K`
/// fractional sampling locations and mixing weights on every feature level;
/// sampled values are head-combined through the output projection.
pub struct MsDeformAttn {
    pub value_proj: Linear,
    pub offset_net: Linear,
    pub weight_net: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub width: usize,
}

impl MsDeformAttn {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NeckConfig, rng: &mut ChaCha20Rng) -> Self {
        let (w, m, k, l) = (cfg.width, cfg.heads, cfg.points, cfg.levels);
        MsDeformAttn {
            value_proj: Linear::new(store, &format!("{name}.value"), w, w, Init::Xavier, rng),
            // zero-initialized so the first samples land on the reference point
            offset_net: Linear::new(store, &format!("{name}.offset"), w, m * l * k * 2, Init::Zero, rng),
            weight_net: Linear::new(store, &format!("{name}.weight"), w, m * l * k, Init::Zero, rng),
            out_proj: Linear::new(store, &format!("{name}.out"), w, w, Init::Xavier, rng),
            heads: m,
            points: k,
            levels: l,
            width: w,
        }
    }

    /// `det: [D, w]`, `maps`: `levels` projected grids at neck width,
    /// `refs: [D, 2]` normalized (x, y). Returns the output tokens and the
    /// per-head softmaxed slot weights (`[D, L*K]` each) for inspection.
    pub fn forward_detailed(
        &self,
        fx: &mut Fwd,
        det: TensorId,
        maps: &[PatchMap],
        refs: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        if maps.len() != self.levels {
            return Err(TensorError::Parameter(format!(
                "deformable attention configured for {} levels, got {} maps",
                self.levels,
                maps.len()
            )));
        }
        if fx.tape.data(refs).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TensorError::Contract(
                "reference points outside [0, 1] before clamping".to_string(),
            ));
        }
        let d = fx.tape.shape(det)[0];
        let (m_heads, k_pts, l_lvls, w) = (self.heads, self.points, self.levels, self.width);
        let dh = w / m_heads;

        let offsets = self.offset_net.forward(fx.tape, fx.bound, det)?;
        let logits = self.weight_net.forward(fx.tape, fx.bound, det)?;

        let values: Vec<TensorId> = maps
            .iter()
            .map(|pm| self.value_proj.forward(fx.tape, fx.bound, pm.tokens))
            .collect::<Result<_>>()?;

        // (x, y) normalized -> (row, col) in level cell units
        let ref_pix: Vec<TensorId> = maps
            .iter()
            .map(|pm| {
                let c = fx.tape.constant(
                    vec![0.0, pm.w as f64, pm.h as f64, 0.0],
                    &[2, 2],
                )?;
                let scaled = fx.tape.matmul(refs, c)?;
                let shifted = fx.tape.add_scalar(scaled, -0.5);
                fx.tape.reshape(shifted, &[d, 1, 2])
            })
            .collect::<Result<_>>()?;

        let mut head_outs = Vec::with_capacity(m_heads);
        let mut head_weights = Vec::with_capacity(m_heads);
        for m in 0..m_heads {
            let a_logits = fx.tape.narrow_lastdim(logits, m * l_lvls * k_pts, l_lvls * k_pts)?;
            let a = fx.tape.softmax_lastdim(a_logits)?; // [D, L*K]
            head_weights.push(a);

            let mut level_samples = Vec::with_capacity(l_lvls);
            for (l, pm) in maps.iter().enumerate() {
                let map_ml = fx.tape.narrow_lastdim(values[l], m * dh, dh)?;
                let grid = fx.tape.reshape(map_ml, &[pm.h, pm.w, dh])?;
                let offs = fx
                    .tape
                    .narrow_lastdim(offsets, (m * l_lvls + l) * k_pts * 2, k_pts * 2)?;
                let offs = fx.tape.reshape(offs, &[d, k_pts, 2])?;
                let pts = fx.tape.add(offs, ref_pix[l])?;
                let pts_flat = fx.tape.reshape(pts, &[d * k_pts, 2])?;
                let sampled = fx.tape.bilinear_sample(grid, pts_flat)?;
                level_samples.push(fx.tape.reshape(sampled, &[d, k_pts, dh])?);
            }
            let samples = fx.tape.concat(&level_samples, 1)?; // [D, L*K, dh]
            let a_row = fx.tape.reshape(a, &[d, 1, l_lvls * k_pts])?;
            let mixed = fx.tape.batch_matmul(a_row, samples, false)?;
            head_outs.push(fx.tape.reshape(mixed, &[d, dh])?);
        }
        fx.tape.add_pairs((d * m_heads * l_lvls * k_pts) as u64);
        let ctx = fx.tape.concat(&head_outs, 1)?;
        let out = self.out_proj.forward(fx.tape, fx.bound, ctx)?;
        Ok((out, head_weights))
    }

    pub fn forward(&self, fx: &mut Fwd, det: TensorId, maps: &[PatchMap], refs: TensorId) -> Result<TensorId> {
        Ok(self.forward_detailed(fx, det, maps, refs)?.0)
    }
}

/// One decoder layer: det self-attention, deformable cross-attention, FFN,
/// each wrapped post-norm with a residual.
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub deform: MsDeformAttn,
    pub norm2: LayerNorm,
    pub ffn: FfnBlock,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NeckConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        let mh = MultiHeadConfig::new(cfg.width, cfg.heads)?;
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), mh, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.width),
            deform: MsDeformAttn::new(store, &format!("{name}.deform"), cfg, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.width),
            ffn: FfnBlock::new(store, &format!("{name}.ffn"), cfg.width, cfg.ffn_hidden, rng)?,
        })
    }

    pub fn forward(&self, fx: &mut Fwd, det: TensorId, maps: &[PatchMap], refs: TensorId) -> Result<TensorId> {
        let sa = self.self_attn.forward_self(fx, det)?;
        let h1 = residual_norm(fx, &self.norm1, det, sa)?;
        let da = self.deform.forward(fx, h1, maps, refs)?;
        let h2 = residual_norm(fx, &self.norm2, h1, da)?;
        self.ffn.forward(fx, h2)
    }
}

/// Box regression FFN (3 layers) plus linear classification.
pub struct DetectionHead {
    pub box1: Linear,
    pub box2: Linear,
    pub box3: Linear,
    pub cls: Linear,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, cls_width: usize, rng: &mut ChaCha20Rng) -> Self {
        DetectionHead {
            box1: Linear::new(store, &format!("{name}.box1"), width, width, Init::Xavier, rng),
            box2: Linear::new(store, &format!("{name}.box2"), width, width, Init::Xavier, rng),
            box3: Linear::new(store, &format!("{name}.box3"), width, 4, Init::Xavier, rng),
            cls: Linear::new(store, &format!("{name}.cls"), width, cls_width, Init::Xavier, rng),
        }
    }

    /// Raw box regression output, before any anchoring or squashing.
    pub fn box_raw(&self, fx: &mut Fwd, det: TensorId) -> Result<TensorId> {
        let h = self.box1.forward(fx.tape, fx.bound, det)?;
        let h = fx.tape.relu(h);
        let h = self.box2.forward(fx.tape, fx.bound, h)?;
        let h = fx.tape.relu(h);
        self.box3.forward(fx.tape, fx.bound, h)
    }

    pub fn logits(&self, fx: &mut Fwd, det: TensorId) -> Result<TensorId> {
        self.cls.forward(fx.tape, fx.bound, det)
    }

    /// Plain head: boxes are `sigmoid(FFN(det))` in `[0, 1]^{D x 4}`.
    pub fn forward(&self, fx: &mut Fwd, det: TensorId) -> Result<(TensorId, TensorId)> {
        let raw = self.box_raw(fx, det)?;
        let boxes = fx.tape.sigmoid(raw);
        let logits = self.logits(fx, det)?;
        Ok((boxes, logits))
    }
}

/// Apply a logit-space update to reference points: `sigmoid(logit + delta)`
/// stays inside the open unit square for any delta.
pub fn refine_ref_logits(tape: &mut Tape, ref_logits: TensorId, delta: TensorId) -> Result<TensorId> {
    tape.add(ref_logits, delta)
}

/// Everything one neck forward produces, layer by layer.
pub struct DecoderOutput {
    /// refined det tokens per layer, `[D, width]`
    pub layer_det: Vec<TensorId>,
    /// anchored, squashed boxes per layer, `[D, 4]`
    pub layer_boxes: Vec<TensorId>,
    /// class logits per layer
    pub layer_logits: Vec<TensorId>,
    /// normalized reference points fed to each layer
    pub layer_refs: Vec<TensorId>,
    /// projected multi-scale patch tokens, `[sum(P_l), width]`
    pub patch_tokens: TensorId,
}

pub struct Neck {
    pub cfg: NeckConfig,
    pub input_projs: Vec<Linear>,
    pub det_proj: Linear,
    pub ref_head: Linear,
    pub layers: Vec<DecoderLayer>,
    pub heads: Vec<DetectionHead>,
}

impl Neck {
    pub fn new(
        store: &mut ParamStore,
        cfg: &NeckConfig,
        input_dims: &[usize],
        det_dim: usize,
        cls_width: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_dims.len() != cfg.levels {
            return Err(TensorError::Parameter(format!(
                "neck expects {} input levels, got {}",
                cfg.levels,
                input_dims.len()
            )));
        }
        let input_projs = input_dims
            .iter()
            .enumerate()
            .map(|(l, &d)| Linear::new(store, &format!("neck.in{l}"), d, cfg.width, Init::Xavier, rng))
            .collect();
        let det_proj = Linear::new(store, "neck.det_proj", det_dim, cfg.width, Init::Xavier, rng);
        let ref_head = Linear::new(store, "neck.ref", cfg.width, 2, Init::Xavier, rng);
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, &format!("neck.l{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_count = if cfg.shared_heads { 1 } else { cfg.layers };
        let heads = (0..head_count)
            .map(|i| DetectionHead::new(store, &format!("neck.head{i}"), cfg.width, cls_width, rng))
            .collect();
        Ok(Neck {
            cfg: cfg.clone(),
            input_projs,
            det_proj,
            ref_head,
            layers,
            heads,
        })
    }

    fn head(&self, layer: usize) -> &DetectionHead {
        if self.cfg.shared_heads {
            &self.heads[0]
        } else {
            &self.heads[layer]
        }
    }

    /// Decode through the first `n_layers` layers with a detection head at
    /// every depth. Boxes anchor their center on the layer's reference
    /// point in logit space; refinement feeds each layer's raw center delta
    /// into the next layer's reference points.
    pub fn forward(
        &self,
        fx: &mut Fwd,
        maps: &[PatchMap],
        det_in: TensorId,
        n_layers: usize,
    ) -> Result<DecoderOutput> {
        if n_layers == 0 || n_layers > self.layers.len() {
            return Err(TensorError::Parameter(format!(
                "requested {n_layers} layers of a {}-layer neck",
                self.layers.len()
            )));
        }
        if maps.len() != self.cfg.levels {
            return Err(TensorError::Parameter(format!(
                "neck configured for {} levels, got {}",
                self.cfg.levels,
                maps.len()
            )));
        }
        let proj_maps: Vec<PatchMap> = maps
            .iter()
            .zip(&self.input_projs)
            .map(|(pm, proj)| {
                Ok(PatchMap {
                    tokens: proj.forward(fx.tape, fx.bound, pm.tokens)?,
                    ..*pm
                })
            })
            .collect::<Result<_>>()?;
        let all_tokens: Vec<TensorId> = proj_maps.iter().map(|m| m.tokens).collect();
        let patch_tokens = fx.tape.concat(&all_tokens, 0)?;

        let mut det = self.det_proj.forward(fx.tape, fx.bound, det_in)?;
        let d = fx.tape.shape(det)[0];
        let mut ref_logits = self.ref_head.forward(fx.tape, fx.bound, det)?;

        let mut out = DecoderOutput {
            layer_det: Vec::with_capacity(n_layers),
            layer_boxes: Vec::with_capacity(n_layers),
            layer_logits: Vec::with_capacity(n_layers),
            layer_refs: Vec::with_capacity(n_layers),
            patch_tokens,
        };
        for i in 0..n_layers {
            let refs = fx.tape.sigmoid(ref_logits);
            out.layer_refs.push(refs);
            det = self.layers[i].forward(fx, det, &proj_maps, refs)?;
            let head = self.head(i);
            let raw = head.box_raw(fx, det)?;
            let zeros = fx.tape.constant(vec![0.0; d * 2], &[d, 2])?;
            let anchor = fx.tape.concat(&[ref_logits, zeros], 1)?;
            let anchored = fx.tape.add(raw, anchor)?;
            let boxes = fx.tape.sigmoid(anchored);
            let logits = head.logits(fx, det)?;
            out.layer_det.push(det);
            out.layer_boxes.push(boxes);
            out.layer_logits.push(logits);
            if self.cfg.refine {
                let delta = fx.tape.narrow_lastdim(raw, 0, 2)?;
                ref_logits = refine_ref_logits(fx.tape, ref_logits, delta)?;
            }
        }
        Ok(out)
    }

    /// Scalar parameters used when running the first `n_layers` layers.
    pub fn active_param_elements(&self, store: &ParamStore, n_layers: usize) -> usize {
        let mut total = 0;
        let linear_elems = |l: &Linear| {
            store.data(l.w).len() + store.data(l.b).len()
        };
        for proj in &self.input_projs {
            total += linear_elems(proj);
        }
        total += linear_elems(&self.det_proj) + linear_elems(&self.ref_head);
        for layer in self.layers.iter().take(n_layers) {
            total += linear_elems(&layer.self_attn.qkv) + linear_elems(&layer.self_attn.out);
            total += linear_elems(&layer.deform.value_proj)
                + linear_elems(&layer.deform.offset_net)
                + linear_elems(&layer.deform.weight_net)
                + linear_elems(&layer.deform.out_proj);
            for norm in [&layer.norm1, &layer.norm2, &layer.ffn.norm] {
                total += store.data(norm.gamma).len() + store.data(norm.beta).len();
            }
            total += linear_elems(&layer.ffn.lin1) + linear_elems(&layer.ffn.lin2);
        }
        let head_count = if self.cfg.shared_heads { 1 } else { n_layers };
        for head in self.heads.iter().take(head_count) {
            total += linear_elems(&head.box1) + linear_elems(&head.box2) + linear_elems(&head.box3);
            total += linear_elems(&head.cls);
        }
        total
    }
}
