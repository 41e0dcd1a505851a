//! Whole-detector assembly: backbone, optional decoder neck, detection
//! heads, and the TOML-backed architecture configuration.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::losses::{ClsMode, LayerPrediction};
use crate::neck::{DetectionHead, Neck, NeckConfig};
use crate::nn::{Fwd, ParamStore};
use crate::tensor::{Result, TensorError, TensorId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub cls_mode: ClsMode,
    pub dropout: f64,
    /// decoder neck on multi-scale maps; off = head directly on backbone
    /// detection tokens
    pub with_neck: bool,
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_classes: 3,
            cls_mode: ClsMode::Focal,
            dropout: 0.0,
            with_neck: true,
            backbone: BackboneConfig::default(),
            neck: NeckConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(TensorError::Parameter("need at least one class".to_string()));
        }
        if self.image_size < 16 {
            return Err(TensorError::Parameter(format!(
                "image size {} too small",
                self.image_size
            )));
        }
        self.backbone.validate()?;
        if self.with_neck {
            self.neck.validate()?;
        }
        Ok(())
    }

    /// Classification head width for the configured mode: cross-entropy
    /// carries an explicit background class, focal does not.
    pub fn cls_width(&self) -> usize {
        match self.cls_mode {
            ClsMode::CrossEntropy => self.num_classes + 1,
            ClsMode::Focal => self.num_classes,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| TensorError::Parameter(format!("bad model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }
}

/// Per-layer predictions plus the token sets used for distillation.
pub struct ModelOutput {
    pub layers: Vec<LayerPrediction>,
    /// projected multi-scale patch tokens `[sum(P_l), width]` (neck only)
    pub patch_tokens: Option<TensorId>,
    /// per-layer decoder det tokens stacked `[layers*D, width]` (neck only)
    pub det_tokens: Option<TensorId>,
}

pub struct VidtModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub neck: Option<Neck>,
    pub direct_head: Option<DetectionHead>,
}

impl VidtModel {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, cfg.image_size, rng)?;
        let (neck, direct_head) = if cfg.with_neck {
            let neck = Neck::new(
                &mut store,
                &cfg.neck,
                &cfg.backbone.stage_dims,
                cfg.backbone.stage_dims[3],
                cfg.cls_width(),
                rng,
            )?;
            (Some(neck), None)
        } else {
            let head = DetectionHead::new(
                &mut store,
                "head",
                cfg.backbone.stage_dims[3],
                cfg.cls_width(),
                rng,
            );
            (None, Some(head))
        };
        Ok(VidtModel {
            cfg,
            store,
            backbone,
            neck,
            direct_head,
        })
    }

    pub fn decode_layers(&self) -> usize {
        match &self.neck {
            Some(n) => n.cfg.layers,
            None => 1,
        }
    }

    /// Forward through the backbone and (optionally) the neck, running only
    /// the first `layers - drop_n` decoder layers.
    pub fn forward_on(&self, fx: &mut Fwd, image: TensorId, drop_n: usize) -> Result<ModelOutput> {
        let (maps, det) = self.backbone.forward(fx, image)?;
        match &self.neck {
            Some(neck) => {
                let total = neck.cfg.layers;
                if drop_n >= total {
                    return Err(TensorError::Parameter(format!(
                        "cannot drop {drop_n} of {total} decoding layers"
                    )));
                }
                let out = neck.forward(fx, &maps, det.tokens, total - drop_n)?;
                let layers = out
                    .layer_boxes
                    .iter()
                    .zip(&out.layer_logits)
                    .map(|(&boxes, &logits)| LayerPrediction { boxes, logits })
                    .collect();
                let det_tokens = fx.tape.concat(&out.layer_det, 0)?;
                Ok(ModelOutput {
                    layers,
                    patch_tokens: Some(out.patch_tokens),
                    det_tokens: Some(det_tokens),
                })
            }
            None => {
                if drop_n > 0 {
                    return Err(TensorError::Parameter(
                        "layer drop needs a decoder neck".to_string(),
                    ));
                }
                let head = self.direct_head.as_ref().unwrap();
                let (boxes, logits) = head.forward(fx, det.tokens)?;
                Ok(ModelOutput {
                    layers: vec![LayerPrediction { boxes, logits }],
                    patch_tokens: None,
                    det_tokens: None,
                })
            }
        }
    }

    /// Scalar parameters active at inference with `drop_n` layers dropped.
    pub fn active_param_elements(&self, drop_n: usize) -> usize {
        let total = self.store.element_count();
        match &self.neck {
            Some(neck) => {
                let full = neck.active_param_elements(&self.store, neck.cfg.layers);
                let active = neck.active_param_elements(&self.store, neck.cfg.layers - drop_n);
                total - full + active
            }
            None => total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            ..ModelConfig::default()
        }
    }

    fn image(tape: &mut crate::tensor::Tape, r: &mut ChaCha20Rng, side: usize) -> TensorId {
        let data: Vec<f64> = (0..side * side * 3).map(|_| r.gen_range(0.0..1.0)).collect();
        tape.constant(data, &[side, side, 3]).unwrap()
    }

    #[test]
    fn forward_emits_one_prediction_set_per_layer() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let model = VidtModel::new(toy_config(), &mut r).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let bound = model.store.bind(&mut tape);
        let img = image(&mut tape, &mut r, 32);
        let mut fx = Fwd::new(&mut tape, &bound, &mut r, 0.0);
        let out = model.forward_on(&mut fx, img, 0).unwrap();
        assert_eq!(out.layers.len(), 6);
        for l in &out.layers {
            assert_eq!(tape.shape(l.boxes), &[16, 4]);
            assert_eq!(tape.shape(l.logits), &[16, 3]);
        }
        assert_eq!(tape.shape(out.det_tokens.unwrap()), &[6 * 16, 32]);
        // multi-scale patch tokens: 8x8 + 4x4 + 2x2 + 1x1 = 85 at width 32
        assert_eq!(tape.shape(out.patch_tokens.unwrap()), &[85, 32]);
    }

    #[test]
    fn layer_drop_matches_full_model_auxiliary_output() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        let model = VidtModel::new(toy_config(), &mut r).unwrap();
        let mut img_rng = ChaCha20Rng::seed_from_u64(3);
        let run = |drop: usize, img_rng: &mut ChaCha20Rng| -> Vec<Vec<f64>> {
            let mut tape = crate::tensor::Tape::new();
            let bound = model.store.bind(&mut tape);
            let img = image(&mut tape, img_rng, 32);
            let mut r2 = ChaCha20Rng::seed_from_u64(0);
            let mut fx = Fwd::new(&mut tape, &bound, &mut r2, 0.0);
            let out = model.forward_on(&mut fx, img, drop).unwrap();
            out.layers
                .iter()
                .map(|l| tape.data(l.boxes).to_vec())
                .collect()
        };
        let full = run(0, &mut img_rng.clone());
        let dropped = run(2, &mut img_rng);
        assert_eq!(dropped.len(), 4);
        assert_eq!(dropped.last().unwrap(), &full[3], "drop 2 == layer 4 aux output");
        let zero_drop = run(0, &mut ChaCha20Rng::seed_from_u64(3));
        assert_eq!(zero_drop, full, "drop 0 is the identity");
    }

    #[test]
    fn dropping_layers_reduces_active_parameters() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        let model = VidtModel::new(toy_config(), &mut r).unwrap();
        let mut prev = usize::MAX;
        for drop in 0..6 {
            let n = model.active_param_elements(drop);
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn neck_free_variant_emits_single_layer() {
        let mut cfg = toy_config();
        cfg.with_neck = false;
        let mut r = ChaCha20Rng::seed_from_u64(5);
        let model = VidtModel::new(cfg, &mut r).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let bound = model.store.bind(&mut tape);
        let img = image(&mut tape, &mut r, 32);
        let mut fx = Fwd::new(&mut tape, &bound, &mut r, 0.0);
        let out = model.forward_on(&mut fx, img, 0).unwrap();
        assert_eq!(out.layers.len(), 1);
        assert!(out.patch_tokens.is_none());
        assert!(model.forward_on(&mut fx, img, 1).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = toy_config();
        let s = cfg.to_toml_string();
        let back = ModelConfig::from_toml_str(&s).unwrap();
        assert_eq!(back.image_size, cfg.image_size);
        assert_eq!(back.backbone.stage_dims, cfg.backbone.stage_dims);
        assert_eq!(back.neck.layers, cfg.neck.layers);
        assert!(ModelConfig::from_toml_str("image_size = 0").is_err());
    }

    #[test]
    fn auxiliary_gradient_reaches_backbone_parameters() {
        let mut r = ChaCha20Rng::seed_from_u64(6);
        let model = VidtModel::new(toy_config(), &mut r).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let bound = model.store.bind(&mut tape);
        let img = image(&mut tape, &mut r, 32);
        let mut r2 = ChaCha20Rng::seed_from_u64(0);
        let mut fx = Fwd::new(&mut tape, &bound, &mut r2, 0.0);
        let out = model.forward_on(&mut fx, img, 0).unwrap();
        // loss from layer 3's auxiliary head only
        let l3 = &out.layers[2];
        let s1 = tape.sum_all(l3.boxes);
        let s2 = tape.sum_all(l3.logits);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        let embed_w = model.backbone.embed.proj.w;
        let g = tape.grad(bound.get(embed_w)).expect("grad populated");
        assert!(g.iter().any(|&v| v != 0.0), "backbone must receive gradient");
    }
}
