//! Shared MLP decoder: per-level pointwise projections to a common width,
//! bilinear upsampling to quarter resolution, channel concatenation, and
//! two final pointwise maps down to class logits.

use crate::encoder::{PyramidVars, STAGES};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::nn::{Conv2dLayer, Fwd, ParamBuilder};
use crate::tensor::{Element, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("decoder embed_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "decoder needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderArch {
    pub level_proj: Vec<Conv2dLayer>,
    pub fuse: Conv2dLayer,
    pub head: Conv2dLayer,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl DecoderArch {
    pub fn build<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        cfg: &DecoderConfig,
        level_channels: &[usize; STAGES],
    ) -> Self {
        let d = cfg.embed_dim;
        let level_proj = level_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2dLayer::build_pointwise(pb, &format!("level{}", i + 1), c, d))
            .collect();
        DecoderArch {
            level_proj,
            fuse: Conv2dLayer::build_pointwise(pb, "fuse", STAGES * d, d),
            head: Conv2dLayer::build_pointwise(pb, "head", d, cfg.num_classes),
            embed_dim: d,
            num_classes: cfg.num_classes,
        }
    }

    /// Fused pyramid in, `[K, H/4, W/4]` logits out. Level 1 sets the
    /// target extent; coarser levels are bilinearly upsampled to it.
    pub fn decode<E: Element>(&self, fx: &mut Fwd<'_, E>, pyramid: &PyramidVars) -> Result<Var> {
        let target = {
            let s = fx.tape.value(pyramid.levels[0]).shape();
            (s[1], s[2])
        };
        let mut projected = Vec::with_capacity(STAGES);
        for (proj, &level) in self.level_proj.iter().zip(&pyramid.levels) {
            let shape = fx.tape.value(level).shape().to_vec();
            if shape.len() != 3 || shape[0] != proj.in_ch {
                return Err(Error::Shape(format!(
                    "decoder level expects [{}: H, W], got {shape:?}",
                    proj.in_ch
                )));
            }
            let p = proj.forward(fx, level)?;
            let p = if (shape[1], shape[2]) == target {
                p
            } else {
                fx.tape.bilinear_upsample(p, target.0, target.1)?
            };
            projected.push(p);
        }
        let merged = fx.tape.concat(0, &projected)?;
        let fused = self.fuse.forward(fx, merged)?;
        self.head.forward(fx, fused)
    }
}

/// Per-pixel argmax over the class axis; ties break to the lowest index.
pub fn predict_labels<E: Element>(logits: &Tensor<E>) -> Result<LabelMap> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "predict_labels expects [K,H,W], got {shape:?}"
        )));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if k > u8::MAX as usize {
        return Err(Error::Config(format!("class count {k} exceeds u8 labels")));
    }
    let pixels = h * w;
    let data = logits.data();
    let mut labels = vec![0u8; pixels];
    for (px, slot) in labels.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = data[px];
        for cls in 1..k {
            let v = data[cls * pixels + px];
            if v > best_v {
                best_v = v;
                best = cls;
            }
        }
        *slot = best as u8;
    }
    LabelMap::new(h, w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamBuilder, ParamStore};
    use crate::tensor::Tape;

    fn build_decoder(d: usize, k: usize) -> (ParamStore<f32>, DecoderArch) {
        let cfg = DecoderConfig {
            embed_dim: d,
            num_classes: k,
        };
        cfg.validate().unwrap();
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, 4);
        let arch = pb.scoped("decoder", |pb| {
            DecoderArch::build(pb, &cfg, &[8, 16, 32, 64])
        });
        (store, arch)
    }

    fn pyramid_vars<E: crate::tensor::Element>(
        tape: &mut Tape<E>,
        sizes: [[usize; 3]; 4],
        fill: f64,
    ) -> PyramidVars {
        let levels = sizes.map(|s| tape.leaf(Tensor::filled(&s, E::from_f64(fill)), false));
        PyramidVars { levels }
    }

    #[test]
    fn decode_shape_for_64x64_input() {
        let (store, arch) = build_decoder(16, 5);
        let mut tape = Tape::<f32>::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let pyr = pyramid_vars(
            fx.tape,
            [[8, 16, 16], [16, 8, 8], [32, 4, 4], [64, 2, 2]],
            0.3,
        );
        let logits = arch.decode(&mut fx, &pyr).unwrap();
        assert_eq!(fx.tape.value(logits).shape(), &[5, 16, 16]);
    }

    #[test]
    fn zero_pyramid_zero_biases_gives_zero_logits() {
        let (store, arch) = build_decoder(16, 5);
        let mut tape = Tape::<f32>::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let pyr = pyramid_vars(
            fx.tape,
            [[8, 16, 16], [16, 8, 8], [32, 4, 4], [64, 2, 2]],
            0.0,
        );
        let logits = arch.decode(&mut fx, &pyr).unwrap();
        assert!(fx.tape.value(logits).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let (store, arch) = build_decoder(16, 5);
        let mut tape = Tape::<f32>::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let pyr = pyramid_vars(
            fx.tape,
            [[9, 16, 16], [16, 8, 8], [32, 4, 4], [64, 2, 2]],
            0.0,
        );
        assert!(arch.decode(&mut fx, &pyr).is_err());
    }

    #[test]
    fn predict_labels_dominant_tie_and_shift() {
        // channel 2 uniformly largest
        let mut t = Tensor::<f32>::zeros(&[4, 2, 2]);
        for px in 0..4 {
            t.data_mut()[2 * 4 + px] = 3.0;
        }
        let labels = predict_labels(&t).unwrap();
        assert!(labels.data().iter().all(|l| *l == 2));

        // exact tie between classes 1 and 3 resolves to 1
        let mut t = Tensor::<f32>::zeros(&[4, 1, 1]);
        t.data_mut()[1] = 5.0;
        t.data_mut()[3] = 5.0;
        assert_eq!(predict_labels(&t).unwrap().data(), &[1]);

        // additive shift of all channels leaves the argmax unchanged
        let vals = [0.3f64, -0.1, 0.9, 0.2, 0.8, -0.5, 0.1, 0.4];
        let t = Tensor::<f32>::from_f64s(&[2, 2, 2], &vals).unwrap();
        let shifted_vals: Vec<f64> = vals.iter().map(|v| v + 11.25).collect();
        let shifted = Tensor::<f32>::from_f64s(&[2, 2, 2], &shifted_vals).unwrap();
        assert_eq!(
            predict_labels(&t).unwrap().data(),
            predict_labels(&shifted).unwrap().data()
        );
    }
}
