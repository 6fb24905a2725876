//! Wires M modality encoders, four per-stage fusion blocks, and the shared
//! decoder into one segmentation model, and owns the ablation variant
//! lattice plus parameter management.

use crate::decoder::{DecoderArch, DecoderConfig};
use crate::encoder::{EncoderArch, EncoderConfig, FeaturePyramid, PyramidVars, STAGES};
use crate::error::{Error, Result};
use crate::fusion::{FusionArch, FusionConfig};
use crate::nn::{AttnProbe, Fwd, ParamBuilder, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Structural fusion-block variants: the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoChannelAttention,
    NoParallelConvs,
    Kernels3_7_11,
    LinearOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoChannelAttention,
        Variant::NoParallelConvs,
        Variant::Kernels3_7_11,
        Variant::LinearOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoChannelAttention => "no_channel_attention",
            Variant::NoParallelConvs => "no_parallel_convs",
            Variant::Kernels3_7_11 => "kernels_3_7_11",
            Variant::LinearOnly => "linear_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no_channel_attention" => Variant::NoChannelAttention,
            "no_parallel_convs" => Variant::NoParallelConvs,
            "kernels_3_7_11" => Variant::Kernels3_7_11,
            "linear_only" => Variant::LinearOnly,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant '{other}' (expected full, no_channel_attention, \
                     no_parallel_convs, kernels_3_7_11, linear_only)"
                )))
            }
        })
    }

    /// Deterministic rewrite of the fusion flags for this variant.
    pub fn apply(self, fusion: &FusionConfig) -> FusionConfig {
        let mut cfg = fusion.clone();
        match self {
            Variant::Full => {}
            Variant::NoChannelAttention => cfg.enable_channel_attention = false,
            Variant::NoParallelConvs => cfg.enable_parallel_convs = false,
            Variant::Kernels3_7_11 => cfg.kernel_sizes = vec![3, 7, 11],
            Variant::LinearOnly => cfg.linear_only = true,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_modalities: usize,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    /// Laptop-sized default: everything runs in seconds.
    pub fn desk_default() -> Self {
        ModelConfig {
            num_modalities: 2,
            encoder: EncoderConfig::desk_default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig {
                embed_dim: 32,
                num_classes: 4,
            },
            variant: Variant::Full,
            seed: 0,
        }
    }

    /// Full-scale geometry for cost accounting: four modalities over a
    /// B4-class backbone with a 768-wide decoder.
    pub fn full_scale_preset() -> Self {
        ModelConfig {
            num_modalities: 4,
            encoder: EncoderConfig::full_scale(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig {
                embed_dim: 768,
                num_classes: 20,
            },
            variant: Variant::Full,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_modalities == 0 {
            return Err(Error::Config("need at least one modality".into()));
        }
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()
    }

    /// Fusion config with the variant rewrite applied.
    pub fn effective_fusion(&self) -> FusionConfig {
        self.variant.apply(&self.fusion)
    }

    pub fn stage_channels(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.encoder.stages[i].channels)
    }
}

pub struct Model<E: Element = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    pub encoders: Vec<EncoderArch>,
    pub fusions: Vec<FusionArch>,
    pub decoder: DecoderArch,
    /// Training step counter, persisted in checkpoints.
    pub step: u64,
}

/// Deterministic model construction: parameter initialization streams from
/// `config.seed`, and the parameter manifest order follows the
/// architecture walk (encoders, fusion stages, decoder).
pub fn build<E: Element>(config: &ModelConfig) -> Result<Model<E>> {
    config.validate()?;
    let fusion_cfg = config.effective_fusion();
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, config.seed);
    let encoders = (0..config.num_modalities)
        .map(|m| pb.scoped(format!("encoder{m}"), |pb| EncoderArch::build(pb, &config.encoder)))
        .collect();
    let mut fusions = Vec::with_capacity(STAGES);
    for (i, stage) in config.encoder.stages.iter().enumerate() {
        let arch = pb.scoped(format!("fusion.stage{}", i + 1), |pb| {
            FusionArch::build(pb, &fusion_cfg, config.num_modalities, stage.channels)
        })?;
        fusions.push(arch);
    }
    let decoder = pb.scoped("decoder", |pb| {
        DecoderArch::build(pb, &config.decoder, &config.stage_channels())
    });
    Ok(Model {
        config: config.clone(),
        store,
        encoders,
        fusions,
        decoder,
        step: 0,
    })
}

impl<E: Element> Model<E> {
    pub fn param_names(&self) -> Vec<&str> {
        self.store.iter().map(|(_, n, _)| n).collect()
    }

    /// Records the whole forward pass on the given tape: encode each
    /// modality, fuse per stage, decode, and upsample the logits back to
    /// the input resolution.
    pub fn forward_on_tape(&self, fx: &mut Fwd<'_, E>, images: &[Var]) -> Result<Var> {
        if images.len() != self.config.num_modalities {
            return Err(Error::Arity(format!(
                "model built for {} modalities, got {} images",
                self.config.num_modalities,
                images.len()
            )));
        }
        let first = fx.tape.value(images[0]).shape().to_vec();
        for (m, &img) in images.iter().enumerate() {
            if fx.tape.value(img).shape() != first.as_slice() {
                return Err(Error::Shape(format!(
                    "modality {m} has shape {:?}, expected {first:?}",
                    fx.tape.value(img).shape()
                )));
            }
        }
        let (h, w) = (first[1], first[2]);
        let mut pyramids: Vec<PyramidVars> = Vec::with_capacity(images.len());
        for (encoder, &img) in self.encoders.iter().zip(images) {
            pyramids.push(encoder.encode(fx, img)?);
        }
        let mut fused = Vec::with_capacity(STAGES);
        for (i, fusion) in self.fusions.iter().enumerate() {
            let features: Vec<Var> = pyramids.iter().map(|p| p.levels[i]).collect();
            fused.push(fusion.fuse(fx, &features)?);
        }
        let pyramid = PyramidVars {
            levels: [fused[0], fused[1], fused[2], fused[3]],
        };
        let logits = self.decoder.decode(fx, &pyramid)?;
        fx.tape.bilinear_upsample(logits, h, w)
    }

    /// Inference forward: fresh tape, no gradient state.
    pub fn forward(&self, images: &[Tensor<E>]) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &self.store, false);
        let vars: Vec<Var> = images
            .iter()
            .map(|img| fx.tape.leaf(img.clone(), false))
            .collect();
        let logits = self.forward_on_tape(&mut fx, &vars)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference forward that also collects attention-softmax row-sum
    /// ranges from every block.
    pub fn forward_with_probe(
        &self,
        images: &[Tensor<E>],
        probe: AttnProbe,
    ) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &self.store, false).with_probe(probe);
        let vars: Vec<Var> = images
            .iter()
            .map(|img| fx.tape.leaf(img.clone(), false))
            .collect();
        let logits = self.forward_on_tape(&mut fx, &vars)?;
        Ok(tape.value(logits).clone())
    }

    /// Per-modality feature pyramids as plain tensors.
    pub fn encode_pyramids(&self, images: &[Tensor<E>]) -> Result<Vec<FeaturePyramid<E>>> {
        if images.len() != self.config.num_modalities {
            return Err(Error::Arity(format!(
                "model built for {} modalities, got {} images",
                self.config.num_modalities,
                images.len()
            )));
        }
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &self.store, false);
        let mut out = Vec::with_capacity(images.len());
        for (encoder, img) in self.encoders.iter().zip(images) {
            let leaf = fx.tape.leaf(img.clone(), false);
            let pyr = encoder.encode(&mut fx, leaf)?;
            out.push(FeaturePyramid {
                levels: pyr.levels.map(|v| fx.tape.value(v).clone()),
            });
        }
        Ok(out)
    }
}
