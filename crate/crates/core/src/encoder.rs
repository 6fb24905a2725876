//! Modality-specific hierarchical encoder: overlap patch embedding, four
//! stages of spatial-reduction attention + mix-FFN blocks, and overlap
//! patch merging between stages. Each stage emits a feature map at
//! 1/4, 1/8, 1/16, 1/32 of the input resolution.

use crate::error::{Error, Result};
use crate::nn::{to_map, to_tokens, Conv2dLayer, Fwd, LayerNormLayer, Linear, ParamBuilder};
use crate::tensor::{Element, Tensor, Var};

pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub reduction_ratio: usize,
    pub ffn_expansion: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchEmbedSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub stages: [StageConfig; STAGES],
    pub patch_embeds: [PatchEmbedSpec; STAGES],
}

impl EncoderConfig {
    /// Laptop-sized default: one block per stage, narrow channels, the
    /// standard 7/4/3 stem and 3/2/1 merges.
    pub fn desk_default() -> Self {
        Self::with_dims(&[8, 16, 32, 64], &[1, 1, 1, 1], &[1, 2, 4, 8])
    }

    /// Full-scale geometry (B4-class backbone) used by the cost model.
    pub fn full_scale() -> Self {
        Self::with_dims(&[64, 128, 320, 512], &[3, 8, 27, 3], &[1, 2, 5, 8])
    }

    pub fn with_dims(channels: &[usize; 4], depths: &[usize; 4], heads: &[usize; 4]) -> Self {
        let reductions = [8, 4, 2, 1];
        let stages = std::array::from_fn(|i| StageConfig {
            depth: depths[i],
            channels: channels[i],
            heads: heads[i],
            reduction_ratio: reductions[i],
            ffn_expansion: 4,
        });
        let patch_embeds = [
            PatchEmbedSpec { kernel: 7, stride: 4, pad: 3 },
            PatchEmbedSpec { kernel: 3, stride: 2, pad: 1 },
            PatchEmbedSpec { kernel: 3, stride: 2, pad: 1 },
            PatchEmbedSpec { kernel: 3, stride: 2, pad: 1 },
        ];
        Self { stages, patch_embeds }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.channels == 0 {
                return Err(Error::Config(format!(
                    "stage {}: depth and channels must be positive",
                    i + 1
                )));
            }
            if s.channels % s.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {}: channels {} not divisible by heads {}",
                    i + 1,
                    s.channels,
                    s.heads
                )));
            }
            if ![1, 2, 4, 8].contains(&s.reduction_ratio) {
                return Err(Error::Config(format!(
                    "stage {}: reduction ratio {} not in {{1,2,4,8}}",
                    i + 1,
                    s.reduction_ratio
                )));
            }
        }
        // stage strides must compose to overall strides 4, 8, 16, 32
        let mut total = 1usize;
        for (i, pe) in self.patch_embeds.iter().enumerate() {
            total *= pe.stride;
            let expect = 4 << i;
            if total != expect {
                return Err(Error::Config(format!(
                    "patch-embed strides must compose to 1/{expect} at stage {}, got 1/{total}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// The four per-stage feature maps, shaped `[C_i, H/2^(i+1), W/2^(i+1)]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<E: Element = f32> {
    pub levels: [Tensor<E>; STAGES],
}

/// Tape handles for an in-flight pyramid.
#[derive(Debug, Clone, Copy)]
pub struct PyramidVars {
    pub levels: [Var; STAGES],
}

#[derive(Debug, Clone)]
pub struct AttentionArch {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// Key/value spatial reduction; present only when the ratio exceeds 1,
    /// so unit-ratio attention is exactly dense attention.
    pub sr: Option<(Linear, LayerNormLayer)>,
    pub heads: usize,
    pub reduction: usize,
    pub channels: usize,
}

impl AttentionArch {
    fn build<E: Element>(pb: &mut ParamBuilder<'_, E>, cfg: &StageConfig) -> Self {
        let c = cfg.channels;
        let sr = (cfg.reduction_ratio > 1).then(|| {
            (
                Linear::build(pb, "sr", c * cfg.reduction_ratio, c),
                LayerNormLayer::build(pb, "sr_norm", c),
            )
        });
        AttentionArch {
            q: Linear::build(pb, "q", c, c),
            k: Linear::build(pb, "k", c, c),
            v: Linear::build(pb, "v", c, c),
            out: Linear::build(pb, "out", c, c),
            sr,
            heads: cfg.heads,
            reduction: cfg.reduction_ratio,
            channels: c,
        }
    }

    /// Multi-head self-attention over `[N, C]` tokens with the key/value
    /// length reduced by the stage ratio.
    pub fn forward<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let n = fx.tape.value(x).shape()[0];
        let c = self.channels;
        if fx.tape.value(x).shape() != [n, c] {
            return Err(Error::Shape(format!(
                "attention expects [N, {c}], got {:?}",
                fx.tape.value(x).shape()
            )));
        }
        let q = self.q.forward(fx, x)?;
        let kv_src = match &self.sr {
            Some((proj, norm)) => spatial_reduce(fx, x, self.reduction, proj, norm)?,
            None => x,
        };
        let k = self.k.forward(fx, kv_src)?;
        let v = self.v.forward(fx, kv_src)?;

        let dk = c / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for j in 0..self.heads {
            let qj = fx.tape.narrow(q, 1, j * dk, dk)?;
            let kj = fx.tape.narrow(k, 1, j * dk, dk)?;
            let vj = fx.tape.narrow(v, 1, j * dk, dk)?;
            let kjt = fx.tape.transpose2d(kj)?;
            let logits = fx.tape.matmul(qj, kjt)?;
            let scaled = fx.tape.scale(logits, scale);
            let weights = fx.tape.softmax(scaled, 1)?;
            if let Some(sink) = &fx.probe {
                sink.borrow_mut().push(attn_row_sums(fx.tape.value(weights)));
            }
            heads.push(fx.tape.matmul(weights, vj)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            fx.tape.concat(1, &heads)?
        };
        self.out.forward(fx, merged)
    }
}

/// (min, max) row sum of an attention-weight matrix, for probe assertions.
fn attn_row_sums<E: Element>(w: &Tensor<E>) -> (f64, f64) {
    let cols = w.shape()[1];
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for row in w.data().chunks(cols) {
        let s: f64 = row.iter().map(|v| v.to_f64()).sum();
        min = min.min(s);
        max = max.max(s);
    }
    (min, max)
}

/// Compresses `[N, C]` tokens to `[N/R, C]`: groups of `R` consecutive
/// tokens are flattened to `C*R` features, mapped back to `C` by a learned
/// projection, then layer-normalized.
pub fn spatial_reduce<E: Element>(
    fx: &mut Fwd<'_, E>,
    x: Var,
    r: usize,
    proj: &Linear,
    norm: &LayerNormLayer,
) -> Result<Var> {
    let shape = fx.tape.value(x).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    if n % r != 0 {
        return Err(Error::Shape(format!(
            "spatial reduction needs N divisible by R, got N={n}, R={r}"
        )));
    }
    let grouped = fx.tape.reshape(x, &[n / r, c * r])?;
    let projected = proj.forward(fx, grouped)?;
    norm.forward(fx, projected)
}

#[derive(Debug, Clone)]
pub struct MixFfnArch {
    pub fc1: Linear,
    pub dwconv: Conv2dLayer,
    pub fc2: Linear,
}

impl MixFfnArch {
    fn build<E: Element>(pb: &mut ParamBuilder<'_, E>, cfg: &StageConfig) -> Self {
        let c = cfg.channels;
        let hidden = c * cfg.ffn_expansion;
        MixFfnArch {
            fc1: Linear::build(pb, "fc1", c, hidden),
            dwconv: Conv2dLayer::build(pb, "dwconv", hidden, hidden, 3, 1, 1, hidden),
            fc2: Linear::build(pb, "fc2", hidden, c),
        }
    }

    /// `MLP(GELU(Conv3x3(MLP(x)))) + x` with the convolution applied
    /// depthwise on the `[hidden, H, W]` map; the 3x3 mixing is what
    /// stands in for positional encoding.
    pub fn forward<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var, h: usize, w: usize) -> Result<Var> {
        let n = fx.tape.value(x).shape()[0];
        if n != h * w {
            return Err(Error::Shape(format!(
                "mix-ffn tokens {n} do not tile {h}x{w}"
            )));
        }
        let up = self.fc1.forward(fx, x)?;
        let map = to_map(fx.tape, up, h, w)?;
        let mixed = self.dwconv.forward(fx, map)?;
        let tokens = to_tokens(fx.tape, mixed)?;
        let act = fx.tape.gelu(tokens);
        let down = self.fc2.forward(fx, act)?;
        fx.tape.add(down, x)
    }
}

#[derive(Debug, Clone)]
pub struct BlockArch {
    pub norm1: LayerNormLayer,
    pub attn: AttentionArch,
    pub norm2: LayerNormLayer,
    pub ffn: MixFfnArch,
}

impl BlockArch {
    pub fn forward<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var, h: usize, w: usize) -> Result<Var> {
        let normed = self.norm1.forward(fx, x)?;
        let attended = self.attn.forward(fx, normed)?;
        let residual = fx.tape.add(attended, x)?;
        let normed = self.norm2.forward(fx, residual)?;
        self.ffn.forward(fx, normed, h, w)
    }
}

#[derive(Debug, Clone)]
struct StageArch {
    embed: Conv2dLayer,
    embed_norm: LayerNormLayer,
    blocks: Vec<BlockArch>,
}

/// One full modality encoder.
#[derive(Debug, Clone)]
pub struct EncoderArch {
    stages: Vec<StageArch>,
}

impl EncoderArch {
    pub fn build<E: Element>(pb: &mut ParamBuilder<'_, E>, cfg: &EncoderConfig) -> Self {
        let mut in_ch = 3;
        let mut stages = Vec::with_capacity(STAGES);
        for (i, (sc, pe)) in cfg.stages.iter().zip(&cfg.patch_embeds).enumerate() {
            let stage = pb.scoped(format!("stage{}", i + 1), |pb| {
                let embed = pb.scoped("embed", |pb| {
                    Conv2dLayer::build(pb, "conv", in_ch, sc.channels, pe.kernel, pe.stride, pe.pad, 1)
                });
                let embed_norm = pb.scoped("embed", |pb| LayerNormLayer::build(pb, "norm", sc.channels));
                let blocks = (0..sc.depth)
                    .map(|d| {
                        pb.scoped(format!("block{d}"), |pb| BlockArch {
                            norm1: LayerNormLayer::build(pb, "norm1", sc.channels),
                            attn: pb.scoped("attn", |pb| AttentionArch::build(pb, sc)),
                            norm2: LayerNormLayer::build(pb, "norm2", sc.channels),
                            ffn: pb.scoped("ffn", |pb| MixFfnArch::build(pb, sc)),
                        })
                    })
                    .collect();
                StageArch { embed, embed_norm, blocks }
            });
            stages.push(stage);
            in_ch = sc.channels;
        }
        EncoderArch { stages }
    }

    pub fn stage_block(&self, stage: usize, block: usize) -> &BlockArch {
        &self.stages[stage].blocks[block]
    }

    /// Runs the full four-stage encoder over a `[3, H, W]` image var.
    /// H and W must be divisible by 32 so that every stage has integral
    /// extents.
    pub fn encode<E: Element>(&self, fx: &mut Fwd<'_, E>, image: Var) -> Result<PyramidVars> {
        let shape = fx.tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!(
                "encoder expects a [3, H, W] image, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input extents must be divisible by 32 (stage strides 4-8-16-32), got {h}x{w}"
            )));
        }
        let mut current = image;
        let mut levels = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            let map = stage.embed.forward(fx, current)?;
            let mshape = fx.tape.value(map).shape().to_vec();
            let (hi, wi) = (mshape[1], mshape[2]);
            let mut tokens = to_tokens(fx.tape, map)?;
            tokens = stage.embed_norm.forward(fx, tokens)?;
            for block in &stage.blocks {
                tokens = block.forward(fx, tokens, hi, wi)?;
            }
            let level = to_map(fx.tape, tokens, hi, wi)?;
            levels.push(level);
            current = level;
        }
        Ok(PyramidVars {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, LAYER_NORM_EPS};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build_encoder(seed: u64) -> (ParamStore<f32>, EncoderArch) {
        let cfg = EncoderConfig::desk_default();
        cfg.validate().unwrap();
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let arch = pb.scoped("encoder0", |pb| EncoderArch::build(pb, &cfg));
        (store, arch)
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_the_stride_law() {
        let (store, arch) = build_encoder(11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let image = random_image(&mut rng, 64, 64);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let img = fx.tape.leaf(image, false);
        let pyr = arch.encode(&mut fx, img).unwrap();
        let want = [[8, 16, 16], [16, 8, 8], [32, 4, 4], [64, 2, 2]];
        for (level, want) in pyr.levels.iter().zip(want) {
            assert_eq!(tape.value(*level).shape(), want);
        }
    }

    #[test]
    fn encode_rejects_indivisible_extents() {
        let (store, arch) = build_encoder(11);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let img = fx.tape.leaf(Tensor::zeros(&[3, 48, 64]), false);
        let err = arch.encode(&mut fx, img).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn identical_weights_and_inputs_give_bit_identical_pyramids() {
        let (store_a, arch_a) = build_encoder(5);
        let (store_b, arch_b) = build_encoder(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = random_image(&mut rng, 32, 32);

        let mut tape_a = Tape::new();
        let mut fx = Fwd::new(&mut tape_a, &store_a, false);
        let img = fx.tape.leaf(image.clone(), false);
        let pyr_a = arch_a.encode(&mut fx, img).unwrap();

        let mut tape_b = Tape::new();
        let mut fx = Fwd::new(&mut tape_b, &store_b, false);
        let img = fx.tape.leaf(image, false);
        let pyr_b = arch_b.encode(&mut fx, img).unwrap();

        for (a, b) in pyr_a.levels.iter().zip(pyr_b.levels.iter()) {
            assert!(tape_a.value(*a).bit_eq(tape_b.value(*b)));
        }
    }

    #[test]
    fn patch_embed_matches_independent_oracle() {
        // stage-1 embedding = 7/4/3 conv then layer norm over channels;
        // checked against a scalar f64 reimplementation
        let (store, arch) = build_encoder(3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let image = random_image(&mut rng, 32, 32);

        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let img = fx.tape.leaf(image.clone(), false);
        let map = arch.stages[0].embed.forward(&mut fx, img).unwrap();
        let tokens = to_tokens(fx.tape, map).unwrap();
        let got = arch.stages[0].embed_norm.forward(&mut fx, tokens).unwrap();

        let w = store.value(arch.stages[0].embed.w);
        let b = store.value(arch.stages[0].embed.b);
        let gamma = store.value(arch.stages[0].embed_norm.gamma);
        let beta = store.value(arch.stages[0].embed_norm.beta);
        let c1 = 8;
        let (oh, ow) = (8, 8);
        // conv, f64 scalar loops
        let mut conv = vec![0.0f64; c1 * oh * ow];
        for co in 0..c1 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co] as f64;
                    for ci in 0..3 {
                        for ky in 0..7 {
                            for kx in 0..7 {
                                let iy = (oy * 4 + ky) as isize - 3;
                                let ix = (ox * 4 + kx) as isize - 3;
                                if iy < 0 || iy >= 32 || ix < 0 || ix >= 32 {
                                    continue;
                                }
                                acc += image.data()[(ci * 32 + iy as usize) * 32 + ix as usize]
                                    as f64
                                    * w.data()[((co * 3 + ci) * 7 + ky) * 7 + kx] as f64;
                            }
                        }
                    }
                    conv[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        // layer norm per token over channels
        for py in 0..oh * ow {
            let row: Vec<f64> = (0..c1).map(|c| conv[c * oh * ow + py]).collect();
            let mean = row.iter().sum::<f64>() / c1 as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c1 as f64;
            for (c, v) in row.iter().enumerate() {
                let want = (v - mean) / (var + LAYER_NORM_EPS).sqrt() * gamma.data()[c] as f64
                    + beta.data()[c] as f64;
                let have = tape.value(got).data()[py * c1 + c] as f64;
                assert!(
                    crate::tensor::rel_err(have, want) <= 1e-5,
                    "token {py} channel {c}: {have} vs {want}"
                );
            }
        }
    }

    #[test]
    fn spatial_reduce_shapes_and_degenerate_ratio() {
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 2);
        let proj = Linear::build(&mut pb, "sr", 8 * 4, 8);
        let norm = LayerNormLayer::build(&mut pb, "srn", 8);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let x = fx.tape.leaf(Tensor::filled(&[64, 8], 0.5), false);
        let out = spatial_reduce(&mut fx, x, 4, &proj, &norm).unwrap();
        assert_eq!(tape.value(out).shape(), &[16, 8]);

        // N not divisible by R
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let x = fx.tape.leaf(Tensor::zeros(&[63, 8]), false);
        assert!(spatial_reduce(&mut fx, x, 4, &proj, &norm).is_err());

        // R = 1 with identity projection reduces to layer_norm(x)
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 2);
        let mut proj = Linear::build(&mut pb, "sr", 4, 4);
        let norm = LayerNormLayer::build(&mut pb, "srn", 4);
        let eye = Tensor::from_f64s(
            &[4, 4],
            &[
                1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.,
            ],
        )
        .unwrap();
        store.set(proj.w, eye).unwrap();
        proj.in_dim = 4;
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let vals: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let x = fx.tape.leaf(Tensor::from_f64s(&[3, 4], &vals).unwrap(), false);
        let reduced = spatial_reduce(&mut fx, x, 1, &proj, &norm).unwrap();
        let direct = norm.forward(&mut fx, x).unwrap();
        assert!(tape.value(reduced).max_abs_diff(tape.value(direct)).unwrap() < 1e-6);
    }

    #[test]
    fn spatial_reduce_matches_reshape_matmul_oracle() {
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 13);
        let proj = Linear::build(&mut pb, "sr", 8, 4);
        let norm = LayerNormLayer::build(&mut pb, "srn", 4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vals: Vec<f64> = (0..16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::<f32>::from_f64s(&[16, 4], &vals).unwrap();

        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let xv = fx.tape.leaf(x.clone(), false);
        let got = spatial_reduce(&mut fx, xv, 2, &proj, &norm).unwrap();

        // oracle: reshape + matmul + bias + layer norm, in f64
        let w = store.value(proj.w);
        let b = store.value(proj.b);
        let mut pre = vec![0.0f64; 8 * 4];
        for gi in 0..8 {
            for o in 0..4 {
                let mut acc = b.data()[o] as f64;
                for t in 0..8 {
                    acc += vals[gi * 8 + t] * w.data()[t * 4 + o] as f64;
                }
                pre[gi * 4 + o] = acc;
            }
        }
        for gi in 0..8 {
            let row = &pre[gi * 4..(gi + 1) * 4];
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for o in 0..4 {
                let want = (row[o] - mean) / (var + LAYER_NORM_EPS).sqrt();
                let have = tape.value(got).data()[gi * 4 + o] as f64;
                assert!(crate::tensor::rel_err(have, want) <= 1e-5);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        // one token, R = 1: softmax over a single key is 1, so the output
        // is v row passed through the output projection
        let cfg = StageConfig {
            depth: 1,
            channels: 4,
            heads: 2,
            reduction_ratio: 1,
            ffn_expansion: 2,
        };
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 17);
        let attn = AttentionArch::build(&mut pb, &cfg);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let x = fx.tape.leaf(Tensor::from_f64s(&[1, 4], &[0.2, -0.4, 1.0, 0.7]).unwrap(), false);
        let got = attn.forward(&mut fx, x).unwrap();

        let v = attn.v.forward(&mut fx, x).unwrap();
        let want = attn.out.forward(&mut fx, v).unwrap();
        assert!(tape.value(got).max_abs_diff(tape.value(want)).unwrap() < 1e-6);
    }

    #[test]
    fn mix_ffn_zero_weights_is_pure_residual() {
        let cfg = StageConfig {
            depth: 1,
            channels: 4,
            heads: 1,
            reduction_ratio: 1,
            ffn_expansion: 4,
        };
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 23);
        let ffn = MixFfnArch::build(&mut pb, &cfg);
        for id in [ffn.fc1.w, ffn.fc2.w, ffn.dwconv.w] {
            let zero = Tensor::zeros(store.value(id).shape());
            store.set(id, zero).unwrap();
        }
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let vals: Vec<f64> = (0..16 * 4).map(|i| (i % 7) as f64 - 3.0).collect();
        let x = fx.tape.leaf(Tensor::from_f64s(&[16, 4], &vals).unwrap(), false);
        let out = ffn.forward(&mut fx, x, 4, 4).unwrap();
        assert!(fx.tape.value(out).bit_eq(fx.tape.value(x)));

        // token count must tile the spatial extents
        assert!(ffn.forward(&mut fx, x, 4, 3).is_err());
    }
}
