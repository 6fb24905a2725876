//! Per-stage multimodal fusion: channel-concat linear fusion, a multi-scale
//! mixing module (two pointwise projections bracketing parallel
//! convolutions), and squeeze-and-excitation channel attention on the
//! residual path.
//!
//! The ablation lattice lives in [`FusionConfig`]: channel attention and
//! the parallel convolutions can be dropped independently, the kernel list
//! is configurable, and `linear_only` reduces the block to the bare linear
//! fusion layer.

use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Fwd, ParamBuilder, ParamId};
use crate::tensor::{Element, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvGrouping {
    /// One filter per channel (groups = C). Default; keeps the block inside
    /// a small parameter budget even at full-scale widths.
    Depthwise,
    Dense,
}

impl ConvGrouping {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvGrouping::Depthwise => "depthwise",
            ConvGrouping::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub kernel_sizes: Vec<usize>,
    pub se_reduction: usize,
    pub conv_grouping: ConvGrouping,
    pub enable_channel_attention: bool,
    pub enable_parallel_convs: bool,
    pub linear_only: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![3, 5, 7],
            se_reduction: 16,
            conv_grouping: ConvGrouping::Depthwise,
            enable_channel_attention: true,
            enable_parallel_convs: true,
            linear_only: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::Config("fusion kernel list is empty".into()));
        }
        for &k in &self.kernel_sizes {
            if k % 2 == 0 {
                return Err(Error::Config(format!(
                    "fusion kernels must be odd for same-padding, got {k}"
                )));
            }
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be positive".into()));
        }
        Ok(())
    }

    /// Bottleneck width of the SE block for `c` channels: `ceil(c / r)`,
    /// never below 1.
    pub fn se_hidden(&self, c: usize) -> usize {
        ((c + self.se_reduction - 1) / self.se_reduction).max(1)
    }
}

/// Squeeze-and-Excitation gate: global average pool, a two-layer
/// bottleneck, and a sigmoid. No biases, so zeroed weights give the exact
/// gate value 0.5.
#[derive(Debug, Clone)]
pub struct SeArch {
    pub w1: ParamId,
    pub w2: ParamId,
    pub hidden: usize,
}

impl SeArch {
    fn build<E: Element>(pb: &mut ParamBuilder<'_, E>, c: usize, hidden: usize) -> Self {
        // the gate is bounded by the sigmoid, so the bottleneck can start
        // wide; tiny init leaves the gate pinned near 0.5 with
        // second-order gradients
        SeArch {
            w1: pb.trunc_normal("w1", &[c, hidden], 0.5),
            w2: pb.trunc_normal("w2", &[hidden, c], 0.5),
            hidden,
        }
    }

    /// Per-channel gate in (0,1) applied multiplicatively to the input.
    pub fn forward<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let gate = self.gate(fx, x)?;
        fx.tape.mul_channels(x, gate)
    }

    /// The gate vector alone: `sigmoid(w2 . relu(w1 . avgpool(x)))`.
    pub fn gate<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let c = fx.tape.value(x).shape()[0];
        let pooled = fx.tape.global_avg_pool(x)?;
        let row = fx.tape.reshape(pooled, &[1, c])?;
        let w1 = fx.param(self.w1);
        let w2 = fx.param(self.w2);
        let h = fx.tape.matmul(row, w1)?;
        let h = fx.tape.relu(h);
        let logits = fx.tape.matmul(h, w2)?;
        let gate = fx.tape.sigmoid(logits);
        fx.tape.reshape(gate, &[c])
    }
}

/// One fusion block, fixed to a stage's channel width and modality count.
#[derive(Debug, Clone)]
pub struct FusionArch {
    pub channels: usize,
    pub modalities: usize,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub proj_in: Option<Conv2dLayer>,
    pub convs: Vec<Conv2dLayer>,
    pub proj_out: Option<Conv2dLayer>,
    pub se: Option<SeArch>,
    enable_parallel_convs: bool,
    linear_only: bool,
}

impl FusionArch {
    pub fn build<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        cfg: &FusionConfig,
        modalities: usize,
        channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if modalities == 0 {
            return Err(Error::Arity("fusion needs at least one modality".into()));
        }
        let c = channels;
        let fuse_w = pb.trunc_normal("fuse.weight", &[c, modalities * c], 0.02);
        let fuse_b = pb.zeros("fuse.bias", &[c]);
        if cfg.linear_only {
            return Ok(FusionArch {
                channels: c,
                modalities,
                fuse_w,
                fuse_b,
                proj_in: None,
                convs: Vec::new(),
                proj_out: None,
                se: None,
                enable_parallel_convs: false,
                linear_only: true,
            });
        }
        let proj_in = Some(Conv2dLayer::build_pointwise(pb, "proj_in", c, c));
        let convs = if cfg.enable_parallel_convs {
            cfg.kernel_sizes
                .iter()
                .map(|&k| {
                    let groups = match cfg.conv_grouping {
                        ConvGrouping::Depthwise => c,
                        ConvGrouping::Dense => 1,
                    };
                    Conv2dLayer::build(pb, &format!("conv{k}x{k}"), c, c, k, 1, (k - 1) / 2, groups)
                })
                .collect()
        } else {
            Vec::new()
        };
        let proj_out = Some(Conv2dLayer::build_pointwise(pb, "proj_out", c, c));
        let se = cfg
            .enable_channel_attention
            .then(|| pb.scoped("se", |pb| SeArch::build(pb, c, cfg.se_hidden(c))));
        Ok(FusionArch {
            channels: c,
            modalities,
            fuse_w,
            fuse_b,
            proj_in,
            convs,
            proj_out,
            se,
            enable_parallel_convs: cfg.enable_parallel_convs,
            linear_only: false,
        })
    }

    /// Channel-concat of the modality features followed by the learned
    /// per-pixel map `M*C -> C`.
    pub fn linear_fuse<E: Element>(&self, fx: &mut Fwd<'_, E>, features: &[Var]) -> Result<Var> {
        if features.len() != self.modalities {
            return Err(Error::Arity(format!(
                "fusion block built for {} modalities, got {}",
                self.modalities,
                features.len()
            )));
        }
        let w = fx.param(self.fuse_w);
        let b = fx.param(self.fuse_b);
        fx.tape.linear_fuse(features, w, b)
    }

    /// Pointwise projection, parallel same-padding convolutions summed onto
    /// the projected features, and a second pointwise projection.
    pub fn multi_scale_mix<E: Element>(&self, fx: &mut Fwd<'_, E>, fhat: Var) -> Result<Var> {
        let proj_in = self
            .proj_in
            .as_ref()
            .ok_or_else(|| Error::Config("multi_scale_mix unavailable in linear-only mode".into()))?;
        let proj_out = self.proj_out.as_ref().expect("proj_out exists with proj_in");
        let ftilde = proj_in.forward(fx, fhat)?;
        let mut branch = ftilde;
        if self.enable_parallel_convs {
            for conv in &self.convs {
                let mixed = conv.forward(fx, ftilde)?;
                branch = fx.tape.add(branch, mixed)?;
            }
        }
        proj_out.forward(fx, branch)
    }

    /// Full fusion: `F = ChannelAttention(F_hat) + MultiScaleMix(F_hat)`,
    /// degraded per the ablation flags.
    pub fn fuse<E: Element>(&self, fx: &mut Fwd<'_, E>, features: &[Var]) -> Result<Var> {
        let fhat = self.linear_fuse(fx, features)?;
        if self.linear_only {
            return Ok(fhat);
        }
        let main = self.multi_scale_mix(fx, fhat)?;
        match &self.se {
            Some(se) => {
                let gated = se.forward(fx, fhat)?;
                fx.tape.add(gated, main)
            }
            None => Ok(main),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{rel_err, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &FusionConfig, m: usize, c: usize, seed: u64) -> (ParamStore<f32>, FusionArch) {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let arch = pb
            .scoped("fusion", |pb| FusionArch::build(pb, cfg, m, c))
            .unwrap();
        (store, arch)
    }

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    fn eye(n: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    fn pointwise_identity(store: &mut ParamStore<f32>, layer: &Conv2dLayer) {
        let c = layer.in_ch;
        let mut w = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        store.set(layer.w, w).unwrap();
        store.set(layer.b, Tensor::zeros(&[c])).unwrap();
    }

    #[test]
    fn even_kernel_is_a_config_error() {
        let cfg = FusionConfig {
            kernel_sizes: vec![3, 4],
            ..FusionConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn linear_fuse_matches_concat_matmul_oracle() {
        let (store, arch) = build(&FusionConfig::default(), 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let maps: Vec<Tensor<f32>> = (0..3).map(|_| rand_map(&mut rng, 4, 3, 5)).collect();

        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let vars: Vec<_> = maps.iter().map(|m| fx.tape.leaf(m.clone(), false)).collect();
        let got = arch.linear_fuse(&mut fx, &vars).unwrap();

        // oracle: per pixel, concatenate the 12 channel values and apply
        // the weight matrix rows in f64
        let w = store.value(arch.fuse_w);
        let b = store.value(arch.fuse_b);
        for px in 0..15 {
            for co in 0..4 {
                let mut want = b.data()[co] as f64;
                for (mi, map) in maps.iter().enumerate() {
                    for ci in 0..4 {
                        want += w.data()[co * 12 + mi * 4 + ci] as f64
                            * map.data()[ci * 15 + px] as f64;
                    }
                }
                let have = fx.tape.value(got).data()[co * 15 + px] as f64;
                assert!(rel_err(have, want) <= 1e-5, "{have} vs {want}");
            }
        }
    }

    #[test]
    fn multi_scale_mix_zero_convs_identity_projections_passes_through() {
        let (mut store, arch) = build(&FusionConfig::default(), 1, 4, 3);
        pointwise_identity(&mut store, arch.proj_in.as_ref().unwrap());
        pointwise_identity(&mut store, arch.proj_out.as_ref().unwrap());
        for conv in &arch.convs {
            store.set(conv.w, Tensor::zeros(store.value(conv.w).shape())).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fhat = rand_map(&mut rng, 4, 4, 4);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let v = fx.tape.leaf(fhat.clone(), false);
        let out = arch.multi_scale_mix(&mut fx, v).unwrap();
        assert!(fx.tape.value(out).max_abs_diff(&fhat).unwrap() < 1e-6);
    }

    #[test]
    fn multi_scale_mix_matches_scalar_oracle() {
        let (store, arch) = build(&FusionConfig::default(), 1, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let fhat = rand_map(&mut rng, 4, 5, 5);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let v = fx.tape.leaf(fhat.clone(), false);
        let got = arch.multi_scale_mix(&mut fx, v).unwrap();

        let oracle = mix_oracle(&store, &arch, &fhat, 4, 5, 5);
        for (i, want) in oracle.iter().enumerate() {
            let have = fx.tape.value(got).data()[i] as f64;
            assert!(rel_err(have, *want) <= 1e-5, "at {i}: {have} vs {want}");
        }
    }

    /// f64 reimplementation of the mixing module: pointwise in-projection,
    /// depthwise convs summed on top, pointwise out-projection.
    fn mix_oracle(
        store: &ParamStore<f32>,
        arch: &FusionArch,
        fhat: &Tensor<f32>,
        c: usize,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let hw = h * w;
        let pw = |layer: &Conv2dLayer, input: &[f64]| -> Vec<f64> {
            let wt = store.value(layer.w);
            let bt = store.value(layer.b);
            let mut out = vec![0.0f64; c * hw];
            for co in 0..c {
                for px in 0..hw {
                    let mut acc = bt.data()[co] as f64;
                    for ci in 0..c {
                        acc += wt.data()[co * c + ci] as f64 * input[ci * hw + px];
                    }
                    out[co * hw + px] = acc;
                }
            }
            out
        };
        let input: Vec<f64> = fhat.data().iter().map(|v| *v as f64).collect();
        let ftilde = pw(arch.proj_in.as_ref().unwrap(), &input);
        let mut branch = ftilde.clone();
        for conv in &arch.convs {
            let wt = store.value(conv.w);
            let bt = store.value(conv.b);
            let k = conv.kernel;
            let pad = (k - 1) / 2;
            for ch in 0..c {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bt.data()[ch] as f64;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy + ky) as isize - pad as isize;
                                let ix = (ox + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += ftilde[ch * hw + iy as usize * w + ix as usize]
                                    * wt.data()[(ch * k + ky) * k + kx] as f64;
                            }
                        }
                        branch[ch * hw + oy * w + ox] += acc;
                    }
                }
            }
        }
        pw(arch.proj_out.as_ref().unwrap(), &branch)
    }

    #[test]
    fn se_zero_second_layer_gates_at_exactly_half() {
        let (mut store, arch) = build(&FusionConfig::default(), 1, 4, 6);
        let se = arch.se.as_ref().unwrap();
        store.set(se.w2, Tensor::zeros(store.value(se.w2).shape())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fhat = rand_map(&mut rng, 4, 3, 3);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let v = fx.tape.leaf(fhat.clone(), false);
        let out = se.forward(&mut fx, v).unwrap();
        for (o, i) in fx.tape.value(out).data().iter().zip(fhat.data()) {
            assert_eq!(*o, i * 0.5);
        }
    }

    #[test]
    fn se_zero_input_stays_zero_and_matches_oracle() {
        let (store, arch) = build(&FusionConfig::default(), 1, 8, 8);
        let se = arch.se.as_ref().unwrap();
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let zero = fx.tape.leaf(Tensor::zeros(&[8, 4, 4]), false);
        let out = se.forward(&mut fx, zero).unwrap();
        assert!(fx.tape.value(out).data().iter().all(|v| *v == 0.0));

        // random case against a pool/matmul/sigmoid oracle
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = rand_map(&mut rng, 8, 4, 4);
        let v = fx.tape.leaf(x.clone(), false);
        let out = se.forward(&mut fx, v).unwrap();

        let w1 = store.value(se.w1);
        let w2 = store.value(se.w2);
        let hidden = se.hidden;
        let pooled: Vec<f64> = (0..8)
            .map(|c| x.data()[c * 16..(c + 1) * 16].iter().map(|v| *v as f64).sum::<f64>() / 16.0)
            .collect();
        let mut hvec = vec![0.0f64; hidden];
        for j in 0..hidden {
            let mut acc = 0.0;
            for c in 0..8 {
                acc += pooled[c] * w1.data()[c * hidden + j] as f64;
            }
            hvec[j] = acc.max(0.0);
        }
        for c in 0..8 {
            let mut logit = 0.0;
            for j in 0..hidden {
                logit += hvec[j] * w2.data()[j * 8 + c] as f64;
            }
            let gate = 1.0 / (1.0 + (-logit).exp());
            for px in 0..16 {
                let want = x.data()[c * 16 + px] as f64 * gate;
                let have = fx.tape.value(out).data()[c * 16 + px] as f64;
                assert!((have - want).abs() <= 1e-6, "{have} vs {want}");
            }
        }
    }

    #[test]
    fn linear_only_identity_path() {
        let cfg = FusionConfig {
            linear_only: true,
            ..FusionConfig::default()
        };
        let (mut store, arch) = build(&cfg, 1, 4, 12);
        assert!(arch.proj_in.is_none() && arch.se.is_none() && arch.convs.is_empty());
        store.set(arch.fuse_w, eye(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_map(&mut rng, 4, 6, 6);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let v = fx.tape.leaf(x.clone(), false);
        let out = arch.fuse(&mut fx, &[v]).unwrap();
        assert!(fx.tape.value(out).bit_eq(&x));
    }

    #[test]
    fn zero_model_with_channel_attention_outputs_zero() {
        let (mut store, arch) = build(&FusionConfig::default(), 2, 4, 14);
        for id in store.ids().collect::<Vec<_>>() {
            let zero = Tensor::zeros(store.value(id).shape());
            store.set(id, zero).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_map(&mut rng, 4, 4, 4);
        let b = rand_map(&mut rng, 4, 4, 4);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let va = fx.tape.leaf(a, false);
        let vb = fx.tape.leaf(b, false);
        let out = arch.fuse(&mut fx, &[va, vb]).unwrap();
        assert!(fx.tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wiring_identity_with_zero_convs_and_zero_se_logits() {
        // with conv weights zeroed and the SE second layer zeroed, the full
        // block must equal proj_out(proj_in(F_hat)) + 0.5 * F_hat
        let (mut store, arch) = build(&FusionConfig::default(), 2, 4, 25);
        for conv in &arch.convs {
            store.set(conv.w, Tensor::zeros(store.value(conv.w).shape())).unwrap();
            store.set(conv.b, Tensor::zeros(&[4])).unwrap();
        }
        let se = arch.se.as_ref().unwrap();
        store.set(se.w2, Tensor::zeros(store.value(se.w2).shape())).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let a = rand_map(&mut rng, 4, 5, 5);
        let b = rand_map(&mut rng, 4, 5, 5);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let va = fx.tape.leaf(a, false);
        let vb = fx.tape.leaf(b, false);
        let full = arch.fuse(&mut fx, &[va, vb]).unwrap();

        let fhat = arch.linear_fuse(&mut fx, &[va, vb]).unwrap();
        let projected = arch.multi_scale_mix(&mut fx, fhat).unwrap();
        let half = fx.tape.scale(fhat, 0.5);
        let want = fx.tape.add(projected, half).unwrap();
        assert!(
            fx.tape.value(full).max_abs_diff(fx.tape.value(want)).unwrap() < 1e-6
        );
    }

    #[test]
    fn modality_arity_is_checked() {
        let (store, arch) = build(&FusionConfig::default(), 2, 4, 33);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let v = fx.tape.leaf(Tensor::zeros(&[4, 2, 2]), false);
        assert!(matches!(
            arch.fuse(&mut fx, &[v]),
            Err(Error::Arity(_))
        ));
    }
}
