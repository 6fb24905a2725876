//! Analytic parameter and FLOP accounting. The architecture is enumerated
//! from the config alone, independently of the model builder, so the exact
//! params-equal-built-model cross-check is meaningful.
//!
//! Conventions, printed with every report: one multiply-accumulate counts
//! as 2 FLOPs; bias adds, activations, normalization and resampling carry
//! explicit small per-element costs. All counts are exact integers.

use crate::error::{Error, Result};
use crate::fusion::ConvGrouping;
use crate::model::ModelConfig;

pub const FLOPS_PER_MAC: u64 = 2;
const LN_FLOPS_PER_ELT: u64 = 8;
const GELU_FLOPS_PER_ELT: u64 = 8;
const SOFTMAX_FLOPS_PER_ELT: u64 = 5;
const SIGMOID_FLOPS_PER_ELT: u64 = 4;
const UPSAMPLE_FLOPS_PER_OUT: u64 = 8;

/// Published full-scale fusion-block budget this block is compared against
/// (four modalities, 512x512 inputs).
pub const REFERENCE_FUSION_PARAMS_M: f64 = 3.23;
pub const REFERENCE_FUSION_GFLOPS: f64 = 2.47;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Conv,
    Linear,
    Attention,
    Norm,
    Activation,
    Resample,
    Other,
}

#[derive(Debug, Clone)]
pub struct CostEntry {
    pub path: String,
    pub kind: CostKind,
    pub params: u64,
    pub flops: u64,
}

/// Leaf cost entries; aggregates are prefix sums over the dotted paths, so
/// parent counts equal the sum of their children by construction.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    /// Per-modality input extents the FLOP side was evaluated at.
    pub input: Option<(usize, usize)>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn subtree(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.path == prefix || e.path.starts_with(&format!("{prefix}.")))
            .fold((0, 0), |(p, f), e| (p + e.params, f + e.flops))
    }

    /// (encoders, fusion, decoder) totals.
    pub fn component_totals(&self) -> [(String, u64, u64); 3] {
        let mut encoders = (0u64, 0u64);
        for e in &self.entries {
            if e.path.starts_with("encoder") {
                encoders.0 += e.params;
                encoders.1 += e.flops;
            }
        }
        let fusion = self.subtree("fusion");
        let decoder = self.subtree("decoder");
        [
            ("encoders".into(), encoders.0, encoders.1),
            ("fusion".into(), fusion.0, fusion.1),
            ("decoder".into(), decoder.0, decoder.1),
        ]
    }

    /// Aligned text tree down to `depth` path segments.
    pub fn to_text(&self, depth: usize) -> String {
        let mut rows: Vec<(String, u64, u64)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            let segments: Vec<&str> = e.path.split('.').collect();
            for d in 1..=depth.min(segments.len()) {
                let prefix = segments[..d].join(".");
                if seen.insert(prefix.clone()) {
                    rows.push((prefix, 0, 0));
                }
            }
        }
        for row in rows.iter_mut() {
            let (p, f) = self.subtree(&row.0);
            row.1 = p;
            row.2 = f;
        }
        let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(10).max(7);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>14}\n",
            "module", "params", "flops"
        ));
        for (path, p, f) in &rows {
            out.push_str(&format!("{path:<name_w$}  {p:>12}  {f:>14}\n"));
        }
        let (tp, tf) = (self.total_params(), self.total_flops());
        out.push_str(&format!("{:<name_w$}  {tp:>12}  {tf:>14}\n", "total"));
        if let Some((h, w)) = self.input {
            out.push_str(&format!(
                "flops at [3,{h},{w}] per modality, {FLOPS_PER_MAC} flops per multiply-accumulate = {:.2} GFLOPs\n",
                gflops(tf)
            ));
        }
        out
    }
}

/// FLOPs rendered in GFLOPs, rounded to 2 decimals.
pub fn gflops(flops: u64) -> f64 {
    (flops as f64 / 1e9 * 100.0).round() / 100.0
}

pub fn linear_params(in_dim: usize, out_dim: usize) -> u64 {
    (in_dim * out_dim + out_dim) as u64
}

pub fn conv_params(cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    ((cin / groups) * k * k * cout + cout) as u64
}

fn linear_flops(tokens: usize, in_dim: usize, out_dim: usize) -> u64 {
    FLOPS_PER_MAC * (tokens * in_dim * out_dim) as u64 + (tokens * out_dim) as u64
}

fn conv_flops(out_hw: usize, cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    FLOPS_PER_MAC * (out_hw * cout * (cin / groups) * k * k) as u64 + (out_hw * cout) as u64
}

/// Parameter counts only; input-shape independent.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    analyze(config, None)
}

/// Parameters plus FLOPs for one forward pass at `[3, h, w]` per modality.
pub fn count_flops(config: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Config(format!(
            "input extents must be divisible by 32, got {h}x{w}"
        )));
    }
    analyze(config, Some((h, w)))
}

fn analyze(config: &ModelConfig, input: Option<(usize, usize)>) -> Result<CostReport> {
    config.validate()?;
    let fusion_cfg = config.effective_fusion();
    let (h, w) = input.unwrap_or((32, 32));
    let with_flops = input.is_some();
    let mut entries: Vec<CostEntry> = Vec::new();
    let mut push = |path: String, kind: CostKind, params: u64, flops: u64| {
        entries.push(CostEntry {
            path,
            kind,
            params,
            flops: if with_flops { flops } else { 0 },
        });
    };

    // encoders
    for m in 0..config.num_modalities {
        let mut in_ch = 3;
        let (mut hi, mut wi) = (h, w);
        for (i, (sc, pe)) in config
            .encoder
            .stages
            .iter()
            .zip(&config.encoder.patch_embeds)
            .enumerate()
        {
            let c = sc.channels;
            let prefix = format!("encoder{m}.stage{}", i + 1);
            hi = (hi + 2 * pe.pad - pe.kernel) / pe.stride + 1;
            wi = (wi + 2 * pe.pad - pe.kernel) / pe.stride + 1;
            let n = hi * wi;
            push(
                format!("{prefix}.embed.conv"),
                CostKind::Conv,
                conv_params(in_ch, c, pe.kernel, 1),
                conv_flops(n, in_ch, c, pe.kernel, 1),
            );
            push(
                format!("{prefix}.embed.norm"),
                CostKind::Norm,
                2 * c as u64,
                LN_FLOPS_PER_ELT * (n * c) as u64,
            );
            let r = sc.reduction_ratio;
            let nr = n / r;
            for d in 0..sc.depth {
                let bp = format!("{prefix}.block{d}");
                push(
                    format!("{bp}.norm1"),
                    CostKind::Norm,
                    2 * c as u64,
                    LN_FLOPS_PER_ELT * (n * c) as u64,
                );
                push(
                    format!("{bp}.attn.q"),
                    CostKind::Linear,
                    linear_params(c, c),
                    linear_flops(n, c, c),
                );
                if r > 1 {
                    push(
                        format!("{bp}.attn.sr"),
                        CostKind::Linear,
                        linear_params(c * r, c),
                        linear_flops(nr, c * r, c),
                    );
                    push(
                        format!("{bp}.attn.sr_norm"),
                        CostKind::Norm,
                        2 * c as u64,
                        LN_FLOPS_PER_ELT * (nr * c) as u64,
                    );
                }
                push(
                    format!("{bp}.attn.k"),
                    CostKind::Linear,
                    linear_params(c, c),
                    linear_flops(nr, c, c),
                );
                push(
                    format!("{bp}.attn.v"),
                    CostKind::Linear,
                    linear_params(c, c),
                    linear_flops(nr, c, c),
                );
                // per-head QK^T and AV products at reduced key length,
                // plus scaling and softmax over the logits
                let logits = (sc.heads * n * nr) as u64;
                let qk_av = 2 * FLOPS_PER_MAC * (n * nr * c) as u64;
                push(
                    format!("{bp}.attn.mhsa"),
                    CostKind::Attention,
                    0,
                    qk_av + logits + SOFTMAX_FLOPS_PER_ELT * logits,
                );
                push(
                    format!("{bp}.attn.out"),
                    CostKind::Linear,
                    linear_params(c, c),
                    linear_flops(n, c, c),
                );
                push(
                    format!("{bp}.norm2"),
                    CostKind::Norm,
                    2 * c as u64,
                    LN_FLOPS_PER_ELT * (n * c) as u64,
                );
                let hidden = c * sc.ffn_expansion;
                push(
                    format!("{bp}.ffn.fc1"),
                    CostKind::Linear,
                    linear_params(c, hidden),
                    linear_flops(n, c, hidden),
                );
                push(
                    format!("{bp}.ffn.dwconv"),
                    CostKind::Conv,
                    conv_params(hidden, hidden, 3, hidden),
                    conv_flops(n, hidden, hidden, 3, hidden),
                );
                push(
                    format!("{bp}.ffn.gelu"),
                    CostKind::Activation,
                    0,
                    GELU_FLOPS_PER_ELT * (n * hidden) as u64,
                );
                push(
                    format!("{bp}.ffn.fc2"),
                    CostKind::Linear,
                    linear_params(hidden, c),
                    linear_flops(n, hidden, c),
                );
                push(
                    format!("{bp}.residual"),
                    CostKind::Other,
                    0,
                    2 * (n * c) as u64,
                );
            }
            in_ch = c;
        }
    }

    // fusion blocks
    let mc = config.num_modalities;
    for (i, sc) in config.encoder.stages.iter().enumerate() {
        let c = sc.channels;
        let hw = (h >> (i + 2)) * (w >> (i + 2));
        let prefix = format!("fusion.stage{}", i + 1);
        push(
            format!("{prefix}.fuse"),
            CostKind::Linear,
            linear_params(mc * c, c),
            linear_flops(hw, mc * c, c),
        );
        if fusion_cfg.linear_only {
            continue;
        }
        push(
            format!("{prefix}.proj_in"),
            CostKind::Conv,
            conv_params(c, c, 1, 1),
            conv_flops(hw, c, c, 1, 1),
        );
        if fusion_cfg.enable_parallel_convs {
            let groups = match fusion_cfg.conv_grouping {
                ConvGrouping::Depthwise => c,
                ConvGrouping::Dense => 1,
            };
            for &k in &fusion_cfg.kernel_sizes {
                push(
                    format!("{prefix}.conv{k}x{k}"),
                    CostKind::Conv,
                    conv_params(c, c, k, groups),
                    conv_flops(hw, c, c, k, groups),
                );
            }
            push(
                format!("{prefix}.branch_add"),
                CostKind::Other,
                0,
                (fusion_cfg.kernel_sizes.len() * hw * c) as u64,
            );
        }
        push(
            format!("{prefix}.proj_out"),
            CostKind::Conv,
            conv_params(c, c, 1, 1),
            conv_flops(hw, c, c, 1, 1),
        );
        if fusion_cfg.enable_channel_attention {
            let hidden = fusion_cfg.se_hidden(c);
            push(
                format!("{prefix}.se.w1"),
                CostKind::Linear,
                (c * hidden) as u64,
                FLOPS_PER_MAC * (c * hidden) as u64,
            );
            push(
                format!("{prefix}.se.w2"),
                CostKind::Linear,
                (hidden * c) as u64,
                FLOPS_PER_MAC * (hidden * c) as u64,
            );
            // pool, relu, sigmoid gate, per-channel scale
            let gate = (hw * c + c) as u64
                + hidden as u64
                + SIGMOID_FLOPS_PER_ELT * c as u64
                + (hw * c) as u64;
            push(format!("{prefix}.se.gate"), CostKind::Activation, 0, gate);
            push(
                format!("{prefix}.residual"),
                CostKind::Other,
                0,
                (hw * c) as u64,
            );
        }
    }

    // decoder
    let d = config.decoder.embed_dim;
    let k_classes = config.decoder.num_classes;
    let (th, tw) = (h / 4, w / 4);
    let t_hw = th * tw;
    for (i, sc) in config.encoder.stages.iter().enumerate() {
        let hw = (h >> (i + 2)) * (w >> (i + 2));
        push(
            format!("decoder.level{}", i + 1),
            CostKind::Conv,
            conv_params(sc.channels, d, 1, 1),
            conv_flops(hw, sc.channels, d, 1, 1),
        );
        if i > 0 {
            push(
                format!("decoder.level{}.upsample", i + 1),
                CostKind::Resample,
                0,
                UPSAMPLE_FLOPS_PER_OUT * (t_hw * d) as u64,
            );
        }
    }
    push(
        "decoder.fuse".into(),
        CostKind::Conv,
        conv_params(4 * d, d, 1, 1),
        conv_flops(t_hw, 4 * d, d, 1, 1),
    );
    push(
        "decoder.head".into(),
        CostKind::Conv,
        conv_params(d, k_classes, 1, 1),
        conv_flops(t_hw, d, k_classes, 1, 1),
    );
    push(
        "decoder.output_upsample".into(),
        CostKind::Resample,
        0,
        UPSAMPLE_FLOPS_PER_OUT * (h * w * k_classes) as u64,
    );

    Ok(CostReport { entries, input })
}

/// Comparison of the full-scale fusion budget against the published
/// reference values, with the assumptions spelled out.
pub fn full_scale_comparison() -> Result<String> {
    let cfg = ModelConfig::full_scale_preset();
    let report = count_flops(&cfg, 512, 512)?;
    let (fusion_params, fusion_flops) = report.subtree("fusion");
    let params_m = fusion_params as f64 / 1e6;
    let gf = fusion_flops as f64 / 1e9;
    let params_dev = (params_m - REFERENCE_FUSION_PARAMS_M) / REFERENCE_FUSION_PARAMS_M * 100.0;
    let gflops_dev = (gf - REFERENCE_FUSION_GFLOPS) / REFERENCE_FUSION_GFLOPS * 100.0;
    let gf_mac = gf / FLOPS_PER_MAC as f64;
    let mac_dev = (gf_mac - REFERENCE_FUSION_GFLOPS) / REFERENCE_FUSION_GFLOPS * 100.0;
    Ok(format!(
        "full-scale fusion budget (4 modalities, 3x512x512 each)\n\
         assumptions: depthwise 3/5/7 convs, SE reduction 16, biased linear layers,\n\
         B4-class backbone widths (64/128/320/512); the reference does not pin these.\n\
         parameters: {params_m:.2} M vs reference {REFERENCE_FUSION_PARAMS_M:.2} M ({params_dev:+.1}%)\n\
         flops ({FLOPS_PER_MAC}/MAC): {gf:.2} GFLOPs vs reference {REFERENCE_FUSION_GFLOPS:.2} ({gflops_dev:+.1}%)\n\
         flops (1/MAC, MAC-counting convention): {gf_mac:.2} vs reference {REFERENCE_FUSION_GFLOPS:.2} ({mac_dev:+.1}%)\n"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build;

    #[test]
    fn linear_params_formula() {
        assert_eq!(linear_params(8, 4), 36);
    }

    #[test]
    fn pointwise_conv_flops_formula() {
        // 1x1 conv C->C on HxW: 2*HW*C^2 MAC flops plus HW*C bias adds
        let c = 8;
        let hw = 16 * 16;
        assert_eq!(
            conv_flops(hw, c, c, 1, 1),
            (2 * hw * c * c + hw * c) as u64
        );
    }

    #[test]
    fn desk_scale_fusion_stage_matches_hand_sum() {
        // C=8, M=2, depthwise [3,5,7], r=4, hand-summed layer by layer:
        // fuse 8*16+8 = 136; proj_in/out 64+8 = 72 each;
        // convs 8k^2+8 for k=3,5,7 = 80+208+400 = 688; SE 8*2+2*8 = 32
        let mut cfg = ModelConfig::desk_default();
        cfg.num_modalities = 2;
        cfg.fusion.se_reduction = 4;
        let report = count_params(&cfg).unwrap();
        let (params, _) = report.subtree("fusion.stage1");
        assert_eq!(params, 136 + 72 + 72 + 688 + 32);
        assert_eq!(params, 1000);
    }

    #[test]
    fn desk_scale_fusion_flops_match_hand_sum() {
        // same stage at 16x16 (HW=256), hand-derived:
        // fuse: 2*256*8*16 + 256*8 = 67584
        // proj_in/out: 2*256*64 + 2048 = 34816 each
        // convs: 2*256*8*k^2 + 2048 -> 38912 + 104448 + 202752
        // branch adds: 3*2048 = 6144
        // se: w1 2*8*2=32, w2 32, gate (256*8+8) + 2 + 4*8 + 256*8 = 4138
        // residual: 2048
        let mut cfg = ModelConfig::desk_default();
        cfg.num_modalities = 2;
        cfg.fusion.se_reduction = 4;
        let report = count_flops(&cfg, 64, 64).unwrap();
        let (_, flops) = report.subtree("fusion.stage1");
        let want = 67584
            + 34816
            + 34816
            + (38912 + 104448 + 202752)
            + 6144
            + 32
            + 32
            + 4138
            + 2048;
        assert_eq!(flops, want);
        assert_eq!(flops, 495_722);
    }

    #[test]
    fn params_match_built_model_exactly() {
        let mut cfg = ModelConfig::desk_default();
        cfg.num_modalities = 3;
        let report = count_params(&cfg).unwrap();
        let model = build::<f32>(&cfg).unwrap();
        assert_eq!(report.total_params(), model.store.total_elements());
    }

    #[test]
    fn fusion_params_are_affine_in_modalities() {
        let slope: u64 = ModelConfig::desk_default()
            .encoder
            .stages
            .iter()
            .map(|s| (s.channels * s.channels) as u64)
            .sum();
        let at = |m: usize| {
            let mut cfg = ModelConfig::desk_default();
            cfg.num_modalities = m;
            count_params(&cfg).unwrap().subtree("fusion").0
        };
        for m in 1..4 {
            assert_eq!(at(m + 1) - at(m), slope);
        }
    }

    #[test]
    fn doubling_extent_quadruples_conv_flops() {
        let cfg = ModelConfig::desk_default();
        let small = count_flops(&cfg, 64, 64).unwrap();
        let large = count_flops(&cfg, 128, 128).unwrap();
        assert_eq!(small.entries.len(), large.entries.len());
        for (s, l) in small.entries.iter().zip(&large.entries) {
            assert_eq!(s.path, l.path);
            if s.kind == CostKind::Conv {
                assert_eq!(4 * s.flops, l.flops, "at {}", s.path);
            }
        }
    }

    #[test]
    fn parents_equal_sum_of_children() {
        let cfg = ModelConfig::desk_default();
        let report = count_flops(&cfg, 64, 64).unwrap();
        let [enc, fus, dec] = report.component_totals();
        assert_eq!(enc.1 + fus.1 + dec.1, report.total_params());
        assert_eq!(enc.2 + fus.2 + dec.2, report.total_flops());
    }

    #[test]
    fn full_scale_comparison_prints_signed_deviation() {
        let text = full_scale_comparison().unwrap();
        assert!(text.contains('%'));
        assert!(text.contains("3.23"));
        assert!(text.contains("2.47"));
    }
}
