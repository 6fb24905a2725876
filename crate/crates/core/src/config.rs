//! Declarative configuration as flat dotted-key text, e.g.
//! `encoder.stage3.channels = 32`. Files parse into a key map; overrides
//! (`--set key=value`) apply after the file, last one wins; the effective
//! map round-trips losslessly through [`ModelConfig`] and [`TrainConfig`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::ConvGrouping;
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

pub type KvMap = BTreeMap<String, String>;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv_text(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Applies `key=value` override strings, last one winning.
pub fn apply_overrides(map: &mut KvMap, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{item}' is not of the form key=value"))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(())
}

pub fn render_kv(map: &KvMap) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn get_usize(map: &KvMap, key: &str, slot: &mut usize) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = v
            .parse()
            .map_err(|_| Error::Config(format!("'{key}' is not an integer: '{v}'")))?;
    }
    Ok(())
}

fn get_u64(map: &KvMap, key: &str, slot: &mut u64) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = v
            .parse()
            .map_err(|_| Error::Config(format!("'{key}' is not an integer: '{v}'")))?;
    }
    Ok(())
}

fn get_f64(map: &KvMap, key: &str, slot: &mut f64) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = v
            .parse()
            .map_err(|_| Error::Config(format!("'{key}' is not a number: '{v}'")))?;
    }
    Ok(())
}

fn get_bool(map: &KvMap, key: &str, slot: &mut bool) -> Result<()> {
    if let Some(v) = map.get(key) {
        *slot = match v.as_str() {
            "true" => true,
            "false" => false,
            _ => return Err(Error::Config(format!("'{key}' must be true or false: '{v}'"))),
        };
    }
    Ok(())
}

/// All keys the model section understands; unknown `model.*`,
/// `encoder.*`, `fusion.*` and `decoder.*` keys are config errors.
pub fn model_from_kv(map: &KvMap) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk_default();
    if map.get("model.preset").map(String::as_str) == Some("full_scale") {
        cfg = ModelConfig::full_scale_preset();
    }
    for key in map.keys() {
        if !is_known_model_key(key) && is_model_section(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
    }
    get_usize(map, "model.modalities", &mut cfg.num_modalities)?;
    get_u64(map, "model.seed", &mut cfg.seed)?;
    if let Some(v) = map.get("model.variant") {
        cfg.variant = Variant::parse(v)?;
    }
    for i in 0..4 {
        let s = &mut cfg.encoder.stages[i];
        let p = format!("encoder.stage{}", i + 1);
        get_usize(map, &format!("{p}.depth"), &mut s.depth)?;
        get_usize(map, &format!("{p}.channels"), &mut s.channels)?;
        get_usize(map, &format!("{p}.heads"), &mut s.heads)?;
        get_usize(map, &format!("{p}.reduction"), &mut s.reduction_ratio)?;
        get_usize(map, &format!("{p}.ffn_expansion"), &mut s.ffn_expansion)?;
        let pe = &mut cfg.encoder.patch_embeds[i];
        get_usize(map, &format!("{p}.patch_kernel"), &mut pe.kernel)?;
        get_usize(map, &format!("{p}.patch_stride"), &mut pe.stride)?;
        get_usize(map, &format!("{p}.patch_pad"), &mut pe.pad)?;
    }
    if let Some(v) = map.get("fusion.kernels") {
        cfg.fusion.kernel_sizes = v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("fusion.kernels entry '{s}' not an integer")))
            })
            .collect::<Result<Vec<usize>>>()?;
    }
    get_usize(map, "fusion.se_reduction", &mut cfg.fusion.se_reduction)?;
    if let Some(v) = map.get("fusion.conv_grouping") {
        cfg.fusion.conv_grouping = match v.as_str() {
            "depthwise" => ConvGrouping::Depthwise,
            "dense" => ConvGrouping::Dense,
            _ => {
                return Err(Error::Config(format!(
                    "fusion.conv_grouping must be depthwise or dense, got '{v}'"
                )))
            }
        };
    }
    get_bool(map, "fusion.channel_attention", &mut cfg.fusion.enable_channel_attention)?;
    get_bool(map, "fusion.parallel_convs", &mut cfg.fusion.enable_parallel_convs)?;
    get_bool(map, "fusion.linear_only", &mut cfg.fusion.linear_only)?;
    get_usize(map, "decoder.embed_dim", &mut cfg.decoder.embed_dim)?;
    get_usize(map, "decoder.num_classes", &mut cfg.decoder.num_classes)?;
    cfg.validate()?;
    Ok(cfg)
}

fn is_model_section(key: &str) -> bool {
    ["model.", "encoder.", "fusion.", "decoder."]
        .iter()
        .any(|p| key.starts_with(p))
}

fn is_known_model_key(key: &str) -> bool {
    match key {
        "model.preset" | "model.modalities" | "model.seed" | "model.variant"
        | "fusion.kernels" | "fusion.se_reduction" | "fusion.conv_grouping"
        | "fusion.channel_attention" | "fusion.parallel_convs" | "fusion.linear_only"
        | "decoder.embed_dim" | "decoder.num_classes" => true,
        _ => {
            if let Some(rest) = key.strip_prefix("encoder.stage") {
                if let Some((idx, field)) = rest.split_once('.') {
                    return matches!(idx, "1" | "2" | "3" | "4")
                        && matches!(
                            field,
                            "depth"
                                | "channels"
                                | "heads"
                                | "reduction"
                                | "ffn_expansion"
                                | "patch_kernel"
                                | "patch_stride"
                                | "patch_pad"
                        );
                }
            }
            false
        }
    }
}

pub fn model_to_kv(cfg: &ModelConfig) -> KvMap {
    let mut map = KvMap::new();
    map.insert("model.modalities".into(), cfg.num_modalities.to_string());
    map.insert("model.seed".into(), cfg.seed.to_string());
    map.insert("model.variant".into(), cfg.variant.as_str().into());
    for i in 0..4 {
        let s = &cfg.encoder.stages[i];
        let p = format!("encoder.stage{}", i + 1);
        map.insert(format!("{p}.depth"), s.depth.to_string());
        map.insert(format!("{p}.channels"), s.channels.to_string());
        map.insert(format!("{p}.heads"), s.heads.to_string());
        map.insert(format!("{p}.reduction"), s.reduction_ratio.to_string());
        map.insert(format!("{p}.ffn_expansion"), s.ffn_expansion.to_string());
        let pe = &cfg.encoder.patch_embeds[i];
        map.insert(format!("{p}.patch_kernel"), pe.kernel.to_string());
        map.insert(format!("{p}.patch_stride"), pe.stride.to_string());
        map.insert(format!("{p}.patch_pad"), pe.pad.to_string());
    }
    let kernels: Vec<String> = cfg.fusion.kernel_sizes.iter().map(|k| k.to_string()).collect();
    map.insert("fusion.kernels".into(), kernels.join(","));
    map.insert("fusion.se_reduction".into(), cfg.fusion.se_reduction.to_string());
    map.insert("fusion.conv_grouping".into(), cfg.fusion.conv_grouping.as_str().into());
    map.insert(
        "fusion.channel_attention".into(),
        cfg.fusion.enable_channel_attention.to_string(),
    );
    map.insert(
        "fusion.parallel_convs".into(),
        cfg.fusion.enable_parallel_convs.to_string(),
    );
    map.insert("fusion.linear_only".into(), cfg.fusion.linear_only.to_string());
    map.insert("decoder.embed_dim".into(), cfg.decoder.embed_dim.to_string());
    map.insert("decoder.num_classes".into(), cfg.decoder.num_classes.to_string());
    map
}

pub fn train_from_kv(map: &KvMap) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for key in map.keys() {
        if key.starts_with("train.") && !is_known_train_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
    }
    get_f64(map, "train.base_lr", &mut cfg.base_lr)?;
    get_usize(map, "train.total_epochs", &mut cfg.total_epochs)?;
    get_usize(map, "train.warmup_epochs", &mut cfg.warmup_epochs)?;
    get_f64(map, "train.warmup_factor", &mut cfg.warmup_factor)?;
    get_f64(map, "train.poly_power", &mut cfg.poly_power)?;
    get_f64(map, "train.weight_decay", &mut cfg.weight_decay)?;
    get_f64(map, "train.adam_eps", &mut cfg.adam_eps)?;
    get_f64(map, "train.adam_beta1", &mut cfg.adam_beta1)?;
    get_f64(map, "train.adam_beta2", &mut cfg.adam_beta2)?;
    get_usize(map, "train.batch_size", &mut cfg.batch_size)?;
    get_u64(map, "train.seed", &mut cfg.seed)?;
    get_usize(map, "train.eval_every", &mut cfg.eval_every)?;
    cfg.validate()?;
    Ok(cfg)
}

fn is_known_train_key(key: &str) -> bool {
    matches!(
        key,
        "train.base_lr"
            | "train.total_epochs"
            | "train.warmup_epochs"
            | "train.warmup_factor"
            | "train.poly_power"
            | "train.weight_decay"
            | "train.adam_eps"
            | "train.adam_beta1"
            | "train.adam_beta2"
            | "train.batch_size"
            | "train.seed"
            | "train.eval_every"
    )
}

pub fn train_to_kv(cfg: &TrainConfig) -> KvMap {
    let mut map = KvMap::new();
    map.insert("train.base_lr".into(), cfg.base_lr.to_string());
    map.insert("train.total_epochs".into(), cfg.total_epochs.to_string());
    map.insert("train.warmup_epochs".into(), cfg.warmup_epochs.to_string());
    map.insert("train.warmup_factor".into(), cfg.warmup_factor.to_string());
    map.insert("train.poly_power".into(), cfg.poly_power.to_string());
    map.insert("train.weight_decay".into(), cfg.weight_decay.to_string());
    map.insert("train.adam_eps".into(), cfg.adam_eps.to_string());
    map.insert("train.adam_beta1".into(), cfg.adam_beta1.to_string());
    map.insert("train.adam_beta2".into(), cfg.adam_beta2.to_string());
    map.insert("train.batch_size".into(), cfg.batch_size.to_string());
    map.insert("train.seed".into(), cfg.seed.to_string());
    map.insert("train.eval_every".into(), cfg.eval_every.to_string());
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_config_roundtrips_losslessly() {
        let mut cfg = ModelConfig::desk_default();
        cfg.num_modalities = 3;
        cfg.seed = 99;
        cfg.variant = Variant::Kernels3_7_11;
        cfg.encoder.stages[2].channels = 48;
        cfg.encoder.stages[2].heads = 4;
        cfg.fusion.se_reduction = 4;
        cfg.decoder.num_classes = 7;
        let map = model_to_kv(&cfg);
        let back = model_from_kv(&map).unwrap();
        assert_eq!(back, cfg);
        // and the rendered text parses to the same map
        let reparsed = parse_kv_text(&render_kv(&map)).unwrap();
        assert_eq!(reparsed, map);
    }

    #[test]
    fn train_config_roundtrips() {
        let mut cfg = TrainConfig::default();
        cfg.base_lr = 6e-5;
        cfg.total_epochs = 120;
        cfg.batch_size = 2;
        let back = train_from_kv(&train_to_kv(&cfg)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let map = parse_kv_text("model.modailties = 2\n").unwrap();
        assert!(model_from_kv(&map).is_err());
        let map = parse_kv_text("model.modalities = two\n").unwrap();
        assert!(model_from_kv(&map).is_err());
        let map = parse_kv_text("encoder.stage5.depth = 1\n").unwrap();
        assert!(model_from_kv(&map).is_err());
        assert!(parse_kv_text("not a kv line\n").is_err());
    }

    #[test]
    fn overrides_apply_last_wins() {
        let mut map = parse_kv_text("model.variant = full\n# comment\n").unwrap();
        apply_overrides(
            &mut map,
            &["model.variant=linear_only".into(), "model.seed=5".into()],
        )
        .unwrap();
        let cfg = model_from_kv(&map).unwrap();
        assert_eq!(cfg.variant, Variant::LinearOnly);
        assert_eq!(cfg.seed, 5);
        assert!(apply_overrides(&mut map, &["broken".into()]).is_err());
    }

    #[test]
    fn full_scale_preset_key() {
        let map = parse_kv_text("model.preset = full_scale\n").unwrap();
        let cfg = model_from_kv(&map).unwrap();
        assert_eq!(cfg.encoder.stages[3].channels, 512);
        assert_eq!(cfg.decoder.embed_dim, 768);
    }
}
