//! Trains nested modality subsets (m0, then m0+m1) on an xor-fusion
//! dataset: the single modality is chance on the foreground class by
//! construction, and the pair is fully decidable.

use mmsformer::cli::{run_modalities, run_synth, Invocation};

fn main() -> mmsformer::Result<()> {
    let base = std::env::temp_dir().join("mmsformer-examples/modalities");
    let data = base.join("data");
    run_synth(&Invocation {
        out: Some(data.clone()),
        overrides: vec![
            "synth.mode=xor_fusion".into(),
            "synth.extent=32".into(),
            "synth.train=8".into(),
            "synth.val=8".into(),
            "synth.noise=0.02".into(),
        ],
        seed: Some(3),
        quiet: true,
        ..Invocation::default()
    })?;
    run_modalities(&Invocation {
        dataset: Some(data),
        out: Some(base.join("run")),
        overrides: vec![
            "train.total_epochs=300".into(),
            "train.warmup_epochs=5".into(),
            "train.base_lr=0.01".into(),
            "train.batch_size=2".into(),
            "train.eval_every=50".into(),
            "fusion.se_reduction=1".into(),
            "modalities.seeds=1".into(),
        ],
        seed: Some(11),
        ..Invocation::default()
    })
}
