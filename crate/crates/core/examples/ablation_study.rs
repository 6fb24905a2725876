//! Trains all five fusion-block variants on an xor-fusion dataset and
//! prints the comparison table. Short single-seed demo settings; the
//! acceptance suite runs the three-seed version.

use mmsformer::cli::{run_ablate, run_synth, Invocation};

fn main() -> mmsformer::Result<()> {
    let base = std::env::temp_dir().join("mmsformer-examples/ablation");
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
    run_ablate(&Invocation {
        dataset: Some(data),
        out: Some(base.join("run")),
        overrides: vec![
            "train.total_epochs=150".into(),
            "train.warmup_epochs=5".into(),
            "train.base_lr=0.01".into(),
            "train.batch_size=2".into(),
            "train.eval_every=50".into(),
            "fusion.se_reduction=1".into(),
            "ablate.seeds=1".into(),
        ],
        seed: Some(11),
        ..Invocation::default()
    })
}
