//! Analytic parameter/FLOP accounting for the desk-scale model and the
//! full-scale preset, plus the published-budget comparison.

use mmsformer::cost;
use mmsformer::model::ModelConfig;

fn main() -> mmsformer::Result<()> {
    let desk = ModelConfig::desk_default();
    let report = cost::count_flops(&desk, 64, 64)?;
    println!("desk-scale model at 64x64, 2 modalities:\n");
    println!("{}", report.to_text(2));

    let full = ModelConfig::full_scale_preset();
    let report = cost::count_flops(&full, 512, 512)?;
    println!("\nfull-scale preset at 512x512, 4 modalities:\n");
    for (name, params, flops) in report.component_totals() {
        println!(
            "{name:<9} {:>12.2} M params  {:>8.2} GFLOPs",
            params as f64 / 1e6,
            cost::gflops(flops)
        );
    }
    println!();
    println!("{}", cost::full_scale_comparison()?);

    // the cross-check the test suite holds exactly: analytic counts equal
    // the built model's parameter elements
    let built = mmsformer::model::build::<f32>(&desk)?;
    println!(
        "analytic {} == built {} : {}",
        cost::count_params(&desk)?.total_params(),
        built.store.total_elements(),
        cost::count_params(&desk)?.total_params() == built.store.total_elements()
    );
    Ok(())
}
