//! Central-difference verification of the reverse-mode gradients: every
//! primitive op, the composed fusion and encoder blocks, and the full tiny
//! model, in f32 and in the f64 verification mode.

use mmsformer::verify;

fn show(r: &verify::CheckResult) {
    println!(
        "{}  {:<24} max rel err {:.3e} (threshold {:.0e})",
        if r.passed() { "ok  " } else { "FAIL" },
        r.name,
        r.max_rel_err,
        r.threshold
    );
}

fn main() -> mmsformer::Result<()> {
    println!("primitive ops, f32 (h = 1e-2):");
    for r in verify::op_grad_checks::<f32>(1e-2, 1e-3, 5)? {
        show(&r);
    }
    println!("\nprimitive ops, f64 verification mode (h = 1e-5):");
    for r in verify::op_grad_checks::<f64>(1e-5, 1e-7, 5)? {
        show(&r);
    }
    println!("\ncomposed blocks and the full tiny model:");
    show(&verify::fusion_block_check::<f32>(1e-2, 1e-2)?);
    show(&verify::fusion_block_check::<f64>(1e-5, 1e-5)?);
    show(&verify::encoder_block_check::<f32>(1e-2, 1e-2)?);
    show(&verify::encoder_block_check::<f64>(1e-5, 1e-5)?);
    show(&verify::full_model_check::<f32>(1e-2, 1e-2, 32)?);
    show(&verify::full_model_check::<f64>(1e-5, 1e-5, 32)?);
    println!("\nloss gradient vs every parameter (f64, strided coords):");
    let worst = verify::param_grad_check::<f64>(1e-5, 2)?;
    println!("max rel err {worst:.3e}");
    Ok(())
}
