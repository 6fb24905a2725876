//! The fusion block's algebraic identities, checked live: identity-weight
//! linear fusion, modality-permutation equivariance, SE gate range, and
//! the zero-conv / zero-SE wiring relation.

use mmsformer::fusion::{FusionArch, FusionConfig};
use mmsformer::nn::{Fwd, ParamBuilder, ParamStore};
use mmsformer::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![c, h, w], data).unwrap()
}

fn main() -> mmsformer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = 8;

    // identity path: M=1, linear-only, identity weights
    let cfg = FusionConfig {
        linear_only: true,
        ..FusionConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let mut pb = ParamBuilder::new(&mut store, 0);
    let arch = FusionArch::build(&mut pb, &cfg, 1, c)?;
    let mut eye = Tensor::<f32>::zeros(&[c, c]);
    for i in 0..c {
        eye.data_mut()[i * c + i] = 1.0;
    }
    store.set(arch.fuse_w, eye)?;
    let x = rand_map(&mut rng, c, 6, 6);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, false);
    let v = fx.tape.leaf(x.clone(), false);
    let out = arch.fuse(&mut fx, &[v])?;
    println!(
        "identity-weight linear-only fuse is the identity: {}",
        fx.tape.value(out).bit_eq(&x)
    );

    // permutation equivariance: swap two modalities together with the
    // matching weight column blocks -> bit-identical output
    let mut store = ParamStore::<f32>::new();
    let mut pb = ParamBuilder::new(&mut store, 1);
    let arch = FusionArch::build(&mut pb, &FusionConfig::default(), 2, c)?;
    let a = rand_map(&mut rng, c, 5, 5);
    let b = rand_map(&mut rng, c, 5, 5);
    let w = store.value(arch.fuse_w).clone();
    let mut swapped = Tensor::<f32>::zeros(&[c, 2 * c]);
    for row in 0..c {
        for col in 0..c {
            swapped.data_mut()[row * 2 * c + col] = w.data()[row * 2 * c + c + col];
            swapped.data_mut()[row * 2 * c + c + col] = w.data()[row * 2 * c + col];
        }
    }
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, false);
    let va = fx.tape.leaf(a.clone(), false);
    let vb = fx.tape.leaf(b.clone(), false);
    let original = arch.fuse(&mut fx, &[va, vb])?;
    store.set(arch.fuse_w, swapped)?;
    let mut tape2 = Tape::new();
    let mut fx2 = Fwd::new(&mut tape2, &store, false);
    let vb2 = fx2.tape.leaf(b, false);
    let va2 = fx2.tape.leaf(a, false);
    let permuted = arch.fuse(&mut fx2, &[vb2, va2])?;
    println!(
        "modality permutation with matched weight blocks is bit-exact: {}",
        tape.value(original).bit_eq(tape2.value(permuted))
    );

    // SE gate values stay strictly inside (0, 1)
    let se = arch.se.as_ref().unwrap();
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, false);
    let v = fx.tape.leaf(rand_map(&mut rng, c, 5, 5), false);
    let gate = se.gate(&mut fx, v)?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for g in fx.tape.value(gate).data() {
        lo = lo.min(*g);
        hi = hi.max(*g);
    }
    println!("SE gate range ({lo:.4}, {hi:.4}) inside (0,1): {}", lo > 0.0 && hi < 1.0);

    // wiring relation: zero convs + zero SE second layer force
    // full = proj_out(proj_in(F_hat)) + 0.5 * F_hat
    let mut store = ParamStore::<f32>::new();
    let mut pb = ParamBuilder::new(&mut store, 2);
    let arch = FusionArch::build(&mut pb, &FusionConfig::default(), 2, c)?;
    for conv in &arch.convs {
        store.set(conv.w, Tensor::zeros(store.value(conv.w).shape()))?;
        store.set(conv.b, Tensor::zeros(&[c]))?;
    }
    let se = arch.se.as_ref().unwrap();
    store.set(se.w2, Tensor::zeros(store.value(se.w2).shape()))?;
    let a = rand_map(&mut rng, c, 5, 5);
    let b = rand_map(&mut rng, c, 5, 5);
    let mut tape = Tape::new();
    let mut fx = Fwd::new(&mut tape, &store, false);
    let va = fx.tape.leaf(a, false);
    let vb = fx.tape.leaf(b, false);
    let full = arch.fuse(&mut fx, &[va, vb])?;
    let fhat = arch.linear_fuse(&mut fx, &[va, vb])?;
    let projected = arch.multi_scale_mix(&mut fx, fhat)?;
    let half = fx.tape.scale(fhat, 0.5);
    let want = fx.tape.add(projected, half)?;
    let diff = fx.tape.value(full).max_abs_diff(fx.tape.value(want))?;
    println!("zero-conv/zero-SE wiring identity holds to {diff:.2e}");
    Ok(())
}
