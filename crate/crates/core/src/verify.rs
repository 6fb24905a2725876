//! Gradient verification suites over the op set and composed blocks, in
//! both element widths. Used by the `gradcheck` subcommand and the
//! acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderArch, EncoderConfig};
use crate::error::Result;
use crate::fusion::{FusionArch, FusionConfig};
use crate::label::IGNORE_INDEX;
use crate::model::{build, Model, ModelConfig};
use crate::nn::{Fwd, ParamBuilder, ParamStore};
use crate::tensor::{grad_check, grad_check_sampled, Element, Tensor, Var};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

fn rand_tensor<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("rand tensor shape")
}

/// Central-difference checks for every differentiable primitive, each over
/// `seeds` randomized small shapes. Returns the worst error per op.
pub fn op_grad_checks<E: Element>(h: f64, threshold: f64, seeds: u64) -> Result<Vec<CheckResult>> {
    let mut results: Vec<CheckResult> = Vec::new();
    let mut record = |name: &str, err: f64| {
        match results.iter_mut().find(|r| r.name == name) {
            Some(r) => r.max_rel_err = r.max_rel_err.max(err),
            None => results.push(CheckResult {
                name: name.to_string(),
                max_rel_err: err,
                threshold,
            }),
        }
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(2..5);
        let k = rng.gen_range(2..5);
        let n = rng.gen_range(2..5);

        let x = rand_tensor::<E>(&mut rng, &[m, k]);
        let b = rand_tensor::<E>(&mut rng, &[k, n]);
        let err = grad_check(
            |tape, leaf| {
                let bv = tape.leaf(b.clone(), false);
                let y = tape.matmul(leaf, bv)?;
                Ok(tape.sum_all(y))
            },
            &x,
            h,
        )?;
        record("matmul", err);

        let a2 = rand_tensor::<E>(&mut rng, &[m, k]);
        let err = grad_check(
            |tape, leaf| {
                let other = tape.leaf(a2.clone(), false);
                let y = tape.mul(leaf, other)?;
                let y = tape.add(y, leaf)?;
                Ok(tape.sum_all(y))
            },
            &x,
            h,
        )?;
        record("add_mul", err);

        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let hw = rng.gen_range(4..7);
        let img = rand_tensor::<E>(&mut rng, &[cin, hw, hw]);
        let w = rand_tensor::<E>(&mut rng, &[cout, cin, 3, 3]);
        let bias = rand_tensor::<E>(&mut rng, &[cout]);
        let err = grad_check(
            |tape, leaf| {
                let wv = tape.leaf(w.clone(), false);
                let bv = tape.leaf(bias.clone(), false);
                let y = tape.conv2d(leaf, wv, Some(bv), 1, 1, 1)?;
                Ok(tape.sum_all(y))
            },
            &img,
            h,
        )?;
        record("conv2d", err);

        // conv weight path
        let err = grad_check(
            |tape, leaf| {
                let xv = tape.leaf(img.clone(), false);
                let y = tape.conv2d(xv, leaf, None, 1, 1, 1)?;
                Ok(tape.sum_all(y))
            },
            &w,
            h,
        )?;
        record("conv2d_w", err);

        let rows = rng.gen_range(2..5);
        let cols = rng.gen_range(2..6);
        let sm_in = rand_tensor::<E>(&mut rng, &[rows, cols]);
        let weights = rand_tensor::<E>(&mut rng, &[rows, cols]);
        let err = grad_check(
            |tape, leaf| {
                let y = tape.softmax(leaf, 1)?;
                let wv = tape.leaf(weights.clone(), false);
                let y = tape.mul(y, wv)?;
                Ok(tape.sum_all(y))
            },
            &sm_in,
            h,
        )?;
        record("softmax", err);

        let c = rng.gen_range(2..6);
        let ln_rows = rng.gen_range(1..4);
        let ln_in = rand_tensor::<E>(&mut rng, &[ln_rows, c]);
        let gamma = rand_tensor::<E>(&mut rng, &[c]);
        let beta = rand_tensor::<E>(&mut rng, &[c]);
        let ln_weights = rand_tensor::<E>(&mut rng, &[ln_rows, c]);
        let err = grad_check(
            |tape, leaf| {
                let g = tape.leaf(gamma.clone(), false);
                let bt = tape.leaf(beta.clone(), false);
                let y = tape.layer_norm(leaf, g, bt, 1e-5)?;
                let wv = tape.leaf(ln_weights.clone(), false);
                let y = tape.mul(y, wv)?;
                Ok(tape.sum_all(y))
            },
            &ln_in,
            h,
        )?;
        record("layer_norm", err);

        let act_in = rand_tensor::<E>(&mut rng, &[m, n]);
        for (name, which) in [("gelu", 0), ("sigmoid", 1), ("relu", 2)] {
            let err = grad_check(
                |tape, leaf| {
                    let y = match which {
                        0 => tape.gelu(leaf),
                        1 => tape.sigmoid(leaf),
                        _ => tape.relu(leaf),
                    };
                    Ok(tape.sum_all(y))
                },
                &act_in,
                h,
            )?;
            record(name, err);
        }

        let up_in = rand_tensor::<E>(&mut rng, &[2, 3, 3]);
        let up_weights = rand_tensor::<E>(&mut rng, &[2, 5, 6]);
        let err = grad_check(
            |tape, leaf| {
                let y = tape.bilinear_upsample(leaf, 5, 6)?;
                let wv = tape.leaf(up_weights.clone(), false);
                let y = tape.mul(y, wv)?;
                Ok(tape.sum_all(y))
            },
            &up_in,
            h,
        )?;
        record("bilinear_upsample", err);

        let pool_in = rand_tensor::<E>(&mut rng, &[3, 4, 4]);
        let err = grad_check(
            |tape, leaf| {
                let pooled = tape.global_avg_pool(leaf)?;
                let s = tape.sum_all(pooled);
                let m = tape.mean_all(leaf);
                tape.add(s, m)
            },
            &pool_in,
            h,
        )?;
        record("pool_mean", err);

        let fuse_a = rand_tensor::<E>(&mut rng, &[3, 4, 4]);
        let fuse_w = rand_tensor::<E>(&mut rng, &[3, 6]);
        let fuse_b = rand_tensor::<E>(&mut rng, &[3]);
        let err = grad_check(
            |tape, leaf| {
                let other = tape.leaf(fuse_a.clone(), false);
                let wv = tape.leaf(fuse_w.clone(), false);
                let bv = tape.leaf(fuse_b.clone(), false);
                let y = tape.linear_fuse(&[leaf, other], wv, bv)?;
                Ok(tape.sum_all(y))
            },
            &rand_tensor::<E>(&mut rng, &[3, 4, 4]),
            h,
        )?;
        record("linear_fuse", err);

        let logits = rand_tensor::<E>(&mut rng, &[3, 3, 3]);
        let labels: Vec<u8> = (0..9)
            .map(|i| if i == 4 { IGNORE_INDEX } else { (i % 3) as u8 })
            .collect();
        let err = grad_check(
            |tape, leaf| tape.cross_entropy(leaf, &labels, IGNORE_INDEX),
            &logits,
            h,
        )?;
        record("cross_entropy", err);
    }
    Ok(results)
}

/// Gradient of `sum(fuse(inputs))` w.r.t. one modality input.
pub fn fusion_block_check<E: Element>(h: f64, threshold: f64) -> Result<CheckResult> {
    let mut store = ParamStore::<E>::new();
    let mut pb = ParamBuilder::new(&mut store, 404);
    let arch = pb.scoped("fusion", |pb| {
        FusionArch::build(pb, &FusionConfig::default(), 2, 4)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let other = rand_tensor::<E>(&mut rng, &[4, 6, 6]);
    let probe = rand_tensor::<E>(&mut rng, &[4, 6, 6]);
    let err = grad_check(
        |tape, leaf| {
            let mut fx = Fwd::new(tape, &store, false);
            let o = fx.tape.leaf(other.clone(), false);
            let fused = arch.fuse(&mut fx, &[leaf, o])?;
            Ok(tape.sum_all(fused))
        },
        &probe,
        h,
    )?;
    Ok(CheckResult {
        name: format!("fusion_block({})", E::DTYPE),
        max_rel_err: err,
        threshold,
    })
}

/// Gradient of `sum(stage-1 block(tokens))` w.r.t. the tokens.
pub fn encoder_block_check<E: Element>(h: f64, threshold: f64) -> Result<CheckResult> {
    let cfg = EncoderConfig::desk_default();
    let mut store = ParamStore::<E>::new();
    let mut pb = ParamBuilder::new(&mut store, 405);
    let arch = pb.scoped("encoder0", |pb| EncoderArch::build(pb, &cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // stage-2 geometry: 16 tokens of width 16, reduction 4
    let tokens = rand_tensor::<E>(&mut rng, &[16, 16]);
    let err = grad_check(
        |tape, leaf| {
            let mut fx = Fwd::new(tape, &store, false);
            let out = arch.stage_block(1, 0).forward(&mut fx, leaf, 4, 4)?;
            Ok(tape.sum_all(out))
        },
        &tokens,
        h,
    )?;
    Ok(CheckResult {
        name: format!("encoder_block({})", E::DTYPE),
        max_rel_err: err,
        threshold,
    })
}

/// Tiny full-model configuration used by the composed-model checks.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk_default();
    cfg.encoder = EncoderConfig::with_dims(&[4, 8, 16, 32], &[1, 1, 1, 1], &[1, 2, 4, 8]);
    cfg.decoder.embed_dim = 8;
    cfg.decoder.num_classes = 3;
    cfg.num_modalities = 2;
    cfg.fusion.se_reduction = 4;
    cfg.seed = 99;
    cfg
}

/// Gradient of `sum(encode(image).level4)` w.r.t. the image.
pub fn encoder_check<E: Element>(h: f64, threshold: f64, max_coords: usize) -> Result<CheckResult> {
    let cfg = tiny_model_config();
    let mut store = ParamStore::<E>::new();
    let mut pb = ParamBuilder::new(&mut store, 406);
    let arch = pb.scoped("encoder0", |pb| EncoderArch::build(pb, &cfg.encoder));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = rand_tensor::<E>(&mut rng, &[3, 32, 32]);
    let err = grad_check_sampled(
        |tape, leaf| {
            let mut fx = Fwd::new(tape, &store, false);
            let pyr = arch.encode(&mut fx, leaf)?;
            Ok(tape.sum_all(pyr.levels[3]))
        },
        &image,
        h,
        max_coords,
    )?;
    Ok(CheckResult {
        name: format!("encoder_stage4({})", E::DTYPE),
        max_rel_err: err,
        threshold,
    })
}

/// Gradient of the full model loss w.r.t. one input modality, probed on a
/// strided coordinate subset.
pub fn full_model_check<E: Element>(
    h: f64,
    threshold: f64,
    max_coords: usize,
) -> Result<CheckResult> {
    let cfg = tiny_model_config();
    let mut model: Model<E> = build(&cfg)?;
    // fresh trunc-normal(0.02) weights attenuate the input gradient to the
    // noise floor after four stages; widen them so the finite differences
    // actually measure something
    for id in model.store.ids().collect::<Vec<_>>() {
        let mut t = model.store.value(id).clone();
        for v in t.data_mut() {
            *v = E::from_f64(v.to_f64() * 4.0);
        }
        model.store.set(id, t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let other = rand_tensor::<E>(&mut rng, &[3, 32, 32]);
    let probe = rand_tensor::<E>(&mut rng, &[3, 32, 32]);
    let labels: Vec<u8> = (0..32 * 32).map(|i| (i % 3) as u8).collect();
    let err = grad_check_sampled(
        |tape, leaf| {
            let mut fx = Fwd::new(tape, &model.store, false);
            let o = fx.tape.leaf(other.clone(), false);
            let logits = model.forward_on_tape(&mut fx, &[leaf, o])?;
            tape.cross_entropy(logits, &labels, IGNORE_INDEX)
        },
        &probe,
        h,
        max_coords,
    )?;
    Ok(CheckResult {
        name: format!("full_model({})", E::DTYPE),
        max_rel_err: err,
        threshold,
    })
}

/// Central-difference check of the loss against every parameter of a tiny
/// model, probing `per_param` coordinates of each parameter tensor.
pub fn param_grad_check<E: Element>(h: f64, per_param: usize) -> Result<f64> {
    let cfg = tiny_model_config();
    let mut model: Model<E> = build(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let images = [
        rand_tensor::<E>(&mut rng, &[3, 32, 32]),
        rand_tensor::<E>(&mut rng, &[3, 32, 32]),
    ];
    let labels: Vec<u8> = (0..32 * 32).map(|i| (i % 3) as u8).collect();

    let loss_of = |model: &Model<E>| -> Result<f64> {
        let mut tape = crate::tensor::Tape::new();
        let mut fx = Fwd::new(&mut tape, &model.store, false);
        let vars: Vec<Var> = images
            .iter()
            .map(|img| fx.tape.leaf(img.clone(), false))
            .collect();
        let logits = model.forward_on_tape(&mut fx, &vars)?;
        let loss = tape.cross_entropy(logits, &labels, IGNORE_INDEX)?;
        Ok(tape.value(loss).scalar_value()?.to_f64())
    };

    // analytic gradients once
    let mut tape = crate::tensor::Tape::new();
    let mut fx = Fwd::new(&mut tape, &model.store, true);
    let vars: Vec<Var> = images
        .iter()
        .map(|img| fx.tape.leaf(img.clone(), false))
        .collect();
    let logits = model.forward_on_tape(&mut fx, &vars)?;
    let loss = tape.cross_entropy(logits, &labels, IGNORE_INDEX)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Option<Tensor<E>>> = (0..model.store.len()).map(|_| None).collect();
    for (tag, g) in tape.param_grads() {
        match &mut analytic[tag] {
            slot @ None => *slot = Some(g.clone()),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }
    drop(tape);

    let mut worst = 0.0f64;
    for id in model.store.ids().collect::<Vec<_>>() {
        let n = model.store.value(id).numel();
        let stride = (n / per_param.min(n)).max(1);
        let grads = analytic[id.index()].clone();
        for ci in (0..n).step_by(stride) {
            let orig = model.store.value(id).data()[ci];
            model.store.value_mut(id).data_mut()[ci] = E::from_f64(orig.to_f64() + h);
            let plus = loss_of(&model)?;
            model.store.value_mut(id).data_mut()[ci] = E::from_f64(orig.to_f64() - h);
            let minus = loss_of(&model)?;
            model.store.value_mut(id).data_mut()[ci] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ad = grads.as_ref().map_or(0.0, |g| g.data()[ci].to_f64());
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
