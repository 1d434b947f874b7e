//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pirl_core::contrastive::{ema, nce_loss, nce_match_prob, npid_loss, pirl_loss, MemoryBank, NceConfig};
use pirl_core::data::{load_cifar10, synth_dataset, Dataset, ImageU8};
use pirl_core::eval::{invariance_histogram, layer_probe, linear_probe, InvarianceConfig, Layer, ProbeConfig, ProbeReport};
use pirl_core::model::{EncoderModel, ModelConfig, SlotOrder};
use pirl_core::tensor::{ParamStore, Tape, Tensor, Var};
use pirl_core::training::{
    contrastive_forward, covariant_forward, pretrain, TaskKind, TrainConfig, Trainer, TransformedInput,
};
use pirl_core::transforms::{jigsaw_transform, rotate_image, AugmentConfig, JigsawGeometry, PermutationSet};
use pirl_core::Result;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

// ---------------------------------------------------------------------------
// Gradient suite

type Build = fn(&ParamStore<f64>, &mut Tape<f64>, u64) -> Result<Var>;

pub struct GradCase {
    pub name: &'static str,
    params: &'static [(&'static str, &'static [usize])],
    build: Build,
    /// Keeps inputs at least this far from zero (for kinks at the origin).
    margin: f64,
}

fn p(s: &ParamStore<f64>, t: &mut Tape<f64>, name: &str) -> Result<Var> {
    t.param(s, s.expect_id(name)?)
}

/// `sum(w * x)` with fixed random weights, so every output entry matters.
fn weighted(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(Tensor::randn(&shape, 1.0, seed ^ 0x5eed))?;
    let m = t.mul(x, w)?;
    t.sum(m)
}

pub fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d stride 2 pad 1",
            params: &[("x", &[2, 3, 8, 8]), ("w", &[4, 3, 3, 3]), ("b", &[4])],
            build: |s, t, seed| {
                let (x, w, b) = (p(s, t, "x")?, p(s, t, "w")?, p(s, t, "b")?);
                let y = t.conv2d(x, w, b, 2, 1)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "conv2d stride 1 pad 0",
            params: &[("x", &[1, 2, 5, 6]), ("w", &[3, 2, 2, 3]), ("b", &[3])],
            build: |s, t, seed| {
                let (x, w, b) = (p(s, t, "x")?, p(s, t, "w")?, p(s, t, "b")?);
                let y = t.conv2d(x, w, b, 1, 0)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "relu",
            params: &[("x", &[4, 5])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.relu(x)?;
                weighted(t, y, seed)
            },
            margin: 1e-2,
        },
        GradCase {
            name: "avg_pool2d",
            params: &[("x", &[2, 3, 5, 6])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.avg_pool2d(x)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "global_avg_pool",
            params: &[("x", &[2, 3, 4, 5])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.global_avg_pool(x)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "matmul",
            params: &[("a", &[3, 4]), ("b", &[4, 5])],
            build: |s, t, seed| {
                let (a, b) = (p(s, t, "a")?, p(s, t, "b")?);
                let y = t.matmul(a, b)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "add_bias",
            params: &[("x", &[3, 4]), ("b", &[4])],
            build: |s, t, seed| {
                let (x, b) = (p(s, t, "x")?, p(s, t, "b")?);
                let y = t.add_bias(x, b)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "linear",
            params: &[("x", &[3, 4]), ("w", &[4, 2]), ("b", &[2])],
            build: |s, t, seed| {
                let (x, w, b) = (p(s, t, "x")?, p(s, t, "w")?, p(s, t, "b")?);
                let y = t.linear(x, w, b)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "add",
            params: &[("a", &[3, 4]), ("b", &[3, 4])],
            build: |s, t, seed| {
                let (a, b) = (p(s, t, "a")?, p(s, t, "b")?);
                let y = t.add(a, b)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "mul",
            params: &[("a", &[3, 4]), ("b", &[3, 4])],
            build: |s, t, seed| {
                let (a, b) = (p(s, t, "a")?, p(s, t, "b")?);
                let y = t.mul(a, b)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "scale",
            params: &[("x", &[3, 4])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.scale(x, -1.7)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "dot",
            params: &[("a", &[7]), ("b", &[7])],
            build: |s, t, _| {
                let (a, b) = (p(s, t, "a")?, p(s, t, "b")?);
                t.dot(a, b)
            },
            margin: 0.0,
        },
        GradCase {
            name: "sum",
            params: &[("x", &[3, 4])],
            build: |s, t, _| {
                let x = p(s, t, "x")?;
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            margin: 0.0,
        },
        GradCase {
            name: "mean",
            params: &[("x", &[3, 4])],
            build: |s, t, _| {
                let x = p(s, t, "x")?;
                let sq = t.mul(x, x)?;
                t.mean(sq)
            },
            margin: 0.0,
        },
        GradCase {
            name: "concat",
            params: &[("a", &[2, 3]), ("b", &[2, 4])],
            build: |s, t, seed| {
                let (a, b) = (p(s, t, "a")?, p(s, t, "b")?);
                let y = t.concat(&[a, b, a])?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "gather_rows",
            params: &[("x", &[4, 3])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.gather_rows(x, &[2, 0, 2, 3])?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "reshape",
            params: &[("x", &[2, 6])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.reshape(x, &[3, 4])?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "l2_normalize sum 128-d",
            params: &[("v", &[128])],
            build: |s, t, _| {
                let v = p(s, t, "v")?;
                let y = t.l2_normalize(v)?;
                t.sum(y)
            },
            margin: 0.0,
        },
        GradCase {
            name: "l2_normalize rows",
            params: &[("x", &[3, 5])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.l2_normalize(x)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "row_dot",
            params: &[("a", &[3, 5]), ("b", &[3, 5])],
            build: |s, t, seed| {
                let (a, b) = (p(s, t, "a")?, p(s, t, "b")?);
                let y = t.row_dot(a, b)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "batched_matvec",
            params: &[("m", &[2, 4, 3]), ("v", &[2, 3])],
            build: |s, t, seed| {
                let (m, v) = (p(s, t, "m")?, p(s, t, "v")?);
                let y = t.batched_matvec(m, v)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "nce_rows",
            params: &[("x", &[3, 5])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.nce_rows(x)?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "softmax_cross_entropy",
            params: &[("x", &[3, 5])],
            build: |s, t, seed| {
                let x = p(s, t, "x")?;
                let y = t.softmax_cross_entropy(x, &[0, 4, 2])?;
                weighted(t, y, seed)
            },
            margin: 0.0,
        },
        GradCase {
            name: "nce loss, 8-d embeddings, N=4",
            params: &[("m", &[2, 8]), ("c", &[2, 8]), ("n", &[2, 4, 8])],
            build: |s, t, _| {
                let (m, c, n) = (p(s, t, "m")?, p(s, t, "c")?, p(s, t, "n")?);
                let rows = pirl_core::contrastive::nce_loss_rows(t, m, c, n, 0.07)?;
                t.mean(rows)
            },
            margin: 0.0,
        },
        GradCase {
            name: "pirl loss on embeddings",
            params: &[("m", &[2, 8]), ("f", &[2, 8]), ("g", &[2, 8]), ("n", &[2, 4, 8])],
            build: |s, t, _| {
                let (m, f, g, n) = (p(s, t, "m")?, p(s, t, "f")?, p(s, t, "g")?, p(s, t, "n")?);
                let cfg = NceConfig {
                    temperature: 0.07,
                    negatives: 4,
                    lambda: 0.5,
                };
                Ok(pirl_loss(t, m, f, g, n, &cfg)?.total)
            },
            margin: 0.0,
        },
    ]
}

fn random_store(case: &GradCase, seed: u64) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (k, (name, shape)) in case.params.iter().enumerate() {
        let mut t = Tensor::<f64>::randn(shape, 1.0, seed.wrapping_mul(131).wrapping_add(k as u64));
        if case.margin > 0.0 {
            for v in t.data_mut() {
                if v.abs() < case.margin {
                    *v = if *v < 0.0 { *v - case.margin } else { *v + case.margin };
                }
            }
        }
        s.insert(*name, t)?;
    }
    Ok(s)
}

/// Central differences against reverse mode over every parameter entry.
///
/// Returns `‖a - n‖ / max(‖a‖, ‖n‖)` over the whole gradient vector, or `None`
/// when some ±eps perturbation changes the relu pattern, i.e. the difference
/// quotient straddles a kink and is not an oracle for the derivative.
pub fn central_difference<F>(store: &mut ParamStore<f64>, f: F) -> Result<Option<f64>>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<(f64, Vec<bool>)> {
        let mut t = Tape::new();
        let out = f(s, &mut t)?;
        Ok((t.value(out).item(), t.relu_pattern()))
    };
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let base_pattern = tape.relu_pattern();
    tape.backward(out, store)?;
    drop(tape);

    let (mut diff, mut an, mut nn) = (0f64, 0f64, 0f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).numel() {
            let analytic = store.grad(id)[k];
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + GRAD_EPS;
            let (plus, pp) = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - GRAD_EPS;
            let (minus, pm) = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            if pp != base_pattern || pm != base_pattern {
                return Ok(None);
            }
            let numeric = (plus - minus) / (2.0 * GRAD_EPS);
            diff += (analytic - numeric).powi(2);
            an += analytic * analytic;
            nn += numeric * numeric;
        }
    }
    let scale = an.sqrt().max(nn.sqrt());
    Ok(Some(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale }))
}

pub fn check_op(case: &GradCase, seed: u64) -> Result<f64> {
    let mut store = random_store(case, seed)?;
    let build = case.build;
    central_difference(&mut store, |s, t| build(s, t, seed))?
        .ok_or_else(|| pirl_core::Error::InvalidArgument(format!("{}: inputs straddle a kink", case.name)))
}

/// A trunk small enough for exhaustive finite differences.
pub fn toy_model(seed: u64) -> Result<EncoderModel<f64>> {
    let cfg = ModelConfig {
        channels: [2, 2, 3, 3],
        embed_dim: 4,
        grid: 2,
        cls_classes: 3,
        init_seed: seed,
    };
    let mut m = EncoderModel::<f32>::new(cfg)?.cast::<f64>();
    // Nonzero biases and classifier weights so every gradient path is exercised.
    let ids: Vec<_> = m.params().ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if m.params().name(id).ends_with("bias") || m.params().name(id).starts_with("covariant") {
            let shape = m.params().value(id).shape().to_vec();
            *m.params_mut().value_mut(id) = Tensor::randn(&shape, 0.1, seed ^ ((k as u64 + 1) << 8));
        }
    }
    Ok(m)
}

pub const TOY_SIDE: usize = 16;
/// Instances tried per seed before giving up on finding one off every relu kink.
pub const KINK_ATTEMPTS: u64 = 64;

fn with_params(base: &EncoderModel<f64>, s: &ParamStore<f64>) -> Result<EncoderModel<f64>> {
    let mut m = base.clone();
    m.load_params(s)?;
    Ok(m)
}

/// Runs the check on the first instance derived from `seed` whose ±eps box
/// lies on one smooth piece. Returns the error and the instance index used.
fn model_check(
    seed: u64,
    build: impl Fn(&EncoderModel<f64>, &mut Tape<f64>, u64) -> Result<Var>,
) -> Result<(f64, u64)> {
    for attempt in 0..KINK_ATTEMPTS {
        let instance = seed * KINK_ATTEMPTS + attempt;
        let base = toy_model(instance)?;
        let mut store = base.params().clone();
        let r = central_difference(&mut store, |s, t| {
            let m = with_params(&base, s)?;
            build(&m, t, instance)
        })?;
        if let Some(err) = r {
            return Ok((err, attempt));
        }
    }
    Err(pirl_core::Error::InvalidArgument(format!("no kink-free instance for seed {seed}")))
}

/// Largest relative error of the head-f path through the trunk.
pub fn check_head_f(seed: u64) -> Result<(f64, u64)> {
    model_check(seed, |m, t, i| {
        let xv = t.constant(Tensor::randn(&[2, 3, TOY_SIDE, TOY_SIDE], 1.0, i + 1000))?;
        let trunk = m.encode_trunk(t, xv)?;
        let f = m.head_f(t, trunk.pooled)?;
        weighted(t, f, i)
    })
}

/// Largest relative error of the patch pipeline into head g.
pub fn check_head_g(seed: u64) -> Result<(f64, u64)> {
    model_check(seed, |m, t, i| {
        let xv = t.constant(Tensor::randn(&[8, 3, TOY_SIDE, TOY_SIDE], 1.0, i + 2000))?;
        let trunk = m.encode_trunk(t, xv)?;
        let g = m.head_g(t, trunk.pooled, SlotOrder::Shuffled(i))?;
        weighted(t, g, i)
    })
}

/// The full objective on two images and four negatives, every parameter checked.
pub fn check_full_pirl(seed: u64, rotation: bool) -> Result<(f64, u64)> {
    let nce = NceConfig {
        temperature: 0.07,
        negatives: 4,
        lambda: 0.5,
    };
    model_check(seed, |m, t, i| {
        let views = Tensor::randn(&[2, 3, TOY_SIDE, TOY_SIDE], 1.0, i + 3000);
        let transformed = if rotation {
            TransformedInput::Whole(Tensor::randn(&[2, 3, TOY_SIDE, TOY_SIDE], 1.0, i + 4000))
        } else {
            TransformedInput::Patches(Tensor::randn(&[8, 3, TOY_SIDE, TOY_SIDE], 1.0, i + 4000))
        };
        let bank = Tensor::randn(&[2, 4], 1.0, i + 5000);
        let negs = Tensor::randn(&[2, 4, 4], 1.0, i + 6000);
        let out = contrastive_forward(m, t, views, Some(transformed), bank, negs, &nce, SlotOrder::Shuffled(i))?;
        Ok(out.loss)
    })
}

pub fn check_covariant(seed: u64) -> Result<(f64, u64)> {
    model_check(seed, |m, t, i| {
        let x = Tensor::randn(&[8, 3, TOY_SIDE, TOY_SIDE], 1.0, i + 7000);
        covariant_forward(m, t, x, &[2, 0])
    })
}

/// Worst error per check over all seeds.
pub fn gradient_suite(seeds: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut worst = 0f64;
        for seed in 0..seeds {
            worst = worst.max(check_op(&case, seed)?);
        }
        out.push((case.name.to_string(), worst));
    }
    let model: [(&str, fn(u64) -> Result<(f64, u64)>); 5] = [
        ("head_f through trunk", check_head_f),
        ("patches through head_g", check_head_g),
        ("full pirl loss, jigsaw", |s| check_full_pirl(s, false)),
        ("full pirl loss, rotation", |s| check_full_pirl(s, true)),
        ("covariant classifier", check_covariant),
    ];
    for (name, f) in model {
        let mut worst = 0f64;
        for seed in 0..seeds {
            worst = worst.max(f(seed)?.0);
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss identities

fn randv(d: usize, seed: u64) -> Vec<f64> {
    Tensor::<f64>::randn(&[d], 1.0, seed).into_data()
}

/// λ = 0 total against the instance-discrimination loss, compared bitwise.
pub fn lambda_zero_bits_equal(seed: u64) -> Result<bool> {
    let (b, n, d) = (3, 5, 6);
    let m = Tensor::<f64>::randn(&[b, d], 1.0, seed);
    let f = Tensor::<f64>::randn(&[b, d], 1.0, seed + 1);
    let g = Tensor::<f64>::randn(&[b, d], 1.0, seed + 2);
    let negs = Tensor::<f64>::randn(&[b, n, d], 1.0, seed + 3);
    let cfg = NceConfig {
        temperature: 0.07,
        negatives: n,
        lambda: 0.0,
    };
    let mut t = Tape::new();
    let (mv, fv, gv, nv) = (t.constant(m.clone())?, t.constant(f.clone())?, t.constant(g)?, t.constant(negs.clone())?);
    let pirl = pirl_loss(&mut t, mv, fv, gv, nv, &cfg)?.total;
    let mut t2 = Tape::new();
    let (mv, fv, nv) = (t2.constant(m)?, t2.constant(f)?, t2.constant(negs)?);
    let npid = npid_loss(&mut t2, mv, fv, nv, cfg.temperature)?;
    Ok(t.value(pirl).item().to_bits() == t2.value(npid).item().to_bits())
}

/// Largest deviation of h from 1/(N+1) when every similarity is equal.
pub fn equal_similarity_error() -> Result<f64> {
    let v = randv(16, 99);
    let mut worst = 0f64;
    for n in [1usize, 2, 7, 64, 256] {
        let negs: Vec<&[f64]> = (0..n).map(|_| v.as_slice()).collect();
        let h = nce_match_prob(&v, &v, &negs, 0.07)?;
        worst = worst.max((h - 1.0 / (n as f64 + 1.0)).abs());
    }
    Ok(worst)
}

/// |loss - 2 ln 2| for N = 1 with equal similarities.
pub fn single_negative_error() -> Result<f64> {
    let v = randv(16, 7);
    let w: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
    let l = nce_loss(&v, &w, &[&v], 0.07)?;
    Ok((l - 2.0 * std::f64::consts::LN_2).abs())
}

/// Whether the loss is bit-identical after shuffling negatives, and the largest deviation seen.
pub fn negative_permutation_invariance(seed: u64) -> Result<(bool, f64)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let m = randv(32, seed);
    let c = randv(32, seed + 1);
    let negs: Vec<Vec<f64>> = (0..64).map(|k| randv(32, seed * 1000 + 10 + k)).collect();
    let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    let base = nce_loss(&m, &c, &refs, 0.07)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut bits = true;
    let mut worst = 0f64;
    for _ in 0..10 {
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut rng);
        let l = nce_loss(&m, &c, &shuffled, 0.07)?;
        bits &= l.to_bits() == base.to_bits();
        worst = worst.max((l - base).abs());
    }
    // Same property on the tape path used for training.
    let mut flat = Vec::new();
    for n in &negs {
        flat.extend_from_slice(n);
    }
    let mut rev = Vec::new();
    for n in negs.iter().rev() {
        rev.extend_from_slice(n);
    }
    let tape_loss = |neg_data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let mv = t.constant(Tensor::from_slice(&[1, 32], &m)?)?;
        let cv = t.constant(Tensor::from_slice(&[1, 32], &c)?)?;
        let nv = t.constant(Tensor::new(vec![1, 64, 32], neg_data)?)?;
        let r = pirl_core::contrastive::nce_loss_rows(&mut t, mv, cv, nv, 0.07)?;
        Ok(t.value(r).data()[0])
    };
    let (a, b) = (tape_loss(flat)?, tape_loss(rev)?);
    bits &= a.to_bits() == b.to_bits();
    worst = worst.max((a - b).abs());
    Ok((bits, worst))
}

// ---------------------------------------------------------------------------
// Memory bank

/// Largest deviation of `|m_k - f|` from `0.5^k |m_0 - f|` over `k` updates,
/// in units of the float rounding budget `k * eps * (|m_0| + |f|)`.
pub fn ema_geometric_error(seed: u64, k: usize) -> f64 {
    let f = randv(32, seed);
    let mut m = randv(32, seed + 1);
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dist = |a: &[f64]| a.iter().zip(&f).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let d0 = dist(&m);
    let scale = norm(&m) + norm(&f);
    let mut worst = 0f64;
    for step in 1..=k {
        m = ema(&m, &f, 0.5);
        let expect = d0 * 0.5f64.powi(step as i32);
        worst = worst.max((dist(&m) - expect).abs() / (step as f64 * f64::EPSILON * scale));
    }
    worst
}

/// Angles between a re-normalized bank row and a constant target over updates.
pub fn renormalized_angles(seed: u64, k: usize) -> Result<Vec<f64>> {
    let f = randv(16, seed);
    let mut bank = MemoryBank::<f64>::new(1, 16, 0.5, seed)?;
    let fu: Vec<f64> = {
        let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        f.iter().map(|x| x / n).collect()
    };
    let angle = |r: &[f64]| r.iter().zip(&fu).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0).acos();
    let mut out = vec![angle(bank.row(0))];
    for _ in 0..k {
        bank.update(0, &f)?;
        out.push(angle(bank.row(0)));
    }
    Ok(out)
}

/// One training step with the bank frozen and one with it live; returns
/// whether parameters match bitwise and whether only the live bank moved.
pub fn frozen_vs_live_bank() -> Result<(bool, bool)> {
    let data = synth_dataset(16, 3)?;
    let mut cfg = TrainConfig::tiny(TaskKind::PirlJigsaw);
    cfg.batch_size = 8;
    cfg.nce.negatives = 4;
    let run = |frozen: bool| -> Result<(ParamStore<f32>, Tensor<f32>, Tensor<f32>)> {
        let mut tr = Trainer::new(&cfg, &data)?;
        tr.bank_frozen = frozen;
        let before = tr.bank.as_ref().expect("bank").rows().clone();
        let batch = tr.batches(0).remove(0);
        tr.step(0, 0, &batch)?;
        let after = tr.bank.as_ref().expect("bank").rows().clone();
        Ok((tr.model.params().clone(), before, after))
    };
    let (pf, bf0, bf1) = run(true)?;
    let (pl, bl0, bl1) = run(false)?;
    let params_equal = pf.ids().all(|id| {
        let (a, b) = (pf.value(id).data(), pl.value(pl.expect_id(pf.name(id)).expect("same layout")).data());
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let frozen_still = bf0.data() == bf1.data();
    let live_moved = bl0.data() != bl1.data();
    Ok((params_equal, frozen_still && live_moved))
}

// ---------------------------------------------------------------------------
// Transform algebra

pub fn random_image(side: usize, seed: u64) -> ImageU8 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let px = (0..side * side * 3).map(|_| rng.random::<u8>()).collect();
    ImageU8::new(side, side, px).expect("sized buffer")
}

/// Whether un-permuting every jigsaw output recovers one and the same cell order.
pub fn jigsaw_inverse_holds(seed: u64) -> Result<bool> {
    let img = random_image(32, seed);
    let pset = PermutationSet::generate(3, 20, seed)?;
    let geom = JigsawGeometry {
        working_size: 48,
        grid: 3,
        patch: 12,
        jitter: 2,
    };
    let stats = synth_dataset(8, 0)?.channel_stats();
    let aug = AugmentConfig::jigsaw();
    let reference = jigsaw_transform(&img, 0, &pset, &aug, &geom, &stats, seed)?.unpermute(&pset)?;
    for id in 0..pset.len() {
        let ps = jigsaw_transform(&img, id, &pset, &aug, &geom, &stats, seed)?;
        if ps.unpermute(&pset)?.data() != reference.data() {
            return Ok(false);
        }
        // Slot j holds cell perm[j].
        let perm = pset.get(id)?;
        let width = ps.patches.numel() / 9;
        for (slot, &cell) in perm.iter().enumerate() {
            let cell = cell as usize;
            if ps.patches.data()[slot * width..(slot + 1) * width] != reference.data()[cell * width..(cell + 1) * width] {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Rotation is a cyclic group of order exactly 4 on a non-symmetric image.
pub fn rotation_group_holds(seed: u64) -> Result<bool> {
    let img = random_image(7, seed);
    let rot = |im: &ImageU8, k| rotate_image(im, k);
    for a in 0..4 {
        for b in 0..4 {
            if rot(&rot(&img, a)?, b)? != rot(&img, (a + b) % 4)? {
                return Ok(false);
            }
        }
    }
    let mut cur = img.clone();
    for k in 1..=4 {
        cur = rot(&cur, 1)?;
        if (cur == img) != (k == 4) {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn perm_sets_distinct(g: usize, n: usize, seed: u64) -> Result<bool> {
    let set = PermutationSet::generate(g, n, seed)?;
    let mut all: Vec<&Vec<u8>> = set.perms().iter().collect();
    all.sort();
    all.dedup();
    Ok(all.len() == n && set.len() == n)
}

/// (greedy, random) minimum pairwise Hamming distances.
pub fn greedy_vs_random(n: usize, seed: u64) -> Result<(usize, usize)> {
    let greedy = PermutationSet::generate(3, n, seed)?.min_pairwise_hamming();
    let random = PermutationSet::random(3, n, seed)?.min_pairwise_hamming();
    Ok((greedy, random))
}

// ---------------------------------------------------------------------------
// Determinism

pub fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .expect("readable dir")
        .map(|e| e.expect("entry").path())
        .collect();
    v.sort();
    v
}

/// Runs a config twice into fresh directories; returns the names of files
/// that differ (timing excluded) and the file list.
pub fn determinism_diff(cfg: &TrainConfig, data: &Dataset, threads: [usize; 2]) -> Result<(Vec<String>, Vec<String>)> {
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    for (d, &t) in dirs.iter().zip(&threads) {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().expect("pool");
        pool.install(|| pretrain(cfg, data, Some(d.path())))?;
    }
    let names: Vec<String> = files_in(dirs[0].path())
        .iter()
        .map(|p| p.file_name().expect("name").to_string_lossy().into_owned())
        .filter(|n| n != "timing.jsonl")
        .collect();
    let differing = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).ok() != std::fs::read(dirs[1].path().join(n)).ok())
        .cloned()
        .collect();
    Ok((differing, names))
}

// ---------------------------------------------------------------------------
// Desk-scale runs on CIFAR-10

pub const CIFAR_ENV: &str = "PIRL_CIFAR10_DIR";

pub struct Desk {
    pub train: Dataset,
    pub test: Dataset,
}

impl Desk {
    /// The 5,000-image pretraining subset and the full test split, when the data is present.
    pub fn load() -> std::result::Result<Self, String> {
        let dir = std::env::var_os(CIFAR_ENV).ok_or_else(|| format!("{CIFAR_ENV} is not set; CIFAR-10 is not available"))?;
        let c = load_cifar10(Path::new(&dir)).map_err(|e| format!("loading CIFAR-10: {e}"))?;
        Ok(Self {
            train: c.train.head(5000),
            test: c.test,
        })
    }

    pub fn config(task: TaskKind) -> TrainConfig {
        TrainConfig {
            task,
            seed: 0,
            ..TrainConfig::default()
        }
    }

    pub fn pretrain(&self, cfg: &TrainConfig) -> Result<EncoderModel<f32>> {
        Ok(pretrain(cfg, &self.train, None)?.model)
    }

    pub fn probe_cfg(layer: Layer) -> ProbeConfig {
        ProbeConfig {
            layer,
            ..ProbeConfig::default()
        }
    }

    pub fn pooled_probe(&self, model: &EncoderModel<f32>, cfg: &TrainConfig) -> Result<ProbeReport> {
        let stats = cfg.stats.unwrap_or_else(|| self.train.channel_stats());
        linear_probe(model, &self.train, &self.test, cfg.views.size, &stats, &Self::probe_cfg(Layer::Pooled))
    }

    pub fn layer_probe(&self, model: &EncoderModel<f32>, cfg: &TrainConfig) -> Result<Vec<ProbeReport>> {
        let stats = cfg.stats.unwrap_or_else(|| self.train.channel_stats());
        layer_probe(model, &self.train, &self.test, cfg.views.size, &stats, &ProbeConfig::default())
    }

    pub fn mean_distance(&self, model: &EncoderModel<f32>, cfg: &TrainConfig) -> Result<f64> {
        let mut cfg = cfg.clone();
        cfg.stats.get_or_insert_with(|| self.train.channel_stats());
        Ok(invariance_histogram(model, &cfg, &self.train, &InvarianceConfig::default())?.mean)
    }
}
