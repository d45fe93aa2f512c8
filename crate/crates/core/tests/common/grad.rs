//! Analytic gradients against central finite differences, in f64. Each check
//! returns `(label, relative error)` pairs.

use candle_core::{DType, Device, Tensor, Var, D};
use ct_sfda::adapt::compose_t;
use ct_sfda::losses::{cross_entropy_t, mse_t, tsallis_t};
use ct_sfda::models::warp::CODEBOOK;
use ct_sfda::models::{Backbone, BackboneConfig, Mode, ModelParams, UNet, UNetConfig, WarpBlock, WarpConfig};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub type Errors = Vec<(String, f64)>;

fn dev() -> Device {
    Device::Cpu
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Central differences of `f` with respect to every entry of `x`.
fn fd_tensor(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let base = flat(x);
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += EPS;
            minus[i] -= EPS;
            let p = Tensor::from_vec(plus, x.shape(), &dev()).unwrap();
            let m = Tensor::from_vec(minus, x.shape(), &dev()).unwrap();
            (f(&p) - f(&m)) / (2.0 * EPS)
        })
        .collect()
}

/// Central differences of `f` with respect to array `name` of `params`.
fn fd_param(params: &ModelParams, name: &str, f: impl Fn() -> f64) -> Vec<f64> {
    let orig = params.get(name).unwrap().copy().unwrap();
    let g = fd_tensor(&orig, |t| {
        params.set(name, t).unwrap();
        f()
    });
    params.set(name, &orig).unwrap();
    g
}

fn input_grad_err(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let v = Var::from_tensor(x).unwrap();
    let grads = f(v.as_tensor()).backward().unwrap();
    let analytic = flat(grads.get(v.as_tensor()).unwrap());
    let numeric = fd_tensor(x, |t| scalar(&f(t)));
    rel_err(&analytic, &numeric)
}

/// Every trainable array of `p` accepted by `keep`, differentiating `loss`.
fn param_grad_errs(p: &ModelParams, keep: impl Fn(&str) -> bool, loss: impl Fn() -> Tensor) -> Errors {
    let grads = loss().backward().unwrap();
    p.trainable_names()
        .into_iter()
        .filter(|n| keep(n))
        .map(|name| {
            let analytic = flat(grads.get(p.var(&name).unwrap().as_tensor()).unwrap());
            let numeric = fd_param(p, &name, || scalar(&loss()));
            let e = rel_err(&analytic, &numeric);
            (name, e)
        })
        .collect()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &dev()).unwrap()
}

pub fn losses() -> Errors {
    let target = randn(&[2, 1, 6], 1);
    let labels = Tensor::new(&[0u32, 2, 1], &dev()).unwrap();
    let mut out = vec![
        (
            "mse".into(),
            input_grad_err(&randn(&[2, 1, 6], 2), |x| mse_t(&target, x).unwrap()),
        ),
        (
            "cross entropy".into(),
            input_grad_err(&randn(&[3, 3], 3), |z| cross_entropy_t(z, &labels).unwrap()),
        ),
    ];
    for q in [2.0, 1.5, 3.0] {
        let e = input_grad_err(&randn(&[4, 3], 4), |z| {
            let p = candle_nn::ops::softmax(z, D::Minus1).unwrap();
            tsallis_t(&p, q).unwrap()
        });
        out.push((format!("tsallis q={q}"), e));
    }
    out
}

fn small_backbone(dropout: f64) -> (Backbone, ModelParams) {
    let net = Backbone::new(BackboneConfig {
        kernel_size: 4,
        stride: 2,
        channels: [3, 4, 4],
        dropout,
        ..BackboneConfig::new(2, 32, 3)
    })
    .unwrap();
    let p = net.init(5, DType::F64, &dev()).unwrap();
    (net, p)
}

/// Training mode, so batch statistics and dropout are on the path.
pub fn backbone() -> Errors {
    let (net, p) = small_backbone(0.25);
    let x = randn(&[4, 2, 32], 6);
    let labels = Tensor::new(&[0u32, 1, 2, 1], &dev()).unwrap();
    // a fixed seed fixes the dropout masks, so the loss is a deterministic function
    param_grad_errs(
        &p,
        |_| true,
        || {
            let logits = net.forward(&p, &x, Mode::Train { seed: 9 }).unwrap();
            cross_entropy_t(&logits, &labels).unwrap()
        },
    )
}

/// `d/dv_T` of MSE plus the Tsallis term through a frozen eval-mode backbone.
pub fn v_t() -> Errors {
    let (net, p) = small_backbone(0.0);
    let p = p.freeze().unwrap();
    let u = randn(&[3, 2, 32], 7);
    let w = randn(&[3, 2, 32], 8);
    let x_t = randn(&[3, 2, 32], 9);
    let objective = |v_t: &Tensor| {
        let x_hat = compose_t(&u, &w, 1.0, v_t).unwrap();
        let probs = candle_nn::ops::softmax(&net.forward(&p, &x_hat, Mode::Eval).unwrap(), D::Minus1).unwrap();
        (mse_t(&x_t, &x_hat).unwrap() + (tsallis_t(&probs, 2.0).unwrap() * 0.1).unwrap()).unwrap()
    };
    [0.0, 0.3, -0.7]
        .into_iter()
        .map(|v| {
            (
                format!("v_T={v}"),
                input_grad_err(&Tensor::new(v, &dev()).unwrap(), objective),
            )
        })
        .collect()
}

pub fn unet() -> Errors {
    let net = UNet::new(UNetConfig {
        in_channels: 2,
        base_channels: 2,
        depth: 2,
    })
    .unwrap();
    let p = net.init(17, DType::F64, &dev()).unwrap();
    let x = randn(&[2, 2, 8, 4], 18);
    let c = randn(&[2, 2, 8, 4], 19);
    param_grad_errs(
        &p,
        |_| true,
        || (net.forward(&p, &x).unwrap() * &c).unwrap().sum_all().unwrap(),
    )
}

fn tiny_warp(x: &Tensor) -> (WarpBlock, ModelParams) {
    let block = WarpBlock::new(WarpConfig {
        in_channels: 1,
        hidden: 3,
        code_dim: 2,
        codebook_size: 4,
        commitment: 0.25,
    })
    .unwrap();
    let p = block.init(11, DType::F64, &dev()).unwrap();
    // codes near actual encoder outputs, so several are in use and no distance
    // tie sits within a finite-difference step
    let z = block
        .encode(&p, x)
        .unwrap()
        .permute((0, 2, 3, 1))
        .unwrap()
        .reshape(((), 2))
        .unwrap();
    let rows = Tensor::new(&[0u32, 3, 5, 6], &dev()).unwrap();
    let book = (z.index_select(&rows, 0).unwrap() + (randn(&[4, 2], 12) * 0.01).unwrap()).unwrap();
    p.set(CODEBOOK, &book).unwrap();
    (block, p)
}

/// Straight-through gradients against a surrogate, plus the smallest encoder
/// gradient norm and the number of distinct codes in use.
pub fn warp_straight_through() -> (Errors, f64, usize) {
    let x = randn(&[2, 1, 4, 4], 13);
    let (block, p) = tiny_warp(&x);
    let c = randn(&[2, 1, 4, 4], 14);
    let beta = block.cfg.commitment;

    let f = block.forward(&p, &x).unwrap();
    let loss = ((f.output.clone() * &c).unwrap().sum_all().unwrap() + f.aux_loss(beta).unwrap()).unwrap();
    let grads = loss.backward().unwrap();

    // The straight-through objective, linearised at the current point: code
    // assignments and the quantisation offset are frozen, so the surrogate is
    // smooth and its true gradient equals the straight-through gradient here.
    let z_e0 = block.encode(&p, &x).unwrap().detach();
    let codes0 = block.nearest_codes(&p, &z_e0).unwrap();
    let e0 = block.lookup(&p, &codes0, &z_e0).unwrap().detach();
    let offset = (&e0 - &z_e0).unwrap();
    let surrogate = || {
        let z_e = block.encode(&p, &x).unwrap();
        let out = block.decode(&p, &(&z_e + &offset).unwrap()).unwrap();
        let e = block.lookup(&p, &codes0, &z_e0).unwrap();
        let codebook = (&e - &z_e0).unwrap().sqr().unwrap().mean_all().unwrap();
        let commitment = (&z_e - &e0).unwrap().sqr().unwrap().mean_all().unwrap();
        let total = ((out * &c).unwrap().sum_all().unwrap() + codebook).unwrap();
        scalar(&(total + (commitment * beta).unwrap()).unwrap())
    };

    let distinct: std::collections::BTreeSet<u32> = codes0.to_vec1::<u32>().unwrap().into_iter().collect();
    let mut errors = Vec::new();
    let mut min_enc_norm = f64::INFINITY;
    for name in p.trainable_names() {
        let analytic = flat(grads.get(p.var(&name).unwrap().as_tensor()).unwrap());
        let numeric = fd_param(&p, &name, surrogate);
        if name.starts_with("enc.") {
            let norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
            min_enc_norm = min_enc_norm.min(norm);
        }
        errors.push((name, rel_err(&analytic, &numeric)));
    }
    (errors, min_enc_norm, distinct.len())
}

/// The decoder sits after quantisation, so ordinary finite differences apply.
pub fn warp_decoder() -> Errors {
    let x = randn(&[2, 1, 4, 4], 15);
    let (block, p) = tiny_warp(&x);
    let c = randn(&[2, 1, 4, 4], 16);
    let loss = || {
        block
            .forward(&p, &x)
            .unwrap()
            .output
            .mul(&c)
            .unwrap()
            .sum_all()
            .unwrap()
    };
    param_grad_errs(&p, |n| n.starts_with("dec."), loss)
}

/// The largest error of a check, with its label.
pub fn worst(errors: &Errors) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}
