//! Oracles for the inference rewrites and the BPTT chain, computed with
//! plain loops in f64 independently of the library's fusion code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snn_core::autograd::{conv2d_forward, Conv2dConfig, FireMode, LifRecurrence, ResetMode, Tape, Tensor, BN_EPS};
use snn_core::encoding::VoxelCube;
use snn_core::spiking::{
    build_mobilenet, build_small_cnn, dwsep_to_normal_conv, fuse_bn_into_conv, BlockStyle, BnParams, BnPlacement,
    BnState, ConvMode, ConvParams, LayerOp, Network, SmallCnnConfig,
};

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to64(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), f64s(t.data())).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> BnParams {
    BnParams {
        gamma: (0..c)
            .map(|_| rng.gen_range(0.3f32..2.0) * if rng.gen_bool(0.2) { -1.0 } else { 1.0 })
            .collect(),
        beta: uniform(rng, c, -1.0, 1.0),
        mean: uniform(rng, c, -1.0, 1.0),
        var: uniform(rng, c, 0.1, 2.0),
        eps: BN_EPS,
        state: BnState::Eval,
    }
}

/// Frozen batch norm applied elementwise to `(N, C, H, W)`.
pub fn bn_oracle(bn: &BnParams, x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % s[1];
        let (g, b, m, var) = (bn.gamma[c] as f64, bn.beta[c] as f64, bn.mean[c] as f64, bn.var[c] as f64);
        *v = (*v - m) / (var + bn.eps).sqrt() * g + b;
    }
    out
}

pub fn run_conv(p: &ConvParams, x: &Tensor<f64>) -> Tensor<f64> {
    let cfg = Conv2dConfig {
        stride: p.stride,
        padding: p.padding,
        groups: p.groups,
    };
    let bias = p.bias.as_ref().map(|b| Tensor::new(vec![b.len()], f64s(b)).unwrap());
    let fill = p.pad_fill.as_ref().map(|f| f64s(f));
    conv2d_forward(&x.clone(), &to64(&p.weight), bias.as_ref(), &cfg, fill.as_deref()).unwrap()
}

/// One random bn → conv pair: max abs diff between `conv(bn(x))` and the
/// folded conv applied to `x`.
pub fn bn_fusion_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout) = (rng.gen_range(1..6), rng.gen_range(1..7));
    let k = [1, 3][rng.gen_range(0..2)];
    let conv = ConvParams {
        weight: Tensor::new(vec![cout, cin, k, k], uniform(&mut rng, cout * cin * k * k, -1.0, 1.0)).unwrap(),
        bias: rng.gen_bool(0.5).then(|| uniform(&mut rng, cout, -0.5, 0.5)),
        stride: rng.gen_range(1..3),
        padding: if k == 3 { rng.gen_range(0..2) } else { 0 },
        groups: 1,
        pad_fill: None,
    };
    let bn = random_bn(&mut rng, cin);
    let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
    let x = Tensor::new(vec![2, cin, h, w], (0..2 * cin * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let want = run_conv(&conv, &bn_oracle(&bn, &x));
    let fused = fuse_bn_into_conv(&bn, &conv).unwrap();
    run_conv(&fused, &x).max_abs_diff(&want)
}

/// Depthwise `(C,1,k,k)` and pointwise `(O,C,1,1)` with random weights.
pub fn random_dwsep(rng: &mut ChaCha8Rng, c: usize, o: usize, k: usize, stride: usize, padding: usize) -> (ConvParams, ConvParams) {
    let dw = ConvParams {
        weight: Tensor::new(vec![c, 1, k, k], uniform(rng, c * k * k, -1.0, 1.0)).unwrap(),
        bias: None,
        stride,
        padding,
        groups: c,
        pad_fill: None,
    };
    let pw = ConvParams {
        weight: Tensor::new(vec![o, c, 1, 1], uniform(rng, o * c, -1.0, 1.0)).unwrap(),
        bias: Some(uniform(rng, o, -0.5, 0.5)),
        stride: 1,
        padding: 0,
        groups: 1,
        pad_fill: None,
    };
    (dw, pw)
}

/// Two-step depthwise then pointwise against the merged dense conv.
pub fn dwsep_case(seed: u64, c: usize, o: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stride, padding) = (rng.gen_range(1..3), rng.gen_range(0..2));
    let (dw, pw) = random_dwsep(&mut rng, c, o, 3, stride, padding);
    let (h, w) = (rng.gen_range(3..10), rng.gen_range(3..10));
    let x = Tensor::new(vec![2, c, h, w], (0..2 * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let want = run_conv(&pw, &run_conv(&dw, &x));
    let dense = dwsep_to_normal_conv(&dw, &pw).unwrap();
    run_conv(&dense, &x).max_abs_diff(&want)
}

/// Gives every batch norm of `net` random frozen statistics in a range that
/// keeps the network firing.
pub fn randomise_batch_norms(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = net
        .spec()
        .layers
        .iter()
        .filter(|l| matches!(l.op, LayerOp::BatchNorm))
        .map(|l| l.name.clone())
        .collect();
    for name in names {
        for (suffix, lo, hi) in [("gamma", 0.6f32, 1.6), ("beta", -0.2, 0.6), ("running_mean", -0.3, 0.3), ("running_var", 0.4, 1.5)] {
            let id = net.param(&name, suffix).unwrap();
            for v in net.params_mut().value_mut(id).data_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
    }
}

/// Scales every hidden conv weight so that fresh networks fire at useful rates.
pub fn amplify_convs(net: &mut Network, factor: f32) {
    let names: Vec<String> = net
        .spec()
        .layers
        .iter()
        .filter(|l| matches!(l.op, LayerOp::Conv { .. }) && !l.name.starts_with("classifier"))
        .map(|l| l.name.clone())
        .collect();
    for name in names {
        let id = net.param(&name, "weight").unwrap();
        for v in net.params_mut().value_mut(id).data_mut() {
            *v *= factor;
        }
    }
}

pub fn random_cube(rng: &mut ChaCha8Rng, c: usize, t: usize, h: usize, w: usize, density: f64) -> VoxelCube {
    let mut cube = VoxelCube::zeros(c, t, h, w);
    for ch in 0..c {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    if rng.gen_bool(density) {
                        cube.set(ch, ti, y, x);
                    }
                }
            }
        }
    }
    cube
}

pub fn class_scores(net: &Network, cube: &VoxelCube) -> Vec<f32> {
    let out = net.run(cube).unwrap();
    let mut total = vec![0.0; out.per_step[0].len()];
    for step in &out.per_step {
        for (a, b) in total.iter_mut().zip(step) {
            *a += b;
        }
    }
    total
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cube whose channels and quadrants each get their own firing density,
/// so that different inputs favour different classes.
pub fn patchy_cube(rng: &mut ChaCha8Rng, c: usize, t: usize, h: usize, w: usize) -> VoxelCube {
    let dens: Vec<f64> = (0..c * 4).map(|_| rng.gen_range(0.0..0.6)).collect();
    let mut cube = VoxelCube::zeros(c, t, h, w);
    for ch in 0..c {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let q = 2 * (2 * y / h) + 2 * x / w;
                    if rng.gen_bool(dens[ch * 4 + q]) {
                        cube.set(ch, ti, y, x);
                    }
                }
            }
        }
    }
    cube
}

/// Small classifier with random frozen batch norms, unfused and fused.
pub fn fusion_pair(placement: BnPlacement, seed: u64) -> (Network, Network) {
    let style = BlockStyle {
        bn: placement,
        ..Default::default()
    };
    let cfg = SmallCnnConfig {
        stages: vec![(8, 1), (16, 2), (16, 2)],
        pool_after: vec![],
    };
    let mut net = Network::new(build_small_cnn(&cfg, 4, 4, style).unwrap(), seed).unwrap();
    randomise_batch_norms(&mut net, seed + 1);
    amplify_convs(&mut net, 3.0);
    let fused = net.fuse_batch_norms().unwrap();
    (net, fused)
}

/// Agreement of predicted classes before and after batch-norm folding on
/// `n` random 16×16, T=5 inputs, spread over one random network per ten
/// inputs. Returns the agreeing count, the largest score difference and
/// how often each class was predicted.
pub fn fused_argmax_agreement(placement: BnPlacement, n: usize, seed: u64) -> (usize, f32, [usize; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    let mut worst = 0.0f32;
    let mut hist = [0; 4];
    let mut pair = None;
    for i in 0..n {
        if i % 10 == 0 {
            pair = Some(fusion_pair(placement, seed + 100 * (i / 10) as u64));
        }
        let (net, fused) = pair.as_ref().unwrap();
        let cube = patchy_cube(&mut rng, 4, 5, 16, 16);
        let (a, b) = (class_scores(net, &cube), class_scores(fused, &cube));
        worst = a.iter().zip(&b).fold(worst, |m, (x, y)| m.max((x - y).abs()));
        agree += usize::from(argmax(&a) == argmax(&b));
        hist[argmax(&a)] += 1;
    }
    (agree, worst, hist)
}

/// MobileNet in training form against the network after merging every
/// separable pair: the largest class-score difference over `n` inputs and
/// the total score, which shows the network was active.
pub fn mobilenet_conversion_diff(n: usize, seed: u64) -> (f32, f32) {
    let spec = build_mobilenet(8, 4, 3, ConvMode::Dwsep, BlockStyle::default()).unwrap();
    let mut net = Network::new(spec, seed).unwrap();
    randomise_batch_norms(&mut net, seed + 1);
    amplify_convs(&mut net, 2.0);
    let dense = net.convert_dwsep().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let (mut worst, mut total) = (0.0f32, 0.0);
    for _ in 0..n {
        let cube = patchy_cube(&mut rng, 4, 3, 16, 16);
        let (a, b) = (class_scores(&net, &cube), class_scores(&dense, &cube));
        worst = a.iter().zip(&b).fold(worst, |m, (x, y)| m.max((x - y).abs()));
        total += a.iter().sum::<f32>();
    }
    (worst, total)
}

/// Two-step PLIF toy: `loss = c1·S1 + c2·S2` with spikes from inputs `x1`,
/// `x2`, leak `k = sigmoid(w)`, threshold 1 and hard reset to 0. Returns
/// the hand-derived `(dL/dx1, dL/dx2, dL/dw)`. The reset is part of the
/// graph: `V1 = H1·(1 - S1)`, so `∂V1/∂H1 = 1 - S1` and `∂V1/∂S1 = -H1`.
pub fn bptt_hand_chain(x1: f64, x2: f64, w: f64, c1: f64, c2: f64) -> (f64, f64, f64) {
    let k = 1.0 / (1.0 + (-w).exp());
    let sg = |u: f64| {
        let z = std::f64::consts::PI * 2.0 * u / 2.0;
        2.0 / (2.0 * (1.0 + z * z))
    };
    let step = |u: f64| if u >= 0.0 { 1.0 } else { 0.0 };
    let h1 = k * x1;
    let s1 = step(h1 - 1.0);
    let v1 = h1 * (1.0 - s1);
    let h2 = v1 + (x2 - v1) * k;

    let d_h2 = c2 * sg(h2 - 1.0);
    let d_x2 = d_h2 * k;
    let d_v1 = d_h2 * (1.0 - k);
    let d_s1 = c1 + d_v1 * (0.0 - h1);
    let d_h1 = d_s1 * sg(h1 - 1.0) + d_v1 * (1.0 - s1);
    let d_x1 = d_h1 * k;
    let d_k = d_h2 * (x2 - v1) + d_h1 * x1;
    (d_x1, d_x2, d_k * k * (1.0 - k))
}

/// The same toy through the tape.
pub fn bptt_autodiff(x1: f64, x2: f64, w: f64, c1: f64, c2: f64) -> (f64, f64, f64) {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2, 1], vec![x1, x2]).unwrap(), true);
    let wv = tape.leaf(Tensor::new(vec![1], vec![w]).unwrap(), true);
    let rec = LifRecurrence {
        leak: 0.0,
        v_threshold: 1.0,
        v_reset: 0.0,
        reset: ResetMode::Hard,
        alpha: 2.0,
        fire: FireMode::Heaviside,
    };
    let (s, _) = tape.lif(x, 2, None, Some(wv), rec).unwrap();
    let loss = tape.weighted_sum(s, &[c1, c2]).unwrap();
    tape.backward(loss).unwrap();
    let gx = tape.grad(x).unwrap().to_vec();
    (gx[0], gx[1], tape.grad(wv).unwrap()[0])
}

/// Toy inputs covering spike/no-spike at each step.
pub const BPTT_CASES: [(f64, f64, f64, f64, f64); 4] = [
    (2.2, 1.7, 0.0, 1.0, 1.0),
    (1.6, 1.5, 0.0, 1.0, 1.0),
    (1.9, 2.4, 0.4, 0.7, -1.3),
    (0.5, 0.9, -0.8, 2.0, 0.5),
];

/// Largest relative mismatch between hand chain and tape over the cases.
pub fn bptt_mismatch() -> f64 {
    BPTT_CASES
        .iter()
        .map(|&(x1, x2, w, c1, c2)| {
            let a = bptt_hand_chain(x1, x2, w, c1, c2);
            let b = bptt_autodiff(x1, x2, w, c1, c2);
            [(a.0, b.0), (a.1, b.1), (a.2, b.2)]
                .iter()
                .map(|(p, q)| (p - q).abs() / p.abs().max(1.0))
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
