//! Central finite-difference gradient checks shared by the unit-level and
//! acceptance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snn_core::autograd::{Conv2dConfig, FireMode, FocalConfig, LifRecurrence, ResetMode, Scalar, Tape, Tensor, Var};

pub type Build<S> = dyn Fn(&mut Tape<S>, &[Var]) -> Var;

/// Worst relative error over all inputs, `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`,
/// between the tape gradient `a` and central differences `n` of a random
/// projection of the output. The projection is accumulated in f64 so the
/// perturbed evaluations only carry the rounding of the op itself.
///
/// `floor` keeps gradients that nearly cancel from being judged against
/// pure rounding noise: in f32 an O(1) output is only resolved to ~1e-7,
/// which after dividing by `2h` leaves ~1e-5 of absolute noise.
pub fn check<S: Scalar>(inputs: &[Tensor<S>], build: &Build<S>, h: f64, floor: f64, seed: u64) -> f64 {
    let mut tape = Tape::<S>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let n_out = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n_out as f64).sqrt();
    let weights: Vec<S> = (0..n_out).map(|_| S::from_f64(rng.gen_range(-1.0..1.0) * scale)).collect();
    let loss = tape.weighted_sum(out, &weights).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match tape.grad(*v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect();

    let eval = |ins: &[Tensor<S>]| -> f64 {
        let mut tape = Tape::<S>::inference();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(y, w)| y.as_f64() * w.as_f64())
            .sum()
    };

    let mut worst = 0.0f64;
    let mut ins = inputs.to_vec();
    for i in 0..ins.len() {
        let mut numeric = vec![0.0; ins[i].len()];
        for j in 0..ins[i].len() {
            let orig = ins[i].data()[j];
            // Divide by the step actually representable in `S`.
            let hi = S::from_f64(orig.as_f64() + h);
            let lo = S::from_f64(orig.as_f64() - h);
            ins[i].data_mut()[j] = hi;
            let plus = eval(&ins);
            ins[i].data_mut()[j] = lo;
            let minus = eval(&ins);
            ins[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (hi.as_f64() - lo.as_f64());
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut analytic[i].iter().zip(&numeric).map(|(a, n)| a - n));
        let mag = norm(&mut analytic[i].iter().copied())
            .max(norm(&mut numeric.iter().copied()))
            .max(floor);
        worst = worst.max(diff / mag);
    }
    worst
}

fn rand_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::from_f64(rng.gen_range(lo..hi))).collect()).unwrap()
}

/// Values spaced far apart relative to `h`, so max pooling has no near-ties.
fn spaced_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v.into_iter().map(|i| S::from_f64(i as f64 * 0.05 - 1.0)).collect()).unwrap()
}

pub struct Case<S: Scalar> {
    pub inputs: Vec<Tensor<S>>,
    pub build: Box<Build<S>>,
}

pub const TRIALS: usize = 20;

pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_pad_fill",
    "conv2d_grouped",
    "batch_norm_train",
    "batch_norm_eval",
    "max_pool2d",
    "concat_channels",
    "lif_hard_reset",
    "lif_soft_reset",
    "lif_learnable_leak",
    "add_scale",
    "sum_time_spatial",
    "sum_time",
    "anchor_rows",
    "concat_rows",
    "cross_entropy",
    "focal_loss",
    "smooth_l1",
];

/// Multi-op graphs compared end to end. Checked in f64 only: a chain of
/// f32 ops accumulates rounding that central differences at `h = 1e-3`
/// cannot resolve, while each op is already checked in f32 on its own.
pub const COMPOSED: &[&str] = &["composed_conv_bn_lif"];

pub fn case<S: Scalar>(op: &str, trial: usize) -> Case<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64 * 31 + op.len() as u64);
    let mut r = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (n, c, h, w) = (r(1, 2), r(1, 3), r(3, 6), r(3, 6));
    let cout = r(1, 4);
    let k = r(1, 3);
    let stride = r(1, 2);
    let pad = r(0, 1);
    let steps = r(1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(77 + trial as u64);
    match op {
        "conv2d" | "conv2d_pad_fill" => {
            let fill: Option<Vec<S>> = (op == "conv2d_pad_fill")
                .then(|| (0..c).map(|_| S::from_f64(rng.gen_range(-1.0..1.0))).collect());
            let pad = if fill.is_some() { 1 } else { pad };
            let cfg = Conv2dConfig { stride, padding: pad, groups: 1 };
            Case {
                inputs: vec![
                    rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0),
                    rand_tensor(&mut rng, &[cout, c, k, k], -1.0, 1.0),
                    rand_tensor(&mut rng, &[cout], -1.0, 1.0),
                ],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), cfg, fill.as_deref()).unwrap()),
            }
        }
        "conv2d_grouped" => {
            let g = 2;
            let cfg = Conv2dConfig { stride, padding: pad, groups: g };
            Case {
                inputs: vec![
                    rand_tensor(&mut rng, &[n, c * g, h, w], -1.0, 1.0),
                    rand_tensor(&mut rng, &[cout * g, c, k, k], -1.0, 1.0),
                ],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], None, cfg, None).unwrap()),
            }
        }
        "batch_norm_train" => Case {
            inputs: vec![
                rand_tensor(&mut rng, &[n + 1, c, h, w], -2.0, 2.0),
                rand_tensor(&mut rng, &[c], 0.5, 1.5),
                rand_tensor(&mut rng, &[c], -0.5, 0.5),
            ],
            build: Box::new(move |t, v| {
                let mut rm = vec![S::zero(); c];
                let mut rv = vec![S::one(); c];
                t.batch_norm_train(v[0], v[1], v[2], &mut rm, &mut rv, S::from_f64(0.1), S::from_f64(1e-5))
                    .unwrap()
            }),
        },
        "batch_norm_eval" => {
            let mean = rand_tensor::<S>(&mut rng, &[c], -0.5, 0.5);
            let var = rand_tensor::<S>(&mut rng, &[c], 0.5, 2.0);
            Case {
                inputs: vec![
                    rand_tensor(&mut rng, &[n, c, h, w], -2.0, 2.0),
                    rand_tensor(&mut rng, &[c], 0.5, 1.5),
                    rand_tensor(&mut rng, &[c], -0.5, 0.5),
                ],
                build: Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, S::from_f64(1e-5)).unwrap()),
            }
        }
        "max_pool2d" => {
            let kk = k.max(2);
            Case {
                inputs: vec![spaced_tensor(&mut rng, &[n, c, h.max(kk), w.max(kk)])],
                build: Box::new(move |t, v| t.max_pool2d(v[0], kk, stride, 0).unwrap()),
            }
        }
        "concat_channels" => Case {
            inputs: vec![
                rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0),
                rand_tensor(&mut rng, &[n, cout, h, w], -1.0, 1.0),
                rand_tensor(&mut rng, &[n, k, h, w], -1.0, 1.0),
            ],
            build: Box::new(|t, v| t.concat_channels(&[v[0], v[1], v[2]]).unwrap()),
        },
        "lif_hard_reset" | "lif_soft_reset" | "lif_learnable_leak" => {
            let reset = if op == "lif_soft_reset" { ResetMode::Soft } else { ResetMode::Hard };
            let rec = LifRecurrence {
                leak: S::from_f64(0.5),
                v_threshold: S::one(),
                v_reset: S::zero(),
                reset,
                alpha: S::from_f64(2.0),
                fire: FireMode::Smooth,
            };
            let mut inputs = vec![rand_tensor(&mut rng, &[steps * n, c, h, w], -1.0, 3.0)];
            let learn = op == "lif_learnable_leak";
            if learn {
                inputs.push(rand_tensor(&mut rng, &[1], -1.0, 1.0));
            }
            Case {
                inputs,
                build: Box::new(move |t, v| {
                    let w = learn.then(|| v[1]);
                    t.lif(v[0], steps, None, w, rec).unwrap().0
                }),
            }
        }
        "add_scale" => Case {
            inputs: vec![
                rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0),
                rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0),
            ],
            build: Box::new(|t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.scale(a, S::from_f64(-1.5));
                t.add(b, v[0]).unwrap()
            }),
        },
        "sum_time_spatial" => Case {
            inputs: vec![rand_tensor(&mut rng, &[steps * n, c, h, w], -1.0, 1.0)],
            build: Box::new(move |t, v| t.sum_time_spatial(v[0], steps).unwrap()),
        },
        "sum_time" => Case {
            inputs: vec![rand_tensor(&mut rng, &[steps * n, c, h, w], -1.0, 1.0)],
            build: Box::new(move |t, v| t.sum_time(v[0], steps).unwrap()),
        },
        "anchor_rows" => Case {
            inputs: vec![rand_tensor(&mut rng, &[n, k * cout, h, w], -1.0, 1.0)],
            build: Box::new(move |t, v| t.anchor_rows(v[0], k).unwrap()),
        },
        "concat_rows" => Case {
            inputs: vec![
                rand_tensor(&mut rng, &[n, h, c], -1.0, 1.0),
                rand_tensor(&mut rng, &[n, w, c], -1.0, 1.0),
            ],
            build: Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        },
        "cross_entropy" => {
            let classes = cout + 1;
            let rows = k + 1;
            let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
            Case {
                inputs: vec![rand_tensor(&mut rng, &[rows, classes], -2.0, 2.0)],
                build: Box::new(move |t, v| t.cross_entropy(v[0], &labels).unwrap()),
            }
        }
        "focal_loss" => {
            let classes = cout + 1;
            let rows = k + 1;
            let targets: Vec<usize> = (0..n * rows).map(|_| rng.gen_range(0..classes)).collect();
            Case {
                inputs: vec![rand_tensor(&mut rng, &[n, rows, classes], -2.0, 2.0)],
                build: Box::new(move |t, v| t.focal_loss(v[0], &targets, &FocalConfig::default()).unwrap()),
            }
        }
        "smooth_l1" => {
            let rows = k + 1;
            // Keep residuals away from the |d| = 1 kink.
            let target = rand_tensor::<S>(&mut rng, &[n, rows, 4], -1.0, 1.0);
            let offsets: Vec<S> = (0..target.len())
                .map(|_| {
                    let mag = if rng.gen_bool(0.5) { rng.gen_range(0.1..0.8) } else { rng.gen_range(1.2..2.0) };
                    S::from_f64(if rng.gen_bool(0.5) { mag } else { -mag })
                })
                .collect();
            let pred = Tensor::new(
                target.shape().to_vec(),
                target.data().iter().zip(&offsets).map(|(a, b)| *a + *b).collect(),
            )
            .unwrap();
            let mask: Vec<bool> = (0..n * rows).map(|_| rng.gen_bool(0.5)).collect();
            Case {
                inputs: vec![pred],
                build: Box::new(move |t, v| t.smooth_l1(v[0], &target, &mask).unwrap()),
            }
        }
        "composed_conv_bn_lif" => {
            let rec = LifRecurrence {
                leak: S::from_f64(0.5),
                v_threshold: S::one(),
                v_reset: S::zero(),
                reset: ResetMode::Hard,
                alpha: S::from_f64(2.0),
                fire: FireMode::Smooth,
            };
            let cfg = Conv2dConfig { stride: 1, padding: 1, groups: 1 };
            Case {
                inputs: vec![
                    rand_tensor(&mut rng, &[steps * (n + 1), c, h, w], 0.0, 1.0),
                    rand_tensor(&mut rng, &[c], 0.5, 1.5),
                    rand_tensor(&mut rng, &[c], -0.5, 0.5),
                    rand_tensor(&mut rng, &[cout, c, 3, 3], -1.0, 1.0),
                    rand_tensor(&mut rng, &[1], -1.0, 1.0),
                ],
                build: Box::new(move |t, v| {
                    let mut rm = vec![S::zero(); c];
                    let mut rv = vec![S::one(); c];
                    let b = t
                        .batch_norm_train(v[0], v[1], v[2], &mut rm, &mut rv, S::from_f64(0.1), S::from_f64(1e-5))
                        .unwrap();
                    let y = t.conv2d(b, v[3], None, cfg, None).unwrap();
                    t.lif(y, steps, None, Some(v[4]), rec).unwrap().0
                }),
            }
        }
        other => panic!("unknown op {other}"),
    }
}

/// Worst relative error per op over [`TRIALS`] random shapes.
pub fn run_suite<S: Scalar>(ops: &[&'static str], h: f64, floor: f64) -> Vec<(&'static str, f64)> {
    ops.iter()
        .map(|op| {
            let worst = (0..TRIALS)
                .map(|trial| {
                    let c = case::<S>(op, trial);
                    check(&c.inputs, c.build.as_ref(), h, floor, trial as u64)
                })
                .fold(0.0, f64::max);
            (*op, worst)
        })
        .collect()
}
