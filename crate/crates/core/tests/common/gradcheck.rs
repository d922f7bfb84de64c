//! Central finite-difference gradient checks.

use factornas_core::{Graph, Tensor, Var};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds the graph from fresh leaves and returns the scalar loss node.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn loss_at(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let l = build(&mut g, &vars);
    g.value(l).item()
}

/// Relative error between autodiff and central differences for each input.
pub fn check(inputs: &[Tensor], build: &Build) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let l = build(&mut g, &vars);
    let grads = g.backward(l).unwrap();
    let mut errs = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (loss_at(&plus, build) - loss_at(&minus, build)) / (2.0 * H);
        }
        errs.push(rel_err(&analytic, &numeric));
    }
    errs
}

/// Reduces any tensor to a scalar through a fixed random projection, so every
/// output element carries a distinct upstream gradient.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let n = g.value(y).len();
    let shape = g.value(y).shape().to_vec();
    let mut r = super::rng(seed ^ 0x9e37);
    let w = super::rand_tensor(&mut r, &[n], -1.0, 1.0).reshape(&shape).unwrap();
    let wv = g.constant(w);
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

use factornas_core::activations::{ActivationInstance, ActivationKind};
use factornas_core::graph::Mode;
use factornas_core::kernels::pool::PoolKind;
use factornas_core::rng::{stream, Stream};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub type Case = (&'static str, Box<dyn Fn(u64) -> Vec<f64>>);

fn rt(seed: u64, shape: &[usize]) -> Tensor {
    super::rand_tensor(&mut super::rng(seed), shape, -1.0, 1.0)
}

/// Values bounded away from zero (and from 6), for kinked activations.
fn away_from_kinks(seed: u64, n: usize) -> Tensor {
    let mut r = super::rng(seed);
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..2.5);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(vec![n], v).unwrap()
}

/// Well-separated values in random order, so max-pool argmaxes are stable.
fn distinct(seed: u64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut r = super::rng(seed);
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(&mut r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn bn_stats(c: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![0.1; c], vec![1.3; c])
}

/// One entry per differentiable primitive; each closure runs one random trial.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = vec![
        (
            "add",
            Box::new(|s| {
                check(&[rt(s, &[2, 3]), rt(s + 1, &[2, 3])], &|g, v| {
                    let y = g.add(v[0], v[1]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "mul",
            Box::new(|s| {
                check(&[rt(s, &[2, 3]), rt(s + 1, &[2, 3])], &|g, v| {
                    let y = g.mul(v[0], v[1]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "scale",
            Box::new(|s| {
                check(&[rt(s, &[5])], &|g, v| {
                    let y = g.scale(v[0], -1.7);
                    project(g, y, s)
                })
            }),
        ),
        (
            "add_n",
            Box::new(|s| {
                check(&[rt(s, &[4]), rt(s + 1, &[4])], &|g, v| {
                    let y = g.add_n(&[v[0], v[1], v[0]]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "weighted_sum",
            Box::new(|s| {
                check(&[rt(s, &[2, 3]), rt(s + 1, &[2, 3]), rt(s + 2, &[5])], &|g, v| {
                    let y = g.weighted_sum(&[(0, v[0]), (2, v[1])], v[2], 1, &[2, 3]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "softmax",
            Box::new(|s| {
                check(&[rt(s, &[3, 4])], &|g, v| {
                    let y = g.softmax_rows(v[0]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "conv2d 3x3 pad 1",
            Box::new(|s| {
                check(&[rt(s, &[2, 2, 5, 5]), rt(s + 1, &[3, 2, 3, 3])], &|g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 1, 1, 1).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "conv2d stride 2",
            Box::new(|s| {
                check(&[rt(s, &[1, 2, 6, 6]), rt(s + 1, &[2, 2, 3, 3])], &|g, v| {
                    let y = g.conv2d(v[0], v[1], 2, 1, 1, 1).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "conv2d depthwise dilated",
            Box::new(|s| {
                check(&[rt(s, &[2, 2, 5, 5]), rt(s + 1, &[2, 1, 3, 3])], &|g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 2, 2, 2).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "conv2d grouped 1x1",
            Box::new(|s| {
                check(&[rt(s, &[2, 4, 3, 3]), rt(s + 1, &[4, 2, 1, 1])], &|g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 0, 1, 2).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "max_pool 3x3",
            Box::new(|s| {
                check(&[distinct(s, &[1, 2, 4, 4])], &|g, v| {
                    let y = g.pool(v[0], PoolKind::Max, 3, 1, 1).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "max_pool stride 2",
            Box::new(|s| {
                check(&[distinct(s, &[1, 2, 5, 5])], &|g, v| {
                    let y = g.pool(v[0], PoolKind::Max, 3, 2, 1).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "avg_pool 3x3",
            Box::new(|s| {
                check(&[rt(s, &[1, 2, 4, 4])], &|g, v| {
                    let y = g.pool(v[0], PoolKind::Avg, 3, 1, 1).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "avg_pool stride 2",
            Box::new(|s| {
                check(&[rt(s, &[1, 2, 5, 5])], &|g, v| {
                    let y = g.pool(v[0], PoolKind::Avg, 3, 2, 1).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "batch_norm train",
            Box::new(|s| {
                check(&[rt(s, &[2, 3, 3, 3])], &|g, v| {
                    let (mut m, mut var) = bn_stats(3);
                    let y = g.batch_norm(v[0], None, &mut m, &mut var, Mode::Train).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "batch_norm train affine",
            Box::new(|s| {
                check(&[rt(s, &[2, 3, 2, 2]), rt(s + 1, &[3]), rt(s + 2, &[3])], &|g, v| {
                    let (mut m, mut var) = bn_stats(3);
                    let y = g.batch_norm(v[0], Some((v[1], v[2])), &mut m, &mut var, Mode::Train).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "batch_norm eval affine",
            Box::new(|s| {
                check(&[rt(s, &[2, 3, 2, 2]), rt(s + 1, &[3]), rt(s + 2, &[3])], &|g, v| {
                    let (mut m, mut var) = bn_stats(3);
                    let y = g.batch_norm(v[0], Some((v[1], v[2])), &mut m, &mut var, Mode::Eval).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "concat",
            Box::new(|s| {
                check(&[rt(s, &[2, 1, 2, 2]), rt(s + 1, &[2, 2, 2, 2])], &|g, v| {
                    let y = g.concat_channels(&[v[0], v[1], v[0]]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "crop",
            Box::new(|s| {
                check(&[rt(s, &[2, 2, 3, 4])], &|g, v| {
                    let y = g.crop(v[0], 1, 1).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|s| {
                check(&[rt(s, &[2, 3, 2, 3])], &|g, v| {
                    let y = g.global_avg_pool(v[0]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        (
            "linear",
            Box::new(|s| {
                check(&[rt(s, &[3, 4]), rt(s + 1, &[2, 4]), rt(s + 2, &[2])], &|g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                    project(g, y, s)
                })
            }),
        ),
        ("cross_entropy", Box::new(|s| check(&[rt(s, &[3, 4])], &|g, v| g.cross_entropy(v[0], &[0, 3, 1], 0.0).unwrap()))),
        ("cross_entropy smoothed", Box::new(|s| check(&[rt(s, &[3, 4])], &|g, v| g.cross_entropy(v[0], &[2, 0, 1], 0.1).unwrap()))),
        (
            "sample_scale",
            Box::new(|s| {
                check(&[rt(s, &[3, 2])], &|g, v| {
                    let y = g.sample_scale(v[0], &[0.0, 1.6, 2.5]).unwrap();
                    project(g, y, s)
                })
            }),
        ),
    ];
    for kind in ActivationKind::ALL {
        let name: &'static str = Box::leak(format!("activation {}", kind.name()).into_boxed_str());
        cases.push((
            name,
            Box::new(move |s| {
                let x = away_from_kinks(s, 12);
                let inst = ActivationInstance::new(kind);
                let mut inputs = vec![x];
                if kind.is_learnable() {
                    inputs.push(Tensor::scalar(super::rng(s + 7).random_range(0.2..1.5)));
                }
                check(&inputs, &|g, v| {
                    let mut r = stream(s, Stream::RRelu);
                    let y = g.activation(v[0], &inst, v.get(1).copied(), Mode::Train, &mut r);
                    project(g, y, s)
                })
            }),
        ));
    }
    cases.push((
        "mixed_activation",
        Box::new(|s| {
            let mut inputs = vec![away_from_kinks(s, 10).reshape(&[1, 1, 2, 5]).unwrap(), rt(s + 1, &[9])];
            inputs.push(Tensor::scalar(0.3));
            inputs.push(Tensor::scalar(1.2));
            check(&inputs, &|g, v| {
                let mut r = stream(s, Stream::RRelu);
                let w = g.softmax_rows(v[1]).unwrap();
                let units: Vec<_> = ActivationKind::ALL
                    .iter()
                    .map(|&k| {
                        let p = match k {
                            ActivationKind::PRelu => Some(v[2]),
                            ActivationKind::Swish => Some(v[3]),
                            _ => None,
                        };
                        (ActivationInstance::new(k), p)
                    })
                    .collect();
                let y = g.mixed_activation(v[0], w, 0, &units, Mode::Train, &mut r).unwrap();
                project(g, y, s)
            })
        }),
    ));
    cases
}

/// Runs every case for `trials` seeds and reports the worst error per case.
pub fn run_primitive_suite(trials: u64) -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .map(|(name, case)| {
            let worst = (0..trials).flat_map(|t| case(1000 + 31 * t)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// One trial of the full factorized mixed edge on the default registry:
/// errors for the input, the α row and the β row, in that order.
pub fn mixed_edge_case(seed: u64) -> Vec<f64> {
    use factornas_core::nn::{Builder, Fwd};
    use factornas_core::space::SpaceConfig;
    use factornas_core::supernet::{ArchVars, EdgeMode, MixedEdge};
    use factornas_core::ParamStore;

    let space = SpaceConfig::default();
    let stride = if seed.is_multiple_of(2) { 1 } else { 2 };
    let mut store = ParamStore::new();
    let mut init = stream(seed, Stream::Init);
    let edge =
        MixedEdge::new(&mut Builder { store: &mut store, rng: &mut init }, "edge", &space, &EdgeMode::Factorized, 0, 2, 0, 2, stride)
            .unwrap();
    let inputs = [rt(seed, &[2, 2, 5, 5]), rt(seed + 1, &[1, 8]), rt(seed + 2, &[1, 9])];
    check(&inputs, &|g, v| {
        let mut weights = store.clone();
        let mut r = stream(seed, Stream::RRelu);
        let alpha = g.softmax_rows(v[1]).unwrap();
        let beta = Some(g.softmax_rows(v[2]).unwrap());
        let mut f = Fwd { graph: g, weights: &mut weights, mode: Mode::Train, rng: &mut r, weights_grad: false };
        let y = edge.forward(&mut f, v[0], &ArchVars { alpha, beta }).unwrap();
        project(g, y, seed)
    })
}
