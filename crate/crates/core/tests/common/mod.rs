//! Oracles shared by the integration tests.
#![allow(dead_code)]

use lowprec::data::Dataset;
use lowprec::inference::{forward, ForwardMode, Model};
use lowprec::netdesc::{ConvSpec, FcSpec, LayerDescriptor, LayerOp, NetDescriptor, PoolSpec};
use lowprec::training::{backward, epoch_order, finetune, softmax_cross_entropy, Gradients, Init, TrainConfig};
use lowprec::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let trace = forward(model, x, ForwardMode::Float).unwrap();
    softmax_cross_entropy(trace.logits(), labels).unwrap().0
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between backprop and central differences over
/// every weight and bias element.
pub fn gradient_check(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], eps: f64) -> f64 {
    let trace = forward(model, x, ForwardMode::Float).unwrap();
    let (_, grads): (f64, Gradients<f64>) = backward(model, &trace, labels, ForwardMode::Float).unwrap();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        for (is_bias, analytic) in [(false, &g.weights), (true, &g.bias)] {
            for j in 0..analytic.len() {
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    let s = m.layer_mut(i).unwrap();
                    let p = if is_bias { &mut s.bias } else { &mut s.weights };
                    p.update_shadow(|w| w[j] += delta);
                    loss(&m, x, labels)
                };
                let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                worst = worst.max(rel_err(analytic.data()[j], numeric, 1e-8));
            }
        }
    }
    worst
}

/// conv(1->3, 3x3, pad 1, ReLU, 2x2 max pool) -> FC(48 -> 4) -> softmax.
pub fn reference_net() -> NetDescriptor {
    NetDescriptor::new(
        vec![
            LayerDescriptor::new("in", LayerOp::Input { shape: vec![1, 8, 8] }),
            LayerDescriptor::new(
                "conv",
                LayerOp::Conv(ConvSpec {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    relu: true,
                    pool: Some(PoolSpec::new(2, 2)),
                }),
            ),
            LayerDescriptor::new("fc", LayerOp::InnerProduct(FcSpec { in_features: 48, out_features: 4, relu: false })),
            LayerDescriptor::new("prob", LayerOp::Softmax),
        ],
        1.0,
    )
    .unwrap()
}

/// Direct-loop float trainer for [`reference_net`], written without any of
/// the library's kernels. Plain SGD with momentum, mean cross-entropy.
#[derive(Clone, Debug)]
pub struct ReferenceTrainer {
    pub w1: Vec<f64>, // 3 x 1 x 3 x 3
    pub b1: Vec<f64>,
    pub w2: Vec<f64>, // 4 x 48
    pub b2: Vec<f64>,
    v: [Vec<f64>; 4],
    momentum: f64,
}

impl ReferenceTrainer {
    pub fn new(w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>, momentum: f64) -> Self {
        let v = [vec![0.0; w1.len()], vec![0.0; b1.len()], vec![0.0; w2.len()], vec![0.0; b2.len()]];
        Self { w1, b1, w2, b2, v, momentum }
    }

    /// One step on a batch of 8x8 images; returns the batch loss.
    pub fn step(&mut self, images: &[f64], labels: &[usize], lr: f64) -> f64 {
        let n = labels.len();
        let mut g = [vec![0.0; 27], vec![0.0; 3], vec![0.0; 192], vec![0.0; 4]];
        let mut total = 0.0;
        for (s, &label) in labels.iter().enumerate() {
            let img = &images[s * 64..(s + 1) * 64];
            let mut pre = [[[0.0f64; 8]; 8]; 3];
            for o in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                    acc += self.w1[o * 9 + ky * 3 + kx] * img[iy as usize * 8 + ix as usize];
                                }
                            }
                        }
                        pre[o][y][x] = acc + self.b1[o];
                    }
                }
            }
            let mut pooled = [0.0f64; 48];
            let mut arg = [(0usize, 0usize); 48];
            for o in 0..3 {
                for py in 0..4 {
                    for px in 0..4 {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = pre[o][2 * py + dy][2 * px + dx].max(0.0);
                                if v > best {
                                    best = v;
                                    arg[o * 16 + py * 4 + px] = (2 * py + dy, 2 * px + dx);
                                }
                            }
                        }
                        pooled[o * 16 + py * 4 + px] = best;
                    }
                }
            }
            let mut logits = [0.0f64; 4];
            for k in 0..4 {
                logits[k] = (0..48).map(|i| self.w2[k * 48 + i] * pooled[i]).sum::<f64>() + self.b2[k];
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            total += z.ln() - (logits[label] - m);
            let mut dlogit = [0.0f64; 4];
            for k in 0..4 {
                dlogit[k] = ((logits[k] - m).exp() / z - if k == label { 1.0 } else { 0.0 }) / n as f64;
            }
            let mut dpooled = [0.0f64; 48];
            for k in 0..4 {
                g[3][k] += dlogit[k];
                for i in 0..48 {
                    g[2][k * 48 + i] += dlogit[k] * pooled[i];
                    dpooled[i] += dlogit[k] * self.w2[k * 48 + i];
                }
            }
            for o in 0..3 {
                for p in 0..16 {
                    let (y, x) = arg[o * 16 + p];
                    if pre[o][y][x] <= 0.0 {
                        continue;
                    }
                    let d = dpooled[o * 16 + p];
                    g[1][o] += d;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                g[0][o * 9 + ky * 3 + kx] += d * img[iy as usize * 8 + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let params = [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        for ((p, grad), v) in params.into_iter().zip(&g).zip(&mut self.v) {
            for ((w, &gr), vel) in p.iter_mut().zip(grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + gr;
                *w -= lr * *vel;
            }
        }
        total / n as f64
    }
}

/// Smallest distance of any ReLU input from zero, and of any pooling
/// window's maximum from its runner-up, over one float forward pass.
pub fn kink_distance(model: &Model<f64>, x: &Tensor<f64>) -> f64 {
    let trace = forward(model, x, ForwardMode::Float).unwrap();
    let mut d = f64::INFINITY;
    for (i, layer) in model.net().layers().iter().enumerate() {
        if layer.has_relu() {
            if let Some(pre) = &trace.pre_act[i] {
                d = pre.data().iter().fold(d, |m, v| m.min(v.abs()));
            }
        }
        let (pool, pooled_input) = match &layer.op {
            LayerOp::Conv(c) => (c.pool, trace.post_act[i].as_ref()),
            LayerOp::MaxPool(p) => (Some(*p), Some(&trace.outputs[i - 1])),
            _ => (None, None),
        };
        if let (Some(p), Some(t)) = (pool, pooled_input) {
            let s = t.shape();
            let (h, w) = (s[2], s[3]);
            for plane in t.data().chunks(h * w) {
                for oy in 0..(h - p.window) / p.stride + 1 {
                    for ox in 0..(w - p.window) / p.stride + 1 {
                        let mut v: Vec<f64> = (0..p.window * p.window)
                            .map(|k| plane[(oy * p.stride + k / p.window) * w + ox * p.stride + k % p.window])
                            .collect();
                        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        // all-zero windows (after ReLU) carry no gradient either way
                        if v[0] != 0.0 || v[v.len() - 1] != 0.0 {
                            d = d.min(v[0] - v[1]);
                        }
                    }
                }
            }
        }
    }
    d
}

/// Published rows: (input maps, output maps, kernel, input width, pooling, relu).
pub const TABLE: [(usize, usize, usize, usize, bool, bool); 11] = [
    (3, 16, 1, 224, true, true),
    (16, 16, 7, 112, true, true),
    (16, 32, 7, 54, true, true),
    (32, 64, 5, 24, false, true),
    (64, 64, 5, 22, false, true),
    (64, 64, 5, 20, false, true),
    (64, 128, 3, 18, false, true),
    (128, 128, 3, 18, false, true),
    (128, 128, 3, 18, false, true),
    (128, 128, 3, 18, false, true),
    (128, 128, 3, 18, true, true),
];
pub const FC: [(usize, usize, bool); 2] = [(128, 4096, true), (4096, 1000, false)];

/// Frozen from the hand tally below.
pub const OPS: u64 = 1_050_107_904;
pub const PARAMS: u64 = 5_583_512;

/// Tally straight from the table: each conv runs at its tabulated input
/// width with the chosen padding. Returns `(ops, params)`.
pub fn giga_tally() -> (u64, u64) {
    let pads = [0, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1];
    let mut ops = 0u64;
    let mut params = 0u64;
    for (&(cin, cout, k, width, _, _), pad) in TABLE.iter().zip(pads) {
        let out = width + 2 * pad - k + 1;
        ops += 2 * (cin * cout * k * k * out * out) as u64;
        params += (cin * cout * k * k + cout) as u64;
    }
    for &(fin, fout, _) in &FC {
        ops += 2 * (fin * fout) as u64;
        params += (fin * fout + fout) as u64;
    }
    (ops, params)
}

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

pub fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn net(layers: Vec<LayerDescriptor>) -> NetDescriptor {
    NetDescriptor::new(layers, 1.0).unwrap()
}

pub fn input(shape: Vec<usize>) -> LayerDescriptor {
    LayerDescriptor::new("in", LayerOp::Input { shape })
}

pub fn fc(i: usize, o: usize, relu: bool) -> LayerDescriptor {
    LayerDescriptor::new(format!("fc{i}x{o}"), LayerOp::InnerProduct(FcSpec { in_features: i, out_features: o, relu }))
}

#[allow(clippy::too_many_arguments)]
pub fn conv(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, relu: bool, pool: Option<PoolSpec>) -> LayerDescriptor {
    LayerDescriptor::new(
        name,
        LayerOp::Conv(ConvSpec { in_channels: cin, out_channels: cout, kernel: k, stride, pad, relu, pool }),
    )
}

pub fn softmax() -> LayerDescriptor {
    LayerDescriptor::new("prob", LayerOp::Softmax)
}

/// Central differences are only valid away from ReLU kinks and pooling
/// ties, so draws whose pre-activations or pooling gaps come closer than
/// this are skipped.
pub const MARGIN: f64 = 5e-3;

/// Gradient check of `net` on the first draw from `seed` onwards that keeps
/// clear of kinks. Returns the seed used and the worst relative error.
pub fn gradient_case(net: NetDescriptor, batch: usize, seed: u64) -> Result<(u64, f64), String> {
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let labels: Vec<usize> = (0..batch).map(|i| i % net.num_classes()).collect();
    for s in seed..seed + 200 {
        let model = Model::<f64>::init(net.clone(), s).unwrap();
        let x = random(shape.clone(), s + 1000);
        if kink_distance(&model, &x) < MARGIN {
            continue;
        }
        return Ok((s, gradient_check(&model, &x, &labels, EPS)));
    }
    Err("no draw kept every unit away from its kink".into())
}

pub fn reference_from(model: &Model<f64>, momentum: f64) -> ReferenceTrainer {
    let c = model.layer(1).unwrap();
    let f = model.layer(2).unwrap();
    ReferenceTrainer::new(
        c.weights.shadow().data().to_vec(),
        c.bias.shadow().data().to_vec(),
        f.weights.shadow().data().to_vec(),
        f.bias.shadow().data().to_vec(),
        momentum,
    )
}

/// Largest relative difference between two parameter vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, 1e-12)).fold(0.0, f64::max)
}

/// With quantization off, ten optimizer steps of the trainer against the
/// direct-loop reference. Returns the worst relative parameter difference.
pub fn trajectory_error() -> f64 {
    let net = reference_net();
    let samples = 80;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = Tensor::<f64>::from_fn(vec![samples, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..samples).map(|i| i % 4).collect();
    let data = Dataset::new(images.clone(), labels.clone(), 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        batch_size: 8,
        epochs: 1,
        seed: 21,
        patience: 0,
        ..TrainConfig::default()
    };
    let (trained, _) = finetune(&net, Init::Random, &data, &data, &cfg).unwrap();

    let mut reference = reference_from(&Model::<f64>::init(net, cfg.seed).unwrap(), cfg.momentum);
    let order = epoch_order(samples, cfg.seed, 0);
    assert_eq!(order.len() / cfg.batch_size, 10);
    for batch in order.chunks(cfg.batch_size) {
        let imgs: Vec<f64> = batch.iter().flat_map(|&i| images.outer(i).to_vec()).collect();
        let lbls: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        reference.step(&imgs, &lbls, cfg.learning_rate);
    }
    let c = trained.layer(1).unwrap();
    let f = trained.layer(2).unwrap();
    [
        max_rel_err(c.weights.shadow().data(), &reference.w1),
        max_rel_err(c.bias.shadow().data(), &reference.b1),
        max_rel_err(f.weights.shadow().data(), &reference.w2),
        max_rel_err(f.bias.shadow().data(), &reference.b2),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

