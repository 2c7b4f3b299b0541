//! Double-precision gradient check of every layer and of a small composed
//! network on random instances.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::Result;
use crate::gapnet::{build_gapnet, ArchConfig, GapNet, Layer, PoolingKind};
use crate::nn::gradcheck::{gradcheck, FnFragment};
use crate::nn::{
    conv2d_backward, conv2d_forward, cross_entropy_loss, gap_backward, gap_forward, gmp_backward, gmp_forward,
    linear_softmax_backward, linear_softmax_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward,
    relu_forward,
};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 20;

/// Inputs closer than this to a ReLU hinge or a max tie are redrawn, so
/// central differences never straddle a kink.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_tensor(rng: &mut Pcg64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn relu_safe(rng: &mut Pcg64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() > KINK_MARGIN {
            break v;
        }
    })
}

/// Gap between the largest and second-largest value of `xs`.
fn top_gap(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in xs {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

fn window_margin(x: &Tensor<f64>) -> f64 {
    let [c, h, w] = *x.shape() else { unreachable!() };
    let mut m = f64::INFINITY;
    for ch in 0..c {
        for y in (0..h).step_by(2) {
            for xx in (0..w).step_by(2) {
                let vals = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| x.data()[(ch * h + y + dy) * w + xx + dx]);
                m = m.min(top_gap(vals.into_iter()));
            }
        }
    }
    m
}

fn map_margin(x: &Tensor<f64>) -> f64 {
    let [c, h, w] = *x.shape() else { unreachable!() };
    (0..c)
        .map(|ch| top_gap(x.data()[ch * h * w..(ch + 1) * h * w].iter().copied()))
        .fold(f64::INFINITY, f64::min)
}

fn split(p: &[f64], shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, p[off..off + n].to_vec()).expect("shape");
            off += n;
            t
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_conv(rng: &mut Pcg64) -> Result<f64> {
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (h, w) = (rng.random_range(4..=7), rng.random_range(4..=7));
    let xs = [cin, h, w];
    let ws = [cout, cin, k, k];
    let bs = [cout];
    let x = rand_tensor(rng, &xs);
    let wt = rand_tensor(rng, &ws);
    let b = rand_tensor(rng, &bs);
    let out = conv2d_forward(&x, &wt, &b, stride, pad)?;
    let r = rand_tensor(rng, out.shape());
    let shapes: [&[usize]; 3] = [&xs, &ws, &bs];
    let frag = FnFragment {
        loss: |p: &[f64]| {
            let t = split(p, &shapes);
            Ok(dot(&conv2d_forward(&t[0], &t[1], &t[2], stride, pad)?, &r))
        },
        gradient: |p: &[f64]| {
            let t = split(p, &shapes);
            let g = conv2d_backward(&t[0], &t[1], stride, pad, &r)?;
            let mut v = g.input.into_data();
            v.extend(g.params.iter().flat_map(|t| t.data().iter().copied()));
            Ok(v)
        },
    };
    let point: Vec<f64> = [x, wt, b].iter().flat_map(|t| t.data().to_vec()).collect();
    gradcheck(&frag, &point, EPS)
}

fn elementwise(
    x: Tensor<f64>,
    fwd: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    bwd: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    rng: &mut Pcg64,
) -> Result<f64> {
    let out = fwd(&x)?;
    let r = rand_tensor(rng, out.shape());
    let shape = x.shape().to_vec();
    let frag = FnFragment {
        loss: |p: &[f64]| Ok(dot(&fwd(&Tensor::new(&shape, p.to_vec())?)?, &r)),
        gradient: |p: &[f64]| Ok(bwd(&Tensor::new(&shape, p.to_vec())?, &r)?.into_data()),
    };
    gradcheck(&frag, x.data(), EPS)
}

fn spatial(rng: &mut Pcg64, even: bool) -> Vec<usize> {
    let pick = |rng: &mut Pcg64| {
        let v = rng.random_range(2..=6);
        if even { v & !1 } else { v }
    };
    vec![rng.random_range(1..=3), pick(rng), pick(rng)]
}

fn check_relu(rng: &mut Pcg64) -> Result<f64> {
    let shape = spatial(rng, false);
    let x = relu_safe(rng, &shape);
    elementwise(x, |x| Ok(relu_forward(x)), relu_backward, rng)
}

fn check_maxpool(rng: &mut Pcg64) -> Result<f64> {
    let shape = spatial(rng, true);
    let x = loop {
        let x = rand_tensor(rng, &shape);
        if window_margin(&x) > KINK_MARGIN {
            break x;
        }
    };
    elementwise(x, maxpool2x2_forward, maxpool2x2_backward, rng)
}

fn check_gap(rng: &mut Pcg64) -> Result<f64> {
    let shape = spatial(rng, false);
    let x = rand_tensor(rng, &shape);
    elementwise(x, gap_forward, |x, g| gap_backward(x.shape(), g), rng)
}

fn check_gmp(rng: &mut Pcg64) -> Result<f64> {
    let shape = spatial(rng, false);
    let x = loop {
        let x = rand_tensor(rng, &shape);
        if map_margin(&x) > KINK_MARGIN {
            break x;
        }
    };
    elementwise(x, gmp_forward, gmp_backward, rng)
}

fn check_linear_softmax(rng: &mut Pcg64) -> Result<f64> {
    let k = rng.random_range(1..=8);
    let c = rng.random_range(2..=6);
    let label = rng.random_range(0..c);
    let fs = [k];
    let ws = [c, k];
    let f = rand_tensor(rng, &fs).scale(2.0);
    let w = rand_tensor(rng, &ws).scale(2.0);
    let shapes: [&[usize]; 2] = [&fs, &ws];
    let frag = FnFragment {
        loss: |p: &[f64]| {
            let t = split(p, &shapes);
            let (_, probs) = linear_softmax_forward(&t[0], &t[1])?;
            Ok(cross_entropy_loss(&probs, label)?.0)
        },
        gradient: |p: &[f64]| {
            let t = split(p, &shapes);
            let (_, probs) = linear_softmax_forward(&t[0], &t[1])?;
            let (_, d) = cross_entropy_loss(&probs, label)?;
            let (dw, df) = linear_softmax_backward(&t[0], &t[1], &d)?;
            let mut v = df.into_data();
            v.extend_from_slice(dw.data());
            Ok(v)
        },
    };
    let point: Vec<f64> = f.data().iter().chain(w.data()).copied().collect();
    gradcheck(&frag, &point, EPS)
}

/// Smallest distance of any ReLU input to zero, or of any positive pooled
/// maximum to its runner-up, along the forward pass.
fn net_margin(net: &GapNet<f64>, image: &Tensor<f64>) -> Result<f64> {
    let mut m = f64::INFINITY;
    let mut x = image.clone();
    for layer in net.backbone() {
        x = match layer {
            Layer::Conv(c) => c.forward(&x)?,
            Layer::Relu => {
                m = m.min(x.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));
                relu_forward(&x)
            }
            Layer::MaxPool => {
                m = m.min(window_margin(&x));
                maxpool2x2_forward(&x)?
            }
        };
    }
    let pre = net.head().forward(&x)?;
    m = m.min(pre.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));
    if net.pooling() == PoolingKind::Gmp {
        m = m.min(map_margin(&relu_forward(&pre)));
    }
    Ok(m)
}

fn check_composed(rng: &mut Pcg64, pooling: PoolingKind) -> Result<f64> {
    let arch = ArchConfig::conv_stack((1, 8, 8), &[3], 1, 4, 3, pooling);
    let (net, img) = loop {
        let net: GapNet<f64> = build_gapnet(&arch, rng.random())?;
        let img = rand_tensor(rng, &[1, 8, 8]);
        if net_margin(&net, &img)? > KINK_MARGIN {
            break (net, img);
        }
    };
    let label = rng.random_range(0..3);
    let frag = FnFragment {
        loss: |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(p)?;
            Ok(n.loss_and_grad(&img, label)?.0)
        },
        gradient: |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(p)?;
            let g = n.loss_and_grad(&img, label)?.2;
            Ok(g.params.iter().flat_map(|t| t.data().iter().copied()).collect())
        },
    };
    gradcheck(&frag, &net.flat_params(), EPS)
}

fn run(name: &'static str, instances: usize, rng: &mut Pcg64, mut f: impl FnMut(&mut Pcg64) -> Result<f64>) -> Result<LayerCheck> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(f(rng)?);
    }
    Ok(LayerCheck {
        name,
        instances,
        max_rel_err: worst,
    })
}

/// Checks conv2d, ReLU, 2×2 max pool, GAP, GMP, linear-softmax with
/// cross-entropy, and GAP and GMP composed networks.
pub fn run_gradient_suite(instances: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = Pcg64::seed_from_u64(seed);
    Ok(vec![
        run("conv2d", instances, &mut rng, check_conv)?,
        run("relu", instances, &mut rng, check_relu)?,
        run("maxpool2x2", instances, &mut rng, check_maxpool)?,
        run("gap", instances, &mut rng, check_gap)?,
        run("gmp", instances, &mut rng, check_gmp)?,
        run("linear_softmax_ce", instances, &mut rng, check_linear_softmax)?,
        run("network_gap", instances, &mut rng, |r| check_composed(r, PoolingKind::Gap))?,
        run("network_gmp", instances, &mut rng, |r| check_composed(r, PoolingKind::Gmp))?,
    ])
}
