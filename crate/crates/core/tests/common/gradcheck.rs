//! Central finite-difference oracle for every tape primitive.

use fprune::tensor::{BnMode, ConvAttrs, PoolAttrs, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Conv2d,
    DepthwiseConv2d,
    MatMul,
    Add,
    BiasAdd,
    Mul,
    Concat,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Relu6,
    MaxPool,
    GlobalAvgPool,
    SoftmaxCrossEntropy,
    Scale,
    Flatten,
    Sum,
}

pub const ALL: [Primitive; 17] = [
    Primitive::Conv2d,
    Primitive::DepthwiseConv2d,
    Primitive::MatMul,
    Primitive::Add,
    Primitive::BiasAdd,
    Primitive::Mul,
    Primitive::Concat,
    Primitive::BatchNormTrain,
    Primitive::BatchNormEval,
    Primitive::Relu,
    Primitive::Relu6,
    Primitive::MaxPool,
    Primitive::GlobalAvgPool,
    Primitive::SoftmaxCrossEntropy,
    Primitive::Scale,
    Primitive::Flatten,
    Primitive::Sum,
];

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> fprune::Result<Var>>;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Box-Muller keeps this independent of rand_distr.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Values bounded away from `kinks` by at least `margin`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

/// Distinct values with gaps much larger than the FD step, randomly ordered.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn setup(prim: Primitive, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Forward) {
    let n = rng.gen_range(1..=3);
    match prim {
        Primitive::Conv2d => {
            let groups = rng.gen_range(1..=2);
            let cg = rng.gen_range(1..=2);
            let og = rng.gen_range(1..=2);
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=k / 2);
            let h = rng.gen_range(k..=6);
            let w = rng.gen_range(k..=6);
            let x = normal(rng, &[n, cg * groups, h, w]);
            let wt = normal(rng, &[og * groups, cg, k, k]);
            let attrs = ConvAttrs { stride, padding, groups };
            (vec![x, wt], Box::new(move |t, v| t.conv2d(v[0], v[1], attrs)))
        }
        Primitive::DepthwiseConv2d => {
            let c = rng.gen_range(1..=4);
            let stride = rng.gen_range(1..=2);
            let h = rng.gen_range(3..=6);
            let w = rng.gen_range(3..=6);
            let x = normal(rng, &[n, c, h, w]);
            let wt = normal(rng, &[c, 1, 3, 3]);
            let attrs = ConvAttrs { stride, padding: 1, groups: c };
            (vec![x, wt], Box::new(move |t, v| t.conv2d(v[0], v[1], attrs)))
        }
        Primitive::MatMul => {
            let k = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            (
                vec![normal(rng, &[n, k]), normal(rng, &[k, m])],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }
        Primitive::Add => {
            let (a, b) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
            let s = [n, a, b];
            (vec![normal(rng, &s), normal(rng, &s)], Box::new(|t, v| t.add(v[0], v[1])))
        }
        Primitive::BiasAdd => {
            let c = rng.gen_range(1..=4);
            (
                vec![normal(rng, &[n, c, 2, 3]), normal(rng, &[c])],
                Box::new(|t, v| t.bias_add(v[0], v[1])),
            )
        }
        Primitive::Mul => {
            let a = rng.gen_range(1..=4);
            let s = [n, a];
            (vec![normal(rng, &s), normal(rng, &s)], Box::new(|t, v| t.mul(v[0], v[1])))
        }
        Primitive::Concat => {
            let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (ca, cb, cc) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let a = normal(rng, &[n, ca, h, w]);
            let b = normal(rng, &[n, cb, h, w]);
            let c = normal(rng, &[n, cc, h, w]);
            (vec![a, b, c], Box::new(|t, v| t.concat(&[v[0], v[1], v[2]])))
        }
        Primitive::BatchNormTrain => {
            let c = rng.gen_range(1..=3);
            let n = rng.gen_range(2..=3);
            let x = normal(rng, &[n, c, 2, 3]);
            let g = normal(rng, &[c]);
            let b = normal(rng, &[c]);
            (
                vec![x, g, b],
                Box::new(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0)),
            )
        }
        Primitive::BatchNormEval => {
            let c = rng.gen_range(1..=3);
            let x = normal(rng, &[n, c, 3, 2]);
            let g = normal(rng, &[c]);
            let b = normal(rng, &[c]);
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..2.0)).collect();
            (
                vec![x, g, b],
                Box::new(move |t, v| {
                    Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0)
                }),
            )
        }
        Primitive::Relu => (
            vec![away_from(rng, &[n, 3, 2, 2], -2.0, 2.0, &[0.0], 1e-3)],
            Box::new(|t, v| t.relu(v[0])),
        ),
        Primitive::Relu6 => (
            vec![away_from(rng, &[n, 3, 2, 2], -2.0, 8.0, &[0.0, 6.0], 1e-3)],
            Box::new(|t, v| t.relu6(v[0])),
        ),
        Primitive::MaxPool => {
            let kernel = rng.gen_range(2..=3);
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..kernel.min(2));
            let x = distinct(rng, &[n, 2, 5, 5]);
            let attrs = PoolAttrs { kernel, stride, padding };
            (vec![x], Box::new(move |t, v| t.max_pool2d(v[0], attrs)))
        }
        Primitive::GlobalAvgPool => (
            {
                let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
                vec![normal(rng, &[n, 3, h, w])]
            },
            Box::new(|t, v| t.global_avg_pool(v[0])),
        ),
        Primitive::SoftmaxCrossEntropy => {
            let k = rng.gen_range(2..=5);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![normal(rng, &[n, k])],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            )
        }
        Primitive::Scale => {
            let s = rng.gen_range(-3.0..3.0);
            (vec![normal(rng, &[n, 4])], Box::new(move |t, v| t.scale(v[0], s)))
        }
        Primitive::Flatten => (
            vec![normal(rng, &[n, 2, 3, 2])],
            Box::new(|t, v| t.flatten(v[0])),
        ),
        Primitive::Sum => (vec![normal(rng, &[n, 3])], Box::new(|t, v| t.sum(v[0]))),
    }
}

/// Evaluates `sum(f(inputs) ⊙ proj)`; returns the loss and the tape handles.
fn projected_loss(f: &Forward, inputs: &[Tensor], proj: &Tensor, grad: bool) -> (f64, Tape, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p).expect("projection");
    let loss = tape.sum(prod).expect("sum");
    let value = tape.value(loss).data()[0];
    if grad {
        tape.backward(loss).expect("backward");
    }
    (value, tape, vars)
}

/// Maximum elementwise relative error between analytic and central-difference
/// gradients over all inputs of one randomly drawn instance of `prim`.
pub fn check(prim: Primitive, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, f) = setup(prim, &mut rng);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).shape().to_vec()
    };
    let proj = normal(&mut rng, &out_shape);
    let (_, tape, vars) = projected_loss(&f, &inputs, &proj, true);

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).expect("gradient missing").to_vec();
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let lp = projected_loss(&f, &plus, &proj, false).0;
            let lm = projected_loss(&f, &minus, &proj, false).0;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}
