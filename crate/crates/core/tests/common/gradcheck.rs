//! Central finite differences against the tape, per primitive.

use glab::painting::{PaintingFn, Rgb, GAUSSIAN_SIGMA, GAUSSIAN_SIZE};
use glab::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
const COORDS: usize = 12;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> glab::Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.worst < self.tolerance
    }
}

/// Scalar the checks differentiate: the output itself when scalar, else a
/// fixed random projection of it.
fn loss(case: &Case, inputs: &[Tensor], proj: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("primitive evaluates");
    if tape.value(out).len() == 1 && tape.shape(out).is_empty() {
        return (tape, vars, out);
    }
    let shape = tape.shape(out).to_vec();
    let r = proj.get_or_insert_with(|| Tensor::uniform(&shape, -1.0, 1.0, rng)).clone();
    let rv = tape.constant(r);
    let m = tape.mul(out, rv).expect("projection");
    let s = tape.sum(m).expect("projection");
    (tape, vars, s)
}

/// Norm-wise relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-6)` over a sample
/// of coordinates of every input.
pub fn relative_error(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let mut proj = None;
    let (tape, vars, root) = loss(case, &case.inputs, &mut proj, rng);
    let grads = tape.backward(root).expect("backward");
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, x) in case.inputs.iter().enumerate() {
        let g = grads.wrt(vars[i]);
        let coords: Vec<usize> = if x.len() <= COORDS {
            (0..x.len()).collect()
        } else {
            (0..COORDS).map(|_| rng.random_range(0..x.len())).collect()
        };
        for j in coords {
            let eval = |delta: f64, rng: &mut ChaCha8Rng, proj: &mut Option<Tensor>| {
                let mut inputs = case.inputs.clone();
                inputs[i].data_mut()[j] += delta;
                let (tape, _, root) = loss(case, &inputs, proj, rng);
                tape.value(root).item()
            };
            let numeric = (eval(STEP, rng, &mut proj) - eval(-STEP, rng, &mut proj)) / (2.0 * STEP);
            let analytic = g.data()[j];
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6)
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(lo..=hi)).collect()
}

fn unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform in [−1, 1] but at least 1e-2 away from 0 (kinks).
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(1e-2..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn any_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    dims(rng, rank, 1, 5)
}

fn image_shape(rng: &mut ChaCha8Rng, side_mult: usize) -> [usize; 4] {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = side_mult * rng.random_range(1..=3);
    let w = side_mult * rng.random_range(1..=3);
    [n, c, h, w]
}

fn boxed(f: impl Fn(&mut Tape, &[Var]) -> glab::Result<Var> + 'static) -> Build {
    Box::new(f)
}

/// Names of every checked function, in report order.
pub const NAMES: [&str; 25] = [
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "add_bias",
    "conv2d",
    "avg_pool",
    "upsample_nearest",
    "pad_replicate",
    "space_to_depth",
    "depth_to_space",
    "softmax",
    "silu",
    "relu",
    "sigmoid",
    "group_norm",
    "gather_rows",
    "mse",
    "sum",
    "frobenius_norm",
    "paint_gaussian",
    "paint_quantize",
];

pub fn tolerance(name: &str) -> f64 {
    if name == "paint_quantize" { 1e-3 } else { 1e-4 }
}

/// A random case for primitive `name`.
pub fn make_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    match name {
        "add" | "sub" | "mul" | "mse" => {
            let s = any_shape(rng);
            let name = name.to_string();
            Case {
                inputs: vec![unit(&s, rng), unit(&s, rng)],
                build: boxed(move |t, v| match name.as_str() {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    "mul" => t.mul(v[0], v[1]),
                    _ => t.mse(v[0], v[1]),
                }),
            }
        }
        "scale" => {
            let s = any_shape(rng);
            let c = rng.random_range(-3.0..3.0);
            Case { inputs: vec![unit(&s, rng)], build: boxed(move |t, v| t.scale(v[0], c)) }
        }
        "matmul" => {
            let d = dims(rng, 3, 1, 6);
            Case { inputs: vec![unit(&[d[0], d[1]], rng), unit(&[d[1], d[2]], rng)], build: boxed(|t, v| t.matmul(v[0], v[1])) }
        }
        "transpose" => {
            let d = dims(rng, 2, 1, 6);
            Case { inputs: vec![unit(&d, rng)], build: boxed(|t, v| t.transpose(v[0])) }
        }
        "reshape" => {
            let d = dims(rng, 3, 1, 4);
            let to = [d[2] * d[0], d[1]];
            Case { inputs: vec![unit(&d, rng)], build: boxed(move |t, v| t.reshape(v[0], &to)) }
        }
        "add_bias" => {
            let rank = rng.random_range(2..=4);
            let s = dims(rng, rank, 1, 4);
            let axis = rng.random_range(0..rank);
            Case { inputs: vec![unit(&s, rng), unit(&[s[axis]], rng)], build: boxed(move |t, v| t.add_bias(v[0], v[1], axis)) }
        }
        "conv2d" => {
            let groups = rng.random_range(1..=2);
            let (ci, oi) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let k = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..k);
            let n = rng.random_range(1..=2);
            let (h, w) = (rng.random_range(k..=7), rng.random_range(k..=7));
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![unit(&[n, groups * ci, h, w], rng), unit(&[groups * oi, ci, k, k], rng)];
            if bias {
                inputs.push(unit(&[groups * oi], rng));
            }
            Case { inputs, build: boxed(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad, groups)) }
        }
        "avg_pool" => {
            let k = rng.random_range(1..=3);
            let s = image_shape(rng, k);
            Case { inputs: vec![unit(&s, rng)], build: boxed(move |t, v| t.avg_pool(v[0], k)) }
        }
        "upsample_nearest" => {
            let k = rng.random_range(1..=3);
            let s = image_shape(rng, 1);
            Case { inputs: vec![unit(&s, rng)], build: boxed(move |t, v| t.upsample_nearest(v[0], k)) }
        }
        "pad_replicate" => {
            let p = rng.random_range(0..=2);
            let s = image_shape(rng, 2);
            Case { inputs: vec![unit(&s, rng)], build: boxed(move |t, v| t.pad_replicate(v[0], p)) }
        }
        "space_to_depth" => {
            let r = rng.random_range(1..=2);
            let s = image_shape(rng, r);
            Case { inputs: vec![unit(&s, rng)], build: boxed(move |t, v| t.space_to_depth(v[0], r)) }
        }
        "depth_to_space" => {
            let r = rng.random_range(1..=2);
            let [n, c, h, w] = image_shape(rng, 1);
            Case { inputs: vec![unit(&[n, c * r * r, h, w], rng)], build: boxed(move |t, v| t.depth_to_space(v[0], r)) }
        }
        "softmax" | "silu" | "sigmoid" | "sum" | "frobenius_norm" => {
            let s = any_shape(rng);
            let name = name.to_string();
            Case {
                inputs: vec![unit(&s, rng)],
                build: boxed(move |t, v| match name.as_str() {
                    "softmax" => t.softmax(v[0]),
                    "silu" => t.silu(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    "sum" => t.sum(v[0]),
                    _ => t.frobenius_norm(v[0]),
                }),
            }
        }
        "relu" => {
            let s = any_shape(rng);
            Case { inputs: vec![away_from_zero(&s, rng)], build: boxed(|t, v| t.relu(v[0])) }
        }
        "group_norm" => {
            let groups = rng.random_range(1..=3);
            let per = rng.random_range(1..=2);
            let n = rng.random_range(1..=2);
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            Case { inputs: vec![unit(&[n, groups * per, h, w], rng)], build: boxed(move |t, v| t.group_norm(v[0], groups, 1e-5)) }
        }
        "gather_rows" => {
            let (rows, d) = (rng.random_range(1..=6), rng.random_range(1..=5));
            let count = rng.random_range(1..=8);
            let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..rows)).collect();
            Case { inputs: vec![unit(&[rows, d], rng)], build: boxed(move |t, v| t.gather_rows(v[0], &idx)) }
        }
        "paint_gaussian" => {
            let (h, w) = (rng.random_range(3..=10), rng.random_range(3..=10));
            let y = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, rng);
            let f = PaintingFn::Gaussian { size: GAUSSIAN_SIZE, sigma: GAUSSIAN_SIGMA };
            painting_case(f, unit(&[1, 3, h, w], rng), y)
        }
        "paint_quantize" => {
            let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
            let k = rng.random_range(2..=6);
            let palette: Vec<Rgb> = (0..k).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let y = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, rng);
            let f = PaintingFn::Quantize { palette, temperature: 0.1 };
            painting_case(f, Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, rng), y)
        }
        other => panic!("no gradient check for {other}"),
    }
}

/// `mse(f(x), y)` with `y` fixed.
fn painting_case(f: PaintingFn, x: Tensor, y: Tensor) -> Case {
    Case {
        inputs: vec![x],
        build: boxed(move |t, v| {
            let p = f.apply_var(t, v[0])?;
            let yv = t.constant(y.clone());
            t.mse(p, yv)
        }),
    }
}

/// Runs `cases` random checks for every function in [`NAMES`].
pub fn suite(cases: usize, seed: u64) -> Vec<Outcome> {
    NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let worst = (0..cases).map(|_| relative_error(&make_case(name, &mut rng), &mut rng)).fold(0.0, f64::max);
            Outcome { name, cases, worst, tolerance: tolerance(name) }
        })
        .collect()
}
