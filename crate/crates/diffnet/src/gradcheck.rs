//! Finite-difference verification of reverse-mode gradients (double precision).

use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step of the five-point central stencil.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl FdReport {
    fn new(name: &str) -> Self {
        FdReport {
            name: name.to_string(),
            probes: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.probes += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel.is_nan() {
            self.max_rel_err = f64::INFINITY;
        } else {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.probes > 0 && self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn stencil(mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = FD_STEP;
    let f2 = eval(2.0 * h)?;
    let f1 = eval(h)?;
    let m1 = eval(-h)?;
    let m2 = eval(-2.0 * h)?;
    Ok((-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// Checks `d f / d inputs` at `probes` random coordinates. `f` receives the
/// inputs as tape leaves and must return a scalar.
pub fn check_inputs<R, F>(name: &str, inputs: &[Tensor<f64>], probes: usize, rng: &mut R, f: F) -> Result<FdReport>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_inputs_with(name, inputs, probes, rng, false, f)
}

/// As [`check_inputs`]; `inject_fault` corrupts convolution kernel gradients on
/// the analytic pass.
pub fn check_inputs_with<R, F>(
    name: &str,
    inputs: &[Tensor<f64>],
    probes: usize,
    rng: &mut R,
    inject_fault: bool,
    f: F,
) -> Result<FdReport>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if inject_fault {
        tape.inject_conv_weight_grad_fault();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut x = x.clone();
                if i == which {
                    x.data_mut()[idx] += delta;
                }
                t.constant(x)
            })
            .collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut report = FdReport::new(name);
    let sizes: Vec<usize> = inputs.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    for _ in 0..probes {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let numeric = stencil(|d| eval(which, k, d))?;
        report.record(analytic[which].data()[k], numeric);
    }
    Ok(report)
}

/// Checks parameter gradients of `f` at `per_param` random coordinates of every
/// parameter tensor in the store.
pub fn check_params<R, F>(name: &str, store: &ParamStore<f64>, per_param: usize, rng: &mut R, f: F) -> Result<FdReport>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward_into(loss, &mut work)?;
    let analytic: Vec<Tensor<f64>> = work.iter().map(|p| p.grad.clone()).collect();

    let mut report = FdReport::new(name);
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let n = store.get(*id).value.len();
        for _ in 0..per_param.min(n.max(1)) {
            let k = rng.random_range(0..n);
            let numeric = stencil(|d| {
                let mut s = store.clone();
                s.get_mut(*id).value.data_mut()[k] += d;
                let mut t = Tape::new();
                let l = f(&mut t, &s)?;
                Ok(t.value(l).item())
            })?;
            report.record(analytic[pi].data()[k], numeric);
        }
    }
    Ok(report)
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn rand_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Sum of `y` times a fixed random tensor, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(rand_tensor(&mut rng, &shape, 1.0));
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

/// Checks every tape primitive once, `probes` coordinates each. With
/// `inject_fault` the convolution kernel gradient is corrupted, which must show
/// up as a failing `conv2d` row.
pub fn primitive_suite(seed: u64, probes: usize, inject_fault: bool) -> Result<Vec<FdReport>> {
    use crate::recurrent::{gated_recurrent_conv, GruConvVars};
    use crate::tape::{Conv2dSpec, Deconv2dSpec};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let pw = [2, 3, 4, 4];
    let target = Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let weight = Tensor::from_fn(&[2, 1, 4, 4], |i| 0.1 + (i % 5) as f64 * 0.2);
    let (t2, w2) = (target.clone(), weight.clone());
    let blur: Vec<f64> = (0..9).map(|i| 0.05 + 0.01 * i as f64).collect();
    let cases: Vec<Case> = vec![
        (
            "conv2d",
            vec![rand_tensor(r, &[1, 2, 6, 6], 1.0), rand_tensor(r, &[3, 2, 3, 3], 0.5), rand_tensor(r, &[3], 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1))?;
                project(t, y, 1)
            }),
        ),
        (
            "deconv2d",
            vec![rand_tensor(r, &[2, 2, 4, 4], 1.0), rand_tensor(r, &[2, 3, 3, 3], 0.5), rand_tensor(r, &[3], 0.5)],
            Box::new(|t, v| {
                let y = t.deconv2d(v[0], v[1], Some(v[2]), Deconv2dSpec::new(2, 1, 1))?;
                project(t, y, 2)
            }),
        ),
        (
            "linear",
            vec![rand_tensor(r, &[3, 5], 1.0), rand_tensor(r, &[4, 5], 1.0), rand_tensor(r, &[4], 1.0)],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, 3)
            }),
        ),
        (
            "gated_recurrent_conv",
            vec![
                rand_tensor(r, &[6, 5, 3, 3], 0.3),
                rand_tensor(r, &[6], 0.3),
                rand_tensor(r, &[3, 5, 3, 3], 0.3),
                rand_tensor(r, &[3], 0.3),
                rand_tensor(r, &[1, 3, 5, 5], 1.0),
                rand_tensor(r, &[1, 2, 5, 5], 1.0),
                rand_tensor(r, &[1, 2, 5, 5], 1.0),
            ],
            Box::new(|t, v| {
                let vars = GruConvVars::from_vars(v[0], v[1], v[2], v[3], 3, 3);
                let h = gated_recurrent_conv(t, v[4], v[5], &vars)?;
                let h = gated_recurrent_conv(t, h, v[6], &vars)?;
                project(t, h, 4)
            }),
        ),
        ("add", two(r, &pw), Box::new(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, 5) })),
        ("sub", two(r, &pw), Box::new(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 6) })),
        ("mul", two(r, &pw), Box::new(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 7) })),
        (
            "div",
            two(r, &pw),
            Box::new(|t, v| {
                let d = t.mul(v[1], v[1])?;
                let d = t.add_scalar(d, 0.5);
                let y = t.div(v[0], d)?;
                project(t, y, 8)
            }),
        ),
        (
            "add_broadcast_channels",
            vec![rand_tensor(r, &[2, 1, 4, 4], 1.0), rand_tensor(r, &pw, 1.0)],
            Box::new(|t, v| { let y = t.add_broadcast_channels(v[0], v[1])?; project(t, y, 9) }),
        ),
        ("scale", two(r, &pw), Box::new(|t, v| { let y = t.scale(v[0], -1.7); project(t, y, 10) })),
        ("add_scalar", two(r, &pw), Box::new(|t, v| {
            let y = t.add_scalar(v[0], 0.3);
            let y = t.mul(y, y)?;
            project(t, y, 11)
        })),
        ("one_minus", two(r, &pw), Box::new(|t, v| { let y = t.one_minus(v[0]); project(t, y, 12) })),
        ("sigmoid", two(r, &pw), Box::new(|t, v| { let y = t.sigmoid(v[0]); project(t, y, 13) })),
        ("tanh", two(r, &pw), Box::new(|t, v| { let y = t.tanh(v[0]); project(t, y, 14) })),
        ("relu", two(r, &pw), Box::new(|t, v| { let y = t.relu(v[0]); project(t, y, 15) })),
        ("concat_channels", two(r, &pw), Box::new(|t, v| { let y = t.concat_channels(&[v[0], v[1]])?; project(t, y, 16) })),
        ("slice_channels", two(r, &pw), Box::new(|t, v| { let y = t.slice_channels(v[0], 1, 2)?; project(t, y, 17) })),
        ("upsample_nearest", two(r, &pw), Box::new(|t, v| { let y = t.upsample_nearest(v[0], 2)?; project(t, y, 18) })),
        ("reshape", two(r, &pw), Box::new(|t, v| { let y = t.reshape(v[0], &[2, 48])?; project(t, y, 19) })),
        ("sum", two(r, &pw), Box::new(|t, v| { let y = t.mul(v[0], v[1])?; Ok(t.sum(y)) })),
        ("mean", two(r, &pw), Box::new(|t, v| { let y = t.mul(v[0], v[0])?; Ok(t.mean(y)) })),
        (
            "blur_valid",
            two(r, &pw),
            Box::new(move |t, v| { let y = t.blur_valid(v[0], &blur, 3)?; project(t, y, 20) }),
        ),
        (
            "bce_sum",
            vec![rand_tensor(r, &[2, 1, 4, 4], 2.0)],
            Box::new(move |t, v| { let p = t.sigmoid(v[0]); t.bce_sum(p, &target, &weight) }),
        ),
        (
            "weighted_sq_err_sum",
            vec![rand_tensor(r, &[2, 1, 4, 4], 2.0)],
            Box::new(move |t, v| t.weighted_sq_err_sum(v[0], &t2, &w2)),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, f) in cases {
        out.push(check_inputs_with(name, &inputs, probes, &mut rng, inject_fault, |t, v| f(t, v))?);
    }
    Ok(out)
}

fn two<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Vec<Tensor<f64>> {
    vec![rand_tensor(rng, shape, 1.0), rand_tensor(rng, shape, 1.0)]
}
