//! Finite-difference checks for every differentiable op and for the whole
//! pipeline at the tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamVars;
use crate::pipeline::{forward_var, task_loss, ModelConfig};
use crate::sampler::SampleSpec;
use crate::tensor::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::tensor::{Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_COORDS: usize = 50;
pub const PIPELINE_IMAGE: usize = 32;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: String,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts a non-scalar output against fixed random weights so every
/// output element contributes with a distinct coefficient.
fn contract(y: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Var::constant(rand_tensor(&mut rng, y.shape())?);
    y.mul(&w)?.sum()
}

type OpFn = Box<dyn Fn(&[Var]) -> Result<Var>>;

struct Case {
    op: &'static str,
    shapes: Vec<Vec<usize>>,
    f: OpFn,
}

fn case(op: &'static str, shapes: &[&[usize]], f: impl Fn(&[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

fn positive_gamma(v: &Var) -> Result<Var> {
    v.square()?.add(&Var::constant(Tensor::scalar(0.5)))
}

fn cases() -> Vec<Case> {
    let mut c = Vec::new();
    for s in [&[5][..], &[2, 3], &[2, 3, 4]] {
        c.push(case("add", &[s, s], |v| v[0].add(&v[1])));
        c.push(case("sub", &[s, s], |v| v[0].sub(&v[1])));
        c.push(case("mul", &[s, s], |v| v[0].mul(&v[1])));
        c.push(case("scale", &[s], |v| v[0].scale(-1.7)));
        c.push(case("square", &[s], |v| v[0].square()));
        c.push(case("gelu", &[s], |v| v[0].gelu()));
        c.push(case("mean", &[s], |v| v[0].mean()));
        c.push(case("softmax_rows", &[s], |v| v[0].softmax_rows()));
    }
    for (a, b) in [(&[2, 3][..], &[3][..]), (&[2, 3, 4], &[3, 4]), (&[2, 2, 2, 3], &[3])] {
        c.push(case("add_broadcast", &[a, b], |v| v[0].add(&v[1])));
    }
    c.push(case("reshape", &[&[2, 6]], |v| v[0].reshape(&[3, 4])));
    c.push(case("reshape", &[&[2, 3, 4]], |v| v[0].reshape(&[6, 4])));
    c.push(case("reshape", &[&[24]], |v| v[0].reshape(&[2, 3, 4])));
    c.push(case("permute", &[&[2, 3]], |v| v[0].permute(&[1, 0])));
    c.push(case("permute", &[&[2, 3, 4]], |v| v[0].permute(&[2, 0, 1])));
    c.push(case("permute", &[&[2, 1, 3, 2, 2]], |v| v[0].permute(&[2, 0, 3, 1, 4])));
    c.push(case("narrow", &[&[5]], |v| v[0].narrow(0, 1, 3)));
    c.push(case("narrow", &[&[3, 4]], |v| v[0].narrow(1, 2, 2)));
    c.push(case("narrow", &[&[3, 2, 4]], |v| v[0].narrow(0, 2, 1)));
    c.push(case("expand_leading", &[&[3]], |v| v[0].expand_leading(&[2])));
    c.push(case("expand_leading", &[&[2, 3]], |v| v[0].expand_leading(&[2, 2])));
    c.push(case("expand_leading", &[&[4]], |v| v[0].expand_leading(&[1, 3])));
    c.push(case("gather_rows", &[&[5, 3]], |v| v[0].gather_rows(&[4, 0, 2])));
    c.push(case("gather_rows", &[&[2, 4, 3]], |v| v[0].gather_rows(&[1, 3])));
    c.push(case("gather_rows", &[&[6, 2]], |v| v[0].gather_rows(&[5])));
    c.push(case("scatter_rows", &[&[5, 3], &[2, 3]], |v| v[0].scatter_rows(&[3, 1], &v[1])));
    c.push(case("scatter_rows", &[&[2, 4, 3], &[2, 3, 3]], |v| v[0].scatter_rows(&[0, 2, 3], &v[1])));
    c.push(case("scatter_rows", &[&[4, 2], &[1, 2]], |v| v[0].scatter_rows(&[0], &v[1])));
    c.push(case("conv2d", &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], |v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1)));
    c.push(case("conv2d", &[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]], |v| v[0].conv2d(&v[1], Some(&v[2]), 1, 0)));
    c.push(case("conv2d", &[&[1, 1, 6, 4], &[2, 1, 3, 3]], |v| v[0].conv2d(&v[1], None, 1, 1)));
    c.push(case("conv2d", &[&[1, 2, 4, 4], &[2, 2, 2, 2]], |v| v[0].conv2d(&v[1], None, 2, 0)));
    c.push(case("linear", &[&[4], &[3, 4], &[3]], |v| v[0].linear(&v[1], Some(&v[2]))));
    c.push(case("linear", &[&[2, 3], &[5, 3], &[5]], |v| v[0].linear(&v[1], Some(&v[2]))));
    c.push(case("linear", &[&[2, 2, 3], &[2, 3]], |v| v[0].linear(&v[1], None)));
    c.push(case("matmul", &[&[1, 2, 3], &[1, 3, 4]], |v| v[0].matmul(&v[1], false)));
    c.push(case("matmul", &[&[2, 3, 2], &[2, 4, 2]], |v| v[0].matmul(&v[1], true)));
    c.push(case("matmul", &[&[3, 1, 4], &[3, 4, 1]], |v| v[0].matmul(&v[1], false)));
    c.push(case("layer_norm", &[&[2, 4, 3, 3], &[4], &[4]], |v| {
        v[0].layer_norm(&positive_gamma(&v[1])?, &v[2], 1e-6)
    }));
    c.push(case("layer_norm", &[&[3, 5], &[5], &[5]], |v| {
        v[0].layer_norm(&positive_gamma(&v[1])?, &v[2], 1e-6)
    }));
    c.push(case("layer_norm", &[&[2, 3, 4], &[4], &[4]], |v| {
        v[0].layer_norm(&positive_gamma(&v[1])?, &v[2], 1e-6)
    }));
    c.push(case("avg_pool2d", &[&[1, 1, 2, 2]], |v| v[0].avg_pool2d(2, 2)));
    c.push(case("avg_pool2d", &[&[2, 3, 4, 6]], |v| v[0].avg_pool2d(2, 2)));
    c.push(case("avg_pool2d", &[&[1, 2, 8, 8]], |v| v[0].avg_pool2d(4, 4)));
    c.push(case("upsample_nearest2x", &[&[1, 1, 1, 1]], |v| v[0].upsample_nearest2x()));
    c.push(case("upsample_nearest2x", &[&[1, 2, 2, 3]], |v| v[0].upsample_nearest2x()));
    c.push(case("upsample_nearest2x", &[&[2, 1, 3, 2]], |v| v[0].upsample_nearest2x()));
    c
}

/// Every differentiable op on at least three shapes.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, case) in cases().into_iter().enumerate() {
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| rand_tensor(&mut rng, s))
            .collect::<Result<_>>()?;
        let cseed = seed.wrapping_add(i as u64);
        let f = &case.f;
        let report = check_gradients(|v| contract(&f(v)?, cseed), &inputs, &GradCheckOptions::default())?;
        out.push(OpCheck {
            op: case.op,
            shapes: format!("{:?}", case.shapes),
            report,
        });
    }
    Ok(out)
}

/// Synthetic image in `[0, 1]`.
pub fn random_image(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Result<Tensor> {
    Tensor::from_fn(&[n, 3, h, w], |_| rng.random_range(0.0..1.0))
}

/// Fixed smooth batch used by the training demo: a separable sine pattern,
/// phase-shifted per channel, in `[0.1, 0.9]`.
pub fn synthetic_batch(n: usize, h: usize, w: usize) -> Result<Tensor> {
    Tensor::from_fn(&[n, 3, h, w], |i| {
        let x = (i % w) as f64;
        let y = ((i / w) % h) as f64;
        let c = ((i / (w * h)) % 3) as f64;
        0.5 + 0.4 * ((x * 0.1 + c).sin() * (y * 0.07 - c).cos())
    })
}

/// Whole pipeline (tiny config, 32x32 image, random 50% sampling so two of
/// four tokens reach the encoder) against finite differences on
/// `coords` parameter entries drawn uniformly, or on every entry when
/// `coords` is `None`.
pub fn pipeline_gradient_check(seed: u64, coords: Option<usize>) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let store = cfg.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let image = random_image(&mut rng, 1, PIPELINE_IMAGE, PIPELINE_IMAGE)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let spec = SampleSpec::random(0.5, seed);
    let f = |vars: &[Var]| -> Result<Var> {
        let p = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().cloned()));
        let img = Var::constant(image.clone());
        let pyramid = forward_var(&img, &cfg, &p, &spec)?;
        task_loss(&img, &pyramid, &p)
    };
    let opts = GradCheckOptions {
        max_coords: coords,
        seed,
        ..Default::default()
    };
    check_gradients(f, &tensors, &opts)
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub ops: Vec<OpCheck>,
    pub pipeline: GradCheckReport,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.ops
            .iter()
            .map(|c| c.report.max_rel_err)
            .fold(self.pipeline.max_rel_err, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.max_rel_err() < GRAD_TOLERANCE
    }
}

pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    Ok(SuiteReport {
        ops: op_gradient_suite(seed)?,
        pipeline: pipeline_gradient_check(seed, Some(PIPELINE_COORDS))?,
    })
}
