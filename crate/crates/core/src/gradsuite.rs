//! Finite-difference checks of every differentiable primitive and of one
//! full trident block, run in `f64`.
//!
//! Each case reduces its output to a scalar with a fixed random projection
//! `sum(out * R)`; a plain sum would make layer norm and softmax look
//! constant.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{BranchState, Ctx, Heads, Mode, ModelConfig, ParamBuilder, ParameterStore, TridentBlock};
use crate::signal::{StftConfig, StftPlan};
use crate::tensor::{gradient_check, Activation, ConvSpec, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

/// Largest accepted relative error per coordinate.
pub const REL_TOL: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms. Some block
/// parameters have an exactly zero gradient (a bias constant across channels
/// ahead of a layer norm) and finite differences only see rounding there.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_err < REL_TOL
    }
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values in `±[0.2, 1]`, away from the kinks of relu and `|z|`.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * R)` with `R` fixed by the shape of `y` and `seed`.
fn project(t: &mut Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ y.value().numel() as u64);
    let r = t.constant(uniform(&mut rng, y.shape(), -1.0, 1.0));
    let p = t.mul(y, &r)?;
    t.sum(&p)
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(move |t, v| {
            let y = f(t, v)?;
            project(t, &y, seed)
        }),
    }
}

fn primitive_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let plan = Rc::new(StftPlan::<f64>::new(StftConfig { frame_len: 8, hop: 4, fft_size: 10 })?);
    let s = seed;
    let mut cases = vec![
        case("add", vec![signed(r, &[3, 4]), signed(r, &[3, 4])], s, |t, v| t.add(&v[0], &v[1])),
        case("sub", vec![signed(r, &[3, 4]), signed(r, &[3, 4])], s, |t, v| t.sub(&v[0], &v[1])),
        case("mul", vec![signed(r, &[3, 4]), signed(r, &[3, 4])], s, |t, v| t.mul(&v[0], &v[1])),
        case("scale", vec![signed(r, &[5])], s, |t, v| t.scale(&v[0], 1.7)),
        case("add_scalar", vec![signed(r, &[5])], s, |t, v| t.add_scalar(&v[0], -0.3)),
        case("square", vec![signed(r, &[2, 3])], s, |t, v| t.square(&v[0])),
        case("sum", vec![signed(r, &[2, 3])], s, |t, v| t.sum(&v[0])),
        case("mean", vec![signed(r, &[2, 3])], s, |t, v| t.mean(&v[0])),
        case("mse", vec![signed(r, &[2, 3]), signed(r, &[2, 3])], s, |t, v| t.mse(&v[0], &v[1])),
        case("reshape", vec![signed(r, &[2, 6])], s, |t, v| t.reshape(&v[0], &[3, 4])),
        case("permute", vec![signed(r, &[2, 3, 4])], s, |t, v| t.permute(&v[0], &[2, 0, 1])),
        case("concat_last", vec![signed(r, &[2, 2]), signed(r, &[2, 3])], s, |t, v| t.concat_last(&v[0], &v[1])),
        case("expand", vec![signed(r, &[2, 1, 3])], s, |t, v| t.expand(&v[0], &[2, 4, 3])),
        case("mean_middle", vec![signed(r, &[2, 3, 4])], s, |t, v| t.mean_middle(&v[0])),
        case("matmul", vec![signed(r, &[3, 4]), signed(r, &[4, 2])], s, |t, v| t.matmul(&v[0], &v[1])),
        case("linear", vec![signed(r, &[2, 3, 4]), signed(r, &[4, 5]), signed(r, &[5])], s, |t, v| {
            t.linear(&v[0], &v[1], Some(&v[2]))
        }),
        case("bmm", vec![signed(r, &[2, 3, 4]), signed(r, &[2, 4, 2])], s, |t, v| t.bmm(&v[0], &v[1], false)),
        case("bmm_trans_b", vec![signed(r, &[2, 3, 4]), signed(r, &[2, 5, 4])], s, |t, v| t.bmm(&v[0], &v[1], true)),
        case("conv2d", vec![signed(r, &[2, 5, 6, 2]), signed(r, &[3, 3, 2, 3]), signed(r, &[3])], s, |t, v| {
            t.conv2d(&v[0], &v[1], Some(&v[2]), ConvSpec { stride: (2, 2), padding: (1, 1) })
        }),
        case("conv2d_rect", vec![signed(r, &[1, 4, 7, 2]), signed(r, &[1, 7, 2, 2])], s, |t, v| {
            t.conv2d(&v[0], &v[1], None, ConvSpec { stride: (1, 2), padding: (0, 3) })
        }),
        case("depthwise_conv2d", vec![signed(r, &[2, 4, 5, 3]), signed(r, &[3, 3, 3]), signed(r, &[3])], s, |t, v| {
            t.depthwise_conv2d(&v[0], &v[1], Some(&v[2]))
        }),
        case(
            "depthwise_separable_conv2d",
            vec![signed(r, &[1, 4, 4, 3]), signed(r, &[3, 3, 3]), signed(r, &[3]), signed(r, &[3, 2]), signed(r, &[2])],
            s,
            |t, v| t.depthwise_separable_conv2d(&v[0], (&v[1], Some(&v[2])), (&v[3], Some(&v[4]))),
        ),
        case("relu", vec![signed(r, &[3, 4])], s, |t, v| t.activation(&v[0], Activation::Relu)),
        case("gelu", vec![uniform(r, &[3, 4], -3.0, 3.0)], s, |t, v| t.gelu(&v[0])),
        case("tanh", vec![uniform(r, &[3, 4], -2.0, 2.0)], s, |t, v| t.activation(&v[0], Activation::Tanh)),
        case("sigmoid", vec![uniform(r, &[3, 4], -3.0, 3.0)], s, |t, v| t.activation(&v[0], Activation::Sigmoid)),
        case("softmax_last", vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], s, |t, v| t.softmax(&v[0], 2)),
        case("softmax_middle", vec![uniform(r, &[2, 3, 4], -2.0, 2.0)], s, |t, v| t.softmax(&v[0], 1)),
        case("layer_norm", vec![signed(r, &[2, 3, 5]), signed(r, &[5]), signed(r, &[5])], s, |t, v| {
            t.layer_norm(&v[0], &v[1], &v[2], 1e-5)
        }),
        case("batch_norm_train", vec![signed(r, &[2, 3, 2, 4]), signed(r, &[4]), signed(r, &[4])], s, |t, v| {
            Ok(t.batch_norm_train(&v[0], &v[1], &v[2], 1e-5)?.0)
        }),
    ];
    let (mean, var) = (signed(r, &[4]).into_data(), uniform(r, &[4], 0.5, 2.0).into_data());
    cases.push(case("batch_norm_infer", vec![signed(r, &[2, 3, 4]), signed(r, &[4]), signed(r, &[4])], s, move |t, v| {
        t.batch_norm_infer(&v[0], &v[1], &v[2], &mean, &var, 1e-5)
    }));
    cases.extend([
        case("complex_mul", vec![signed(r, &[2, 3, 2]), signed(r, &[2, 3, 2])], s, |t, v| t.complex_mul(&v[0], &v[1])),
        case("complex_compress", vec![signed(r, &[2, 3, 2])], s, |t, v| t.complex_compress(&v[0], 0.3)),
        case("complex_abs_pow", vec![signed(r, &[2, 3, 2])], s, |t, v| t.complex_abs_pow(&v[0], 0.3)),
        case("complex_tanh_amplitude", vec![signed(r, &[2, 3, 2])], s, |t, v| t.complex_tanh_amplitude(&v[0])),
        case("istft", vec![signed(r, &[2, 6, 6, 2])], s, move |t, v| t.istft(&plan, &v[0], 18)),
    ]);
    Ok(cases)
}

/// Configuration of the checked block: `C = 8`, `M_T = M_F = 2`, one head.
pub fn block_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        kernel: 3,
        tokens_t: 2,
        tokens_f: 2,
        blocks: 1,
        decoder_blocks: 1,
        heads: Heads::uniform(1),
        ffn_hidden: 8,
        posenc_channels: 8,
        ..ModelConfig::tiny()
    }
}

/// Gradients of one trident block on a `T = 5`, `F = 4` input with respect
/// to its inputs, global tokens and every parameter.
fn block_case(seed: u64) -> Result<Case> {
    let cfg = block_config();
    let mut store = ParameterStore::new();
    let block = {
        let mut b = ParamBuilder::new(&mut store, seed);
        TridentBlock::build(&mut b, &cfg, 0)?
    };
    let (b, t, f, c, m, p) = (1, 5, 4, cfg.channels, cfg.tokens_t, cfg.posenc_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut inputs = vec![
        signed(&mut rng, &[b, t, f, c]),
        signed(&mut rng, &[b, m, f, c]),
        signed(&mut rng, &[b, m, t, c]),
        uniform(&mut rng, &[b, t, f, p], -1.0, 1.0),
    ];
    // freshly initialized biases are zero, which puts GELU inputs on a grid
    // of near-identical values; random biases exercise the general case
    inputs.extend(store.learnable_tensors::<f64>().into_iter().map(|t| {
        let shape = t.shape().to_vec();
        Tensor::from_fn(shape, |i| t.data()[i] + rng.random_range(-0.1..0.1))
    }));
    let f = move |tape: &mut Tape<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
        let bound = store.bind_with(tape, &v[4..])?;
        let mut ctx = Ctx::new(tape, &bound, Mode::Train);
        let state = BranchState { main: v[0].clone(), t_global: Some(v[1].clone()), f_global: Some(v[2].clone()) };
        let out = block.forward(&mut ctx, state, &v[3])?;
        let mut total = project(ctx.tape, &out.main, seed)?;
        for g in [out.t_global, out.f_global].into_iter().flatten() {
            let pg = project(ctx.tape, &g, seed.wrapping_add(7))?;
            total = ctx.tape.add(&total, &pg)?;
        }
        Ok(total)
    };
    Ok(Case { name: "trident_block", inputs, f: Box::new(f) })
}

fn run_case(c: Case) -> Result<CaseResult> {
    let start = Instant::now();
    let report = gradient_check(c.f, &c.inputs, GradCheckOptions { step: STEP, abs_floor: ABS_FLOOR, ..Default::default() })?;
    Ok(CaseResult { name: c.name.to_string(), report, elapsed: start.elapsed() })
}

/// Names of the checked primitives, in suite order.
pub fn primitive_names() -> Vec<&'static str> {
    primitive_cases(0).map(|cs| cs.iter().map(|c| c.name).collect()).unwrap_or_default()
}

pub fn check_primitives(seed: u64) -> Result<Vec<CaseResult>> {
    primitive_cases(seed)?.into_iter().map(run_case).collect()
}

pub fn check_block(seed: u64) -> Result<CaseResult> {
    run_case(block_case(seed)?)
}

/// Every primitive followed by the trident block.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = check_primitives(seed)?;
    out.push(check_block(seed)?);
    Ok(out)
}
