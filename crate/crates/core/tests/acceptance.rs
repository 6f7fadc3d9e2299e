//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 7 and 8 share one smoke training run of several minutes.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tridentse::config::{OutputConfig, RunConfig};
use tridentse::data::{make_pair, MixSpec, NoiseKind, SnrMode};
use tridentse::gan::LossWeights;
use tridentse::gradsuite;
use tridentse::model::{
    count_params, estimate_flops, model_forward, BranchState, Ctx, Heads, Mode, ModelConfig, ParamBuilder,
    ParameterStore, TridentBlock, TridentNet,
};
use tridentse::model::Checkpoint;
use tridentse::signal::{istft, si_snr, stft, Waveform};
use tridentse::tensor::{Tape, Tensor, Var};
use tridentse::train::{load_generator, train_from_config, TrainConfig, Trainer};

const GRADSUITE_BUDGET: Duration = Duration::from_secs(120);
const ROUND_TRIP_TOL: f64 = 1e-6;
const ROUND_TRIP_BUDGET: Duration = Duration::from_secs(30);
const COST_TOL: f64 = 0.15;
const G1_FLOPS_TOL: f64 = 0.20;
const MASK_TOL: f64 = 1e-6;
const ROW_TOL: f64 = 1e-5;
const DUALITY_TOL: f64 = 1e-5;
const LOSS_RATIO: f64 = 0.5;
const SI_SNR_GAIN_DB: f64 = 5.0;
const SMOKE_BUDGET: Duration = Duration::from_secs(15 * 60);
const L_D_RATIO: f64 = 0.25;
const D_CLEAN_MIN: f64 = 0.9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: &str, name: &str, o: &Outcome, results: &mut Vec<bool>) {
    println!("[{}] {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push(o.pass);
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = gradsuite::run_suite(0).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = cases.iter().max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err)).unwrap();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    outcome(
        failed.is_empty() && elapsed < GRADSUITE_BUDGET,
        format!(
            "{} cases, worst {} at {:.2e} (< {:.0e}), failed {failed:?}, {:.1}s (< {}s)",
            cases.len(),
            worst.name,
            worst.report.max_rel_err,
            gradsuite::REL_TOL,
            elapsed.as_secs_f64(),
            GRADSUITE_BUDGET.as_secs()
        ),
    )
}

fn stft_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f32> = (0..48_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::from_samples(x).unwrap();
        let y = istft(&stft(&w).unwrap(), w.len()).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (&a, &b) in y.samples().iter().zip(w.samples()) {
            num += (a as f64 - b as f64).powi(2);
            den += (b as f64).powi(2);
        }
        worst = worst.max((num / den).sqrt());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < ROUND_TRIP_TOL && elapsed < ROUND_TRIP_BUDGET,
        format!("100 x 3 s, worst rel L2 {worst:.2e} (< {ROUND_TRIP_TOL:.0e}), {:.1}s (< 30s)", elapsed.as_secs_f64()),
    )
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

fn cost_model() -> Outcome {
    let rows = [
        ("S", ModelConfig::small(), 1.00e6, 19.8e9),
        ("M", ModelConfig::medium(), 1.42e6, 28.7e9),
        ("L", ModelConfig::large(), 3.03e6, 59.8e9),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    let mut prev = (0, 0);
    for (name, cfg, params_ref, flops_ref) in rows {
        let (p, f) = (count_params(&cfg), estimate_flops(&cfg, 3.0));
        pass &= within(p as f64, params_ref, COST_TOL) && within(f as f64, flops_ref, COST_TOL);
        pass &= p > prev.0 && f > prev.1;
        prev = (p, f);
        parts.push(format!(
            "{name} {:.3}M ({:+.1}%) {:.2}G ({:+.1}%)",
            p as f64 / 1e6,
            100.0 * (p as f64 / params_ref - 1.0),
            f as f64 / 1e9,
            100.0 * (f as f64 / flops_ref - 1.0)
        ));
    }
    outcome(pass, format!("{} (within ±15%, strictly increasing)", parts.join(", ")))
}

fn mask_bound() -> Outcome {
    let cfg = ModelConfig::tiny();
    let mut worst: f64 = 0.0;
    for draw in 0..100u64 {
        let (_, mut store) = TridentNet::init(&cfg, draw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let scale = rng.random_range(0.05f32..3.0);
        for id in store.learnable_ids() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::from_fn(shape, |_| rng.random_range(-scale..scale));
        }
        let amp = rng.random_range(1e-3f32..1.0);
        let len = rng.random_range(320..1600);
        let x = Waveform::from_samples((0..len).map(|_| rng.random_range(-amp..amp)).collect()).unwrap();
        let out = model_forward(&x, &cfg, &store, Mode::Train, false).unwrap();
        for z in out.mask.data().chunks_exact(2) {
            worst = worst.max((z[0] as f64).hypot(z[1] as f64));
        }
    }
    outcome(worst <= 1.0 + MASK_TOL, format!("100 draws, max |M| {worst:.7} (<= 1 + {MASK_TOL:.0e})"))
}

fn attention_rows() -> Outcome {
    let cfg = ModelConfig::medium();
    let (_, store) = TridentNet::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Waveform::from_samples((0..1600).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let out = model_forward(&x, &cfg, &store, Mode::Train, true).unwrap();
    let cap = out.attention.unwrap();
    let rows: usize = cap.records.iter().map(|r| r.weights.len() / r.keys).sum();
    let worst = cap.records.iter().map(|r| r.max_row_error()).fold(0.0, f64::max);
    outcome(
        !cap.records.is_empty() && worst <= ROW_TOL,
        format!("M config, {} maps, {rows} rows, max |Σ-1| {worst:.2e} (<= {ROW_TOL:.0e})", cap.records.len()),
    )
}

/// Max difference between the branch outputs of a block on `main` and the
/// swapped branch outputs on `main` transposed, with the frequency branch
/// given the time branch's weights.
fn duality_at(seed: u64) -> f64 {
    let cfg = ModelConfig {
        channels: 8,
        kernel: 3,
        tokens_t: 3,
        tokens_f: 3,
        heads: Heads::uniform(2),
        ffn_hidden: 12,
        posenc_channels: 8,
        ..ModelConfig::tiny()
    };
    let mut store = ParameterStore::new();
    let block = TridentBlock::build(&mut ParamBuilder::new(&mut store, seed), &cfg, 0).unwrap();
    let names: Vec<String> =
        store.iter().map(|(_, n, _)| n.to_string()).filter(|n| n.starts_with("blocks.0.t.")).collect();
    for name in names {
        let src = store.by_name(&name).unwrap().clone();
        let dst = store.id(&name.replacen("blocks.0.t.", "blocks.0.f.", 1)).unwrap();
        *store.get_mut(dst) = src;
    }
    let (b, t, f, c, m, p) = (2, 6, 5, cfg.channels, cfg.tokens_t, cfg.posenc_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| Tensor::<f64>::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    let (main, tg, fg, pe) = (random(&[b, t, f, c]), random(&[b, m, f, c]), random(&[b, m, t, c]), random(&[b, t, f, p]));

    let mut tape = Tape::<f64>::no_grad();
    let bound = store.bind(&mut tape, false);
    let mut ctx = Ctx::new(&mut tape, &bound, Mode::Train);
    let run = |ctx: &mut Ctx<f64>, main: Tensor<f64>, tg: Tensor<f64>, fg: Tensor<f64>, pe: Tensor<f64>| {
        let state = BranchState {
            main: ctx.tape.constant(main),
            t_global: Some(ctx.tape.constant(tg)),
            f_global: Some(ctx.tape.constant(fg)),
        };
        let pe = ctx.tape.constant(pe);
        block.forward(ctx, state, &pe).unwrap()
    };
    let transpose = |ctx: &mut Ctx<f64>, x: Tensor<f64>| {
        let v = ctx.tape.constant(x);
        ctx.tape.permute(&v, &[0, 2, 1, 3]).unwrap().value().clone()
    };
    let direct = run(&mut ctx, main.clone(), tg.clone(), fg.clone(), pe.clone());
    let (main_t, pe_t) = (transpose(&mut ctx, main), transpose(&mut ctx, pe));
    let swapped = run(&mut ctx, main_t, fg, tg, pe_t);
    let diff = |a: &Option<Var<f64>>, b: &Option<Var<f64>>| {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    diff(&direct.t_global, &swapped.f_global).max(diff(&direct.f_global, &swapped.t_global))
}

fn duality() -> Outcome {
    let errs: Vec<f64> = [3, 17, 2024].into_iter().map(duality_at).collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(worst <= DUALITY_TOL, format!("seeds 3/17/2024, max diff {worst:.2e} (<= {DUALITY_TOL:.0e})"))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// The shared smoke run behind criteria 7 and 8.
fn smoke() -> (Outcome, Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { output: OutputConfig { dir: dir.path().to_path_buf() }, ..RunConfig::smoke() };
    let start = Instant::now();
    let session = train_from_config(&cfg, None, |_| {}).expect("smoke run trains");
    let elapsed = start.elapsed();
    let recs = &session.records;
    assert_eq!(recs.len() as u64, cfg.train.steps);
    // steps are 1-based: records 9..20 are steps 10..20
    let early = |f: fn(&tridentse::train::LogRecord) -> f64| mean(recs[9..20].iter().map(f));
    let late = |f: fn(&tridentse::train::LogRecord) -> f64| mean(recs[recs.len() - 10..].iter().map(f));
    let (l0, l1) = (early(|r| r.losses.total), late(|r| r.losses.total));

    let trainer = &session.trainer;
    let store = trainer.generator();
    let (train, _) = cfg.data.load().unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for pair in &train {
        let out = model_forward(&pair.noisy, &cfg.model, store, Mode::Eval, false).unwrap();
        before += si_snr(&pair.noisy, &pair.clean).unwrap();
        after += si_snr(&out.enhanced, &pair.clean).unwrap();
    }
    let (before, after) = (before / train.len() as f64, after / train.len() as f64);

    let ld0 = early(|r| r.losses.l_d.unwrap());
    let ld_last = recs.last().unwrap().losses.l_d.unwrap();
    let ld_late = late(|r| r.losses.l_d.unwrap());
    let d_clean: Vec<f64> =
        session.held_out.iter().map(|p| trainer.discriminate(p.clean.samples(), p.clean.samples()).unwrap()).collect();
    let d_min = d_clean.iter().copied().fold(f64::INFINITY, f64::min);
    let d_mean = mean(d_clean.iter().copied());
    let in_budget = elapsed < SMOKE_BUDGET;
    let secs = elapsed.as_secs_f64();

    let a = outcome(
        l1 < LOSS_RATIO * l0 && in_budget,
        format!("L steps 10-20 {l0:.4} -> last 10 {l1:.4} (ratio {:.3} < {LOSS_RATIO}), {secs:.0}s (< 900s)", l1 / l0),
    );
    let b = outcome(
        after - before >= SI_SNR_GAIN_DB && in_budget,
        format!(
            "SI-SNR over {} training pairs, eval-mode BN: noisy {before:.2} dB -> enhanced {after:.2} dB, gain {:+.2} dB (>= {SI_SNR_GAIN_DB})",
            train.len(),
            after - before
        ),
    );
    let gan = outcome(
        ld_last < L_D_RATIO * ld0 && ld_late < L_D_RATIO * ld0 && d_min >= D_CLEAN_MIN && in_budget,
        format!(
            "L_D steps 10-20 {ld0:.4} -> final {ld_last:.4} / last 10 {ld_late:.4} (< {L_D_RATIO} x), D(S,S) on {} held pairs min {d_min:.3} mean {d_mean:.3} (>= {D_CLEAN_MIN})",
            d_clean.len()
        ),
    );
    (a, b, gan)
}

fn g1_parity() -> Outcome {
    let (g1, m) = (ModelConfig::g1(), ModelConfig::medium());
    let (fg, fm) = (estimate_flops(&g1, 3.0), estimate_flops(&m, 3.0));
    let specs = MixSpec::draw_many(9, 2, &SnrMode::voicebank(), &NoiseKind::ALL, 0.1).unwrap();
    let pairs: Vec<_> = specs.iter().map(|s| make_pair(s).unwrap()).collect();
    let train = TrainConfig { steps: 1, batch_size: 2, warmup_steps: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(g1, LossWeights::default(), train, 1).unwrap();
    let rep = trainer.train_step(&[&pairs[0], &pairs[1]]).unwrap();
    let out = model_forward(&pairs[0].noisy, &g1, trainer.generator(), Mode::Eval, false).unwrap();
    let runs = rep.total.is_finite() && out.enhanced.len() == pairs[0].noisy.len();
    outcome(
        fg < fm && within(fg as f64, 18.3e9, G1_FLOPS_TOL) && runs,
        format!(
            "G1 {:.2}G < M {:.2}G, {:+.1}% vs 18.3G (±20%), train step + eval forward finite: {runs}",
            fg as f64 / 1e9,
            fm as f64 / 1e9,
            100.0 * (fg as f64 / 18.3e9 - 1.0)
        ),
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut cfg = RunConfig::smoke();
        cfg.train.steps = 3;
        cfg.data.pairs = 8;
        cfg.data.duration_s = 0.1;
        cfg.output = OutputConfig { dir: root.path().join(name) };
        train_from_config(&cfg, None, |_| {}).unwrap();
        std::fs::read(cfg.output.checkpoint()).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let identical = a == b;

    let ck = Checkpoint::from_bytes(&a).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let (cfg, s1) = load_generator(&ck, None).unwrap();
    let (_, s2) = load_generator(&back, None).unwrap();
    let x = make_pair(&MixSpec::draw_many(5, 1, &SnrMode::voicebank(), &NoiseKind::ALL, 0.2).unwrap()[0]).unwrap().noisy;
    let bits = |s: &ParameterStore| {
        model_forward(&x, &cfg, s, Mode::Eval, false).unwrap().enhanced.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let exact = bits(&s1) == bits(&s2) && ck.to_bytes().unwrap() == a;
    outcome(
        identical && exact,
        format!("two seeded runs byte-identical: {identical} ({} bytes); round-trip forward bit-exact: {exact}", a.len()),
    )
}

fn main() {
    let mut results = Vec::new();
    report("1", "gradient suite", &gradient_suite(), &mut results);
    report("2", "STFT round trip", &stft_round_trip(), &mut results);
    report("3", "cost model", &cost_model(), &mut results);
    report("4", "mask bound", &mask_bound(), &mut results);
    report("5", "attention normalization", &attention_rows(), &mut results);
    report("6", "duality", &duality(), &mut results);
    let (a, b, gan) = smoke();
    report("7a", "smoke loss", &a, &mut results);
    report("7b", "smoke SI-SNR gain", &b, &mut results);
    report("8", "GAN loop", &gan, &mut results);
    report("9", "G1 parity", &g1_parity(), &mut results);
    report("10", "determinism", &determinism(), &mut results);
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
