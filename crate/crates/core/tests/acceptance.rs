//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use volseg::autograd::Tape;
use volseg::dataset::{generate_cases, split_holdout, Case};
use volseg::eval::{evaluate, DiceReport, EvalItem};
use volseg::params::ParamGroup;
use volseg::training::{sample_gradients, Sample, StepRecord};
use volseg::*;

/// Tolerances and budgets, pinned.
const TRANSPARENCY_TOL: f32 = 1e-6;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-6;
const GRADCHECK_ZERO: f64 = 1e-12;
const DICE_ORACLE_TOL: f64 = 1e-12;
const BCE_ORACLE_TOL: f64 = 1e-7;
const CHI2_MIN_P: f64 = 0.01;
const E2E_MIN_DICE: f64 = 0.70;
const E2E_FIXTURE_TOL: f64 = 0.05;
const E2E_STEPS_STEP1: usize = 300;
const E2E_STEPS_STEP2: usize = 1700;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_group<T: Scalar>(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> SliceGroup<T> {
    SliceGroup {
        slices: Tensor::randn(&[GROUP_SIZE, 4, cfg.image_height, cfg.image_width], 1.0, rng),
        depth_indices: [0, 1, 2, 3],
        voxel_id: "random".into(),
    }
}

fn zero_init_transparency() -> Outcome {
    let model = Model::new(ModelConfig::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let group = random_group::<f32>(&model.config().encoder, &mut rng);
        let adapted = model.encode(&group, true).unwrap();
        let plain = model.encode(&group, false).unwrap();
        worst = worst.max(adapted.max_abs_diff(&plain));
    }
    outcome(
        worst <= TRANSPARENCY_TOL,
        format!("max |adapted − plain| = {worst:e} over 100 inputs (tol {TRANSPARENCY_TOL:e})"),
    )
}

fn phantom_cases(n: u64, domain: DomainTag, seed0: u64) -> Vec<Case> {
    let specs: Vec<PhantomSpec> = (0..n)
        .map(|i| PhantomSpec::new(32, 32, 16, domain, seed0 + i))
        .collect();
    generate_cases(&specs)
        .unwrap()
        .into_iter()
        .map(|c| Case {
            volume: c.volume.normalize().unwrap(),
            ..c
        })
        .collect()
}

fn pairs(cases: &[Case]) -> Vec<(&Volume, &SegMask)> {
    cases.iter().map(|c| (&c.volume, &c.mask)).collect()
}

fn freeze_audit() -> Outcome {
    let cases = phantom_cases(4, DomainTag::Adult, 500);
    let data = pairs(&cases);
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let cfg = TrainConfig::default();
    let mut sink = |_: &StepRecord| Ok(());
    let mut problems: Vec<String> = Vec::new();

    let before = model.params().clone();
    train_phase(&mut model, &data, &cfg, Phase::Step1, 10, 0, &mut sink).unwrap();
    for (name, t) in model.params().iter() {
        let old = before.by_name(name).unwrap();
        let changed = old != t;
        let group = ParamGroup::of(name).unwrap();
        if group == ParamGroup::PatchEmbed {
            if !changed {
                problems.push(format!("step1: {name} unchanged"));
            }
        } else if changed {
            problems.push(format!("step1: frozen {name} changed"));
        }
    }

    let before = model.params().clone();
    train_phase(&mut model, &data, &cfg, Phase::Step2, 10, 10, &mut sink).unwrap();
    for (name, t) in model.params().iter() {
        let changed = before.by_name(name).unwrap() != t;
        match ParamGroup::of(name).unwrap() {
            ParamGroup::PatchEmbed | ParamGroup::Lora | ParamGroup::Depth => {
                if !changed {
                    problems.push(format!("step2: {name} unchanged"));
                }
            }
            _ => {
                if changed {
                    problems.push(format!("step2: frozen {name} changed"));
                }
            }
        }
    }
    problems.dedup();
    let n = model.params().len();
    if problems.is_empty() {
        outcome(true, format!("{n} tensors audited after 10 + 10 steps"))
    } else {
        outcome(false, problems.join("; "))
    }
}

fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 8,
            embed_dim: 16,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            lora_rank: 4,
            lora_std: 0.5,
            depth_hidden: None,
            group_size: GROUP_SIZE,
            depth_condition: true,
            layer_norm_eps: 1e-5,
        },
        decoder: DecoderConfig::default(),
        seed: 5,
    }
}

fn gradient_correctness() -> Outcome {
    let mut model = Model64::new(gradcheck_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Move B and the depth output layers off zero so every path carries
    // gradient.
    let targets: Vec<String> = model
        .params()
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| matches!(ParamGroup::of(n).unwrap(), ParamGroup::Lora | ParamGroup::Depth))
        .collect();
    for name in &targets {
        if name.ends_with(".B") || name.contains(".fc2.") {
            let shape = model.params().by_name(name).unwrap().shape().to_vec();
            model
                .params_mut()
                .set(name, Tensor::randn(&shape, 0.3, &mut rng))
                .unwrap();
        }
    }
    let cfg = &model.config().encoder;
    let group = random_group::<f64>(cfg, &mut rng);
    let plane = cfg.image_height * cfg.image_width;
    let y: Arc<[f64]> = (0..GROUP_SIZE * plane)
        .map(|i| f64::from(((i % cfg.image_width) / 4 + i / 37) % 3 == 0))
        .collect();
    let prompt = Prompt::Box(PromptBox::from_corners(1, 3, 2, 12, 11));
    let sample = Sample {
        group,
        targets: y.clone(),
        prompt,
    };
    let trainable: Vec<bool> = model
        .params()
        .iter()
        .map(|(n, _)| targets.iter().any(|t| t == n))
        .collect();
    let (_, grads) = sample_gradients(&model, &trainable, &sample).unwrap();

    let loss_of = |m: &Model64| -> f64 {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, &[]);
        let z = m.forward(&mut tape, &bound, &sample.group, &sample.prompt).unwrap();
        let l = tape.bce_with_logits(z, y.clone());
        tape.value(l).item()
    };

    let mut worst = (0.0f64, String::new());
    for name in &targets {
        let id = model.params().id(name).unwrap();
        let analytic = grads[id.index()].clone().unwrap();
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + GRADCHECK_STEP;
            let up = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[k] = orig - GRADCHECK_STEP;
            let down = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * GRADCHECK_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Some gradients are identically zero (a per-token constant shift is
        // removed by every downstream layer norm); there both sides are
        // rounding noise and the comparison is absolute.
        let rel = if na.max(nn) < GRADCHECK_ZERO { diff } else { diff / na.max(nn) };
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    outcome(
        worst.0 < GRADCHECK_TOL,
        format!(
            "{} tensors; worst relative error {:.2e} at {} (tol {GRADCHECK_TOL:e})",
            targets.len(),
            worst.0,
            worst.1
        ),
    )
}

fn brute_dice(y: &SegMask, p: &SegMask) -> f64 {
    let d = y.dims();
    let (mut i, mut a, mut b) = (0.0, 0.0, 0.0);
    for z in 0..d.depth {
        for r in 0..d.height {
            for c in 0..d.width {
                let k = (z * d.height + r) * d.width + c;
                let (yy, pp) = (y.data()[k] == 1.0, p.data()[k] == 1.0);
                if yy {
                    a += 1.0;
                }
                if pp {
                    b += 1.0;
                }
                if yy && pp {
                    i += 1.0;
                }
            }
        }
    }
    if a + b == 0.0 {
        1.0
    } else {
        2.0 * i / (a + b)
    }
}

fn brute_bce(z: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..z.len() {
        let p = 1.0 / (1.0 + (-z[k]).exp());
        s += -(y[k] * p.ln() + (1.0 - y[k]) * (1.0 - p).ln());
    }
    s / z.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let dims = volumes::Dims {
        depth: 4,
        height: 8,
        width: 8,
    };
    let mut dice_err = 0.0f64;
    let mut bce_err = 0.0f64;
    for _ in 0..1000 {
        let density = rng.random_range(0.0..0.6);
        let draw = |rng: &mut ChaCha8Rng| -> SegMask {
            let bits = (0..dims.voxels()).map(|_| u8::from(rng.random_bool(density))).collect();
            SegMask::binary(dims, bits).unwrap()
        };
        let y = draw(&mut rng);
        let p = draw(&mut rng);
        dice_err = dice_err.max((dice(&y, &p).unwrap() - brute_dice(&y, &p)).abs());

        let n = rng.random_range(1..64);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let got = bce_loss(
            &Tensor::from_vec(&[n], z.clone()).unwrap(),
            &Tensor::from_vec(&[n], t.clone()).unwrap(),
        )
        .unwrap();
        bce_err = bce_err.max((got - brute_bce(&z, &t)).abs());
    }
    let ds234 = mean_unseen_dice(80.88, 83.51, 79.00).unwrap();
    let ds_ok = format!("{ds234:.2}") == "81.13" && (ds234 - 81.13).abs() < 1e-9;
    outcome(
        dice_err <= DICE_ORACLE_TOL && bce_err <= BCE_ORACLE_TOL && ds_ok,
        format!(
            "1000 instances: dice err {dice_err:.1e} (tol {DICE_ORACLE_TOL:e}), bce err {bce_err:.1e} (tol {BCE_ORACLE_TOL:e}); DS234(80.88, 83.51, 79.00) = {ds234:.2}"
        ),
    )
}

fn parameter_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut lines = Vec::new();
    let mut ok = true;
    for _ in 0..5 {
        let p = [4usize, 8][rng.random_range(0..2)];
        let heads = rng.random_range(1..=2);
        let d = 4 * heads * rng.random_range(2..=5);
        let blocks = rng.random_range(1..=3);
        let r = rng.random_range(1..d.min(9));
        let h = rng.random_range(4..=24);
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                image_height: 2 * p,
                image_width: 3 * p,
                patch_size: p,
                embed_dim: d,
                blocks,
                heads,
                mlp_ratio: 2,
                lora_rank: r,
                lora_std: 0.01,
                depth_hidden: Some(h),
                group_size: GROUP_SIZE,
                depth_condition: true,
                layer_norm_eps: 1e-5,
            },
            decoder: DecoderConfig::default(),
            seed: 0,
        };
        let model = Model::new(cfg).unwrap();
        let s1 = count_trainable_params(model.params(), &build_freeze_plan(Phase::Step1, false)).unwrap();
        let s2 = count_trainable_params(model.params(), &build_freeze_plan(Phase::Step2, false)).unwrap();
        let g = GROUP_SIZE;
        // q and v adapters, each r·(d_in + d_out) with d_in = d_out = d
        let lora = blocks * 2 * r * (d + d);
        // layer norm (γ, β), G→h, h→G
        let depth = blocks * (2 * d + (g * h + h) + (h * g + g));
        let embed = 4 * p * p * d + d + 6 * d;
        let good = s2 - s1 == lora + depth && s1 == embed;
        ok &= good;
        lines.push(format!("p{p} d{d} L{blocks} r{r} h{h}: Δ={} oracle={}", s2 - s1, lora + depth));
    }
    outcome(ok, lines.join(", "))
}

fn slice_sampler() -> Outcome {
    let (depth, delta, draws) = (155usize, 1usize, 100_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let lo = delta;
    let hi = depth - 1 - 2 * delta;
    let mut counts = vec![0usize; hi - lo + 1];
    let mut contract = true;
    for _ in 0..draws {
        let idx = select_slices(depth, delta, SliceMode::Fixed, &mut rng).unwrap();
        contract &= idx.windows(2).all(|w| w[1] == w[0] + delta) && idx[3] < depth;
        let b = idx[1];
        contract &= (lo..=hi).contains(&b);
        counts[b - lo] += 1;
    }
    let expected = draws as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    let p = 1.0 - dist.cdf(chi2);
    let fraction = GROUP_SIZE as f64 / depth as f64;
    outcome(
        contract && p > CHI2_MIN_P && fraction < 0.026,
        format!(
            "{draws} draws, {} bins: χ²={chi2:.1}, p={p:.3} (> {CHI2_MIN_P}); 4/155 = {fraction:.4} < 0.026",
            counts.len()
        ),
    )
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e_dice.json")
}

fn e2e_config() -> TrainConfig {
    TrainConfig {
        steps_step1: E2E_STEPS_STEP1,
        steps_step2: E2E_STEPS_STEP2,
        // A randomly initialized decoder cannot be driven by the encoder
        // alone; it trains alongside the adapters here.
        train_decoder: true,
        seed: 0,
        ..TrainConfig::default()
    }
}

struct E2e {
    model: Model,
    cases: Vec<Case>,
    holdout: Vec<usize>,
}

fn train_e2e() -> (E2e, Duration) {
    let start = Instant::now();
    let cases = phantom_cases(40, DomainTag::Adult, 1000);
    let domains: Vec<DomainTag> = cases.iter().map(|c| c.domain).collect();
    let (train, holdout) = split_holdout(&domains, 0.2, 0).unwrap();
    let data: Vec<(&Volume, &SegMask)> = train.iter().map(|i| (&cases[*i].volume, &cases[*i].mask)).collect();
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let cfg = e2e_config();
    let mut sink = |_: &StepRecord| Ok(());
    train_phase(&mut model, &data, &cfg, Phase::Step1, cfg.steps_step1, 0, &mut sink).unwrap();
    train_phase(&mut model, &data, &cfg, Phase::Step2, cfg.steps_step2, cfg.steps_step1, &mut sink).unwrap();
    (E2e { model, cases, holdout }, start.elapsed())
}

fn end_to_end(run: &E2e, train_time: Duration) -> Outcome {
    let items: Vec<EvalItem> = run
        .holdout
        .iter()
        .map(|i| EvalItem {
            volume: &run.cases[*i].volume,
            mask: &run.cases[*i].mask,
            domain: run.cases[*i].domain,
        })
        .collect();
    let mut scores = BTreeMap::new();
    for regime in ["BB-100-100", "BB-75-75"] {
        let cfg = EvalConfig {
            regime: regime.parse().unwrap(),
            ..EvalConfig::default()
        };
        let report = evaluate(&run.model, &items, &cfg, "all").unwrap();
        scores.insert(regime.to_string(), report.mean_dice());
    }
    let full = scores["BB-100-100"];
    let partial = scores["BB-75-75"];
    let mut pass = full >= E2E_MIN_DICE
        && full >= partial
        && train_time <= Duration::from_secs(20 * 60)
        && E2E_STEPS_STEP1 + E2E_STEPS_STEP2 <= 2000;
    let path = fixture_path();
    let fixture_note = match std::fs::read(&path) {
        Ok(bytes) => {
            let recorded: BTreeMap<String, f64> = serde_json::from_slice(&bytes).unwrap();
            let drift = scores
                .iter()
                .map(|(k, v)| (v - recorded.get(k).copied().unwrap_or(f64::NAN)).abs())
                .fold(0.0f64, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
            pass &= drift <= E2E_FIXTURE_TOL;
            format!("fixture drift {drift:.3} (tol {E2E_FIXTURE_TOL})")
        }
        Err(_) => {
            if pass {
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                std::fs::write(&path, serde_json::to_vec_pretty(&scores).unwrap()).unwrap();
            }
            "fixture recorded".to_string()
        }
    };
    outcome(
        pass,
        format!(
            "held-out {} volumes: BB-100-100 {full:.3} (≥ {E2E_MIN_DICE}), BB-75-75 {partial:.3}; {} steps in {:.0}s; {fixture_note}",
            items.len(),
            E2E_STEPS_STEP1 + E2E_STEPS_STEP2,
            train_time.as_secs_f64()
        ),
    )
}

fn cross_domain(run: &E2e) -> Outcome {
    let mut cases: Vec<Case> = run.holdout.iter().map(|i| run.cases[*i].clone()).collect();
    for (k, tag) in [DomainTag::Meningioma, DomainTag::Pediatric, DomainTag::Ssa].into_iter().enumerate() {
        cases.extend(phantom_cases(4, tag, 5000 + 100 * k as u64));
    }
    let items: Vec<EvalItem> = cases
        .iter()
        .map(|c| EvalItem {
            volume: &c.volume,
            mask: &c.mask,
            domain: c.domain,
        })
        .collect();
    let report = evaluate(&run.model, &items, &EvalConfig::default(), "all").unwrap();
    let d = |t: DomainTag| report.domain(t).map(|x| x.ds);
    let direct = match (d(DomainTag::Meningioma), d(DomainTag::Pediatric), d(DomainTag::Ssa)) {
        (Some(a), Some(b), Some(c)) => Some(mean_unseen_dice(a, b, c).unwrap()),
        _ => None,
    };
    let recomputed = report.recompute_ds234().unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: DiceReport = serde_json::from_str(&json).unwrap();
    let in_range = report.domains.iter().all(|x| (0.0..=1.0).contains(&x.ds));
    let pass = report.domains.len() == 4
        && report.ds234.is_some()
        && report.ds234 == recomputed
        && report.ds234 == direct
        && back == report
        && in_range;
    let ds: Vec<String> = report.domains.iter().map(|x| format!("DS{}={:.3}", x.index, x.ds)).collect();
    outcome(
        pass,
        format!(
            "{}; DS234={:.3} consistent, JSON round-trip {}",
            ds.join(" "),
            report.ds234.unwrap_or(f64::NAN),
            if back == report { "exact" } else { "differs" }
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let line = format!(
            "[{}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        writeln!(std::io::stdout(), "{line}").unwrap();
        results.push((name, o, t.elapsed()));
    };
    run("zero-init transparency", &mut zero_init_transparency);
    run("freeze audit", &mut freeze_audit);
    run("gradient correctness", &mut gradient_correctness);
    run("metric oracles", &mut metric_oracles);
    run("parameter accounting", &mut parameter_accounting);
    run("slice sampler", &mut slice_sampler);
    let mut e2e = None;
    run("end-to-end desk-scale experiment", &mut || {
        let (trained, elapsed) = train_e2e();
        let o = end_to_end(&trained, elapsed);
        e2e = Some(trained);
        o
    });
    let trained = e2e.expect("end-to-end run completed");
    run("cross-domain harness", &mut || cross_domain(&trained));

    let failed = results.iter().filter(|r| !r.1.pass).count();
    writeln!(
        std::io::stdout(),
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    )
    .unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
