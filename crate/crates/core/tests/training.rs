use std::path::PathBuf;

use tempfile::tempdir;

use volseg::checkpoint::{content_hash, encode_checkpoint, load_checkpoint, save_checkpoint};
use volseg::dataset::{generate_cases, Case};
use volseg::params::ParamGroup;
use volseg::training::{PhaseSummary, StepRecord};
use volseg::*;

fn cases(n: u64, depth: usize) -> Vec<Case> {
    let specs: Vec<PhantomSpec> = (0..n)
        .map(|i| PhantomSpec::new(32, 32, depth, DomainTag::Adult, 40 + i))
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

fn pairs(c: &[Case]) -> Vec<(&Volume, &SegMask)> {
    c.iter().map(|c| (&c.volume, &c.mask)).collect()
}

fn run(
    model: &mut Model,
    data: &[(&Volume, &SegMask)],
    cfg: &TrainConfig,
    phase: Phase,
    steps: usize,
) -> (PhaseSummary, Vec<StepRecord>) {
    let mut log = Vec::new();
    let mut sink = |r: &StepRecord| {
        log.push(r.clone());
        Ok(())
    };
    let s = train_phase(model, data, cfg, phase, steps, 0, &mut sink).unwrap();
    (s, log)
}

#[test]
fn one_step_one_changes_only_patch_embedding() {
    let c = cases(2, 16);
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let before = model.params().clone();
    run(&mut model, &pairs(&c), &TrainConfig::default(), Phase::Step1, 1);
    for (name, t) in model.params().iter() {
        let same = before.by_name(name).unwrap() == t;
        assert_eq!(same, ParamGroup::of(name).unwrap() != ParamGroup::PatchEmbed, "{name}");
    }
}

#[test]
fn step1_count_matches_hand_count() {
    let model = Model::new(ModelConfig::toy()).unwrap();
    let n = count_trainable_params(model.params(), &build_freeze_plan(Phase::Step1, false)).unwrap();
    // weight 4·8·8·32, bias 32, positions 16·32
    assert_eq!(n, 4 * 8 * 8 * 32 + 32 + 16 * 32);
    assert_eq!(count_trainable_params(model.params(), &FreezePlan::empty()).unwrap(), 0);
}

fn overfit_fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/overfit_loss.json")
}

/// One volume whose depth admits exactly one slice group, tight boxes:
/// every step sees the same sample.
#[test]
fn single_volume_overfit_loss_strictly_decreases() {
    let spec = PhantomSpec {
        radius_min: 3.0,
        radius_max: 3.0,
        ..PhantomSpec::new(32, 32, 7, DomainTag::Adult, 3)
    };
    let c: Vec<Case> = generate_cases(&[spec])
        .unwrap()
        .into_iter()
        .map(|c| Case {
            volume: c.volume.normalize().unwrap(),
            ..c
        })
        .collect();
    let cfg = TrainConfig {
        delta: 2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let (summary, _) = run(&mut model, &pairs(&c), &cfg, Phase::Step2, 50);
    let losses = summary.losses;
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss rose: {} → {}", w[0], w[1]);
    }
    let path = overfit_fixture();
    match std::fs::read(&path) {
        Ok(bytes) => {
            let recorded: Vec<f64> = serde_json::from_slice(&bytes).unwrap();
            assert_eq!(recorded.len(), losses.len());
            for (a, b) in recorded.iter().zip(&losses) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-3), "curve drifted: {a} vs {b}");
            }
        }
        Err(_) => {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, serde_json::to_vec_pretty(&losses).unwrap()).unwrap();
        }
    }
}

#[test]
fn same_seed_same_checkpoint_hash() {
    let c = cases(3, 16);
    let hash = || {
        let mut model = Model::new(ModelConfig::toy()).unwrap();
        let cfg = TrainConfig::default();
        run(&mut model, &pairs(&c), &cfg, Phase::Step1, 3);
        run(&mut model, &pairs(&c), &cfg, Phase::Step2, 3);
        content_hash(&encode_checkpoint(&model, Some(Phase::Step2), 6).unwrap())
    };
    assert_eq!(hash(), hash());
}

#[test]
fn step2_starts_from_step1_patch_embedding() {
    let c = cases(2, 16);
    let dir = tempdir().unwrap();
    let path = dir.path().join("step1.ckpt");
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let cfg = TrainConfig::default();
    run(&mut model, &pairs(&c), &cfg, Phase::Step1, 3);
    save_checkpoint(&model, Some(Phase::Step1), 3, &path).unwrap();

    let (mut loaded, header) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(header.phase_completed, Some(Phase::Step1));
    for name in ["patch_embed.weight", "patch_embed.bias", "patch_embed.pos"] {
        assert_eq!(loaded.params().by_name(name), model.params().by_name(name));
    }
    // Adapters are still fresh: B = 0 at phase start.
    assert!(loaded
        .params()
        .iter()
        .filter(|(n, _)| n.ends_with(".B"))
        .all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    let (s, log) = run(&mut loaded, &pairs(&c), &cfg, Phase::Step2, 2);
    assert_eq!(log.len(), 2);
    assert_eq!(s.trainable_param_count, log[0].trainable_param_count);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let c = cases(1, 16);
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    model
        .params_mut()
        .set("decoder.out_bias", Tensor::full(&[1], f32::NAN))
        .unwrap();
    let mut sink = |_: &StepRecord| Ok(());
    let err = train_phase(&mut model, &pairs(&c), &TrainConfig::default(), Phase::Step1, 2, 0, &mut sink).unwrap_err();
    match err {
        Error::NonFiniteLoss { step, phase, .. } => {
            assert_eq!(step, 1);
            assert_eq!(phase, "step1");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn shallow_volumes_are_skipped_and_counted() {
    let mut c = cases(2, 16);
    c.extend(cases(1, 12));
    let cfg = TrainConfig {
        delta: 4,
        ..TrainConfig::default()
    };
    let mut model = Model::new(ModelConfig::toy()).unwrap();
    let (s, _) = run(&mut model, &pairs(&c), &cfg, Phase::Step1, 1);
    assert_eq!(s.skipped_shallow, 1);

    let only_shallow = cases(1, 12);
    let mut sink = |_: &StepRecord| Ok(());
    assert!(train_phase(&mut model, &pairs(&only_shallow), &cfg, Phase::Step1, 1, 0, &mut sink).is_err());
}

#[test]
fn point_and_partial_box_regimes_train() {
    let c = cases(2, 16);
    for regime in ["1p", "BB-75-75"] {
        let cfg = TrainConfig {
            regime: regime.parse().unwrap(),
            ..TrainConfig::default()
        };
        let mut model = Model::new(ModelConfig::toy()).unwrap();
        let (s, log) = run(&mut model, &pairs(&c), &cfg, Phase::Joint, 2);
        assert_eq!(s.steps, 2);
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }
}

#[test]
fn metrics_records_serialize_as_flat_json() {
    let r = StepRecord {
        step: 3,
        phase: Phase::Step2,
        loss: 0.25,
        lr: 1e-4,
        trainable_param_count: 10,
    };
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert_eq!(v["phase"], "step2");
    assert_eq!(v["step"], 3);
    assert_eq!(v["trainable_param_count"], 10);
}
