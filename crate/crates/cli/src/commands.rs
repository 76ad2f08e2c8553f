use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;

use volseg::checkpoint::{load_checkpoint, save_checkpoint};
use volseg::dataset::{self, expand_groups, generate_cases, split_holdout, write_phantoms, Case};
use volseg::eval::{evaluate, EvalItem};
use volseg::training::StepRecord;
use volseg::{train_phase, DiceReport, Error, Model, Phase};

use crate::config::RunConfig;
use crate::UserError;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn write_frozen(cfg: &RunConfig, dir: &Path, name: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg)?).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let specs = expand_groups(&cfg.data.phantoms);
    let manifest = write_phantoms(&specs, out)?;
    write_frozen(cfg, out, CONFIG_FILE)?;
    log::info!("wrote {} phantom(s) to {}", manifest.entries.len(), out.display());
    Ok(())
}

/// Normalized cases with the modality transform applied.
fn load_data(cfg: &RunConfig) -> anyhow::Result<Vec<Case>> {
    let raw = match (&cfg.data.dataset_dir, cfg.data.phantoms.is_empty()) {
        (Some(dir), _) => dataset::load_cases(dir)?,
        (None, false) => generate_cases(&expand_groups(&cfg.data.phantoms))?,
        (None, true) => {
            return Err(UserError("no data: set data.phantoms or data.dataset_dir".into()).into());
        }
    };
    let enc = &cfg.model.encoder;
    raw.into_iter()
        .map(|c| {
            let d = c.volume.dims();
            if (d.height, d.width) != (enc.image_height, enc.image_width) {
                return Err(UserError(format!(
                    "{}: slices are {}×{}, model expects {}×{}",
                    c.volume.voxel_id(),
                    d.height,
                    d.width,
                    enc.image_height,
                    enc.image_width
                ))
                .into());
            }
            Ok(Case {
                volume: c.volume.normalize()?.with_modalities(cfg.data.modalities),
                ..c
            })
        })
        .collect()
}

/// (train, eval) indices: a per-domain holdout of the training domains,
/// plus every case from the other domains on the eval side.
fn split(cfg: &RunConfig, cases: &[Case]) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
    let seen: Vec<usize> = (0..cases.len())
        .filter(|i| cfg.data.train_domains.contains(&cases[*i].domain))
        .collect();
    let domains: Vec<_> = seen.iter().map(|i| cases[*i].domain).collect();
    let (tr, ho) = split_holdout(&domains, cfg.data.holdout_fraction, cfg.data.split_seed)?;
    let train = tr.into_iter().map(|k| seen[k]).collect();
    let mut eval: Vec<usize> = ho.into_iter().map(|k| seen[k]).collect();
    eval.extend((0..cases.len()).filter(|i| !seen.contains(i)));
    eval.sort_unstable();
    Ok((train, eval))
}

fn schedule(cfg: &RunConfig) -> Vec<(Phase, usize)> {
    let t = &cfg.train;
    match t.phase {
        None => t.mode.schedule(t),
        Some(Phase::Step1) => vec![(Phase::Step1, t.steps_step1)],
        Some(Phase::Step2) => vec![(Phase::Step2, t.steps_step2)],
        Some(Phase::Joint) => vec![(Phase::Joint, t.steps_step1 + t.steps_step2)],
    }
}

/// Model to start from, and the global step count it already carries.
fn starting_model(cfg: &RunConfig, first: Phase, run_dir: &Path, init: Option<&Path>) -> anyhow::Result<(Model, usize)> {
    if first != Phase::Step2 {
        return Ok((Model::new(cfg.model.clone())?, 0));
    }
    let path = init.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("step1.ckpt"));
    if !path.exists() {
        return Err(Error::MissingPhaseOne(format!("{} does not exist", path.display())).into());
    }
    let (model, header) = load_checkpoint::<f32>(&path)?;
    if header.phase_completed != Some(Phase::Step1) {
        return Err(Error::MissingPhaseOne(format!(
            "{} completed {:?}, not step1",
            path.display(),
            header.phase_completed
        ))
        .into());
    }
    if header.config != cfg.model {
        return Err(UserError(format!("{} was trained with a different model config", path.display())).into());
    }
    Ok((model, header.steps))
}

pub fn train(cfg: &RunConfig, run_dir: &Path, init: Option<&Path>) -> anyhow::Result<PathBuf> {
    let plan = schedule(cfg);
    let (mut model, mut offset) = starting_model(cfg, plan[0].0, run_dir, init)?;
    let cases = load_data(cfg)?;
    let (train_idx, _) = split(cfg, &cases)?;
    if train_idx.is_empty() {
        return Err(UserError("no training volumes after the domain filter and holdout split".into()).into());
    }
    let data: Vec<_> = train_idx.iter().map(|i| (&cases[*i].volume, &cases[*i].mask)).collect();
    write_frozen(cfg, run_dir, CONFIG_FILE)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let mut last = None;
    for (phase, steps) in plan {
        let mut sink = |r: &StepRecord| -> volseg::Result<()> {
            let line = serde_json::to_string(r)?;
            writeln!(metrics, "{line}").map_err(|e| Error::Io {
                path: metrics_path.clone(),
                source: e,
            })
        };
        let summary = train_phase(&mut model, &data, &cfg.train, phase, steps, offset, &mut sink)?;
        offset += steps;
        let path = run_dir.join(format!("{}.ckpt", phase.name()));
        let hash = save_checkpoint(&model, Some(phase), offset, &path)?;
        log::info!(
            "{}: {} steps, final loss {:.5}, {} trainable, checkpoint {} ({})",
            phase.name(),
            summary.steps,
            summary.losses.last().copied().unwrap_or(f64::NAN),
            summary.trainable_param_count,
            path.display(),
            &hash[..12]
        );
        last = Some(path);
    }
    metrics.flush().with_context(|| format!("writing {}", metrics_path.display()))?;
    Ok(last.expect("schedule has at least one phase"))
}

pub fn eval(cfg: &RunConfig, run_dir: &Path, checkpoint: &Path) -> anyhow::Result<DiceReport> {
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    let cfg = RunConfig {
        model: model.config().clone(),
        ..cfg.clone()
    };
    let cases = load_data(&cfg)?;
    let (_, eval_idx) = split(&cfg, &cases)?;
    if eval_idx.is_empty() {
        return Err(UserError("no evaluation volumes: holdout and unseen domains are empty".into()).into());
    }
    let items: Vec<EvalItem> = eval_idx
        .iter()
        .map(|i| EvalItem {
            volume: &cases[*i].volume,
            mask: &cases[*i].mask,
            domain: cases[*i].domain,
        })
        .collect();
    let report = evaluate(&model, &items, &cfg.eval, &cfg.data.modalities.label())?;
    write_frozen(&cfg, run_dir, "eval_config.json")?;
    let path = run_dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}

pub fn serve(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<()> {
    let state = volseg_serve::AppState::from_checkpoint(checkpoint, cfg.eval.threshold)?;
    let addr = (cfg.serve.host.as_str(), cfg.serve.port)
        .to_socket_addrs()
        .map_err(|e| UserError(format!("serve address {}:{}: {e}", cfg.serve.host, cfg.serve.port)))?
        .next()
        .ok_or_else(|| UserError(format!("serve address {} resolves to nothing", cfg.serve.host)))?;
    log::info!("checkpoint {}", state.checkpoint_id());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(volseg_serve::serve(Arc::new(state), addr))?;
    Ok(())
}
