//! Staged training: 2D-3D alignment, image alignment against frozen pose
//! encoders, then a joint finetune with pose decoders.

mod config;
mod models;
mod runlog;

pub use config::{Group, ModelConfig, Stage, StageConfig, TrainConfig};
pub use models::{Models, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use runlog::{RunLog, StepRecord};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;

use crate::embedding::{mean_positive_cosine, Modality};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, l2_pose_loss, NegativeTripletSet, Temperature};
use crate::nn::{
    decode, decode_backward, embed, encode, encode_backward, AdamConfig, AdamState, EncodeCache,
    PoseKind,
};
use crate::synth::{BatchStream, Dataset, Split};
use crate::util::derive_seed;

const BATCH_TAG: u64 = 1;
const NEGATIVE_TAG: u64 = 2;
const INIT_TAG: u64 = 0;

fn encoder_group(m: Modality) -> Group {
    match m {
        Modality::Image => Group::EncImg,
        Modality::Pose2D => Group::Enc2d,
        Modality::Pose3D => Group::Enc3d,
    }
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}.ckpt"))
}

pub fn log_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}_log.csv"))
}

/// Fresh, untrained models for `cfg` and `dataset`.
pub fn init_models(cfg: &TrainConfig, dataset: &Dataset) -> Result<Models> {
    Models::init(
        &cfg.model,
        dataset.joints(),
        dataset.feat_dim(),
        derive_seed(cfg.seed, INIT_TAG),
    )
}

fn check_compatible(cfg: &TrainConfig, models: &Models, dataset: &Dataset) -> Result<()> {
    if models.tokens.is_some() != cfg.model.token {
        return Err(Error::InvalidState(
            "model token setting differs from the config".into(),
        ));
    }
    if models.joints() != dataset.joints() || models.feat_dim() != dataset.feat_dim() {
        return Err(Error::invalid(format!(
            "models expect J={} F={} but the dataset has J={} F={}",
            models.joints(),
            models.feat_dim(),
            dataset.joints(),
            dataset.feat_dim()
        )));
    }
    if models.embed_dim() != cfg.model.embed_dim {
        return Err(Error::InvalidState("model embedding size differs from the config".into()));
    }
    Ok(())
}

/// Runs one stage in place and returns its log.
///
/// `models` must have completed exactly the preceding stage. Groups not listed
/// as trainable are never written.
pub fn run_stage(cfg: &TrainConfig, stage: Stage, models: &mut Models, dataset: &Dataset) -> Result<RunLog> {
    run_stage_in(cfg, stage, models, dataset, None)
}

fn run_stage_in(
    cfg: &TrainConfig,
    stage: Stage,
    models: &mut Models,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RunLog> {
    cfg.validate()?;
    if models.completed != stage.previous() {
        return Err(Error::InvalidState(format!(
            "{stage} needs models that completed {} (found {})",
            stage.previous().map_or("nothing", Stage::name),
            models.completed.map_or("none", Stage::name)
        )));
    }
    check_compatible(cfg, models, dataset)?;
    let sc = cfg.stage(stage);
    let seed = cfg.stage_seed(stage);
    let started = Instant::now();
    let mut log = RunLog::new(stage, cfg.fingerprint());

    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("the training split is empty"));
    }
    let mut stream = BatchStream::new(train_idx, sc.batch_size, derive_seed(seed, BATCH_TAG))?;
    let mut tau_pair = Temperature::new(sc.tau_pair)?;
    let mut tau_triplet = Temperature::new(sc.tau_triplet)?;
    let adam_cfg = AdamConfig::with_lr(sc.lr);
    let mut tau_adam = AdamState::new(2, adam_cfg);
    let mut adams: BTreeMap<Group, AdamState> = BTreeMap::new();
    for &g in &sc.train {
        let len = match g {
            Group::EncImg => models.encoders[0].param_count(),
            Group::Enc2d => models.encoders[1].param_count(),
            Group::Enc3d => models.encoders[2].param_count(),
            Group::Dec2d => models.dec_2d.param_count(),
            Group::Dec3d => models.dec_3d.param_count(),
            Group::Tokens => match &models.tokens {
                Some(t) => t.as_slice().len(),
                None => continue,
            },
        };
        adams.insert(g, AdamState::new(len, adam_cfg));
    }

    let terms = sc.terms();
    let task = sc.task_weight > 0.0;
    let need = if task { [true; 3] } else { terms.required() };
    let n_pairs = terms.pairs().len();

    for step in 0..sc.steps {
        let idx = stream.next_batch();
        let mut embs: [Option<Array2<f64>>; 3] = [None, None, None];
        let mut caches: [Option<EncodeCache>; 3] = [None, None, None];
        for m in Modality::ALL {
            if !need[m.index()] {
                continue;
            }
            let x = dataset.inputs(m, &idx)?;
            let enc = models.encoder(m);
            let encoded = if sc.trains(encoder_group(m)) {
                encode(enc, x.view()).map(|(e, c)| (e, Some(c)))
            } else {
                embed(enc, x.view()).map(|e| (e, None))
            };
            match encoded {
                Ok((e, c)) => {
                    embs[m.index()] = Some(e);
                    caches[m.index()] = c;
                }
                Err(Error::Numerical(msg)) => {
                    return Err(numerical_abort(models, out_dir, stage, format!("{stage} step {step}: {m} encoder {msg}")))
                }
                Err(e) => return Err(e),
            }
        }
        let negatives = if terms.triplet {
            Some(NegativeTripletSet::sample(
                sc.batch_size,
                derive_seed(seed, NEGATIVE_TAG.wrapping_add(step as u64 * 16)),
            )?)
        } else {
            None
        };
        let views = std::array::from_fn(|i| embs[i].as_ref().map(|e| e.view()));
        let cl = contrastive_loss(
            views,
            tau_pair.value(),
            tau_triplet.value(),
            sc.alpha,
            terms,
            negatives.as_ref(),
        )?;
        let mut grad_emb = cl.grads;

        let mut task_loss = [0.0; 2];
        let mut dec_grads: [Option<Vec<f64>>; 2] = [None, None];
        let mut token_grad: Option<Array2<f64>> = None;
        if task {
            let w = sc.task_weight / 3.0;
            for (k, kind) in [PoseKind::TwoD, PoseKind::ThreeD].into_iter().enumerate() {
                let target = match kind {
                    PoseKind::TwoD => dataset.pose2d_targets(&idx)?,
                    PoseKind::ThreeD => dataset.pose3d_targets(&idx)?,
                };
                let dec = models.decoder(kind);
                let mut acc = vec![0.0; dec.param_count()];
                for src in Modality::ALL {
                    let emb = embs[src.index()].as_ref().expect("all modalities embedded");
                    let (pred, cache) = decode(dec, emb.view(), models.tokens.as_ref(), src, kind)?;
                    let l = l2_pose_loss(pred.view(), target.view())?;
                    task_loss[k] += l.loss / 3.0;
                    let g = decode_backward(dec, &cache, (l.grad * w).view())?;
                    for (a, b) in acc.iter_mut().zip(&g.params) {
                        *a += b;
                    }
                    if let Some(ge) = grad_emb[src.index()].as_mut() {
                        *ge += &g.embeddings;
                    }
                    if let Some(t) = g.token {
                        match token_grad.as_mut() {
                            Some(acc_t) => *acc_t += &t,
                            None => token_grad = Some(t),
                        }
                    }
                }
                dec_grads[k] = Some(acc);
            }
        }

        let total = cl.total + sc.task_weight * (task_loss[0] + task_loss[1]);
        let cos = |a: Modality, b: Modality| match (&embs[a.index()], &embs[b.index()]) {
            (Some(x), Some(y)) => Some(mean_positive_cosine(x.view(), y.view())),
            _ => None,
        };
        let record = StepRecord {
            step,
            total,
            pair: cl.pair,
            triplet: cl.triplet,
            task_2d: task_loss[0],
            task_3d: task_loss[1],
            tau_pair: tau_pair.value(),
            tau_triplet: tau_triplet.value(),
            cos_2d_3d: cos(Modality::Pose2D, Modality::Pose3D),
            cos_img_2d: cos(Modality::Image, Modality::Pose2D),
            cos_img_3d: cos(Modality::Image, Modality::Pose3D),
            skipped: cl.skipped,
        };
        if !total.is_finite() {
            let msg = format!(
                "{stage} step {step}: non-finite loss (pair {}, triplet {}, task {:?}, tau {} / {})",
                cl.pair,
                cl.triplet,
                task_loss,
                tau_pair.value(),
                tau_triplet.value()
            );
            return Err(numerical_abort(models, out_dir, stage, msg));
        }
        log.records.push(record);

        // Every gradient is computed before any parameter changes.
        let mut enc_grads: [Option<Vec<f64>>; 3] = [None, None, None];
        for m in Modality::ALL {
            if let (Some(c), Some(g)) = (&caches[m.index()], &grad_emb[m.index()]) {
                enc_grads[m.index()] = Some(encode_backward(models.encoder(m), c, g.view())?.params);
            }
        }
        for m in Modality::ALL {
            if let Some(g) = &enc_grads[m.index()] {
                let adam = adams.get_mut(&encoder_group(m)).expect("trainable encoder");
                adam.step(models.encoders[m.index()].params_mut(), g)?;
            }
        }
        if let Some(g) = &dec_grads[0] {
            if let Some(adam) = adams.get_mut(&Group::Dec2d) {
                adam.step(models.dec_2d.params_mut(), g)?;
            }
        }
        if let Some(g) = &dec_grads[1] {
            if let Some(adam) = adams.get_mut(&Group::Dec3d) {
                adam.step(models.dec_3d.params_mut(), g)?;
            }
        }
        if let (Some(g), Some(tok)) = (&token_grad, models.tokens.as_mut()) {
            if let Some(adam) = adams.get_mut(&Group::Tokens) {
                adam.step(tok.as_slice_mut(), g.as_slice().expect("standard layout"))?;
            }
        }
        let mut logs = [tau_pair.log_value(), tau_triplet.log_value()];
        let g_pair = if n_pairs > 0 { tau_pair.log_grad(cl.grad_tau_pair) } else { 0.0 };
        let g_trip = tau_triplet.log_grad(cl.grad_tau_triplet);
        tau_adam.step(&mut logs, &[g_pair, g_trip])?;
        tau_pair.set_log_value(logs[0]);
        tau_triplet.set_log_value(logs[1]);

        if let Some(dir) = out_dir {
            if sc.checkpoint_every > 0 && (step + 1) % sc.checkpoint_every == 0 {
                models.save(&dir.join(format!("{stage}.step{}.ckpt", step + 1)))?;
            }
        }
    }

    models.completed = Some(stage);
    models.tau_pair = tau_pair.value();
    models.tau_triplet = tau_triplet.value();
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub models: Models,
    pub logs: Vec<RunLog>,
}

/// Saves the diverged state next to the checkpoints, when there is a run
/// directory, and builds the error.
fn numerical_abort(models: &Models, out_dir: Option<&Path>, stage: Stage, msg: String) -> Error {
    let Some(dir) = out_dir else {
        return Error::Numerical(msg);
    };
    let path = dir.join(format!("{stage}.nan.ckpt"));
    match models.save(&path) {
        Ok(()) => Error::Numerical(format!("{msg}; state saved to {}", path.display())),
        Err(e) => Error::Numerical(format!("{msg}; saving state failed: {e}")),
    }
}

/// Runs consecutive `stages`, resuming from the checkpoint of the stage before
/// the first one. Each stage writes `<stage>.ckpt` and `<stage>_log.csv` into
/// `out_dir`.
pub fn run_stages(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path, stages: &[Stage]) -> Result<PipelineOutput> {
    let first = *stages
        .first()
        .ok_or_else(|| Error::invalid("no stages requested"))?;
    if stages.windows(2).any(|w| w[1].previous() != Some(w[0])) {
        return Err(Error::invalid("stages must be consecutive and in order"));
    }
    cfg.validate()?;
    let mut models = match first.previous() {
        None => init_models(cfg, dataset)?,
        Some(prev) => {
            let m = Models::load(&checkpoint_path(out_dir, prev))?;
            if m.completed != Some(prev) {
                return Err(Error::InvalidState(format!(
                    "{} does not hold a completed {prev} model",
                    checkpoint_path(out_dir, prev).display()
                )));
            }
            m
        }
    };
    let mut logs = Vec::new();
    for &stage in stages {
        let log = run_stage_in(cfg, stage, &mut models, dataset, Some(out_dir))?;
        models.save(&checkpoint_path(out_dir, stage))?;
        log.write_csv(&log_path(out_dir, stage))?;
        logs.push(log);
    }
    Ok(PipelineOutput { models, logs })
}

/// All three stages in memory, without touching the filesystem.
pub fn run_pipeline(cfg: &TrainConfig, dataset: &Dataset) -> Result<PipelineOutput> {
    let mut models = init_models(cfg, dataset)?;
    let logs = Stage::ALL
        .into_iter()
        .map(|s| run_stage(cfg, s, &mut models, dataset))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineOutput { models, logs })
}
