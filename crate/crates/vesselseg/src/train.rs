//! Training regimes.
//!
//! Four schedules over the same machinery:
//! - `unet`: single-task segmentation on annotated triplets;
//! - `ynet`: joint segmentation + translation on triplets, learned sigmas;
//! - `ynet-mix`: triplets interleaved with unannotated pairs, sigmas fixed;
//!   pair steps train only the shared encoder and the translation branch;
//! - `ynet-tl`: pair-only pretraining, then triplet fine-tuning warm-started
//!   from the pretrained encoder and translation decoder.
//!
//! One epoch visits every eligible case once; each visit augments the whole
//! volume, extracts one random patch, and takes one optimizer step (batch
//! size 1). Everything is seeded; two runs with the same config are
//! bit-identical.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentConfig};
use crate::error::{Error, Result};
use crate::infer::{predict_volume, volume_to_feat};
use crate::loss::{cross_entropy_with_grad, mse_with_grad, mtl_loss, mtl_loss_sigma_grad};
use crate::manifest::{DatasetManifest, Role};
use crate::metrics::{confusion, dice};
use crate::nn::checkpoint::{param_digest, save_checkpoint, Provenance};
use crate::nn::model::{build_unet, build_ynet, Arch, Model, NetConfig, SigmaMode};
use crate::nn::ParamGroup;
use crate::optim::Adam;
use crate::patch::{extract_patch, PatchSpec};
use crate::rng::{derive_seed, rng_from};
use crate::volume::Sample;
use rand::seq::SliceRandom;
use rand::Rng;

/// Training regime selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Unet,
    Ynet,
    YnetMix,
    YnetTl,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Regime::Unet),
            "ynet" => Ok(Regime::Ynet),
            "ynet-mix" | "ynet_mix" => Ok(Regime::YnetMix),
            "ynet-tl" | "ynet_tl" => Ok(Regime::YnetTl),
            other => Err(Error::InvalidArgument(format!(
                "unknown regime '{other}' (expected unet, ynet, ynet-mix or ynet-tl)"
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::Unet => "unet",
            Regime::Ynet => "ynet",
            Regime::YnetMix => "ynet-mix",
            Regime::YnetTl => "ynet-tl",
        };
        f.write_str(s)
    }
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    /// Triplet fine-tuning epochs for the transfer-learning regime.
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch: PatchSpec,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Noise scales used by the fixed-sigma (mix) regime.
    pub fixed_sigma: (f64, f64),
    pub net: NetConfig,
    pub checkpoint_dir: PathBuf,
    /// Write a checkpoint after every epoch in addition to the final one.
    pub epoch_checkpoints: bool,
    /// Cap on annotated triplets used (first N in manifest order).
    pub max_triplets: Option<usize>,
    /// Cap on unannotated pairs used.
    pub max_pairs: Option<usize>,
    /// Ids of labeled cases evaluated after each epoch; non-empty enables
    /// best-by-validation checkpoint selection.
    pub val_ids: Vec<String>,
}

impl TrainConfig {
    pub fn new(regime: Regime, checkpoint_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            regime,
            epochs: 100,
            finetune_epochs: 40,
            learning_rate: 1e-3,
            batch_size: 1,
            patch: PatchSpec::exact([32, 32, 32]),
            augment: AugmentConfig::disabled(),
            seed: 0,
            fixed_sigma: (1.0, 1.0),
            net: NetConfig::default(),
            checkpoint_dir: checkpoint_dir.into(),
            epoch_checkpoints: false,
            max_triplets: None,
            max_pairs: None,
            val_ids: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(
                "only batch_size 1 is supported (one patch per case per step)".into(),
            ));
        }
        self.augment.validate()?;
        self.net.validate()?;
        let m = self.net.spatial_multiple();
        for (i, &p) in self.patch.patch_size.iter().enumerate() {
            if p % m != 0 {
                return Err(Error::Config(format!(
                    "patch_size[{i}] = {p} not divisible by the pooling multiple {m}"
                )));
            }
        }
        Ok(())
    }
}

/// Mutable state of one training run.
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub epoch: usize,
    pub seed: u64,
}

/// Losses of one triplet step.
#[derive(Debug, Clone, Copy)]
pub struct TripletStepStats {
    pub l_s: f64,
    pub l_t: f64,
    pub total: f64,
}

/// Per-epoch log row.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub regime: String,
    pub l_s: f64,
    pub l_t: f64,
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub total: f64,
    pub wall_time_s: f64,
}

/// Outputs of a completed run.
pub struct RunArtifacts {
    pub model: Model<f32>,
    pub history: Vec<EpochStats>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Digest of encoder parameters at fine-tuning entry (transfer regime).
    pub stage2_encoder_entry_digest: Option<String>,
    /// Path of the stage-1 checkpoint (transfer regime).
    pub pretrain_checkpoint_path: Option<PathBuf>,
    pub best_val_dice: Option<f64>,
}

fn non_finite(epoch: usize, step: usize, l_s: f64, l_t: f64) -> Error {
    Error::NonFiniteLoss {
        epoch,
        step,
        l_s,
        l_t,
    }
}

/// One optimizer step on an annotated (triplet) patch.
///
/// For the single-decoder model this is plain cross-entropy; for the
/// dual-decoder model the uncertainty-weighted combination of both task
/// losses, updating every parameter group (and the learned sigmas).
pub fn train_step_triplet(state: &mut TrainState, patch: &Sample) -> Result<TripletStepStats> {
    let label = patch
        .label
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("triplet step needs a label".into()))?;
    let input = volume_to_feat(&patch.source);
    let label_arr = label.data.clone();

    state.model.params.zero_grads();
    let (out, cache) = state.model.forward_train(&input)?;
    let (l_s, d_logits) = cross_entropy_with_grad(&out.logits, &label_arr)?;

    let stats = match state.model.arch {
        Arch::Unet => {
            if !l_s.is_finite() {
                return Err(non_finite(state.epoch, 0, l_s, 0.0));
            }
            state.model.backward(&cache, Some(&d_logits), None, false);
            TripletStepStats {
                l_s,
                l_t: 0.0,
                total: l_s,
            }
        }
        Arch::Ynet => {
            let aux = patch
                .auxiliary
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("triplet step needs an auxiliary".into()))?;
            let translation = out
                .translation
                .as_ref()
                .expect("dual-decoder forward returns a translation");
            let (l_t, d_trans) = mse_with_grad(translation, &aux.data)?;
            if !l_s.is_finite() || !l_t.is_finite() {
                return Err(non_finite(state.epoch, 0, l_s, l_t));
            }
            let sigma = state.model.sigma_state();
            let total = mtl_loss(l_s, l_t, &sigma);
            let w_s = sigma.weight_s() as f32;
            let w_t = sigma.weight_t() as f32;
            let d_logits = d_logits.mapv(|v| v * w_s);
            let d_trans = d_trans.mapv(|v| v * w_t);
            state
                .model
                .backward(&cache, Some(&d_logits), Some(&d_trans), false);
            if let Some((sid_s, sid_t)) = state.model.sigma_param_ids() {
                let (g_s, g_t) = mtl_loss_sigma_grad(l_s, l_t, &sigma);
                state.model.params.param_mut(sid_s).grad[0] += g_s as f32;
                state.model.params.param_mut(sid_t).grad[0] += g_t as f32;
            }
            TripletStepStats { l_s, l_t, total }
        }
    };
    state.optimizer.step(&mut state.model.params, |_| true);
    Ok(stats)
}

/// One optimizer step on an unannotated pair.
///
/// Evaluates the plain translation loss; the segmentation decoder still runs
/// forward to feed the translation-side fusion units, but gradient flow into
/// the segmentation branch and the sigmas is blocked, leaving their values
/// bitwise unchanged.
pub fn train_step_pair(state: &mut TrainState, patch: &Sample) -> Result<f64> {
    if state.model.arch != Arch::Ynet {
        return Err(Error::InvalidArgument(
            "pair step requested for a single-decoder regime".into(),
        ));
    }
    let aux = patch
        .auxiliary
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pair step needs an auxiliary volume".into()))?;
    let input = volume_to_feat(&patch.source);

    state.model.params.zero_grads();
    let (out, cache) = state.model.forward_train(&input)?;
    let translation = out
        .translation
        .as_ref()
        .expect("dual-decoder forward returns a translation");
    let (l_t, d_trans) = mse_with_grad(translation, &aux.data)?;
    if !l_t.is_finite() {
        return Err(non_finite(state.epoch, 0, 0.0, l_t));
    }
    state.model.backward(&cache, None, Some(&d_trans), true);
    state
        .optimizer
        .step(&mut state.model.params, ParamGroup::trained_on_pair_step);
    Ok(l_t)
}

// ---- data preparation --------------------------------------------------------

/// In-memory training set: normalized sources/auxiliaries, binary labels.
pub struct TrainData {
    pub triplets: Vec<Sample>,
    pub pairs: Vec<Sample>,
    pub validation: Vec<Sample>,
}

fn normalized(sample: Sample) -> Result<Sample> {
    Ok(Sample {
        id: sample.id,
        source: crate::volume::zscore_normalize(&sample.source)?,
        auxiliary: sample
            .auxiliary
            .map(|v| crate::volume::zscore_normalize(&v))
            .transpose()?,
        label: sample.label,
        liver_mask: sample.liver_mask,
    })
}

/// Load and normalize the samples a regime needs.
pub fn prepare_data(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainData> {
    let mut triplets = Vec::new();
    for rec in manifest.records_with_role(Role::Triplet) {
        if let Some(cap) = cfg.max_triplets {
            if triplets.len() >= cap {
                break;
            }
        }
        triplets.push(normalized(manifest.load_sample(rec)?)?);
    }
    let mut pairs = Vec::new();
    for rec in manifest.records_with_role(Role::Pair) {
        if let Some(cap) = cfg.max_pairs {
            if pairs.len() >= cap {
                break;
            }
        }
        pairs.push(normalized(manifest.load_sample(rec)?)?);
    }
    let mut validation = Vec::new();
    for id in &cfg.val_ids {
        let rec = manifest
            .records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::Manifest(format!("validation id '{id}' not in manifest")))?;
        let sample = normalized(manifest.load_sample(rec)?)?;
        if sample.label.is_none() {
            return Err(Error::Manifest(format!(
                "validation case '{id}' has no label volume"
            )));
        }
        validation.push(sample);
    }
    Ok(TrainData {
        triplets,
        pairs,
        validation,
    })
}

// ---- the epoch loop ------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Visit {
    Triplet(usize),
    Pair(usize),
}

fn epoch_schedule(regime: Regime, stage_pair_only: bool, data: &TrainData, seed: u64, epoch: usize) -> Vec<Visit> {
    let mut visits: Vec<Visit> = Vec::new();
    match (regime, stage_pair_only) {
        (Regime::Unet | Regime::Ynet, _) => {
            visits.extend((0..data.triplets.len()).map(Visit::Triplet));
        }
        (Regime::YnetMix, _) => {
            visits.extend((0..data.triplets.len()).map(Visit::Triplet));
            visits.extend((0..data.pairs.len()).map(Visit::Pair));
        }
        (Regime::YnetTl, true) => {
            visits.extend((0..data.pairs.len()).map(Visit::Pair));
        }
        (Regime::YnetTl, false) => {
            visits.extend((0..data.triplets.len()).map(Visit::Triplet));
        }
    }
    let mut rng = rng_from(seed, &[0x73686666, epoch as u64]);
    visits.shuffle(&mut rng);
    visits
}

fn random_patch(sample: &Sample, patch_size: [usize; 3], rng: &mut impl Rng) -> Result<Sample> {
    let shape = sample.source.shape();
    let mut origin = [0usize; 3];
    for i in 0..3 {
        if patch_size[i] > shape[i] {
            return Err(Error::InvalidArgument(format!(
                "patch {patch_size:?} larger than volume {shape:?}"
            )));
        }
        origin[i] = rng.gen_range(0..=shape[i] - patch_size[i]);
    }
    Ok(Sample {
        id: sample.id.clone(),
        source: extract_patch(&sample.source, origin, patch_size)?,
        auxiliary: sample
            .auxiliary
            .as_ref()
            .map(|v| extract_patch(v, origin, patch_size))
            .transpose()?,
        label: sample
            .label
            .as_ref()
            .map(|v| extract_patch(v, origin, patch_size))
            .transpose()?,
        liver_mask: None,
    })
}

struct EpochOutcome {
    stats: EpochStats,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    regime: Regime,
    pair_only: bool,
    epoch: usize,
    global_epoch: u64,
) -> Result<EpochOutcome> {
    let start = Instant::now();
    let schedule = epoch_schedule(regime, pair_only, data, cfg.seed, global_epoch as usize);
    let mut sum_l_s = 0.0;
    let mut n_l_s = 0usize;
    let mut sum_l_t = 0.0;
    let mut n_l_t = 0usize;
    let mut sum_total = 0.0;

    let mut augment_cfg = cfg.augment;
    augment_cfg.seed = derive_seed(cfg.seed, &[0x617567]);

    for (step, visit) in schedule.iter().enumerate() {
        let (sample, case_tag) = match *visit {
            Visit::Triplet(i) => (&data.triplets[i], i as u64),
            Visit::Pair(i) => (&data.pairs[i], 1_000_000 + i as u64),
        };
        let step_seed = derive_seed(global_epoch, &[case_tag]);
        let augmented = augment_sample(sample, &augment_cfg, step_seed);
        let mut patch_rng = rng_from(cfg.seed, &[0x706174, global_epoch, case_tag]);
        let patch = random_patch(&augmented, cfg.patch.patch_size, &mut patch_rng)?;

        match *visit {
            Visit::Triplet(_) => {
                let s = train_step_triplet(state, &patch).map_err(|e| match e {
                    Error::NonFiniteLoss { l_s, l_t, .. } => non_finite(epoch, step, l_s, l_t),
                    other => other,
                })?;
                sum_l_s += s.l_s;
                n_l_s += 1;
                if state.model.arch == Arch::Ynet {
                    sum_l_t += s.l_t;
                    n_l_t += 1;
                }
                sum_total += s.total;
            }
            Visit::Pair(_) => {
                let l_t = train_step_pair(state, &patch).map_err(|e| match e {
                    Error::NonFiniteLoss { l_t, .. } => non_finite(epoch, step, 0.0, l_t),
                    other => other,
                })?;
                sum_l_t += l_t;
                n_l_t += 1;
                sum_total += l_t;
            }
        }
    }

    let steps = schedule.len();
    let sigma = state.model.sigma_state();
    Ok(EpochOutcome {
        stats: EpochStats {
            epoch,
            steps,
            regime: regime.to_string(),
            l_s: if n_l_s > 0 { sum_l_s / n_l_s as f64 } else { f64::NAN },
            l_t: if n_l_t > 0 { sum_l_t / n_l_t as f64 } else { f64::NAN },
            sigma_s: sigma.sigma_s(),
            sigma_t: sigma.sigma_t(),
            total: if steps > 0 {
                sum_total / steps as f64
            } else {
                f64::NAN
            },
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

fn validation_dice(model: &Model<f32>, cfg: &TrainConfig, data: &TrainData) -> Result<f64> {
    let mut sum = 0.0;
    for sample in &data.validation {
        let pred = predict_volume(model, &sample.source, &cfg.patch)?;
        let c = confusion(sample.label.as_ref().unwrap(), &pred.segmentation)?;
        sum += dice(&c);
    }
    Ok(sum / data.validation.len() as f64)
}

fn write_log(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(
        file,
        "epoch,steps,regime,l_s,l_t,sigma_s,sigma_t,total,wall_time_s"
    )
    .map_err(|e| Error::io(path, e))?;
    for row in history {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{:.3}",
            row.epoch,
            row.steps,
            row.regime,
            row.l_s,
            row.l_t,
            row.sigma_s,
            row.sigma_t,
            row.total,
            row.wall_time_s
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn build_model_for(cfg: &TrainConfig) -> Result<Model<f32>> {
    match cfg.regime {
        Regime::Unet => build_unet(&cfg.net, cfg.seed),
        Regime::Ynet | Regime::YnetTl => build_ynet(&cfg.net, SigmaMode::Learned, None, cfg.seed),
        Regime::YnetMix => build_ynet(
            &cfg.net,
            SigmaMode::Fixed,
            Some(cfg.fixed_sigma),
            cfg.seed,
        ),
    }
}

/// Run a full training regime over a dataset and write checkpoints + log.
pub fn run_regime(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = prepare_data(manifest, cfg)?;

    // Role requirements per regime.
    match cfg.regime {
        Regime::Unet | Regime::Ynet => {
            if data.triplets.is_empty() {
                return Err(Error::Manifest(
                    "regime needs at least one annotated triplet".into(),
                ));
            }
            if !data.pairs.is_empty() {
                log::warn!(
                    "{} unannotated pairs present; the {} regime ignores them",
                    data.pairs.len(),
                    cfg.regime
                );
            }
        }
        Regime::YnetMix | Regime::YnetTl => {
            if data.triplets.is_empty() {
                return Err(Error::Manifest(
                    "regime needs at least one annotated triplet".into(),
                ));
            }
            if data.pairs.is_empty() {
                return Err(Error::Manifest(format!(
                    "the {} regime needs unannotated pairs",
                    cfg.regime
                )));
            }
        }
    }

    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;
    let mut state = TrainState {
        model: build_model_for(cfg)?,
        optimizer: Adam::new(cfg.learning_rate),
        epoch: 0,
        seed: cfg.seed,
    };

    let provenance = |epochs_completed: usize, regime: &str| Provenance {
        regime: regime.to_string(),
        epochs_completed,
        train_seed: cfg.seed,
        data_manifest: manifest.root.display().to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };

    let mut history = Vec::new();
    let mut stage2_digest = None;
    let mut pretrain_path = None;
    let mut best: Option<(f64, usize)> = None;
    let mut global_epoch = 0u64;

    // Stage 1 for the transfer regime: pair-only pretraining.
    if cfg.regime == Regime::YnetTl {
        for epoch in 0..cfg.epochs {
            state.epoch = epoch;
            let out = run_epoch(
                &mut state,
                &data,
                cfg,
                cfg.regime,
                true,
                epoch,
                global_epoch,
            )?;
            history.push(out.stats);
            global_epoch += 1;
        }
        let path = cfg.checkpoint_dir.join("checkpoint_pretrain.zip");
        save_checkpoint(&path, &state.model, &provenance(cfg.epochs, "ynet-tl/pretrain"))?;
        pretrain_path = Some(path);
        stage2_digest = Some(param_digest(&state.model, |g| g == ParamGroup::Encoder));
    }

    // Main stage.
    let (main_epochs, pair_only) = match cfg.regime {
        Regime::YnetTl => (cfg.finetune_epochs, false),
        _ => (cfg.epochs, false),
    };
    for epoch in 0..main_epochs {
        state.epoch = epoch;
        let out = run_epoch(
            &mut state,
            &data,
            cfg,
            cfg.regime,
            pair_only,
            epoch,
            global_epoch,
        )?;
        history.push(out.stats);
        global_epoch += 1;

        if !data.validation.is_empty() {
            let val = validation_dice(&state.model, cfg, &data)?;
            if best.map(|(b, _)| val > b).unwrap_or(true) {
                best = Some((val, epoch));
                let path = cfg.checkpoint_dir.join("checkpoint_best.zip");
                save_checkpoint(&path, &state.model, &provenance(epoch + 1, "best"))?;
            }
        }
        if cfg.epoch_checkpoints {
            let path = cfg
                .checkpoint_dir
                .join(format!("checkpoint_epoch_{epoch:04}.zip"));
            save_checkpoint(&path, &state.model, &provenance(epoch + 1, "epoch"))?;
        }
    }

    let checkpoint_path = cfg.checkpoint_dir.join("checkpoint_final.zip");
    let total_epochs = match cfg.regime {
        Regime::YnetTl => cfg.epochs + cfg.finetune_epochs,
        _ => cfg.epochs,
    };
    save_checkpoint(
        &checkpoint_path,
        &state.model,
        &provenance(total_epochs, &cfg.regime.to_string()),
    )?;
    let log_path = cfg.checkpoint_dir.join("train_log.csv");
    write_log(&log_path, &history)?;

    Ok(RunArtifacts {
        model: state.model,
        history,
        checkpoint_path,
        log_path,
        stage2_encoder_entry_digest: stage2_digest,
        pretrain_checkpoint_path: pretrain_path,
        best_val_dice: best.map(|(d, _)| d),
    })
}
