//! Domain-adaptive training with a learned motion threshold.
//!
//! Each iteration samples one threshold, tokenizes a labelled source batch and
//! a pseudo-labelled target batch with it, takes one AdamW step on
//! `L_s + λ_t·L_t`, then rewards the threshold policy with
//! `−λ_L·L − (1 − ρ)` per domain.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{measure_throughput, random_drop_mask, BenchError, Throughput};
use crate::config::{derive_seed, invalid, ConfigError, KvConfig};
use crate::model::{argmax_rows, Mode, ModelError, PackedBatch, ViTConfig, Vit};
use crate::nn::{read_checkpoint, write_checkpoint, AdamW, AdamWConfig, NnError, Tape, Tensor, Var};
use crate::policy::{PolicyError, ThresholdPolicy, DEFAULT_MC_SAMPLES, DEFAULT_STEP_SIZE, INIT_LOG_SIGMA, INIT_MU};
use crate::scalar::Scalar;
use crate::tokenizer::{gather_tokens, select_tokens, MotionEnergyTensor, NormalizeScope, PatchGrid, SelectionMask, Tokenizer, TokenizerError, VideoTensor};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("pseudo-label line {line}: {reason}")]
    PseudoLabel { line: usize, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One line of a pseudo-label file: `{"video_id": ..., "probs": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelRecord {
    pub video_id: String,
    pub probs: Vec<f64>,
}

impl PseudoLabelRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.probs.is_empty() {
            return Err("empty probability vector".into());
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err("probabilities must be finite and nonnegative".into());
        }
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(format!("probabilities sum to {s}"));
        }
        Ok(())
    }

    /// Argmax, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.argmax()]
    }

    /// The label kept at confidence threshold `gamma_c`, if any.
    pub fn assigned_label(&self, gamma_c: f64) -> Option<usize> {
        (self.confidence() > gamma_c).then(|| self.argmax())
    }
}

pub fn parse_pseudolabels(text: &str) -> Result<Vec<PseudoLabelRecord>, AdaptError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |reason: String| AdaptError::PseudoLabel { line: i + 1, reason };
            let r: PseudoLabelRecord = serde_json::from_str(l).map_err(|e| bad(e.to_string()))?;
            r.validate().map_err(bad)?;
            Ok(r)
        })
        .collect()
}

pub fn format_pseudolabels(records: &[PseudoLabelRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("plain data serialises") + "\n").collect()
}

/// Target videos whose pseudo-label passed the confidence gate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilteredTargetSet {
    pub entries: Vec<(String, usize)>,
}

impl FilteredTargetSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().find(|(v, _)| v == id).map(|(_, l)| *l)
    }
}

pub fn filter_pseudolabels(records: &[PseudoLabelRecord], gamma_c: f64) -> Result<FilteredTargetSet, AdaptError> {
    let mut entries = Vec::new();
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|reason| AdaptError::PseudoLabel { line: i + 1, reason })?;
        if let Some(l) = r.assigned_label(gamma_c) {
            entries.push((r.video_id.clone(), l));
        }
    }
    Ok(FilteredTargetSet { entries })
}

/// Loss nodes of one domain-adaptation step.
#[derive(Clone, Copy, Debug)]
pub struct DaLoss {
    pub l_s: Var,
    pub l_t: Option<Var>,
    pub l_da: Var,
}

/// `L_da = L_s + λ_t·L_t`, with `L_t` absent for an empty target batch.
pub fn da_loss<S: Scalar>(tape: &mut Tape<S>, source_logits: Var, source_labels: &[usize], target: Option<(Var, &[usize])>, lambda_t: f64) -> Result<DaLoss, NnError> {
    let l_s = tape.cross_entropy(source_logits, source_labels)?;
    let Some((logits, labels)) = target.filter(|(_, l)| !l.is_empty()) else {
        return Ok(DaLoss { l_s, l_t: None, l_da: l_s });
    };
    let l_t = tape.cross_entropy(logits, labels)?;
    let weighted = tape.scale(l_t, S::lit(lambda_t))?;
    let l_da = tape.add(l_s, weighted)?;
    Ok(DaLoss { l_s, l_t: Some(l_t), l_da })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub loss_s: f64,
    pub loss_t: f64,
    pub rho_s: f64,
    pub rho_t: f64,
    pub r_src: f64,
    pub r_tgt: f64,
    pub r_total: f64,
}

/// `R = −λ_L·L − (1 − ρ)` per domain, summed.
pub fn compute_reward(loss_s: f64, loss_t: f64, rho_s: f64, rho_t: f64, lambda_l: f64) -> Result<RewardBreakdown, AdaptError> {
    if ![loss_s, loss_t, rho_s, rho_t].iter().all(|v| v.is_finite()) {
        return Err(AdaptError::NonFinite("reward input"));
    }
    let r_src = -lambda_l * loss_s - (1.0 - rho_s);
    let r_tgt = -lambda_l * loss_t - (1.0 - rho_t);
    Ok(RewardBreakdown {
        loss_s,
        loss_t,
        rho_s,
        rho_t,
        r_src,
        r_tgt,
        r_total: r_src + r_tgt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropMode {
    Lmft,
    Random,
    None,
}

impl FromStr for DropMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lmft" => Ok(DropMode::Lmft),
            "random" => Ok(DropMode::Random),
            "none" => Ok(DropMode::None),
            o => Err(format!("unknown drop mode `{o}` (expected lmft, random or none)")),
        }
    }
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropMode::Lmft => "lmft",
            DropMode::Random => "random",
            DropMode::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma_c: f64,
    pub lambda_t: f64,
    pub lambda_l: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub policy_step: f64,
    pub policy_mu: f64,
    pub policy_log_sigma: f64,
    pub seed: u64,
    pub mc_samples: usize,
    pub patch: usize,
    pub tubelet: usize,
    pub normalize_scope: NormalizeScope,
    pub drop_mode: DropMode,
    pub tau_override: Option<f64>,
    pub random_ratio: f64,
    pub disable_target: bool,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ViTConfig::default();
        Self {
            gamma_c: 0.8,
            lambda_t: 0.5,
            lambda_l: 10.0,
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.05,
            policy_step: DEFAULT_STEP_SIZE,
            policy_mu: INIT_MU,
            policy_log_sigma: INIT_LOG_SIGMA,
            seed: 0,
            mc_samples: DEFAULT_MC_SAMPLES,
            patch: 16,
            tubelet: 2,
            normalize_scope: NormalizeScope::Video,
            drop_mode: DropMode::Lmft,
            tau_override: None,
            random_ratio: 0.5,
            disable_target: false,
            n_classes: m.n_classes,
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_ratio: m.mlp_ratio,
            dropout: m.dropout,
        }
    }
}

impl TrainConfig {
    /// Takes every training key from `c`, leaving other keys in place.
    pub fn take_from(c: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let cfg = Self {
            gamma_c: c.take_or("gamma_c", d.gamma_c)?,
            lambda_t: c.take_or("lambda_t", d.lambda_t)?,
            lambda_l: c.take_or("lambda_L", d.lambda_l)?,
            epochs: c.take_or("epochs", d.epochs)?,
            batch_size: c.take_or("batch_size", d.batch_size)?,
            lr: c.take_or("lr", d.lr)?,
            weight_decay: c.take_or("weight_decay", d.weight_decay)?,
            policy_step: c.take_or("policy_step", d.policy_step)?,
            policy_mu: c.take_or("policy_mu", d.policy_mu)?,
            policy_log_sigma: c.take_or("policy_log_sigma", d.policy_log_sigma)?,
            seed: c.take_or("seed", d.seed)?,
            mc_samples: c.take_or("mc_samples", d.mc_samples)?,
            patch: c.take_or("patch", d.patch)?,
            tubelet: c.take_or("tubelet", d.tubelet)?,
            normalize_scope: c.take_or("normalize_scope", d.normalize_scope)?,
            drop_mode: c.take_or("drop_mode", d.drop_mode)?,
            tau_override: c.take("tau_override")?,
            random_ratio: c.take_or("random_ratio", d.random_ratio)?,
            disable_target: c.take_or("disable_target", d.disable_target)?,
            n_classes: c.take_or("n_classes", d.n_classes)?,
            embed_dim: c.take_or("embed_dim", d.embed_dim)?,
            n_layers: c.take_or("n_layers", d.n_layers)?,
            n_heads: c.take_or("n_heads", d.n_heads)?,
            mlp_ratio: c.take_or("mlp_ratio", d.mlp_ratio)?,
            dropout: c.take_or("dropout", d.dropout)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.gamma_c) {
            return Err(invalid("gamma_c", self.gamma_c, "must lie in [0, 1]"));
        }
        if !(self.lambda_t > 0.0) {
            return Err(invalid("lambda_t", self.lambda_t, "must be positive"));
        }
        if !(self.lambda_l > 0.0) {
            return Err(invalid("lambda_L", self.lambda_l, "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", 0, "must be positive"));
        }
        if !(self.lr > 0.0) || !(self.policy_step > 0.0) {
            return Err(invalid("lr", self.lr, "learning rates must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(invalid("mc_samples", 0, "must be positive"));
        }
        if let Some(t) = self.tau_override {
            if !(t > 0.0 && t < 1.0) {
                return Err(invalid("tau_override", t, "must lie in (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.random_ratio) {
            return Err(invalid("random_ratio", self.random_ratio, "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            patch: self.patch,
            tubelet: self.tubelet,
            scope: self.normalize_scope,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(&str, String)> = vec![
            ("gamma_c", self.gamma_c.to_string()),
            ("lambda_t", self.lambda_t.to_string()),
            ("lambda_L", self.lambda_l.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("policy_step", self.policy_step.to_string()),
            ("policy_mu", self.policy_mu.to_string()),
            ("policy_log_sigma", self.policy_log_sigma.to_string()),
            ("seed", self.seed.to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("patch", self.patch.to_string()),
            ("tubelet", self.tubelet.to_string()),
            ("normalize_scope", self.normalize_scope.to_string()),
            ("drop_mode", self.drop_mode.to_string()),
            ("random_ratio", self.random_ratio.to_string()),
            ("disable_target", self.disable_target.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("dropout", self.dropout.to_string()),
        ];
        if let Some(t) = self.tau_override {
            v.push(("tau_override", t.to_string()));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// A tokenized clip: its tubelet grid and cached motion energy.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub id: String,
    pub label: Option<usize>,
    pub grid: PatchGrid<S>,
    pub energy: MotionEnergyTensor<S>,
}

impl<S: Scalar> Sample<S> {
    pub fn new(id: impl Into<String>, label: Option<usize>, video: &VideoTensor<S>, tok: &Tokenizer) -> Result<Self, TokenizerError> {
        let grid = tok.partition(video)?;
        let energy = tok.motion_energy(&grid);
        Ok(Self {
            id: id.into(),
            label,
            grid,
            energy,
        })
    }

    pub fn from_f32(id: impl Into<String>, label: Option<usize>, video: &VideoTensor<f32>, tok: &Tokenizer) -> Result<Self, TokenizerError> {
        Self::new(id, label, &video.cast(), tok)
    }
}

/// How tokens are chosen for one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Threshold(f64),
    Random { ratio: f64, seed: u64 },
    All,
}

impl Selection {
    pub fn mask<S: Scalar>(&self, s: &Sample<S>) -> Result<SelectionMask, AdaptError> {
        Ok(match *self {
            Selection::Threshold(tau) => select_tokens(&s.energy, tau)?,
            Selection::Random { ratio, seed } => random_drop_mask(s.grid.dims, ratio, seed)?,
            Selection::All => SelectionMask::all(s.grid.dims),
        })
    }
}

/// Builds a packed batch of `samples` under per-clip selections. Returns the
/// batch and each clip's drop ratio.
pub fn pack_samples<S: Scalar>(samples: &[&Sample<S>], select: impl Fn(usize, &Sample<S>) -> Selection, labels: Option<Vec<usize>>) -> Result<(PackedBatch<S>, Vec<f64>), AdaptError> {
    let mut seqs = Vec::with_capacity(samples.len());
    let mut ratios = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let m = select(i, s).mask(s)?;
        ratios.push(m.drop_ratio());
        seqs.push(gather_tokens(&s.grid, &m, &s.id)?);
    }
    let refs: Vec<_> = seqs.iter().collect();
    Ok((PackedBatch::pack(&refs, labels)?, ratios))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iter: usize,
    pub loss_da: f64,
    pub tau: f64,
    pub baseline: f64,
    pub reward: RewardBreakdown,
}

pub const METRICS_HEADER: &str = "iter,loss_s,loss_t,loss_da,tau,rho_s,rho_t,r_total,baseline";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        let r = &self.reward;
        format!("{},{},{},{},{},{},{},{},{}", self.iter, r.loss_s, r.loss_t, self.loss_da, self.tau, r.rho_s, r.rho_t, r.r_total, self.baseline)
    }
}

pub fn metrics_csv(rows: &[IterationMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Model, optimizer, threshold policy and data of one training run.
pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub model: Vit<S>,
    opt: AdamW<S>,
    pub policy: ThresholdPolicy<f64>,
    source: Vec<Sample<S>>,
    target: Vec<Sample<S>>,
    target_labels: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    target_order: Vec<usize>,
    target_cursor: usize,
    iter: usize,
    pub metrics: Vec<IterationMetrics>,
    last_logits: Option<(Tensor<S>, Option<Tensor<S>>)>,
}

impl<S: Scalar> Trainer<S> {
    /// `source` samples carry labels; `target` samples carry their
    /// (already filtered) pseudo-labels.
    pub fn new(cfg: TrainConfig, source: Vec<Sample<S>>, target: Vec<Sample<S>>) -> Result<Self, AdaptError> {
        cfg.validate()?;
        let first = source.first().ok_or_else(|| AdaptError::Data("source set is empty".into()))?;
        let dims = first.grid.dims;
        let channels = first.grid.channels;
        for s in source.iter().chain(&target) {
            if s.grid.dims != dims || s.grid.channels != channels || s.grid.p != cfg.patch || s.grid.t_p != cfg.tubelet {
                return Err(AdaptError::Data(format!("clip `{}` has a different token grid", s.id)));
            }
        }
        let labels = |set: &[Sample<S>], what: &str| -> Result<Vec<usize>, AdaptError> {
            set.iter()
                .map(|s| match s.label {
                    Some(l) if l < cfg.n_classes => Ok(l),
                    _ => Err(AdaptError::Data(format!("{what} clip `{}` needs a label below {}", s.id, cfg.n_classes))),
                })
                .collect()
        };
        labels(&source, "source")?;
        let target = if cfg.disable_target { Vec::new() } else { target };
        let target_labels = labels(&target, "target")?;
        let vit_cfg = ViTConfig {
            embed_dim: cfg.embed_dim,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            mlp_ratio: cfg.mlp_ratio,
            n_classes: cfg.n_classes,
            patch: cfg.patch,
            tubelet: cfg.tubelet,
            channels,
            grid: dims,
            dropout: cfg.dropout,
        };
        let model = Vit::new(vit_cfg, derive_seed(cfg.seed, "init"))?;
        let opt = AdamW::new(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
            &model.params,
        );
        let policy = ThresholdPolicy::new(cfg.policy_mu, cfg.policy_log_sigma).with_step_size(cfg.policy_step);
        let rng = |tag| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag));
        Ok(Self {
            opt,
            model,
            policy,
            source,
            target_order: (0..target.len()).collect(),
            target,
            target_labels,
            shuffle_rng: rng("shuffle"),
            target_rng: rng("target"),
            policy_rng: rng("policy"),
            mask_rng: rng("mask"),
            dropout_rng: rng("dropout"),
            target_cursor: usize::MAX,
            iter: 0,
            metrics: Vec::new(),
            last_logits: None,
            cfg,
        })
    }

    pub fn source_len(&self) -> usize {
        self.source.len()
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    /// Logits of the most recent iteration (source, target).
    pub fn last_logits(&self) -> Option<&(Tensor<S>, Option<Tensor<S>>)> {
        self.last_logits.as_ref()
    }

    fn next_target_batch(&mut self) -> Vec<usize> {
        let n = self.target.len();
        let want = self.cfg.batch_size.min(n);
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.target_cursor >= n {
                self.target_order.shuffle(&mut self.target_rng);
                self.target_cursor = 0;
            }
            out.push(self.target_order[self.target_cursor]);
            self.target_cursor += 1;
        }
        out
    }

    /// One optimisation step on the given source and target clip indices.
    pub fn train_iteration(&mut self, src: &[usize], tgt: &[usize]) -> Result<IterationMetrics, AdaptError> {
        if src.is_empty() {
            return Err(AdaptError::Data("empty source batch".into()));
        }
        let learn_tau = self.cfg.drop_mode == DropMode::Lmft && self.cfg.tau_override.is_none();
        let sample = learn_tau.then(|| self.policy.sample(&mut self.policy_rng));
        let tau = match (self.cfg.drop_mode, sample) {
            (DropMode::Lmft, Some(s)) => s.tau,
            (DropMode::Lmft, None) => self.cfg.tau_override.expect("override set when not learning"),
            _ => f64::NAN,
        };
        let mode = self.cfg.drop_mode;
        let ratio = self.cfg.random_ratio;
        let mut seeds = Vec::with_capacity(src.len() + tgt.len());
        if mode == DropMode::Random {
            seeds.extend((0..src.len() + tgt.len()).map(|_| self.mask_rng.random::<u64>()));
        }
        let select = |i: usize, _: &Sample<S>| match mode {
            DropMode::Lmft => Selection::Threshold(tau),
            DropMode::Random => Selection::Random { ratio, seed: seeds[i] },
            DropMode::None => Selection::All,
        };
        let clips: Vec<&Sample<S>> = src.iter().map(|&i| &self.source[i]).chain(tgt.iter().map(|&i| &self.target[i])).collect();
        let (batch, ratios) = pack_samples(&clips, select, None)?;
        let src_labels: Vec<usize> = src.iter().map(|&i| self.source[i].label.expect("validated")).collect();
        let tgt_labels: Vec<usize> = tgt.iter().map(|&i| self.target_labels[i]).collect();

        let mut tape = Tape::new();
        let drop_rng = (self.cfg.dropout > 0.0).then_some(&mut self.dropout_rng);
        let logits = self.model.forward(&mut tape, &batch, Mode::Train, drop_rng)?;
        let src_rows: Vec<usize> = (0..src.len()).collect();
        let tgt_rows: Vec<usize> = (src.len()..src.len() + tgt.len()).collect();
        let src_logits = tape.gather_rows(logits, &src_rows)?;
        let tgt_logits = if tgt.is_empty() { None } else { Some(tape.gather_rows(logits, &tgt_rows)?) };
        let loss = da_loss(&mut tape, src_logits, &src_labels, tgt_logits.map(|l| (l, tgt_labels.as_slice())), self.cfg.lambda_t)?;
        let value = |v: Var| tape.value(v).data()[0].f64();
        let (loss_s, loss_t, loss_da) = (value(loss.l_s), loss.l_t.map_or(0.0, value), value(loss.l_da));
        if !loss_da.is_finite() {
            return Err(AdaptError::NonFinite("loss"));
        }
        let grads = tape.backward(loss.l_da)?;
        self.opt.step(&mut self.model.params, &grads)?;
        self.last_logits = Some((tape.value(src_logits).clone(), tgt_logits.map(|l| tape.value(l).clone())));

        let mean = |r: &[f64]| if r.is_empty() { 0.0 } else { r.iter().sum::<f64>() / r.len() as f64 };
        let reward = compute_reward(loss_s, loss_t, mean(&ratios[..src.len()]), mean(&ratios[src.len()..]), self.cfg.lambda_l)?;
        if let Some(s) = sample {
            self.policy.reinforce_update(&s, reward.r_total)?;
        }
        let m = IterationMetrics {
            iter: self.iter,
            loss_da,
            tau,
            baseline: self.policy.baseline,
            reward,
        };
        self.iter += 1;
        self.metrics.push(m);
        Ok(m)
    }

    /// One pass over the source set in shuffled batches.
    pub fn train_epoch(&mut self) -> Result<(), AdaptError> {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        for chunk in order.chunks(self.cfg.batch_size) {
            let tgt = self.next_target_batch();
            self.train_iteration(chunk, &tgt)?;
        }
        Ok(())
    }

    /// Runs all epochs and freezes the deployment threshold.
    pub fn train(mut self, mut on_epoch: impl FnMut(usize, &Self)) -> Result<TrainedModel<S>, AdaptError> {
        let t0 = Instant::now();
        for e in 0..self.cfg.epochs {
            self.train_epoch()?;
            on_epoch(e, &self);
        }
        let mut trained = self.finish()?;
        trained.train_seconds = t0.elapsed().as_secs_f64();
        Ok(trained)
    }

    pub fn finish(self) -> Result<TrainedModel<S>, AdaptError> {
        let tau_seed = derive_seed(self.cfg.seed, "tau_hat");
        let tau_hat = match (self.cfg.drop_mode, self.cfg.tau_override) {
            (DropMode::Lmft, Some(t)) => Some(t),
            (DropMode::Lmft, None) => Some(self.policy.deterministic_threshold(self.cfg.mc_samples, tau_seed)?),
            _ => None,
        };
        Ok(TrainedModel {
            model: self.model,
            policy: self.policy,
            tau_hat,
            tau_seed,
            drop_mode: self.cfg.drop_mode,
            random_ratio: self.cfg.random_ratio,
            tokenizer: self.cfg.tokenizer(),
            train_seconds: 0.0,
            metrics: self.metrics,
        })
    }
}

/// A trained classifier plus everything needed to tokenize for it.
#[derive(Clone, Debug)]
pub struct TrainedModel<S> {
    pub model: Vit<S>,
    pub policy: ThresholdPolicy<f64>,
    pub tau_hat: Option<f64>,
    pub tau_seed: u64,
    pub drop_mode: DropMode,
    pub random_ratio: f64,
    pub tokenizer: Tokenizer,
    pub train_seconds: f64,
    pub metrics: Vec<IterationMetrics>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

impl<S: Scalar> TrainedModel<S> {
    fn meta(&self) -> Vec<(String, String)> {
        let mut m = self.model.config.to_pairs();
        let mut put = |k: &str, v: String| m.push((k.to_string(), v));
        put("policy.mu", self.policy.mu.to_string());
        put("policy.log_sigma", self.policy.log_sigma().to_string());
        put("policy.baseline", self.policy.baseline.to_string());
        put("policy.step_size", self.policy.step_size.to_string());
        if let Some(t) = self.tau_hat {
            put("policy.tau_hat", t.to_string());
        }
        put("policy.tau_seed", self.tau_seed.to_string());
        put("drop_mode", self.drop_mode.to_string());
        put("random_ratio", self.random_ratio.to_string());
        put("tokenizer.patch", self.tokenizer.patch.to_string());
        put("tokenizer.tubelet", self.tokenizer.tubelet.to_string());
        put("tokenizer.scope", self.tokenizer.scope.to_string());
        put("train_seconds", self.train_seconds.to_string());
        m
    }

    /// Writes the checkpoint and metrics log into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AdaptError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| AdaptError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let ck = dir.join(CHECKPOINT_FILE);
        let mut f = BufWriter::new(fs::File::create(&ck).map_err(io(&ck))?);
        write_checkpoint(&mut f, &self.model.params, &self.meta())
            .and_then(|_| f.flush())
            .map_err(io(&ck))?;
        let mp = dir.join(METRICS_FILE);
        fs::write(&mp, metrics_csv(&self.metrics)).map_err(io(&mp))
    }

    /// Reads `dir/model.ckpt` (or `dir` itself if it is a file).
    pub fn load(dir: &Path) -> Result<Self, AdaptError> {
        let path = if dir.is_dir() { dir.join(CHECKPOINT_FILE) } else { dir.to_path_buf() };
        let f = fs::File::open(&path).map_err(|source| AdaptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck = read_checkpoint::<S>(&mut BufReader::new(f)).map_err(|e| AdaptError::Checkpoint(e.to_string()))?;
        let get = |k: &str| ck.meta(k).map(str::to_string);
        let need = |k: &str| get(k).ok_or_else(|| AdaptError::Checkpoint(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64, AdaptError> { need(k)?.parse().map_err(|_| AdaptError::Checkpoint(format!("bad `{k}`"))) };
        let config = ViTConfig::from_pairs(get)?;
        let drop_mode: DropMode = need("drop_mode")?.parse().map_err(AdaptError::Checkpoint)?;
        let tau_hat = get("policy.tau_hat").map(|v| v.parse::<f64>()).transpose().map_err(|_| AdaptError::Checkpoint("bad `policy.tau_hat`".into()))?;
        if drop_mode == DropMode::Lmft && tau_hat.is_none() {
            return Err(AdaptError::Checkpoint("missing deterministic threshold `policy.tau_hat`".into()));
        }
        let mut policy = ThresholdPolicy::new(num("policy.mu")?, num("policy.log_sigma")?).with_step_size(num("policy.step_size")?);
        policy.baseline = num("policy.baseline")?;
        let scope = need("tokenizer.scope")?.parse().map_err(|e: TokenizerError| AdaptError::Checkpoint(e.to_string()))?;
        Ok(Self {
            model: Vit::from_params(config, ck.params.clone())?,
            policy,
            tau_hat,
            tau_seed: need("policy.tau_seed")?.parse().map_err(|_| AdaptError::Checkpoint("bad `policy.tau_seed`".into()))?,
            drop_mode,
            random_ratio: num("random_ratio")?,
            tokenizer: Tokenizer {
                patch: num("tokenizer.patch")? as usize,
                tubelet: num("tokenizer.tubelet")? as usize,
                scope,
            },
            train_seconds: num("train_seconds")?,
            metrics: Vec::new(),
        })
    }

    /// Per-clip token selection at deployment.
    pub fn selection(&self, opts: &EvalOptions) -> Result<SelectionPlan, AdaptError> {
        let mode = opts.drop_mode.unwrap_or(self.drop_mode);
        Ok(match (mode, opts.tau_override) {
            (_, Some(t)) if mode == DropMode::Lmft => SelectionPlan::Threshold(t),
            (DropMode::Lmft, _) => SelectionPlan::Threshold(self.tau_hat.ok_or_else(|| AdaptError::Checkpoint("no deterministic threshold stored".into()))?),
            (DropMode::Random, _) => SelectionPlan::Random {
                ratio: opts.random_ratio.unwrap_or(self.random_ratio),
                seed: opts.seed,
            },
            (DropMode::None, _) => SelectionPlan::All,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionPlan {
    Threshold(f64),
    Random { ratio: f64, seed: u64 },
    All,
}

impl SelectionPlan {
    pub fn for_clip(&self, index: usize) -> Selection {
        match *self {
            SelectionPlan::Threshold(t) => Selection::Threshold(t),
            SelectionPlan::Random { ratio, seed } => Selection::Random {
                ratio,
                seed: derive_seed(seed, &index.to_string()),
            },
            SelectionPlan::All => Selection::All,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match self {
            SelectionPlan::Threshold(t) => Some(*t),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub tau_override: Option<f64>,
    pub drop_mode: Option<DropMode>,
    pub random_ratio: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau_override: None,
            drop_mode: None,
            random_ratio: None,
            seed: 0,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_drop_ratio: f64,
    pub tau_hat: Option<f64>,
    pub clips: usize,
    pub mean_tokens: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub total_tokens: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let tau = self.tau_hat.map_or_else(|| "none".to_string(), |t| t.to_string());
        format!(
            "accuracy={}\nmean_drop_ratio={}\ntau_hat={}\nclips={}\nmean_tokens={}\nmin_tokens={}\nmax_tokens={}\ntotal_tokens={}\n",
            self.accuracy, self.mean_drop_ratio, tau, self.clips, self.mean_tokens, self.min_tokens, self.max_tokens, self.total_tokens
        )
    }
}

/// Top-1 accuracy and token statistics on labelled clips. Deterministic.
pub fn evaluate<S: Scalar>(trained: &TrainedModel<S>, samples: &[Sample<S>], opts: &EvalOptions) -> Result<EvalReport, AdaptError> {
    if samples.is_empty() {
        return Err(AdaptError::Data("no clips to evaluate".into()));
    }
    let plan = trained.selection(opts)?;
    let mut correct = 0usize;
    let mut ratios = Vec::with_capacity(samples.len());
    let mut tokens = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(opts.batch_size.max(1)).enumerate() {
        let base = c * opts.batch_size.max(1);
        let refs: Vec<&Sample<S>> = chunk.iter().collect();
        let (batch, r) = pack_samples(&refs, |i, _| plan.for_clip(base + i), None)?;
        let logits = trained.model.forward_classify(&batch)?;
        for (s, pred) in chunk.iter().zip(argmax_rows(&logits)) {
            let label = s.label.ok_or_else(|| AdaptError::Data(format!("clip `{}` has no label", s.id)))?;
            correct += usize::from(pred == label);
        }
        tokens.extend(batch.mask.segments().iter().copied());
        ratios.extend(r);
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_drop_ratio: ratios.iter().sum::<f64>() / n,
        tau_hat: plan.tau(),
        clips: samples.len(),
        mean_tokens: tokens.iter().sum::<usize>() as f64 / n,
        min_tokens: tokens.iter().copied().min().unwrap_or(0),
        max_tokens: tokens.iter().copied().max().unwrap_or(0),
        total_tokens: tokens.iter().sum(),
    })
}

/// End-to-end inference throughput on raw clips: tokenization, motion
/// energy, selection and the forward pass, in batches of `opts.batch_size`.
pub fn inference_throughput<S: Scalar>(trained: &TrainedModel<S>, videos: &[VideoTensor<S>], opts: &EvalOptions, warmup: usize, repeats: usize) -> Result<Throughput, AdaptError> {
    if videos.is_empty() {
        return Err(AdaptError::Data("no clips to time".into()));
    }
    let plan = trained.selection(opts)?;
    let bs = opts.batch_size.max(1);
    measure_throughput(videos.len(), warmup, repeats, || {
        for (c, chunk) in videos.chunks(bs).enumerate() {
            let samples = chunk
                .iter()
                .enumerate()
                .map(|(i, v)| Sample::new(format!("{}", c * bs + i), None, v, &trained.tokenizer))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&Sample<S>> = samples.iter().collect();
            let (batch, _) = pack_samples(&refs, |i, _| plan.for_clip(c * bs + i), None)?;
            std::hint::black_box(trained.model.forward_classify(&batch)?);
        }
        Ok(())
    })
}

/// Attaches filtered pseudo-labels to unlabeled target clips, keeping only
/// those that passed the gate.
pub fn label_targets<S>(clips: Vec<Sample<S>>, filtered: &FilteredTargetSet) -> Vec<Sample<S>> {
    let map: std::collections::HashMap<&str, usize> = filtered.entries.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    clips
        .into_iter()
        .filter_map(|mut s| {
            let l = *map.get(s.id.as_str())?;
            s.label = Some(l);
            Some(s)
        })
        .collect()
}
