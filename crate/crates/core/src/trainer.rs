//! Alternating adversarial training.
//!
//! Each step first updates the discriminator alone on the un-capped domain
//! loss, then updates backbone, concept heads, concept scorer and predictor on
//! `L_p + λ_c·L_c − λ_d·min(L_d, τ)` with the discriminator held fixed. The two
//! sub-steps use separate tapes, so neither player's parameters can receive
//! gradient from the other's update.

use std::f64::consts::LN_2;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{minibatches, Dataset, SourceBatch, TargetBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::losses::{
    concept_loss, discriminator_loss, encoder_objective, prediction_loss, relaxed_discriminator_loss, LossBundle,
};
use crate::model::{DiscInput, Group, ModelConfig, ModelParams, ParamNodes};
use crate::optim::{OptimConfig, Optimizer, OptimizerKind};
use crate::tensor::{NodeId, Tape};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Relaxed alignment with the configured threshold.
    Cuda,
    /// Threshold pinned to ln 2.
    Uniform,
    /// No adversarial term (λ_d = 0).
    SourceOnly,
    /// Discriminator on backbone features, no threshold.
    NaiveDa,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cuda => "cuda",
            Mode::Uniform => "uniform",
            Mode::SourceOnly => "source_only",
            Mode::NaiveDa => "naive_da",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Discriminator learning rate.
    pub alpha1: f64,
    /// Encoder/predictor learning rate.
    pub alpha2: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    /// Relaxation threshold in nats.
    pub tau: f64,
    pub weight_decay: f64,
    /// Per-domain batch size.
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Discriminator updates per main update.
    pub disc_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 1e-3,
            alpha2: 1e-3,
            lambda_c: 5.0,
            lambda_d: 0.3,
            tau: 0.5,
            weight_decay: 4e-5,
            batch: 64,
            epochs: 30,
            seed: 0,
            mode: Mode::Cuda,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            disc_steps: 1,
        }
    }
}

impl TrainConfig {
    /// Settings used for the concept-shift benchmark comparisons.
    pub fn benchmark(mode: Mode, tau: f64, seed: u64) -> Self {
        Self { lambda_d: 3.0, batch: 128, epochs: 30, mode, tau, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda_c >= 0.0 && self.lambda_d >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.mode == Mode::Cuda && !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be finite and positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.disc_steps == 0 {
            return bad("disc_steps must be positive");
        }
        Ok(())
    }

    /// Threshold actually applied in the encoder objective.
    pub fn effective_tau(&self) -> f64 {
        match self.mode {
            Mode::Cuda => self.tau,
            Mode::Uniform => LN_2,
            Mode::SourceOnly | Mode::NaiveDa => f64::INFINITY,
        }
    }

    pub fn effective_lambda_d(&self) -> f64 {
        match self.mode {
            Mode::SourceOnly => 0.0,
            _ => self.lambda_d,
        }
    }

    /// Model config with the discriminator input the mode requires.
    pub fn adapt_model(&self, model: &ModelConfig) -> ModelConfig {
        let disc_input = if self.mode == Mode::NaiveDa { DiscInput::Backbone } else { DiscInput::Embedding };
        ModelConfig { disc_input, ..model.clone() }
    }

    fn optim(&self, lr: f64) -> OptimConfig {
        OptimConfig {
            kind: self.optimizer,
            lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_p: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_d_relaxed: f64,
    pub encoder_objective: f64,
    pub source: MetricsReport,
    pub target: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Seconds per epoch; kept out of the CSV so logs stay reproducible.
    pub wall_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "epoch,l_p,l_c,l_d,l_d_relaxed,encoder_objective,\
             source_class_acc,source_concept_acc,source_concept_f1,\
             target_class_acc,target_concept_acc,target_concept_f1\n",
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.epoch,
                r.l_p,
                r.l_c,
                r.l_d,
                r.l_d_relaxed,
                r.encoder_objective,
                r.source.class_acc,
                r.source.concept_acc,
                r.source.concept_f1,
                r.target.class_acc,
                r.target.concept_acc,
                r.target.concept_f1,
            );
        }
        out
    }
}

/// Parameters plus both optimizers' state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub cfg: TrainConfig,
    disc_opt: Optimizer<T>,
    main_opt: Optimizer<T>,
    epoch: usize,
    step: usize,
}

struct Forward {
    l_p: NodeId,
    l_c: NodeId,
    l_d: NodeId,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: ModelParams<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let count = |g: Group| params.blocks().iter().filter(|(b, _)| *b == g).count();
        let n_disc = count(Group::Discriminator);
        let n_main = count(Group::Encoder) + count(Group::Predictor);
        Ok(Self {
            disc_opt: Optimizer::new(cfg.optim(cfg.alpha1), n_disc),
            main_opt: Optimizer::new(cfg.optim(cfg.alpha2), n_main),
            params,
            cfg,
            epoch: 0,
            step: 0,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        nodes: &ParamNodes,
        src: &SourceBatch<T>,
        tgt: &TargetBatch<T>,
        supervised: bool,
    ) -> Result<Forward> {
        let p = &self.params;
        let xs = tape.constant(src.x.clone());
        let xt = tape.constant(tgt.x.clone());
        let es = p.encode(tape, nodes, xs)?;
        let et = p.encode(tape, nodes, xt)?;
        let vs = p.assemble(tape, es.c_hat, &es)?;
        let vt = p.assemble(tape, et.c_hat, &et)?;
        let (ds, dt) = match p.config.disc_input {
            DiscInput::Embedding => (vs, vt),
            DiscInput::Backbone => (es.features, et.features),
        };
        let ps = p.discriminate(tape, nodes, ds)?;
        let pt = p.discriminate(tape, nodes, dt)?;
        let l_d = discriminator_loss(tape, ps, pt)?;
        let (l_p, l_c) = if supervised {
            let logits = p.predict_label(tape, nodes, vs)?;
            (prediction_loss(tape, logits, &src.y_onehot)?, concept_loss(tape, es.c_hat, &src.c)?)
        } else {
            (l_d, l_d)
        };
        Ok(Forward { l_p, l_c, l_d })
    }

    /// Abort on a non-finite loss or gradient, naming the first op whose
    /// output was not finite.
    fn check_finite(&self, tape: &Tape<T>, loss: NodeId, grads: &[Vec<T>]) -> Result<()> {
        if tape.scalar_value(loss).is_finite() && grads.iter().flatten().all(|g| g.is_finite()) {
            return Ok(());
        }
        let op = tape.first_non_finite().map_or("unknown", |(_, name)| name);
        Err(Error::NonFinite { op: op.to_string(), epoch: self.epoch, step: self.step })
    }

    /// Discriminator update on the un-capped domain loss. Returns `L_d` before the update.
    pub fn discriminator_step(&mut self, src: &SourceBatch<T>, tgt: &TargetBatch<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape, &[Group::Discriminator]);
        let f = self.forward(&mut tape, &nodes, src, tgt, false)?;
        tape.backward(f.l_d)?;
        let grads = group_grads(&tape, &nodes, &[Group::Discriminator]);
        self.check_finite(&tape, f.l_d, &grads)?;
        let blocks = self
            .params
            .blocks_mut()
            .into_iter()
            .filter(|(g, _)| *g == Group::Discriminator)
            .map(|(_, t)| t.data_mut());
        self.disc_opt.step(blocks, &grads)?;
        Ok(tape.scalar_value(f.l_d).to_f64_lossy())
    }

    /// Gradients of the main objective for encoder and predictor blocks, plus the losses.
    pub fn main_gradients(&self, src: &SourceBatch<T>, tgt: &TargetBatch<T>) -> Result<(Vec<Vec<T>>, LossBundle)> {
        let mut tape = Tape::new();
        let trainable = [Group::Encoder, Group::Predictor];
        let nodes = self.params.register(&mut tape, &trainable);
        let f = self.forward(&mut tape, &nodes, src, tgt, true)?;
        let tau = self.cfg.effective_tau();
        let relaxed = relaxed_discriminator_loss(&mut tape, f.l_d, T::lit(tau))?;
        let obj = encoder_objective(
            &mut tape,
            f.l_p,
            f.l_c,
            relaxed,
            T::lit(self.cfg.lambda_c),
            T::lit(self.cfg.effective_lambda_d()),
        )?;
        tape.backward(obj)?;
        let grads = group_grads(&tape, &nodes, &trainable);
        self.check_finite(&tape, obj, &grads)?;
        let v = |id: NodeId| tape.scalar_value(id).to_f64_lossy();
        let bundle = LossBundle {
            l_p: v(f.l_p),
            l_c: v(f.l_c),
            l_d: v(f.l_d),
            l_d_relaxed: v(relaxed),
            encoder_objective: v(obj),
            tau,
        };
        Ok((grads, bundle))
    }

    /// Encoder/predictor update on the capped objective.
    pub fn main_step(&mut self, src: &SourceBatch<T>, tgt: &TargetBatch<T>) -> Result<LossBundle> {
        let (grads, bundle) = self.main_gradients(src, tgt)?;
        let blocks = self
            .params
            .blocks_mut()
            .into_iter()
            .filter(|(g, _)| *g != Group::Discriminator)
            .map(|(_, t)| t.data_mut());
        self.main_opt.step(blocks, &grads)?;
        Ok(bundle)
    }

    /// Discriminator sub-step(s) followed by one main sub-step.
    pub fn train_step(&mut self, src: &SourceBatch<T>, tgt: &TargetBatch<T>) -> Result<LossBundle> {
        if src.x.shape()[0] != tgt.x.shape()[0] {
            return Err(Error::contract("train_step", "source and target batches must be equal-sized"));
        }
        for _ in 0..self.cfg.disc_steps {
            self.discriminator_step(src, tgt)?;
        }
        let bundle = self.main_step(src, tgt)?;
        self.step += 1;
        Ok(bundle)
    }

    /// One pass over paired minibatches; returns the mean losses.
    pub fn run_epoch(&mut self, source: &Dataset, target: &Dataset) -> Result<LossBundle> {
        let q = self.params.config.n_classes;
        let pairs = minibatches(source, target, self.cfg.batch, self.cfg.seed, self.epoch)?;
        let mut acc = [0.0f64; 5];
        for pair in &pairs {
            let sb = pair.source_batch::<T>(source, q);
            let tb = pair.target_batch::<T>(target);
            let b = self.train_step(&sb, &tb)?;
            for (a, v) in acc.iter_mut().zip([b.l_p, b.l_c, b.l_d, b.l_d_relaxed, b.encoder_objective]) {
                *a += v;
            }
        }
        let n = pairs.len().max(1) as f64;
        self.epoch += 1;
        self.step = 0;
        Ok(LossBundle {
            l_p: acc[0] / n,
            l_c: acc[1] / n,
            l_d: acc[2] / n,
            l_d_relaxed: acc[3] / n,
            encoder_objective: acc[4] / n,
            tau: self.cfg.effective_tau(),
        })
    }
}

fn group_grads<T: Scalar>(tape: &Tape<T>, nodes: &ParamNodes, groups: &[Group]) -> Vec<Vec<T>> {
    nodes
        .all
        .iter()
        .zip(&nodes.groups)
        .filter(|(_, g)| groups.contains(g))
        .map(|(&id, _)| tape.grad_or_zero(id))
        .collect()
}

pub fn check_compatible(source: &Dataset, target: &Dataset, model: &ModelConfig) -> Result<()> {
    for (name, ds) in [("source", source), ("target", target)] {
        if ds.x_dim != model.input_dim || ds.n_concepts != model.n_concepts {
            return Err(Error::Config(format!(
                "{name} data has D = {}, K = {}; model expects D = {}, K = {}",
                ds.x_dim, ds.n_concepts, model.input_dim, model.n_concepts
            )));
        }
        if let Some(e) = ds.examples.iter().find(|e| e.y >= model.n_classes) {
            return Err(Error::Config(format!("{name} label {} >= n_classes {}", e.y, model.n_classes)));
        }
    }
    Ok(())
}

/// Full training run, deterministic in `(cfg.seed, data)`.
pub fn train<T: Scalar>(
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams<T>, TrainLog)> {
    let model_cfg = cfg.adapt_model(model_cfg);
    check_compatible(source, target, &model_cfg)?;
    let params = ModelParams::init(&model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(params, cfg.clone())?;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let losses = trainer.run_epoch(source, target)?;
        log.records.push(EpochRecord {
            epoch,
            l_p: losses.l_p,
            l_c: losses.l_c,
            l_d: losses.l_d,
            l_d_relaxed: losses.l_d_relaxed,
            encoder_objective: losses.encoder_objective,
            source: evaluate(&trainer.params, source)?,
            target: evaluate(&trainer.params, target)?,
        });
        log.wall_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok((trainer.params, log))
}

#[cfg(test)]
mod tests;
