//! Numerical checks of the theory, each comparing a measured quantity with
//! an exact or closed-form expectation.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datagen::{generate, ShiftSpec};
use crate::error::{Error, Result};
use crate::eval::{bound_audit, histogram_jsd, probe_jsd, train_probe, ProbeConfig};
use crate::game::{run_game, GameConfig};
use crate::losses::{concept_loss, discriminator_loss, encoder_objective, prediction_loss, relaxed_discriminator_loss};
use crate::model::{softmax_rows, DiscInput, ModelConfig, ModelParams};
use crate::oracle::{
    concept_posterior, conditional_entropy_y_given_x, expected_cross_entropy, gaussian_pdf, optimal_discriminator,
    DiscreteWorld,
};
use crate::tensor::{finite_diff_check_many, NodeId, Tape, Tensor};
use crate::trainer::{train, Mode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Gradcheck,
    Lemma2,
    Lemma3,
    Theorem2,
    Theorem3,
    Bound,
}

impl Check {
    pub const ALL: [Check; 6] = [Check::Gradcheck, Check::Lemma2, Check::Lemma3, Check::Theorem2, Check::Theorem3, Check::Bound];

    pub fn as_str(self) -> &'static str {
        match self {
            Check::Gradcheck => "gradcheck",
            Check::Lemma2 => "lemma2",
            Check::Lemma3 => "lemma3",
            Check::Theorem2 => "theorem2",
            Check::Theorem3 => "theorem3",
            Check::Bound => "bound",
        }
    }
}

impl FromStr for Check {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown check `{s}`")))
    }
}

/// How a measured value is judged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    Below(f64),
    AtLeast(f64),
    /// Reported for context only.
    Info,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub label: String,
    pub value: f64,
    pub criterion: Criterion,
}

impl Measurement {
    fn new(label: impl Into<String>, value: f64, criterion: Criterion) -> Self {
        Self { label: label.into(), value, criterion }
    }

    pub fn passed(&self) -> bool {
        match self.criterion {
            Criterion::Below(b) => self.value < b,
            Criterion::AtLeast(b) => self.value >= b,
            Criterion::Info => self.value.is_finite(),
        }
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        let v = self.value;
        let value = if v != 0.0 && v.abs() < 1e-3 { format!("{v:.3e}") } else { format!("{v:.6}") };
        match self.criterion {
            Criterion::Below(b) => write!(f, "{}: {value} (expected < {b}) {verdict}", self.label),
            Criterion::AtLeast(b) => write!(f, "{}: {value} (expected >= {b}) {verdict}", self.label),
            Criterion::Info => write!(f, "{}: {value}", self.label),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub check: Check,
    pub measurements: Vec<Measurement>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.measurements.iter().all(Measurement::passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.measurements {
            writeln!(f, "{}: {m}", self.check.as_str())?;
        }
        write!(f, "{}: {}", self.check.as_str(), if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn run_check(check: Check, seed: u64) -> Result<CheckReport> {
    let measurements = match check {
        Check::Gradcheck => gradcheck(seed, 20)?,
        Check::Lemma2 => lemma2(seed)?,
        Check::Lemma3 => {
            let fit = discrete_world_fit(seed)?;
            vec![
                Measurement::new("exact H(y|x)", fit.entropy, Criterion::Info),
                Measurement::new("model L_p", fit.l_p, Criterion::Info),
                Measurement::new("L_p - H(y|x)", fit.l_p - fit.entropy, Criterion::Below(0.05)),
                Measurement::new("L_p - H(y|x) (bound side)", fit.l_p - fit.entropy, Criterion::AtLeast(-1e-9)),
            ]
        }
        Check::Theorem2 => theorem2(seed)?,
        Check::Theorem3 => {
            let fit = discrete_world_fit(seed)?;
            vec![Measurement::new("mean |c_hat - P(c|x)|", fit.concept_mae, Criterion::Below(0.05))]
        }
        Check::Bound => bound(seed)?,
    };
    Ok(CheckReport { check, measurements })
}

/// Gradient check tolerance and central-difference step.
pub const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-6;
const LOSS_NAMES: [&str; 6] = ["L_p", "L_c", "L_d", "relaxed L_d (open)", "relaxed L_d (capped)", "encoder objective"];

fn random_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut widths = |max_layers: usize| -> Vec<usize> { (0..rng.gen_range(0..=max_layers)).map(|_| rng.gen_range(2..=64)).collect() };
    let backbone = widths(2);
    let predictor = widths(2);
    let discriminator = widths(2);
    ModelConfig {
        input_dim: rng.gen_range(2..=6),
        n_concepts: rng.gen_range(1..=3),
        emb_dim: rng.gen_range(1..=3),
        n_classes: rng.gen_range(2..=3),
        backbone_widths: if backbone.is_empty() { vec![rng.gen_range(2..=64)] } else { backbone },
        predictor_widths: predictor,
        discriminator_widths: discriminator,
        disc_input: if rng.gen_bool(0.5) { DiscInput::Embedding } else { DiscInput::Backbone },
    }
}

/// Largest relative error per loss over `n_seeds` random networks and batches.
pub fn gradcheck_errors(seed: u64, n_seeds: u64) -> Result<Vec<f64>> {
    let mut worst = vec![0.0f64; LOSS_NAMES.len()];
    for s in seed..seed + n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let cfg = random_model(&mut rng);
        let params = ModelParams::<f64>::init(&cfg, s)?;
        let batch = 3;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let x = |rng: &mut ChaCha8Rng| {
            Tensor::new(vec![batch, cfg.input_dim], (0..batch * cfg.input_dim).map(|_| normal.sample(rng)).collect())
        };
        let xs = x(&mut rng)?;
        let xt = x(&mut rng)?;
        let mut y_onehot = vec![0.0; batch * cfg.n_classes];
        for r in 0..batch {
            y_onehot[r * cfg.n_classes + rng.gen_range(0..cfg.n_classes)] = 1.0;
        }
        let c: Vec<f64> = (0..batch * cfg.n_concepts).map(|_| rng.gen_range(0..2) as f64).collect();
        // Random biases keep pre-activations off the ReLU kink, where zero-initialized
        // biases would otherwise place every unit fed by an all-dead layer.
        let blocks: Vec<Tensor<f64>> = params
            .blocks()
            .into_iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|w| *w += 0.3 * normal.sample(&mut rng));
                t
            })
            .collect();
        let groups: Vec<_> = params.blocks().into_iter().map(|(g, _)| g).collect();

        let losses = |tape: &mut Tape<f64>, ids: &[NodeId]| -> Result<Vec<NodeId>> {
            let nodes = params.bind(ids.to_vec(), groups.clone())?;
            let xs = tape.constant(xs.clone());
            let xt = tape.constant(xt.clone());
            let es = params.encode(tape, &nodes, xs)?;
            let et = params.encode(tape, &nodes, xt)?;
            let vs = params.assemble(tape, es.c_hat, &es)?;
            let vt = params.assemble(tape, et.c_hat, &et)?;
            let (ds, dt) = match cfg.disc_input {
                DiscInput::Embedding => (vs, vt),
                DiscInput::Backbone => (es.features, et.features),
            };
            let ps = params.discriminate(tape, &nodes, ds)?;
            let pt = params.discriminate(tape, &nodes, dt)?;
            let l_d = discriminator_loss(tape, ps, pt)?;
            let logits = params.predict_label(tape, &nodes, vs)?;
            let l_p = prediction_loss(tape, logits, &y_onehot)?;
            let l_c = concept_loss(tape, es.c_hat, &c)?;
            let open = relaxed_discriminator_loss(tape, l_d, 10.0)?;
            let capped = relaxed_discriminator_loss(tape, l_d, 1e-3)?;
            let obj = encoder_objective(tape, l_p, l_c, open, 5.0, 0.3)?;
            Ok(vec![l_p, l_c, l_d, open, capped, obj])
        };
        let reports = finite_diff_check_many(losses, &blocks, GRADCHECK_STEP)?;
        for (w, r) in worst.iter_mut().zip(reports) {
            *w = w.max(r.max_rel_error);
        }
    }
    Ok(worst)
}

fn gradcheck(seed: u64, n_seeds: u64) -> Result<Vec<Measurement>> {
    let errors = gradcheck_errors(seed, n_seeds)?;
    Ok(LOSS_NAMES
        .iter()
        .zip(errors)
        .map(|(name, e)| Measurement::new(format!("max relative error, {name}"), e, Criterion::Below(GRADCHECK_TOL)))
        .collect())
}

fn gaussian_rows(n: usize, mean: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = Normal::new(mean, 1.0).expect("unit variance");
    (0..n).map(|_| vec![d.sample(rng)]).collect()
}

/// Mean absolute error of a trained probe against `p_T / (p_S + p_T)` on a
/// 61-point grid over `[−3, 5]`, for source `N(0, 1)` and target `N(target_mean, 1)`.
pub fn probe_vs_optimal_discriminator(target_mean: f64, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gaussian_rows(n, 0.0, &mut rng);
    let b = gaussian_rows(n, target_mean, &mut rng);
    let cfg = ProbeConfig { max_rows: None, seed, ..ProbeConfig::default() };
    let (probe, _) = train_probe(&a, &b, &cfg)?;
    let grid: Vec<f64> = (0..61).map(|i| -3.0 + 8.0 * i as f64 / 60.0).collect();
    let p_s: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, 0.0, 1.0)).collect();
    let p_t: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, target_mean, 1.0)).collect();
    let exact = optimal_discriminator(&p_s, &p_t)?;
    let rows: Vec<Vec<f64>> = grid.iter().map(|&x| vec![x]).collect();
    let fitted = probe.predict(&rows)?;
    Ok(fitted.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>() / grid.len() as f64)
}

fn lemma2(seed: u64) -> Result<Vec<Measurement>> {
    Ok(vec![
        Measurement::new("MAE vs D*, N(0,1) vs N(2,1)", probe_vs_optimal_discriminator(2.0, 10_000, seed)?, Criterion::Below(0.05)),
        Measurement::new("MAE vs 0.5, identical Gaussians", probe_vs_optimal_discriminator(0.0, 10_000, seed)?, Criterion::Below(0.03)),
    ])
}

/// Game settings used by the equilibrium check.
pub fn game_config(tau: f64, seed: u64) -> GameConfig {
    GameConfig { tau, seed, ..GameConfig::default() }
}

fn theorem2(seed: u64) -> Result<Vec<Measurement>> {
    let mut out = Vec::new();
    for tau in [0.2, 0.4, 0.6] {
        let game = run_game(&game_config(tau, seed))?;
        let est = probe_jsd(&game.source, &game.target, &ProbeConfig { seed, ..ProbeConfig::default() })?;
        out.push(Measurement::new(format!("|C_d - {tau}|"), (est.c_d - tau).abs(), Criterion::Below(0.05)));
    }
    let game = run_game(&game_config(LN_2, seed))?;
    let col = |rows: &[Vec<f64>]| rows.iter().map(|r| r[0]).collect::<Vec<_>>();
    let jsd = histogram_jsd(&col(&game.source), &col(&game.target), 20, None)?;
    out.push(Measurement::new("histogram JSD at tau = ln 2", jsd, Criterion::Below(0.02)));
    Ok(out)
}

/// Outcome of fitting a model to a small discrete world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteFit {
    /// Exact `H(y | x)`.
    pub entropy: f64,
    /// Expected cross-entropy of the trained model under the world.
    pub l_p: f64,
    /// Mean over inputs and concepts of `|ĉ − P(c = 1 | x)|`.
    pub concept_mae: f64,
}

/// Rows per input and domain in [`concept_world`].
const ROWS_PER_INPUT: usize = 20;

/// Eight one-hot inputs, three concepts and two classes. Concepts are drawn
/// per input with input-specific rates and the label depends on the concepts,
/// so both `H(y | x)` and `P(c | x)` are non-trivial. Both domains are
/// identical.
pub fn concept_world(seed: u64) -> Result<DiscreteWorld> {
    let (nx, k) = (8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..nx).map(|i| (0..nx).map(|j| (i == j) as u8 as f64).collect()).collect();
    let mut samples = Vec::new();
    for x in 0..nx {
        let rates: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..0.9)).collect();
        for _ in 0..ROWS_PER_INPUT {
            let c: Vec<u8> = rates.iter().map(|&r| rng.gen_bool(r) as u8).collect();
            let on = c.iter().filter(|&&v| v == 1).count() as f64;
            let y = rng.gen_bool(0.1 + 0.8 * on / k as f64) as usize;
            for u in 0..2 {
                samples.push((x, y, c.clone(), u));
            }
        }
    }
    DiscreteWorld::from_samples(xs, 2, k, &samples)
}

pub fn discrete_world_fit(seed: u64) -> Result<DiscreteFit> {
    let world = concept_world(seed)?;
    let (source, target) = world.expand(world.xs.len() * ROWS_PER_INPUT)?;
    let model = ModelConfig {
        input_dim: world.xs.len(),
        n_concepts: world.k,
        emb_dim: 4,
        n_classes: world.q,
        backbone_widths: vec![64],
        predictor_widths: vec![64],
        discriminator_widths: vec![16],
        disc_input: DiscInput::Embedding,
    };
    let cfg = TrainConfig {
        alpha2: 3e-3,
        weight_decay: 0.0,
        batch: 32,
        epochs: 600,
        seed,
        mode: Mode::Cuda,
        ..TrainConfig::default()
    };
    let (params, _) = train::<f64>(&source, &target, &cfg, &model)?;
    let inf = params.infer(&Tensor::from_rows(&world.xs)?)?;
    let probs = softmax_rows(&inf.logits);
    let q = world.q;
    let l_p = expected_cross_entropy(&world, |x| probs.data()[x * q..(x + 1) * q].to_vec());
    let posterior = concept_posterior(&world);
    let k = world.k;
    let mut err = 0.0;
    for (x, row) in posterior.iter().enumerate() {
        for (i, p) in row.iter().enumerate() {
            err += (inf.c_hat.data()[x * k + i] - p).abs();
        }
    }
    Ok(DiscreteFit {
        entropy: conditional_entropy_y_given_x(&world),
        l_p,
        concept_mae: err / (posterior.len() * k) as f64,
    })
}

fn bound(seed: u64) -> Result<Vec<Measurement>> {
    let (source, target) = generate(&ShiftSpec::benchmark(), 2000, 2000, seed)?;
    let cfg = TrainConfig { epochs: 10, ..TrainConfig::benchmark(Mode::Cuda, 0.5, seed) };
    let (params, _) = train::<f64>(&source, &target, &cfg, &ModelConfig::benchmark())?;
    let audit = bound_audit(&params, &source, &target, &ProbeConfig { seed, ..ProbeConfig::default() })?;
    let unit = |label: &str, v: f64| Measurement::new(label, v, if (0.0..=1.0).contains(&v) { Criterion::Info } else { Criterion::Below(0.0) });
    Ok(vec![
        unit("target error", audit.target_error),
        unit("source error on ideal embeddings", audit.source_ideal_error),
        Measurement::new("mean source concept error", audit.concept_term, Criterion::Info),
        Measurement::new("probe JSD proxy, ideal source vs target", audit.divergence.jsd, Criterion::Info),
        Measurement::new("computable right-hand side", audit.computable_rhs(), Criterion::Info),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_names_round_trip() {
        for c in Check::ALL {
            assert_eq!(c.as_str().parse::<Check>().unwrap(), c);
        }
        assert!(matches!("lemma9".parse::<Check>(), Err(Error::Config(_))));
    }

    #[test]
    fn measurement_verdicts() {
        assert!(Measurement::new("a", 0.01, Criterion::Below(0.05)).passed());
        assert!(!Measurement::new("a", 0.05, Criterion::Below(0.05)).passed());
        assert!(Measurement::new("a", 2.0, Criterion::AtLeast(2.0)).passed());
        assert!(!Measurement::new("a", f64::NAN, Criterion::Info).passed());
        assert!(!Measurement::new("a", f64::NAN, Criterion::Below(1.0)).passed());
    }

    #[test]
    fn concept_world_expands_exactly() {
        let w = concept_world(3).unwrap();
        let (s, t) = w.expand(160).unwrap();
        assert_eq!((s.len(), t.len()), (160, 160));
        let h = conditional_entropy_y_given_x(&w);
        assert!(h > 0.1 && h < LN_2, "{h}");
        let post = concept_posterior(&w);
        assert!(post.iter().flatten().any(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn gradcheck_on_a_few_networks() {
        let errors = gradcheck_errors(100, 2).unwrap();
        assert!(errors.iter().all(|&e| e < GRADCHECK_TOL), "{errors:?}");
    }
}
