//! Supervision assembly and the deterministic training loop.

use diffnet::{Adam, Optimizer, Scalar, Sgd, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CoreError, Result};
use crate::grid::GridConfig;
use crate::intentions::{assign_labels, IntentionSet, WeightMode};
use crate::losses::{
    aux_loss, build_cost_target, pred_loss, prior_loss, sample_mask, total_loss_var, AuxTargets, CostTarget, LossWeights,
};
use crate::models::Model;
use crate::synth::TrainingExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Only used by SGD.
    pub momentum: f64,
    pub seed: u64,
    pub weight_mode: WeightMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 0,
            weight_mode: WeightMode::Distance,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return input_err("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return input_err("learning_rate must be positive and momentum in [0, 1)");
        }
        Ok(())
    }

    pub fn optimizer<S: Scalar>(&self) -> Optimizer<S> {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(S::lit(self.learning_rate), S::lit(self.momentum))),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(S::lit(self.learning_rate))),
        }
    }
}

/// Per-example targets that do not change between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub cost: CostTarget,
    pub aux: Option<AuxTargets>,
}

/// Cost labels from the expert footprint and the true future occupancy, plus
/// intention targets when a set is given.
pub fn supervision(
    ex: &TrainingExample,
    grid: &GridConfig,
    footprint: (f64, f64),
    intentions: Option<&IntentionSet>,
    mode: WeightMode,
) -> Result<Supervision> {
    let future = ex.expert_future(grid.tau);
    let anchor = ex.expert[grid.tau - 1];
    let cost = build_cost_target(anchor, future, &ex.future, ex.semantic.drivable(), footprint, grid)?;
    let aux = match intentions {
        Some(set) => {
            let (labels, weights) = assign_labels(future, set, mode)?;
            Some(AuxTargets {
                labels,
                weights,
                expert: future.to_vec(),
                means: set.means.clone(),
            })
        }
        None => None,
    };
    Ok(Supervision { cost, aux })
}

/// `(N, τ, H, W)` observations and `(N, C, H, W)` semantic channels.
pub fn input_tensors<S: Scalar>(batch: &[&TrainingExample]) -> Result<(Tensor<S>, Tensor<S>)> {
    let Some(first) = batch.first() else {
        return input_err("empty batch");
    };
    let tau = first.observed.len();
    let (h, w) = (first.semantic.height, first.semantic.width);
    let c = first.semantic.channels;
    let mut obs = Vec::with_capacity(batch.len() * tau * h * w);
    let mut sem = Vec::with_capacity(batch.len() * c * h * w);
    for ex in batch {
        if ex.observed.len() != tau || (ex.semantic.channels, ex.semantic.height, ex.semantic.width) != (c, h, w) {
            return input_err("batch examples have different shapes");
        }
        for g in &ex.observed {
            obs.extend(g.values().iter().map(|&v| S::lit(v as f64)));
        }
        sem.extend(ex.semantic.data.iter().map(|&v| if v != 0 { S::one() } else { S::zero() }));
    }
    Ok((Tensor::from_vec(&[batch.len(), tau, h, w], obs)?, Tensor::from_vec(&[batch.len(), c, h, w], sem)?))
}

fn target_tensors<S: Scalar>(batch: &[&TrainingExample]) -> Result<(Tensor<S>, Tensor<S>)> {
    let t = batch[0].targets.len();
    let (h, w) = (batch[0].semantic.height, batch[0].semantic.width);
    let mut y = Vec::with_capacity(batch.len() * t * h * w);
    let mut v = Vec::with_capacity(batch.len() * t * h * w);
    for ex in batch {
        if ex.targets.len() != t || ex.visibility.len() != t {
            return input_err("batch examples have different horizons");
        }
        for g in &ex.targets {
            y.extend(g.values().iter().map(|&x| S::lit(x as f64)));
        }
        for m in &ex.visibility {
            v.extend(m.values.iter().map(|&x| if x != 0 { S::one() } else { S::zero() }));
        }
    }
    Ok((Tensor::from_vec(&[batch.len(), t, h, w], y)?, Tensor::from_vec(&[batch.len(), t, h, w], v)?))
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub pred: f64,
    /// Cross-entropy part of the prediction loss.
    pub pred_ce: f64,
    pub prior: f64,
    pub aux: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.total += s * o.total;
        self.pred += s * o.pred;
        self.pred_ce += s * o.pred_ce;
        self.prior += s * o.prior;
        self.aux += s * o.aux;
    }
}

/// Records `L_total` for a batch. Imitation runs only when the model has one,
/// targets carry intentions and the auxiliary weight is positive.
pub fn batch_objective<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    batch: &[&TrainingExample],
    sup: &[&Supervision],
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(Var, LossTerms)> {
    if batch.len() != sup.len() || batch.is_empty() {
        return input_err("batch and supervision sizes differ");
    }
    let aux_targets: Option<Vec<AuxTargets>> = sup.iter().map(|s| s.aux.clone()).collect();
    let use_aux = model.has_imitation() && weights.beta > 0.0 && aux_targets.is_some();
    let (obs, sem) = input_tensors::<S>(batch)?;
    let obs = tape.constant(obs);
    let sem = tape.constant(sem);
    let out = model.forward(tape, obs, sem, use_aux)?;

    let mut terms = LossTerms::default();
    let pred = match out.ogms {
        Some(o) => {
            let (y, vis) = target_tensors::<S>(batch)?;
            let p = pred_loss(tape, o, &y, &vis, weights.gamma)?;
            terms.pred = tape.value(p.total).item().as_f64();
            terms.pred_ce = tape.value(p.ce).item().as_f64();
            Some(p.total)
        }
        None => None,
    };
    let targets: Vec<CostTarget> = sup.iter().map(|s| s.cost.clone()).collect();
    let masks = targets
        .iter()
        .map(|t| sample_mask(t, weights.mask_budget, rng))
        .collect::<Result<Vec<_>>>()?;
    let prior = prior_loss(tape, out.cost, &targets, &masks)?;
    terms.prior = tape.value(prior).item().as_f64();
    let aux = match (use_aux, out.logits, out.offsets, aux_targets) {
        (true, Some(l), Some(o), Some(t)) => {
            let a = aux_loss(tape, l, o, &t, weights.lambda)?;
            terms.aux = tape.value(a).item().as_f64();
            Some(a)
        }
        _ => None,
    };
    let total = total_loss_var(tape, pred, prior, aux, weights)?;
    terms.total = tape.value(total).item().as_f64();
    Ok((total, terms))
}

/// Mean loss terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub terms: LossTerms,
}

/// Training state: model, optimizer and the sampling stream.
pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub step: u64,
    optimizer: Optimizer<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        Ok(Trainer {
            optimizer: cfg.optimizer(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0ff5),
            model,
            cfg,
            weights,
            step: 0,
        })
    }

    /// One optimizer step on a batch.
    pub fn step(&mut self, batch: &[&TrainingExample], sup: &[&Supervision]) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let (loss, terms) = batch_objective(&self.model, &mut tape, batch, sup, &self.weights, &mut self.rng)?;
        self.model.store.zero_grad();
        tape.backward_into(loss, &mut self.model.store)?;
        if self.model.store.iter().any(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
            return Err(CoreError::NonFinite { term: "gradient".into() });
        }
        self.optimizer.step(&mut self.model.store);
        self.step += 1;
        Ok(terms)
    }

    /// One shuffled pass over the data.
    pub fn epoch(&mut self, epoch: usize, data: &[TrainingExample], sup: &[Supervision]) -> Result<EpochLog> {
        if data.len() != sup.len() || data.is_empty() {
            return input_err("training data and supervision must be non-empty and aligned");
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossTerms::default();
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let b: Vec<&TrainingExample> = chunk.iter().map(|&i| &data[i]).collect();
            let s: Vec<&Supervision> = chunk.iter().map(|&i| &sup[i]).collect();
            let t = self.step(&b, &s)?;
            sum.add_scaled(&t, 1.0);
            steps += 1;
        }
        let mut terms = LossTerms::default();
        terms.add_scaled(&sum, 1.0 / steps as f64);
        Ok(EpochLog { epoch, steps, terms })
    }

    /// Runs `cfg.epochs` epochs, reporting each as it completes.
    pub fn fit(
        &mut self,
        data: &[TrainingExample],
        sup: &[Supervision],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut log = Vec::with_capacity(self.cfg.epochs);
        for e in 1..=self.cfg.epochs {
            let l = self.epoch(e, data, sup)?;
            on_epoch(&l);
            log.push(l);
        }
        Ok(log)
    }
}
