//! Bradley–Terry reward model fitted to preference labels.
//!
//! With segment return sums `R0 = Σ r̂(σ⁰)` and `R1 = Σ r̂(σ¹)`,
//!
//! ```text
//! P[σ¹ ≻ σ⁰] = exp(R1) / (exp(R0) + exp(R1)) = sigmoid(R1 - R0)
//! L = -mean( y0 * ln P[σ⁰ ≻ σ¹] + y1 * ln P[σ¹ ≻ σ⁰] )
//! ```
//!
//! The loss is evaluated through softplus so it stays finite for any return
//! gap, and `dL/dR1 = P[σ¹ ≻ σ⁰] - y1` flows back into every per-step reward.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticSource, CriticVerdict, Label, PreferenceQuery};
use crate::env::{Observation, ACTION_DIM, OBS_DIM};
use crate::io::{self, RecordFileError};
use crate::nn::{Activation, AdamConfig, AdamState, Gradients, Mlp, NnError};
use crate::trajectory::Segment;

pub const RM_INPUT_DIM: usize = OBS_DIM + ACTION_DIM;
pub const PREFERENCE_SCHEMA: &str = "prefcritic.preferences";
pub const PREFERENCE_VERSION: u32 = 1;
pub const ENSEMBLE_SCHEMA: &str = "prefcritic.rm-ensemble";
pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("no trainable items: {0}")]
    NoTrainableItems(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("item `{0}`: preference target must be non-negative and sum to 1")]
    InvalidTarget(String),
    #[error("item `{0}`: segments differ in length")]
    MismatchedSegments(String),
    #[error("ensemble has no members")]
    NoMembers,
    #[error("non-finite loss for member {member} at epoch {epoch}")]
    NonFiniteLoss { member: usize, epoch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    File(#[from] RecordFileError),
    #[error("ensemble checkpoint: {0}")]
    Checkpoint(String),
}

/// Reward-model input row: observation followed by action.
pub fn rm_input(obs: &Observation, action: &[f64; 2]) -> [f64; RM_INPUT_DIM] {
    let mut x = [0.0; RM_INPUT_DIM];
    x[..OBS_DIM].copy_from_slice(&obs.0);
    x[OBS_DIM..].copy_from_slice(action);
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    pub net: Mlp,
    pub ensemble_index: usize,
}

impl RewardNet {
    pub fn new(hidden: &[usize], seed: u64, ensemble_index: usize) -> Result<Self, RewardError> {
        let mut sizes = vec![RM_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Relu, Activation::Tanh, seed)?,
            ensemble_index,
        })
    }

    /// Wraps an existing network; it must map 11 inputs to 1 output.
    pub fn from_mlp(net: Mlp, ensemble_index: usize) -> Result<Self, RewardError> {
        if net.input_dim() != RM_INPUT_DIM || net.output_dim() != 1 {
            return Err(NnError::Shape {
                expected: format!("{RM_INPUT_DIM} -> 1"),
                got: format!("{} -> {}", net.input_dim(), net.output_dim()),
            }
            .into());
        }
        Ok(Self { net, ensemble_index })
    }

    pub fn predict(&self, input: &[f64]) -> Result<f64, RewardError> {
        Ok(self.net.forward(input)?[0])
    }

    /// One reward per row of `inputs` (shape `(n, 11)`).
    pub fn predict_batch(&self, inputs: &Array2<f64>) -> Result<Vec<f64>, RewardError> {
        Ok(self.net.forward_batch(inputs.view())?.column(0).to_vec())
    }
}

pub fn predict_reward(net: &RewardNet, obs: &Observation, action: &[f64; 2]) -> Result<f64, RewardError> {
    net.predict(&rm_input(obs, action))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `P[σ¹ ≻ σ⁰]` from the two return sums, stabilized by subtracting the max.
pub fn preference_from_returns(r0: f64, r1: f64) -> f64 {
    let m = r0.max(r1);
    let e0 = (r0 - m).exp();
    let e1 = (r1 - m).exp();
    e1 / (e0 + e1)
}

/// Loss of one item and its derivatives `(loss, dL/dR0, dL/dR1)`.
pub fn bt_loss_from_returns(r0: f64, r1: f64, y: [f64; 2]) -> (f64, f64, f64) {
    let d = r1 - r0;
    // -ln P0 = softplus(d), -ln P1 = softplus(-d)
    let loss = y[0] * softplus(d) + y[1] * softplus(-d);
    let p1 = preference_from_returns(r0, r1);
    let p0 = preference_from_returns(r1, r0);
    (loss, p0 - y[0], p1 - y[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceItem {
    pub query_id: String,
    pub seg0: Segment,
    pub seg1: Segment,
    /// `(y0, y1)`: probability mass on σ⁰ and on σ¹ being preferred.
    pub y: [f64; 2],
    pub source: CriticSource,
}

pub fn label_target(label: Label) -> [f64; 2] {
    match label {
        Label::First => [1.0, 0.0],
        Label::Second => [0.0, 1.0],
        Label::Tie => [0.5, 0.5],
    }
}

impl PreferenceItem {
    pub fn from_verdict(q: &PreferenceQuery, v: &CriticVerdict) -> Self {
        Self {
            query_id: q.id.clone(),
            seg0: q.seg_a.clone(),
            seg1: q.seg_b.clone(),
            y: label_target(v.label),
            source: v.source,
        }
    }

    pub fn is_tie(&self) -> bool {
        self.y[0] == self.y[1]
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let [a, b] = self.y;
        if !(a >= 0.0 && b >= 0.0 && ((a + b) - 1.0).abs() < 1e-9) {
            return Err(RewardError::InvalidTarget(self.query_id.clone()));
        }
        if self.seg0.len() != self.seg1.len() || self.seg0.is_empty() {
            return Err(RewardError::MismatchedSegments(self.query_id.clone()));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            query_id: self.query_id.clone(),
            seg0: self.seg1.clone(),
            seg1: self.seg0.clone(),
            y: [self.y[1], self.y[0]],
            source: self.source,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub items: Vec<PreferenceItem>,
}

impl PreferenceDataset {
    pub fn save(&self, path: &Path) -> Result<(), RewardError> {
        io::write_records(path, PREFERENCE_SCHEMA, PREFERENCE_VERSION, &self.items)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        Ok(Self {
            items: io::read_records(path, PREFERENCE_SCHEMA, PREFERENCE_VERSION)?,
        })
    }

    pub fn non_tie_count(&self) -> usize {
        self.items.iter().filter(|i| !i.is_tie()).count()
    }
}

fn segment_rows(seg: &Segment, rows: &mut Vec<f64>) {
    for t in &seg.transitions {
        rows.extend_from_slice(&rm_input(&t.obs, &t.action));
    }
}

/// Stacks `σ⁰` then `σ¹` of every item into one input matrix.
fn batch_matrix(items: &[&PreferenceItem]) -> Array2<f64> {
    let mut rows = Vec::new();
    for it in items {
        segment_rows(&it.seg0, &mut rows);
        segment_rows(&it.seg1, &mut rows);
    }
    let n = rows.len() / RM_INPUT_DIM;
    Array2::from_shape_vec((n, RM_INPUT_DIM), rows).expect("rows are whole")
}

/// Per-item `(R0, R1)` from a column of per-step rewards laid out like
/// [`batch_matrix`].
fn returns_from_column(items: &[&PreferenceItem], rewards: &[f64]) -> Vec<(f64, f64)> {
    let mut off = 0;
    items
        .iter()
        .map(|it| {
            let (h0, h1) = (it.seg0.len(), it.seg1.len());
            let r0 = rewards[off..off + h0].iter().sum();
            let r1 = rewards[off + h0..off + h0 + h1].iter().sum();
            off += h0 + h1;
            (r0, r1)
        })
        .collect()
}

/// Mean BT loss over `batch` and its parameter gradients.
pub fn bt_loss(net: &Mlp, batch: &[&PreferenceItem]) -> Result<(f64, Gradients), RewardError> {
    if batch.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    for it in batch {
        it.validate()?;
    }
    let x = batch_matrix(batch);
    let cache = net.forward_cached(x.view())?;
    let rewards = cache.output().column(0).to_vec();
    let sums = returns_from_column(batch, &rewards);
    let scale = 1.0 / batch.len() as f64;
    let mut grad = Array2::<f64>::zeros((x.nrows(), 1));
    let mut total = 0.0;
    let mut off = 0;
    for (it, &(r0, r1)) in batch.iter().zip(&sums) {
        let (loss, d0, d1) = bt_loss_from_returns(r0, r1, it.y);
        total += loss;
        let (h0, h1) = (it.seg0.len(), it.seg1.len());
        grad.slice_mut(ndarray::s![off..off + h0, 0]).fill(d0 * scale);
        grad.slice_mut(ndarray::s![off + h0..off + h0 + h1, 0]).fill(d1 * scale);
        off += h0 + h1;
    }
    let (grads, _) = net.backward_cached(&cache, grad.view())?;
    Ok((total * scale, grads))
}

/// Mean of member outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEnsemble {
    pub members: Vec<RewardNet>,
}

impl RewardEnsemble {
    pub fn new(members: Vec<RewardNet>) -> Result<Self, RewardError> {
        if members.is_empty() {
            return Err(RewardError::NoMembers);
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn reward(&self, obs: &Observation, action: &[f64; 2]) -> f64 {
        ensemble_reward(&self.members, obs, action).expect("ensemble is non-empty and shapes are fixed")
    }

    /// Mean reward per row of `inputs`.
    pub fn reward_batch(&self, inputs: &Array2<f64>) -> Result<Vec<f64>, RewardError> {
        let mut acc = vec![0.0; inputs.nrows()];
        for m in &self.members {
            for (a, r) in acc.iter_mut().zip(m.predict_batch(inputs)?) {
                *a += r;
            }
        }
        let k = self.members.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    }

    /// Per-step rewards of a whole segment (or trajectory slice).
    pub fn segment_rewards(&self, seg: &Segment) -> Vec<f64> {
        let mut rows = Vec::with_capacity(seg.len() * RM_INPUT_DIM);
        segment_rows(seg, &mut rows);
        let x = Array2::from_shape_vec((seg.len(), RM_INPUT_DIM), rows).expect("rows are whole");
        self.reward_batch(&x).expect("shapes are fixed")
    }

    pub fn segment_return(&self, seg: &Segment) -> f64 {
        self.segment_rewards(seg).iter().sum()
    }

    /// `P[σ¹ ≻ σ⁰]` under the mean ensemble reward.
    pub fn preference_probability(&self, seg0: &Segment, seg1: &Segment) -> f64 {
        preference_from_returns(self.segment_return(seg0), self.segment_return(seg1))
    }

    pub fn save(&self, dir: &Path) -> Result<(), RewardError> {
        std::fs::create_dir_all(dir).map_err(|e| RewardError::Checkpoint(e.to_string()))?;
        let mut entries = Vec::new();
        for m in &self.members {
            let file = format!("member-{}.ckpt", m.ensemble_index);
            m.net.save(&dir.join(&file))?;
            entries.push(MemberEntry {
                index: m.ensemble_index,
                file,
            });
        }
        let manifest = EnsembleManifest {
            schema: ENSEMBLE_SCHEMA.into(),
            version: ENSEMBLE_VERSION,
            input_dim: RM_INPUT_DIM,
            members: entries,
        };
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        io::write_atomic(&dir.join("manifest.json"), &bytes).map_err(|e| RewardError::Checkpoint(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self, RewardError> {
        let path: PathBuf = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| RewardError::Checkpoint(format!("{}: {e}", path.display())))?;
        let manifest: EnsembleManifest =
            serde_json::from_str(&text).map_err(|e| RewardError::Checkpoint(format!("{}: {e}", path.display())))?;
        if manifest.schema != ENSEMBLE_SCHEMA || manifest.version > ENSEMBLE_VERSION {
            return Err(RewardError::Checkpoint(format!(
                "unsupported manifest {} v{}",
                manifest.schema, manifest.version
            )));
        }
        let members = manifest
            .members
            .iter()
            .map(|e| RewardNet::from_mlp(Mlp::load(&dir.join(&e.file))?, e.index))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(members)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MemberEntry {
    index: usize,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnsembleManifest {
    schema: String,
    version: u32,
    input_dim: usize,
    members: Vec<MemberEntry>,
}

pub fn ensemble_reward(members: &[RewardNet], obs: &Observation, action: &[f64; 2]) -> Result<f64, RewardError> {
    if members.is_empty() {
        return Err(RewardError::NoMembers);
    }
    let x = rm_input(obs, action);
    let mut sum = 0.0;
    for m in members {
        sum += m.predict(&x)?;
    }
    Ok(sum / members.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub ensemble_size: usize,
    pub include_ties: bool,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Fraction of items held out for accuracy reporting.
    pub holdout_fraction: f64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 50,
            lr: 3e-4,
            ensemble_size: 3,
            include_ties: false,
            seed: 0,
            hidden: vec![256, 256],
            holdout_fraction: 0.1,
        }
    }
}

impl RmTrainConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: &str| Err(RewardError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub member: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Held-out accuracy on non-tie items; `None` when none are held out.
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub train_items: usize,
    pub holdout_items: usize,
    /// Ensemble accuracy on non-tie held-out items after training.
    pub holdout_accuracy: Option<f64>,
}

/// Fraction of non-tie items whose preferred side gets the larger return.
pub fn preference_accuracy(
    items: &[&PreferenceItem],
    mut returns: impl FnMut(&Segment) -> f64,
) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for it in items.iter().filter(|i| !i.is_tie()) {
        total += 1;
        let first_better = returns(&it.seg0) > returns(&it.seg1);
        if first_better == (it.y[0] > it.y[1]) {
            correct += 1;
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

fn batched_accuracy(net: &Mlp, items: &[&PreferenceItem]) -> Result<Option<f64>, RewardError> {
    let items: Vec<&PreferenceItem> = items.iter().copied().filter(|i| !i.is_tie()).collect();
    if items.is_empty() {
        return Ok(None);
    }
    let out = net.forward_batch(batch_matrix(&items).view())?;
    let sums = returns_from_column(&items, out.column(0).as_slice().expect("column of n x 1 is contiguous"));
    let correct = items
        .iter()
        .zip(&sums)
        .filter(|(it, (r0, r1))| (r0 > r1) == (it.y[0] > it.y[1]))
        .count();
    Ok(Some(correct as f64 / items.len() as f64))
}

fn member_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(0x5851_F42D_4C95_7F2D_u64.wrapping_mul(index as u64 + 1))
}

/// Trains `ensemble_size` members, each from its own initialization and on
/// its own shuffle order. The same held-out split is used for every member.
pub fn train_reward_model(
    dataset: &PreferenceDataset,
    cfg: &RmTrainConfig,
) -> Result<(RewardEnsemble, TrainingLog), RewardError> {
    cfg.validate()?;
    for it in &dataset.items {
        it.validate()?;
    }
    let mut order: Vec<usize> = (0..dataset.items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_hold = (dataset.items.len() as f64 * cfg.holdout_fraction).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout: Vec<&PreferenceItem> = hold_idx.iter().map(|&i| &dataset.items[i]).collect();
    let train: Vec<&PreferenceItem> = train_idx
        .iter()
        .map(|&i| &dataset.items[i])
        .filter(|it| cfg.include_ties || !it.is_tie())
        .collect();
    if train.is_empty() {
        let why = if dataset.items.is_empty() {
            "dataset is empty"
        } else if !cfg.include_ties && dataset.non_tie_count() == 0 {
            "every item is a tie and ties are excluded"
        } else {
            "all usable items fell into the held-out split"
        };
        return Err(RewardError::NoTrainableItems(why.into()));
    }

    let mut log = TrainingLog {
        train_items: train.len(),
        holdout_items: holdout.len(),
        ..Default::default()
    };
    let mut members = Vec::with_capacity(cfg.ensemble_size);
    for m in 0..cfg.ensemble_size {
        let seed = member_seed(cfg.seed, m);
        let mut member = RewardNet::new(&cfg.hidden, seed, m)?;
        let mut adam = AdamState::for_net(&member.net, AdamConfig::with_lr(cfg.lr));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5);
        let mut stream = train.clone();
        for epoch in 0..cfg.epochs {
            stream.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in stream.chunks(cfg.batch_size) {
                let (loss, grads) = bt_loss(&member.net, batch)?;
                if !loss.is_finite() {
                    return Err(RewardError::NonFiniteLoss { member: m, epoch });
                }
                member.net.apply_adam(&grads, &mut adam)?;
                loss_sum += loss * batch.len() as f64;
            }
            let entry = EpochLog {
                member: m,
                epoch,
                loss: loss_sum / stream.len() as f64,
                holdout_accuracy: batched_accuracy(&member.net, &holdout)?,
            };
            tracing::debug!(member = m, epoch, loss = entry.loss, acc = ?entry.holdout_accuracy, "rm epoch");
            log.epochs.push(entry);
        }
        members.push(member);
    }
    let ensemble = RewardEnsemble::new(members)?;
    log.holdout_accuracy = preference_accuracy(&holdout, |s| ensemble.segment_return(s));
    Ok((ensemble, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{TaskKind, TaskSpec};
    use crate::nn::Dense;
    use crate::trajectory::record_episode;
    use ndarray::{Array1, Array2};

    fn segs() -> (Segment, Segment) {
        let spec = TaskSpec::new(TaskKind::Reach);
        let mut right = |_: &Observation| [0.6, -0.2];
        let mut left = |_: &Observation| [-0.4, 0.3];
        let a = record_episode(spec, 1, &mut right, "r");
        let b = record_episode(spec, 2, &mut left, "l");
        (a.segment(0, 3).unwrap(), b.segment(5, 3).unwrap())
    }

    fn constant_net(value: f64, index: usize) -> RewardNet {
        let net = Mlp::from_layers(
            vec![Dense {
                weights: Array2::zeros((1, RM_INPUT_DIM)),
                bias: Array1::from_elem(1, value.atanh()),
            }],
            Activation::Relu,
            Activation::Tanh,
        )
        .unwrap();
        RewardNet::from_mlp(net, index).unwrap()
    }

    #[test]
    fn zero_net_predicts_zero() {
        let net = RewardNet::from_mlp(Mlp::zeros(&[11, 4, 1], Activation::Relu, Activation::Tanh).unwrap(), 0).unwrap();
        let (s, _) = segs();
        for t in &s.transitions {
            assert_eq!(predict_reward(&net, &t.obs, &t.action).unwrap(), 0.0);
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = RewardNet::new(&[4], 0, 0).unwrap();
        assert!(net.predict(&[0.0; 10]).is_err());
        assert!(RewardNet::from_mlp(Mlp::zeros(&[9, 1], Activation::Relu, Activation::Tanh).unwrap(), 0).is_err());
    }

    #[test]
    fn preference_closed_forms() {
        assert!((preference_from_returns(3.0, 3.0) - 0.5).abs() < 1e-12);
        let logistic = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((preference_from_returns(0.0, 1.0) - logistic).abs() < 1e-6);
        assert!((preference_from_returns(10.0, 11.0) - logistic).abs() < 1e-9);
        assert!((preference_from_returns(0.0, 1e6) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_closed_forms() {
        let (l, _, _) = bt_loss_from_returns(0.0, 0.0, [1.0, 0.0]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _, _) = bt_loss_from_returns(0.0, 1.0, [0.0, 1.0]);
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((l + p.ln()).abs() < 1e-4);
        assert!((l - 0.31326).abs() < 1e-4);
        let (l, _, _) = bt_loss_from_returns(0.0, 1e4, [1.0, 0.0]);
        assert!((l - 1e4).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_errors() {
        let net = RewardNet::new(&[4], 0, 0).unwrap();
        assert!(matches!(bt_loss(&net.net, &[]), Err(RewardError::EmptyBatch)));
    }

    #[test]
    fn ensemble_mean_of_constructed_members() {
        let members = vec![constant_net(0.5, 0), constant_net(-0.5, 1), constant_net(0.0, 2)];
        let (s, _) = segs();
        let t = &s.transitions[0];
        assert!(ensemble_reward(&members, &t.obs, &t.action).unwrap().abs() < 1e-12);
        let one = &members[..1];
        assert!((ensemble_reward(one, &t.obs, &t.action).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(ensemble_reward(&[], &t.obs, &t.action), Err(RewardError::NoMembers)));
    }

    #[test]
    fn all_ties_without_include_is_an_error() {
        let (a, b) = segs();
        let item = PreferenceItem {
            query_id: "q".into(),
            seg0: a,
            seg1: b,
            y: [0.5, 0.5],
            source: CriticSource::Scripted,
        };
        let ds = PreferenceDataset { items: vec![item; 4] };
        let cfg = RmTrainConfig {
            hidden: vec![4],
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train_reward_model(&ds, &cfg), Err(RewardError::NoTrainableItems(_))));
        let cfg = RmTrainConfig { include_ties: true, ..cfg };
        assert!(train_reward_model(&ds, &cfg).is_ok());
    }

    #[test]
    fn ensemble_checkpoint_round_trip() {
        let members = (0..3).map(|i| RewardNet::new(&[8, 8], i as u64, i).unwrap()).collect();
        let ens = RewardEnsemble::new(members).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path()).unwrap();
        assert_eq!(RewardEnsemble::load(dir.path()).unwrap(), ens);
    }

    #[test]
    fn preference_dataset_round_trip() {
        let (a, b) = segs();
        let ds = PreferenceDataset {
            items: vec![PreferenceItem {
                query_id: "q".into(),
                seg0: a,
                seg1: b,
                y: [0.0, 1.0],
                source: CriticSource::Remote,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prefs.jsonl");
        ds.save(&p).unwrap();
        assert_eq!(PreferenceDataset::load(&p).unwrap(), ds);
    }
}
