//! Training loop, evaluation and the model-embedding counting table.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{ModelConfig, Preset};
use crate::counter::{CountPredictor, CountingTable, MethodAccuracy};
use crate::data::{Example, Manifest, Split};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{counting_accuracy, score_utterance, EvalRecord, EvalReport};
use crate::model::{CountMode, Separator};
use crate::numcore::{AdamConfig, AdamState};

/// Which source counts a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Two,
    Three,
    TwoAndThree,
}

impl Regime {
    pub fn counts(self) -> &'static [usize] {
        match self {
            Regime::Two => &[2],
            Regime::Three => &[3],
            Regime::TwoAndThree => &[2, 3],
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two" => Ok(Regime::Two),
            "three" => Ok(Regime::Three),
            "two-and-three" => Ok(Regime::TwoAndThree),
            other => Err(Error::Config(format!("unknown regime `{other}` (two|three|two-and-three)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub regime: Regime,
    pub preset: Preset,
    pub seed: u64,
    /// Save `epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            regime: Regime::TwoAndThree,
            preset: Preset::Paper,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            learning_rate: 5e-3,
            regime: Regime::Two,
            preset: Preset::Toy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One mixture with its scaled references, held in memory.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
}

impl TrainItem {
    pub fn count(&self) -> usize {
        self.sources.len()
    }
}

impl From<Example> for TrainItem {
    fn from(ex: Example) -> Self {
        Self {
            id: ex.record.id,
            mixture: ex.mixture,
            sources: ex.sources,
        }
    }
}

/// Loads every record of `split`.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<TrainItem>> {
    manifest
        .split(split)
        .into_iter()
        .map(|rec| {
            let (mixture, sources) = manifest.load(rec)?;
            Ok(TrainItem {
                id: rec.id.clone(),
                mixture,
                sources,
            })
        })
        .collect()
}

/// Items whose source count belongs to `regime`.
pub fn select_regime(items: Vec<TrainItem>, regime: Regime) -> Vec<TrainItem> {
    items.into_iter().filter(|it| regime.counts().contains(&it.count())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,valid_loss\n");
    for e in curve {
        let v = e.valid_loss.map(|v| format!("{v}")).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, v));
    }
    s
}

/// Visiting order for one epoch. Each count group is shuffled separately,
/// then groups are interleaved round-robin so mixed regimes alternate C.
fn epoch_order(items: &[TrainItem], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5348_0000_0000 | epoch as u64);
    let mut counts: Vec<usize> = items.iter().map(TrainItem::count).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut groups: Vec<Vec<usize>> = counts
        .iter()
        .map(|&c| (0..items.len()).filter(|&i| items[i].count() == c).collect())
        .collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|k| groups.iter().filter_map(move |g| g.get(k).copied()))
        .collect()
}

/// Crops a batch to its shortest mixture.
fn crop(items: &[&TrainItem]) -> Vec<(Waveform, Vec<Waveform>)> {
    let len = items.iter().map(|it| it.mixture.len()).min().unwrap_or(0);
    items
        .iter()
        .map(|it| (it.mixture.fit_to(len), it.sources.iter().map(|s| s.fit_to(len)).collect()))
        .collect()
}

/// Mean PIT loss over `items` (forward only).
pub fn mean_loss(model: &Separator, items: &[TrainItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("loss items"));
    }
    let mut total = 0.0;
    for it in items {
        total += model.loss(&it.mixture, &it.sources)?.loss;
    }
    Ok(total / items.len() as f64)
}

/// Model, optimizer and epoch counter; resumable from a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainSession {
    pub model: Separator,
    pub adam: AdamState,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation loss (training loss when there is no validation set).
    pub best: Checkpoint,
    pub curve: Vec<EpochStats>,
}

impl TrainSession {
    pub fn new(cfg: &TrainConfig, model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(1);
        let model = Separator::new(model_cfg, rand::Rng::random::<u64>(&mut init))?;
        let adam = AdamState::new(cfg.adam(), &model.params);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            seed: cfg.seed,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: Separator::from_params(ckpt.header.model.clone(), ckpt.params.clone())?,
            adam: ckpt.adam_state(),
            epoch: ckpt.header.epoch,
            seed: ckpt.header.seed,
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, valid_loss: Option<f64>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                model: self.model.cfg.clone(),
                train: serde_json::to_value(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
                epoch: self.epoch,
                seed: self.seed,
                adam: self.adam.config,
                adam_step: self.adam.step,
                valid_loss,
            },
            params: self.model.params.clone(),
            first_moment: self.adam.first_moment.clone(),
            second_moment: self.adam.second_moment.clone(),
        })
    }

    /// One clipped Adam step on a batch; returns the mean batch loss.
    pub fn step(&mut self, cfg: &TrainConfig, batch: &[&TrainItem]) -> Result<f64> {
        let cropped = crop(batch);
        let weight = 1.0 / cropped.len() as f64;
        let mut grads = self.model.params.zeros_like();
        let mut loss = 0.0;
        for (mix, srcs) in &cropped {
            loss += self.model.accumulate_grad(mix, srcs, weight, &mut grads)?.loss * weight;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                batch: 0,
                loss,
            });
        }
        let norm = grads.global_norm();
        if norm > cfg.clip_norm {
            grads.scale_all(cfg.clip_norm / norm);
        }
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(loss)
    }

    /// Runs `cfg.epochs - self.epoch` more epochs. With `out`, writes the
    /// loss curve, `best.ckpt`, `last.ckpt` and periodic checkpoints there.
    pub fn run(
        &mut self,
        cfg: &TrainConfig,
        train: &[TrainItem],
        valid: &[TrainItem],
        out: Option<&Path>,
        progress: &mut dyn FnMut(&EpochStats),
    ) -> Result<TrainOutcome> {
        cfg.validate()?;
        let train = filtered(train, cfg.regime);
        let valid = filtered(valid, cfg.regime);
        if train.is_empty() {
            return Err(Error::Empty("training items for the selected regime"));
        }
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut curve = Vec::new();
        let mut best: Option<(f64, Checkpoint)> = None;
        while self.epoch < cfg.epochs {
            let order = epoch_order(&train, self.seed, self.epoch);
            let mut total = 0.0;
            let mut batches = 0;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &train[i]).collect();
                let loss = self.step(cfg, &batch).map_err(|e| match e {
                    Error::Diverged { epoch, loss, .. } => Error::Diverged { epoch, batch: b, loss },
                    other => other,
                })?;
                total += loss;
                batches += 1;
            }
            self.epoch += 1;
            let valid_loss = if valid.is_empty() {
                None
            } else {
                Some(mean_loss(&self.model, &valid)?)
            };
            let stats = EpochStats {
                epoch: self.epoch,
                train_loss: total / batches as f64,
                valid_loss,
            };
            progress(&stats);
            let key = valid_loss.unwrap_or(stats.train_loss);
            if best.as_ref().is_none_or(|(b, _)| key < *b) {
                best = Some((key, self.checkpoint(cfg, valid_loss)?));
            }
            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && self.epoch % cfg.checkpoint_every == 0 {
                    self.checkpoint(cfg, valid_loss)?
                        .save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
                }
            }
            curve.push(stats);
        }
        let last = self.checkpoint(cfg, curve.last().and_then(|s| s.valid_loss))?;
        let best = best.map(|b| b.1).unwrap_or_else(|| last.clone());
        if let Some(dir) = out {
            last.save(&dir.join("last.ckpt"))?;
            best.save(&dir.join("best.ckpt"))?;
            let p = dir.join("loss_curve.csv");
            fs::write(&p, curve_csv(&curve)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(TrainOutcome { last, best, curve })
    }
}

fn filtered(items: &[TrainItem], regime: Regime) -> Vec<TrainItem> {
    select_regime(items.to_vec(), regime)
}

/// Convenience wrapper: fresh session, full run.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
    train_items: &[TrainItem],
    valid_items: &[TrainItem],
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    TrainSession::new(cfg, model_cfg)?.run(cfg, train_items, valid_items, out, progress)
}

/// Separates and scores every item. In oracle mode each item's own count
/// is used. A zero count estimate yields a record with no scored pairs.
pub fn evaluate(model: &Separator, items: &[TrainItem], mode: CountMode) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut records = Vec::with_capacity(items.len());
    for it in items {
        let m = match mode {
            CountMode::Oracle { .. } => CountMode::Oracle { count: it.count() },
            other => other,
        };
        let rec = match model.separate(&it.mixture, m) {
            Ok(sep) => score_utterance(&it.id, &it.sources, &sep.estimates, &it.mixture)?,
            Err(Error::NoSource) => EvalRecord {
                id: it.id.clone(),
                true_count: it.count(),
                estimated_count: 0,
                pairs: Vec::new(),
                si_snr: Vec::new(),
                si_snri: Vec::new(),
                sdr: Vec::new(),
                sdri: Vec::new(),
            },
            Err(e) => return Err(e),
        };
        records.push(rec);
    }
    Ok(EvalReport { records })
}

/// Counting accuracy of each predictor on the model's own embeddings.
pub fn model_counting_table(
    model: &Separator,
    items: &[TrainItem],
    predictors: &[&dyn CountPredictor],
) -> Result<CountingTable> {
    if items.is_empty() {
        return Err(Error::Empty("counting split"));
    }
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); predictors.len()];
    for it in items {
        let v = model.embeddings(&it.mixture)?.v;
        for (p, out) in predictors.iter().zip(pairs.iter_mut()) {
            out.push((it.count(), p.predict(&v, it.count())?));
        }
    }
    let mut counts: Vec<usize> = items.iter().map(TrainItem::count).collect();
    counts.sort_unstable();
    counts.dedup();
    let rows = predictors
        .iter()
        .zip(pairs)
        .map(|(p, pr)| {
            Ok(MethodAccuracy {
                method: p.name(),
                accuracy: counting_accuracy(&pr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountingTable { counts, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::{GdePredictor, RankPredictor};
    use crate::data::{generate_split, DatasetConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            conv_channels: 8,
            se_reduction: 4,
            bottleneck: 8,
            blocks_per_repeat: 2,
            repeats: 1,
            depthwise_kernel: 3,
            embed_dim: 6,
            num_centers: 4,
            kmeans_iters: 1,
        }
    }

    fn items(counts: Vec<usize>, n: usize) -> Vec<TrainItem> {
        let cfg = DatasetConfig {
            train: n,
            counts,
            ..DatasetConfig::toy()
        };
        generate_split(&cfg, Split::Train).unwrap().into_iter().map(TrainItem::from).collect()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            regime: Regime::Two,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = quick_cfg(0);
        let data = items(vec![2], 2);
        let fresh = TrainSession::new(&cfg, tiny_model()).unwrap();
        let out = train(&cfg, tiny_model(), &data, &[], None, &mut |_| {}).unwrap();
        assert_eq!(out.last.params, fresh.model.params);
        assert_eq!(out.best.params, fresh.model.params);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = quick_cfg(2);
        let data = items(vec![2], 3);
        let a = train(&cfg, tiny_model(), &data, &data[..1], None, &mut |_| {}).unwrap();
        let b = train(&cfg, tiny_model(), &data, &data[..1], None, &mut |_| {}).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let data = items(vec![2], 3);
        let full = train(&quick_cfg(3), tiny_model(), &data, &[], None, &mut |_| {}).unwrap();
        let first = train(&quick_cfg(1), tiny_model(), &data, &[], None, &mut |_| {}).unwrap();
        let ckpt = Checkpoint::from_bytes(&first.last.to_bytes().unwrap()).unwrap();
        let mut s = TrainSession::from_checkpoint(&ckpt).unwrap();
        let rest = s.run(&quick_cfg(3), &data, &[], None, &mut |_| {}).unwrap();
        assert_eq!(rest.last.params, full.last.params);
        assert_eq!(rest.curve, full.curve[1..]);
    }

    #[test]
    fn one_step_changes_parameters() {
        let cfg = quick_cfg(1);
        let data = items(vec![2], 1);
        let mut s = TrainSession::new(&cfg, tiny_model()).unwrap();
        let before = s.model.params.clone();
        s.step(&cfg, &[&data[0]]).unwrap();
        let changed = before
            .iter()
            .any(|(n, t)| t.data() != s.model.params.get(n).unwrap().data());
        assert!(changed);
        assert_eq!(s.adam.step, 1);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = quick_cfg(1);
        let data = items(vec![2], 2);
        let out = train(&cfg, tiny_model(), &data, &[], None, &mut |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        out.last.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        let m1 = Separator::from_params(out.last.header.model.clone(), out.last.params.clone()).unwrap();
        let m2 = Separator::from_params(back.header.model.clone(), back.params.clone()).unwrap();
        let a = m1.forward(&data[0].mixture, 2).unwrap().0.estimates;
        let b = m2.forward(&data[0].mixture, 2).unwrap().0.estimates;
        for (x, y) in a.iter().zip(&b) {
            let xb: Vec<u64> = x.samples().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.samples().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn unified_order_interleaves_counts() {
        let mut data = items(vec![2], 3);
        data.extend(items(vec![3], 3));
        let order = epoch_order(&data, 5, 0);
        let counts: Vec<usize> = order.iter().map(|&i| data[i].count()).collect();
        assert_eq!(counts, vec![2, 3, 2, 3, 2, 3]);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert_ne!(epoch_order(&data, 5, 1), order);
    }

    #[test]
    fn empty_selections_are_errors() {
        let data = items(vec![3], 1);
        let err = train(&quick_cfg(1), tiny_model(), &data, &[], None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
        let m = Separator::new(tiny_model(), 0).unwrap();
        assert!(matches!(evaluate(&m, &[], CountMode::gde()), Err(Error::Empty(_))));
    }

    #[test]
    fn writes_artifacts() {
        let mut cfg = quick_cfg(2);
        cfg.checkpoint_every = 1;
        let data = items(vec![2], 2);
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        train(&cfg, tiny_model(), &data, &data, Some(dir.path()), &mut |s| lines.push(s.clone())).unwrap();
        for f in ["last.ckpt", "best.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt", "loss_curve.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|s| s.valid_loss.is_some()));
    }

    #[test]
    fn evaluate_and_count_table() {
        let data = items(vec![2, 3], 2);
        let m = Separator::new(tiny_model(), 3).unwrap();
        let rep = evaluate(&m, &data, CountMode::Oracle { count: 0 }).unwrap();
        assert_eq!(rep.records.len(), 4);
        assert!(rep.records.iter().all(|r| r.estimated_count == r.true_count));
        let g = GdePredictor { scale: 0.25 };
        let r = RankPredictor { threshold: 0.1 };
        let t = model_counting_table(&m, &data, &[&g, &r]).unwrap();
        assert_eq!(t.counts, vec![2, 3]);
        assert_eq!(t.rows.len(), 2);
    }
}
