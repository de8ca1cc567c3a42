//! Teacher training and the two-step binary training schedule.
//!
//! Step 1 trains binary activations with real-valued weights; step 2
//! inherits those weights, binarizes them and trains again with a fresh
//! optimizer and no weight decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, NamedTensor, TensorData};
use super::data::{make_batch, shuffled, Dataset, DatasetKind, Normalization};
use super::optim::{linear_lr, Adam};
use crate::arch::{build_network_for, Network, NetworkSpec, Scale, Variant};
use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::loss::{cross_entropy, cross_entropy_backward, distributional_loss, distributional_loss_backward, LossKind};
use crate::tensor::FloatTensor;

pub const DEFAULT_LR: f64 = 5e-4;
pub const DEFAULT_WEIGHT_DECAY_STEP1: f64 = 1e-5;
pub const DEFAULT_WEIGHT_DECAY_STEP2: f64 = 0.0;
pub const METRICS_HEADER: &str = "step,lr,loss,eval_acc";

const EVAL_BATCH: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Optimizer steps in each training step.
    pub steps: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub weight_decay_step1: f64,
    pub weight_decay_step2: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// When false the first step is skipped and weights are binarized from
    /// initialization.
    pub two_step: bool,
    pub teacher: Option<PathBuf>,
    /// Use only the first N training examples.
    pub train_limit: Option<usize>,
    /// Evaluate on only the first N test examples.
    pub eval_limit: Option<usize>,
    /// Evaluate every N steps (0: only at the end of each step).
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::reactnet_a(),
            dataset: DatasetKind::Mnist,
            data_dir: None,
            steps: 1000,
            batch_size: 64,
            initial_lr: DEFAULT_LR,
            weight_decay_step1: DEFAULT_WEIGHT_DECAY_STEP1,
            weight_decay_step2: DEFAULT_WEIGHT_DECAY_STEP2,
            seed: 0,
            loss: LossKind::Distributional,
            two_step: true,
            teacher: None,
            train_limit: None,
            eval_limit: None,
            eval_every: 0,
            log_every: 10,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn parse_limit(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "all" || v.is_empty() {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

impl TrainConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = Variant::parse(v)?,
            "dataset" => self.dataset = DatasetKind::parse(v)?,
            "data_dir" | "dataset_path" => self.data_dir = Some(PathBuf::from(v)),
            "steps" => self.steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "initial_lr" | "lr" => self.initial_lr = parse_num(key, v)?,
            "weight_decay_step1" => self.weight_decay_step1 = parse_num(key, v)?,
            "weight_decay_step2" => self.weight_decay_step2 = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "loss" => self.loss = LossKind::parse(v)?,
            "two_step" => self.two_step = parse_num(key, v)?,
            "teacher" => self.teacher = Some(PathBuf::from(v)),
            "train_limit" => self.train_limit = parse_limit(key, v)?,
            "eval_limit" => self.eval_limit = parse_limit(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` text; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm)".into()));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if self.weight_decay_step1 < 0.0 || self.weight_decay_step2 < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |o: &Option<usize>| o.map_or("all".to_string(), |v| v.to_string());
        writeln!(s, "variant={}", self.variant.tag()).unwrap();
        writeln!(s, "dataset={}", self.dataset.name()).unwrap();
        if let Some(d) = &self.data_dir {
            writeln!(s, "data_dir={}", d.display()).unwrap();
        }
        writeln!(s, "steps={}", self.steps).unwrap();
        writeln!(s, "batch_size={}", self.batch_size).unwrap();
        writeln!(s, "initial_lr={:e}", self.initial_lr).unwrap();
        writeln!(s, "weight_decay_step1={:e}", self.weight_decay_step1).unwrap();
        writeln!(s, "weight_decay_step2={:e}", self.weight_decay_step2).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "loss={}", self.loss.name()).unwrap();
        writeln!(s, "two_step={}", self.two_step).unwrap();
        if let Some(t) = &self.teacher {
            writeln!(s, "teacher={}", t.display()).unwrap();
        }
        writeln!(s, "train_limit={}", opt(&self.train_limit)).unwrap();
        writeln!(s, "eval_limit={}", opt(&self.eval_limit)).unwrap();
        writeln!(s, "eval_every={}", self.eval_every).unwrap();
        writeln!(s, "log_every={}", self.log_every).unwrap();
        s
    }

    /// Desk-scale network for the configured dataset.
    pub fn network_spec(&self, data: &Dataset, variant: Variant) -> NetworkSpec {
        build_network_for(variant, Scale::Desk, data.shape, data.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let acc = r.eval_acc.map_or(String::new(), |a| format!("{a:.6}"));
        writeln!(s, "{},{:e},{:.9},{}", r.step, r.lr, r.loss, acc).unwrap();
    }
    s
}

/// Train and test splits with normalization fitted on the training split.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
    pub norm: Normalization,
}

impl TaskData {
    pub fn new(train: Dataset, test: Dataset) -> Result<Self> {
        if train.shape != test.shape || train.num_classes != test.num_classes {
            return Err(Error::Format("train and test splits disagree on shape".into()));
        }
        let norm = Normalization::fit(&train);
        Ok(Self { train, test, norm })
    }

    pub fn limited(&self, cfg: &TrainConfig) -> Self {
        let train = cfg.train_limit.map_or_else(|| self.train.clone(), |n| self.train.truncated(n));
        let test = cfg.eval_limit.map_or_else(|| self.test.clone(), |n| self.test.truncated(n));
        Self {
            train,
            test,
            norm: self.norm.clone(),
        }
    }
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(net: &Network, data: &Dataset, norm: &Normalization) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = make_batch(data, chunk, norm, None);
        let logits = net.forward_eval(&x)?;
        correct += predictions(&logits)?.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn predictions(logits: &FloatTensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: Vec<MetricRow>,
    pub final_accuracy: f64,
    /// Accuracy right after switching to 1-bit weights, before any
    /// second-step update.
    pub step2_initial_accuracy: Option<f64>,
    pub checkpoint: Checkpoint,
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a TaskData,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    global_step: usize,
    metrics: Vec<MetricRow>,
    /// Teacher probabilities per training index, filled on first use when
    /// batches are not augmented.
    teacher_cache: Vec<Option<Vec<f64>>>,
}

impl<'a> Run<'a> {
    fn next_batch(&mut self) -> Result<(FloatTensor, Vec<usize>, Vec<usize>)> {
        let bs = self.cfg.batch_size;
        let n = self.data.train.len();
        if n < bs {
            return Err(Error::Config(format!("training set of {n} is smaller than one batch of {bs}")));
        }
        if self.cursor + bs > self.order.len() {
            self.order = shuffled(n, &mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + bs].to_vec();
        self.cursor += bs;
        let (x, labels) = make_batch(&self.data.train, &idx, &self.data.norm, Some(&mut self.rng));
        Ok((x, labels, idx))
    }

    /// Teacher softmax for a batch. Eval mode treats images independently,
    /// so cached rows equal what a fresh batched pass would give.
    fn teacher_probs(&mut self, teacher: &Network, x: &FloatTensor, idx: &[usize]) -> Result<FloatTensor> {
        if self.data.train.is_augmented() {
            return softmax(&teacher.forward_eval(x)?);
        }
        if self.teacher_cache.len() != self.data.train.len() {
            self.teacher_cache = vec![None; self.data.train.len()];
        }
        let missing: Vec<usize> = idx.iter().copied().filter(|&i| self.teacher_cache[i].is_none()).collect();
        if !missing.is_empty() {
            let (mx, _) = make_batch(&self.data.train, &missing, &self.data.norm, None);
            let probs = softmax(&teacher.forward_eval(&mx)?)?;
            let k = probs.shape()[1];
            for (row, &i) in probs.data().chunks(k).zip(&missing) {
                self.teacher_cache[i] = Some(row.to_vec());
            }
        }
        let rows: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.teacher_cache[i].as_deref().expect("filled above").iter().copied())
            .collect();
        FloatTensor::new(vec![idx.len(), rows.len() / idx.len().max(1)], rows)
    }

    /// Runs `cfg.steps` Adam steps with linear decay from `initial_lr`.
    fn phase(
        &mut self,
        net: &mut Network,
        teacher: Option<&Network>,
        loss: LossKind,
        weight_decay: f64,
    ) -> Result<Adam> {
        let total = self.cfg.steps;
        let mut adam = Adam::new(&net.params_mut());
        for t in 0..total {
            let lr = linear_lr(self.cfg.initial_lr, t, total);
            let (x, labels, idx) = self.next_batch()?;
            let (logits, tape) = net.forward_train(&x)?;
            let (value, upstream) = match loss {
                LossKind::CrossEntropy => (cross_entropy(&logits, &labels)?, cross_entropy_backward(&logits, &labels)?),
                LossKind::Distributional => {
                    let teacher = teacher.ok_or_else(|| Error::Config("distributional loss needs a teacher".into()))?;
                    let probs = self.teacher_probs(teacher, &x, &idx)?;
                    (
                        distributional_loss(&logits, &probs)?,
                        distributional_loss_backward(&logits, &probs)?,
                    )
                }
            };
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!("loss diverged at step {}", self.global_step + 1)));
            }
            let mut grads = net.backward(&tape, &upstream)?;
            adam.step(&mut net.params_mut(), &grads.params_mut(), lr, weight_decay)?;
            net.clip_latent_weights();
            self.global_step += 1;
            let last = t + 1 == total;
            let eval_now = last || (self.cfg.eval_every > 0 && (t + 1) % self.cfg.eval_every == 0);
            let log_now = eval_now || (self.cfg.log_every > 0 && (t + 1) % self.cfg.log_every == 0);
            if log_now {
                let eval_acc = if eval_now {
                    Some(evaluate(net, &self.data.test, &self.data.norm)?)
                } else {
                    None
                };
                self.metrics.push(MetricRow {
                    step: self.global_step,
                    lr,
                    loss: value,
                    eval_acc,
                });
            }
        }
        Ok(adam)
    }
}

fn start<'a>(cfg: &'a TrainConfig, data: &'a TaskData) -> Run<'a> {
    Run {
        cfg,
        data,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        order: Vec::new(),
        cursor: 0,
        global_step: 0,
        metrics: Vec::new(),
        teacher_cache: Vec::new(),
    }
}

/// Trains the real-valued counterpart of `cfg.variant` with cross-entropy.
pub fn train_teacher(cfg: &TrainConfig, data: &TaskData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut run = start(cfg, data);
    let spec = cfg.network_spec(&data.train, cfg.variant.real_counterpart());
    let mut net = Network::new(&spec, &mut run.rng)?;
    let adam = run.phase(&mut net, None, LossKind::CrossEntropy, cfg.weight_decay_step1)?;
    let final_accuracy = evaluate(&net, &data.test, &data.norm)?;
    let checkpoint = training_checkpoint(&net, Some(&data.norm), Some(&adam), run.global_step, &run.rng, cfg);
    Ok(TrainOutcome {
        network: net,
        metrics: run.metrics,
        final_accuracy,
        step2_initial_accuracy: None,
        checkpoint,
    })
}

/// Two-step training of the binary network `cfg.variant`.
pub fn train_two_step(cfg: &TrainConfig, teacher: Option<&Network>, data: &TaskData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.loss == LossKind::Distributional && teacher.is_none() {
        return Err(Error::Config("distributional loss needs a teacher checkpoint".into()));
    }
    if let Some(t) = teacher {
        if t.spec().input_shape != data.train.shape || t.spec().num_classes != data.train.num_classes {
            return Err(Error::Config("teacher does not match the dataset".into()));
        }
    }
    let mut run = start(cfg, data);
    let spec = cfg.network_spec(&data.train, cfg.variant);
    let mut net = Network::new(&spec, &mut run.rng)?;
    let mut adam = None;
    if cfg.two_step {
        net.set_binary_weights(false);
        adam = Some(run.phase(&mut net, teacher, cfg.loss, cfg.weight_decay_step1)?);
    }
    net.set_binary_weights(true);
    let step2_initial_accuracy = if cfg.steps > 0 {
        Some(evaluate(&net, &data.test, &data.norm)?)
    } else {
        None
    };
    if cfg.steps > 0 {
        adam = Some(run.phase(&mut net, teacher, cfg.loss, cfg.weight_decay_step2)?);
    }
    let final_accuracy = if cfg.steps > 0 {
        run.metrics
            .last()
            .and_then(|r| r.eval_acc)
            .map_or_else(|| evaluate(&net, &data.test, &data.norm), Ok)?
    } else {
        evaluate(&net, &data.test, &data.norm)?
    };
    let checkpoint = training_checkpoint(&net, Some(&data.norm), adam.as_ref(), run.global_step, &run.rng, cfg);
    Ok(TrainOutcome {
        network: net,
        metrics: run.metrics,
        final_accuracy,
        step2_initial_accuracy,
        checkpoint,
    })
}

/// Network state, normalization and metadata.
pub fn network_checkpoint(net: &Network, norm: Option<&Normalization>) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push(NamedTensor::text("meta/spec", &net.spec().to_text()));
    c.push(NamedTensor::u64("meta/binary_weights", vec![u64::from(net.binary_weights())]));
    if let Some(n) = norm {
        c.push(NamedTensor::f64("norm/mean", vec![n.mean.len()], n.mean.clone()));
        c.push(NamedTensor::f64("norm/std", vec![n.std.len()], n.std.clone()));
    }
    for (name, _, shape, values) in net.state() {
        c.push(NamedTensor::f64(format!("net/{name}"), shape, values));
    }
    c
}

/// [`network_checkpoint`] plus optimizer moments, step counter, RNG state
/// and the run configuration.
pub fn training_checkpoint(
    net: &Network,
    norm: Option<&Normalization>,
    adam: Option<&Adam>,
    step: usize,
    rng: &ChaCha8Rng,
    cfg: &TrainConfig,
) -> Checkpoint {
    let mut c = network_checkpoint(net, norm);
    c.push(NamedTensor::text("meta/config", &cfg.to_text()));
    c.push(NamedTensor::u64("train/step", vec![step as u64]));
    c.push(NamedTensor {
        name: "rng/seed".into(),
        shape: vec![32],
        data: TensorData::U8(rng.get_seed().to_vec()),
    });
    let pos = rng.get_word_pos();
    c.push(NamedTensor::u64("rng/word_pos", vec![pos as u64, (pos >> 64) as u64]));
    c.push(NamedTensor::u64("rng/stream", vec![rng.get_stream()]));
    if let Some(a) = adam {
        c.push(NamedTensor::u64("adam/t", vec![a.t]));
        let names: Vec<String> = net.clone().params_mut().into_iter().map(|p| p.name).collect();
        for ((name, m), v) in names.iter().zip(&a.m).zip(&a.v) {
            c.push(NamedTensor::f64(format!("adam/m/{name}"), vec![m.len()], m.clone()));
            c.push(NamedTensor::f64(format!("adam/v/{name}"), vec![v.len()], v.clone()));
        }
    }
    c
}

/// Rebuilds a network from [`network_checkpoint`] output.
pub fn restore_network(c: &Checkpoint) -> Result<Network> {
    let spec = NetworkSpec::from_text(&c.text("meta/spec")?)?;
    let mut net = Network::new(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    net.set_binary_weights(c.u64s("meta/binary_weights")?.first() == Some(&1));
    let stored: BTreeMap<&str, &NamedTensor> = c.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for p in net.state_mut() {
        let key = format!("net/{}", p.name);
        let t = stored
            .get(key.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{key}`")))?;
        if t.shape != p.shape {
            return Err(Error::ShapeMismatch {
                expected: p.shape.clone(),
                found: t.shape.clone(),
            });
        }
        match &t.data {
            TensorData::F64(v) => p.values.copy_from_slice(v),
            _ => return Err(Error::Format(format!("`{key}` is not an f64 tensor"))),
        }
    }
    Ok(net)
}

pub fn restore_normalization(c: &Checkpoint) -> Result<Normalization> {
    Ok(Normalization {
        mean: c.f64s("norm/mean")?.to_vec(),
        std: c.f64s("norm/std")?.to_vec(),
    })
}

pub fn load_network(path: &Path) -> Result<Network> {
    restore_network(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ParamKind;

    fn synthetic(n: usize, seed: u64) -> Dataset {
        // class k images are bright in a k-dependent quadrant
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let k = i % 4;
            labels.push(k as u8);
            for y in 0..8 {
                for x in 0..8 {
                    let q = (y / 4) * 2 + x / 4;
                    let base: u8 = if q == k { 200 } else { 30 };
                    pixels.push(base.saturating_add(rng.gen_range(0..40)));
                }
            }
        }
        Dataset {
            kind: DatasetKind::Mnist,
            shape: [1, 8, 8],
            pixels,
            labels,
            num_classes: 4,
        }
    }

    fn task() -> TaskData {
        TaskData::new(synthetic(64, 1), synthetic(32, 2)).unwrap()
    }

    fn quick_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            steps: 12,
            batch_size: 8,
            initial_lr: 5e-3,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig {
            teacher: Some("t.rakt".into()),
            train_limit: Some(500),
            ..quick_cfg(Variant::parse("rsign-only").unwrap())
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::parse("steps=ten").is_err());
        assert!(TrainConfig::parse("bogus=1").is_err());
        assert!(TrainConfig::parse("batch_size=1").is_err());
        assert!(matches!(TrainConfig::parse("variant=nope"), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn defaults_match_schedule_constants() {
        let c = TrainConfig::default();
        assert_eq!(c.initial_lr, 5e-4);
        assert_eq!(c.weight_decay_step1, 1e-5);
        assert_eq!(c.weight_decay_step2, 0.0);
    }

    #[test]
    fn distributional_loss_requires_teacher() {
        let d = task();
        assert!(matches!(train_two_step(&quick_cfg(Variant::reactnet_a()), None, &d), Err(Error::Config(_))));
    }

    #[test]
    fn two_step_run_is_deterministic_and_logs_monotone_steps() {
        let d = task();
        let tcfg = quick_cfg(Variant::reactnet_a());
        let teacher = train_teacher(&tcfg, &d).unwrap();
        let a = train_two_step(&tcfg, Some(&teacher.network), &d).unwrap();
        let b = train_two_step(&tcfg, Some(&teacher.network), &d).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        let steps: Vec<usize> = a.metrics.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(steps.last(), Some(&24));
        assert!(a.metrics.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
        assert!(a.network.binary_weights());
    }

    #[test]
    fn checkpoint_restores_logits_bit_exactly() {
        let d = task();
        let cfg = TrainConfig {
            loss: LossKind::CrossEntropy,
            ..quick_cfg(Variant::reactnet_a())
        };
        let out = train_two_step(&cfg, None, &d).unwrap();
        let bytes = out.checkpoint.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let net = restore_network(&back).unwrap();
        let (x, _) = make_batch(&d.test, &(0..16).collect::<Vec<_>>(), &d.norm, None);
        let a = out.network.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(restore_normalization(&back).unwrap(), d.norm);
    }

    #[test]
    fn zero_steps_gives_initial_network() {
        let d = task();
        let cfg = TrainConfig {
            steps: 0,
            loss: LossKind::CrossEntropy,
            ..quick_cfg(Variant::baseline())
        };
        let out = train_two_step(&cfg, None, &d).unwrap();
        assert!(out.metrics.is_empty());
        let fresh = Network::new(&cfg.network_spec(&d.train, cfg.variant), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.network.state(), fresh.state());
    }

    #[test]
    fn weight_decay_never_touches_activation_coefficients() {
        // zero loss gradient everywhere except decay: only weights may move
        let d = task();
        let spec = quick_cfg(Variant::reactnet_a()).network_spec(&d.train, Variant::reactnet_a());
        let mut net = Network::new(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let before = net.state();
        let mut grads_net = net.clone();
        for p in grads_net.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut adam = Adam::new(&net.params_mut());
        adam.step(&mut net.params_mut(), &grads_net.params_mut(), 1e-2, 0.5).unwrap();
        for ((name, kind, _, a), (_, _, _, b)) in before.iter().zip(net.state()) {
            if kind.takes_weight_decay() {
                assert_ne!(a, &b, "{name}");
            } else {
                assert_eq!(a, &b, "{name}");
            }
            if matches!(kind, ParamKind::Alpha | ParamKind::Beta | ParamKind::Gamma | ParamKind::Zeta) {
                assert_eq!(a, &b);
            }
        }
    }

    #[test]
    fn metrics_csv_header() {
        let rows = vec![
            MetricRow {
                step: 1,
                lr: 5e-4,
                loss: 0.5,
                eval_acc: None,
            },
            MetricRow {
                step: 2,
                lr: 2.5e-4,
                loss: 0.25,
                eval_acc: Some(0.75),
            },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,lr,loss,eval_acc");
        assert!(lines[1].ends_with(','));
        assert!(lines[2].ends_with("0.750000"));
    }
}
