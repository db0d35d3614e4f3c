use serde::{Deserialize, Serialize};

use crate::model::{evaluate, loss_and_grads, Linear, ModelConfig, ModelParams};
use crate::numerics::{AdamState, Rng, Tensor};
use crate::peft::{init_adapter, trainable_mask, AdapterConfig, AdapterParams, Method};
use crate::tasks::TaskDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch whose parameters form the early checkpoint.
    pub early_epoch: usize,
    pub seed: u64,
    pub adapter: AdapterConfig,
}

impl TrainConfig {
    /// Learning rates used at BERT scale. There is no standard full fine-tuning
    /// grid for this setting, so `{1e-3, 1e-4}` is our choice.
    pub fn default_grid(method: Method) -> Vec<f64> {
        match method {
            Method::Prefix => vec![1e-2, 1e-3],
            Method::Lora => vec![5e-4, 2e-4],
            Method::Bias => vec![1e-4, 4e-4],
            Method::Full => vec![1e-3, 1e-4],
        }
    }

    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            lr_grid: Self::default_grid(method),
            batch_size: 32,
            epochs: 20,
            early_epoch: 2,
            seed,
            adapter: AdapterConfig::default(),
        }
    }

    /// Multiplies every grid point by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.lr_grid.iter_mut().for_each(|lr| *lr *= factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !lr.is_finite() || *lr <= 0.0) {
            return Err(Error::Config(
                "learning-rate grid must be nonempty and positive".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if self.early_epoch == 0 || self.early_epoch > self.epochs {
            return Err(Error::Config(format!(
                "early epoch {} outside 1..={}",
                self.early_epoch, self.epochs
            )));
        }
        Ok(())
    }
}

/// Trained parameters: adapter plus head, or the whole model.
#[derive(Debug, Clone, PartialEq)]
pub enum Tuned {
    Adapter {
        adapter: AdapterParams,
        head: Linear,
    },
    Full(Box<ModelParams>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: String,
    pub method: Method,
    pub seed: u64,
    pub lr: f64,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub tuned: Tuned,
}

impl Checkpoint {
    /// Named tensors: adapter tensors then `classifier.*`, or every model
    /// tensor for full fine-tuning.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        match &self.tuned {
            Tuned::Adapter { adapter, head } => {
                let mut out = adapter.tensors();
                out.push(("classifier.weight".into(), &head.weight));
                out.push(("classifier.bias".into(), &head.bias));
                out
            }
            Tuned::Full(p) => p.tensors(),
        }
    }

    pub fn adapter(&self) -> Option<&AdapterParams> {
        match &self.tuned {
            Tuned::Adapter { adapter, .. } => Some(adapter),
            Tuned::Full(_) => None,
        }
    }

    /// Model and adapter to run inference with, on top of a frozen base.
    pub fn materialize(&self, base: &ModelParams) -> (ModelParams, Option<AdapterParams>) {
        match &self.tuned {
            Tuned::Adapter { adapter, head } => {
                let mut m = base.clone();
                m.classifier = head.clone();
                (m, Some(adapter.clone()))
            }
            Tuned::Full(p) => ((**p).clone(), None),
        }
    }

    /// Inverse of [`Checkpoint::tensors`].
    pub fn tuned_from_named(
        method: Method,
        model: &ModelConfig,
        adapter_cfg: &AdapterConfig,
        named: &[(String, Tensor)],
    ) -> Result<Tuned> {
        let lookup = |name: &str| named.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        if method == Method::Full {
            return Ok(Tuned::Full(Box::new(ModelParams::from_named(
                model, lookup,
            )?)));
        }
        let mut adapter: AdapterParams =
            init_adapter(method, model, adapter_cfg, &mut Rng::new(0))?;
        for (name, slot) in adapter.tensors_mut() {
            let t =
                lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            t.ensure_shape(slot.dims(), &name)?;
            *slot = t.clone();
        }
        let expected = adapter.tensors().len() + 2;
        if named.len() != expected {
            return Err(Error::Format(format!(
                "{} tensors for a {method} checkpoint, expected {expected}",
                named.len()
            )));
        }
        let head = |n: &str| {
            lookup(n)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing tensor `{n}`")))
        };
        let head = Linear {
            weight: head("classifier.weight")?,
            bias: head("classifier.bias")?,
        };
        head.weight
            .ensure_shape(&[model.n_classes, model.hidden_size], "classifier.weight")?;
        head.bias
            .ensure_shape(&[model.n_classes], "classifier.bias")?;
        Ok(Tuned::Adapter { adapter, head })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub early: Checkpoint,
    pub best: Checkpoint,
    /// Validation accuracy after each epoch, for the selected grid point.
    pub curve: Vec<f64>,
    /// Grid points abandoned because the loss or parameters became non-finite.
    pub diverged: Vec<f64>,
}

/// Frozen base model shared by every task of a run.
pub fn base_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config, &mut Rng::new(seed).fork_str("base"))
}

/// Stream for adapter initialization. It depends on the seed and method only,
/// so every task starts from the same adapter.
pub fn init_rng(seed: u64, method: Method) -> Rng {
    Rng::new(seed).fork_str(&format!("init/{method}"))
}

/// Mini-batch order stream for training on `task`.
pub fn shuffle_rng(seed: u64, task: &str) -> Rng {
    Rng::new(seed).fork_str(&format!("shuffle/{task}"))
}

fn snapshot(
    task: &str,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    val: f64,
    model: &ModelParams,
    adapter: Option<&AdapterParams>,
) -> Checkpoint {
    let tuned = match adapter {
        Some(a) => Tuned::Adapter {
            adapter: a.clone(),
            head: model.classifier.clone(),
        },
        None => Tuned::Full(Box::new(model.clone())),
    };
    Checkpoint {
        task: task.to_string(),
        method: cfg.method,
        seed: cfg.seed,
        lr,
        epoch,
        val_accuracy: val,
        tuned,
    }
}

fn starting_point(
    base: &ModelParams,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<(ModelParams, Option<AdapterParams>)> {
    if let Some(ck) = init {
        if ck.method != cfg.method {
            return Err(Error::Config(format!(
                "cannot continue a {} checkpoint with {}",
                ck.method, cfg.method
            )));
        }
        return Ok(ck.materialize(base));
    }
    let adapter = match cfg.method {
        Method::Full => None,
        m => Some(init_adapter(
            m,
            &base.config,
            &cfg.adapter,
            &mut init_rng(cfg.seed, m),
        )?),
    };
    Ok((base.clone(), adapter))
}

struct Run {
    early: Checkpoint,
    best: Checkpoint,
    curve: Vec<f64>,
}

fn run_one(
    base: &ModelParams,
    task: &str,
    data: &TaskDataset,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    lr: f64,
) -> Result<Run> {
    let (mut model, mut adapter) = starting_point(base, cfg, init)?;
    let mask = trainable_mask(cfg.method, &base.config);
    let mut adam = AdamState::new(lr);
    let mut rng = shuffle_rng(cfg.seed, task);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut early = None;
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.select(chunk);
            let (_, grads) = loss_and_grads(&model, adapter.as_ref(), &batch, &mask)?;
            let mut slots = model.tensors_mut();
            if let Some(a) = adapter.as_mut() {
                slots.extend(a.tensors_mut());
            }
            let pairs = slots
                .iter_mut()
                .filter_map(|(n, t)| grads.get(n.as_str()).map(|g| (n.as_str(), &mut **t, g)));
            adam.step(pairs)?;
            for (n, t) in slots.iter() {
                if grads.contains_key(n.as_str()) && !t.all_finite() {
                    return Err(Error::NonFinite(n.clone()));
                }
            }
        }
        let val = evaluate(&model, adapter.as_ref(), &data.val)?;
        curve.push(val);
        if epoch == cfg.early_epoch {
            early = Some(snapshot(
                task,
                cfg,
                lr,
                epoch,
                val,
                &model,
                adapter.as_ref(),
            ));
        }
        if best.as_ref().is_none_or(|b| val > b.val_accuracy) {
            best = Some(snapshot(
                task,
                cfg,
                lr,
                epoch,
                val,
                &model,
                adapter.as_ref(),
            ));
        }
    }
    Ok(Run {
        early: early.expect("early epoch within range"),
        best: best.expect("at least one epoch"),
        curve,
    })
}

/// Adam over each learning rate of the grid; keeps the grid point whose best
/// validation accuracy is highest (earliest grid point on ties). A grid point
/// whose loss or parameters turn non-finite is dropped.
pub fn train_task(
    base: &ModelParams,
    task: &str,
    data: &TaskDataset,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut chosen: Option<Run> = None;
    let mut diverged = Vec::new();
    for &lr in &cfg.lr_grid {
        match run_one(base, task, data, cfg, init, lr) {
            Ok(run) => {
                if chosen
                    .as_ref()
                    .is_none_or(|c| run.best.val_accuracy > c.best.val_accuracy)
                {
                    chosen = Some(run);
                }
            }
            Err(Error::NonFinite(_)) => diverged.push(lr),
            Err(e) => return Err(e),
        }
    }
    let run = chosen.ok_or(Error::Diverged)?;
    Ok(TrainOutcome {
        early: run.early,
        best: run.best,
        curve: run.curve,
        diverged,
    })
}

/// Test accuracy of a checkpoint on a frozen base.
pub fn test_accuracy(base: &ModelParams, ck: &Checkpoint, data: &TaskDataset) -> Result<f64> {
    let (m, a) = ck.materialize(base);
    evaluate(&m, a.as_ref(), &data.test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_suite, SuiteConfig};

    fn setup() -> (ModelParams, crate::tasks::Suite) {
        let model = ModelConfig {
            vocab_size: 16,
            max_seq_len: 6,
            hidden_size: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_size: 16,
            n_classes: 2,
        };
        let suite = gen_suite(
            &SuiteConfig {
                n_clusters: 2,
                tasks_per_cluster: 1,
                vocab_size: 16,
                seq_len: 6,
                signal: 2.0,
                train_size: 64,
                val_size: 32,
                test_size: 32,
                min_bayes_accuracy: 0.8,
                ..SuiteConfig::default()
            },
            3,
        )
        .unwrap();
        (base_model(&model, 1).unwrap(), suite)
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig {
            lr_grid: vec![1e-2],
            epochs: 3,
            early_epoch: 1,
            batch_size: 16,
            adapter: AdapterConfig {
                prefix_len: 2,
                lora_rank: 2,
                lora_alpha: 2.0,
            },
            ..TrainConfig::new(method, 9)
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(Method::Lora, 0).validate().is_ok());
        let mut c = TrainConfig::new(Method::Lora, 0);
        c.early_epoch = 21;
        assert!(c.validate().is_err());
        c.early_epoch = 2;
        c.lr_grid.clear();
        assert!(c.validate().is_err());
        let s = TrainConfig::new(Method::Prefix, 0).scaled(10.0);
        assert_eq!(s.lr_grid, vec![1e-1, 1e-2]);
    }

    #[test]
    fn best_is_curve_maximum_and_deterministic() {
        let (base, suite) = setup();
        let t = &suite.tasks[0];
        for m in [Method::Prefix, Method::Bias, Method::Lora, Method::Full] {
            let out = train_task(&base, &t.spec.id, &t.data, &quick(m), None).unwrap();
            let max = out.curve.iter().copied().fold(f64::MIN, f64::max);
            assert_eq!(out.best.val_accuracy, max);
            assert_eq!(out.early.epoch, 1);
            assert_eq!(out.early.val_accuracy, out.curve[0]);
            let again = train_task(&base, &t.spec.id, &t.data, &quick(m), None).unwrap();
            assert_eq!(again, out);
        }
    }

    #[test]
    fn frozen_tensors_stay_bit_identical() {
        let (base, suite) = setup();
        let t = &suite.tasks[1];
        for m in Method::PEFT {
            let out = train_task(&base, &t.spec.id, &t.data, &quick(m), None).unwrap();
            let (model, _) = out.best.materialize(&base);
            for ((name, a), (_, b)) in model.tensors().into_iter().zip(base.tensors()) {
                if name.starts_with("classifier.") {
                    continue;
                }
                assert!(a.bit_eq(b), "{m}: {name} changed");
            }
        }
    }

    #[test]
    fn divergent_grid_points_are_skipped() {
        let (base, suite) = setup();
        let t = &suite.tasks[0];
        let cfg = TrainConfig {
            lr_grid: vec![1e300, 1e-2],
            ..quick(Method::Full)
        };
        let out = train_task(&base, &t.spec.id, &t.data, &cfg, None).unwrap();
        assert_eq!(out.diverged, vec![1e300]);
        assert_eq!(out.best.lr, 1e-2);
        let cfg = TrainConfig {
            lr_grid: vec![1e300],
            ..quick(Method::Full)
        };
        assert!(matches!(
            train_task(&base, &t.spec.id, &t.data, &cfg, None),
            Err(Error::Diverged)
        ));
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let (base, suite) = setup();
        let t = &suite.tasks[0];
        for m in [Method::Prefix, Method::Bias, Method::Lora, Method::Full] {
            let cfg = quick(m);
            let out = train_task(&base, &t.spec.id, &t.data, &cfg, None).unwrap();
            let named: Vec<(String, Tensor)> = out
                .best
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            let tuned =
                Checkpoint::tuned_from_named(m, &base.config, &cfg.adapter, &named).unwrap();
            assert_eq!(tuned, out.best.tuned);
            assert!(
                Checkpoint::tuned_from_named(m, &base.config, &cfg.adapter, &named[1..]).is_err()
            );
        }
    }

    #[test]
    fn continuing_requires_same_method() {
        let (base, suite) = setup();
        let t = &suite.tasks[0];
        let out = train_task(&base, &t.spec.id, &t.data, &quick(Method::Bias), None).unwrap();
        let err = train_task(
            &base,
            &t.spec.id,
            &t.data,
            &quick(Method::Lora),
            Some(&out.best),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(train_task(
            &base,
            &t.spec.id,
            &t.data,
            &quick(Method::Bias),
            Some(&out.best)
        )
        .is_ok());
    }
}
