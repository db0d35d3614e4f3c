//! Persistence: the tensor container, manifests, suite directories and
//! atomic file writes.

mod container;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use container::{read_container, write_container, ContainerError, DTYPE_F32, MAGIC, VERSION};

use crate::embed::{EmbedKind, TaskEmbedding};
use crate::lab::{Checkpoint, TrainConfig};
use crate::model::{Batch, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::peft::{AdapterConfig, Method};
use crate::tasks::{Family, Suite, SuiteConfig, Task, TaskDataset, TaskSpec};
use crate::{Error, Result};

/// Writes through a temporary file in the destination directory, then renames
/// it into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = write_container(tensors.iter().map(|(n, t)| (n.as_str(), *t)))?;
    write_atomic(path, &bytes)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(read_container(&read(path)?)?)
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

fn from_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::Format(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_toml(value)?.as_bytes())
}

pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    from_toml(path)
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_epoch: usize,
    pub prefix_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

/// Sidecar of a checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: Method,
    pub task: String,
    /// Digest of the model configuration the tensors belong to.
    pub config_hash: String,
    pub hyperparameters: Hyperparameters,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub seed: u64,
    /// Validation accuracy per epoch of the selected run.
    pub curve: Vec<f64>,
    /// Seconds since the Unix epoch; not part of any determinism check.
    pub created: u64,
}

impl Manifest {
    pub fn for_checkpoint(
        ck: &Checkpoint,
        cfg: &TrainConfig,
        model: &ModelConfig,
        curve: &[f64],
    ) -> Self {
        Self {
            method: ck.method,
            task: ck.task.clone(),
            config_hash: model.hash(),
            hyperparameters: Hyperparameters {
                lr: ck.lr,
                batch_size: cfg.batch_size,
                epochs: cfg.epochs,
                early_epoch: cfg.early_epoch,
                prefix_len: cfg.adapter.prefix_len,
                lora_rank: cfg.adapter.lora_rank,
                lora_alpha: cfg.adapter.lora_alpha,
            },
            epoch: ck.epoch,
            val_accuracy: ck.val_accuracy,
            seed: ck.seed,
            curve: curve.to_vec(),
            created: unix_now(),
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            prefix_len: self.hyperparameters.prefix_len,
            lora_rank: self.hyperparameters.lora_rank,
            lora_alpha: self.hyperparameters.lora_alpha,
        }
    }
}

/// Paths of a checkpoint pair: `<stem>.tpte` and `<stem>.toml`.
pub fn checkpoint_paths(dir: &Path, task: &str, which: &str) -> (PathBuf, PathBuf) {
    let stem = format!("{task}.{which}");
    (
        dir.join(format!("{stem}.tpte")),
        dir.join(format!("{stem}.toml")),
    )
}

pub fn save_checkpoint(
    dir: &Path,
    which: &str,
    ck: &Checkpoint,
    manifest: &Manifest,
) -> Result<()> {
    let (tensors, meta) = checkpoint_paths(dir, &ck.task, which);
    save_tensors(&tensors, &ck.tensors())?;
    save_toml(&meta, manifest)
}

/// Loads a checkpoint and checks that it belongs to `model`.
pub fn load_checkpoint(
    dir: &Path,
    task: &str,
    which: &str,
    model: &ModelConfig,
) -> Result<(Checkpoint, Manifest)> {
    let (tensors, meta) = checkpoint_paths(dir, task, which);
    let manifest: Manifest = load_toml(&meta)?;
    if manifest.config_hash != model.hash() {
        return Err(Error::Format(format!(
            "{}: config hash {} does not match model {}",
            meta.display(),
            manifest.config_hash,
            model.hash()
        )));
    }
    let named = load_tensors(&tensors)?;
    let tuned =
        Checkpoint::tuned_from_named(manifest.method, model, &manifest.adapter_config(), &named)?;
    let ck = Checkpoint {
        task: manifest.task.clone(),
        method: manifest.method,
        seed: manifest.seed,
        lr: manifest.hyperparameters.lr,
        epoch: manifest.epoch,
        val_accuracy: manifest.val_accuracy,
        tuned,
    };
    Ok((ck, manifest))
}

/// Sidecar of an embedding container (one rank-1 tensor per task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub kind: EmbedKind,
    pub config_hash: String,
    pub dim: usize,
    pub tasks: Vec<String>,
    pub created: u64,
}

pub fn save_embeddings(
    path: &Path,
    embeddings: &[TaskEmbedding],
    model: &ModelConfig,
) -> Result<()> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Degenerate("no embeddings to save".into()))?;
    if let Some(e) = embeddings.iter().find(|e| e.kind != first.kind) {
        return Err(Error::Format(format!(
            "mixed embedding kinds {} and {}",
            first.kind, e.kind
        )));
    }
    let named: Vec<(String, &Tensor)> = embeddings
        .iter()
        .map(|e| (e.source.clone(), &e.vector))
        .collect();
    save_tensors(path, &named)?;
    let manifest = EmbeddingManifest {
        kind: first.kind,
        config_hash: model.hash(),
        dim: first.dim(),
        tasks: embeddings.iter().map(|e| e.source.clone()).collect(),
        created: unix_now(),
    };
    save_toml(&path.with_extension("toml"), &manifest)
}

/// Embeddings from a container and its sidecar manifest.
/// Dimensions are not checked here so that consumers can report mismatches.
pub fn load_embeddings(path: &Path) -> Result<Vec<TaskEmbedding>> {
    let named = load_tensors(path)?;
    let kind = load_toml::<EmbeddingManifest>(&path.with_extension("toml"))?.kind;
    named
        .into_iter()
        .map(|(name, t)| {
            let n = t.len();
            TaskEmbedding::new(t.reshape(vec![n])?, kind, name)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskEntry {
    id: String,
    cluster: usize,
    family: Family,
}

/// `suite.toml` in a suite directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub config: SuiteConfig,
    pub model: ModelConfig,
    pub config_hash: String,
    tasks: Vec<TaskEntry>,
    pub created: u64,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split<'a>(data: &'a TaskDataset, name: &str) -> &'a Batch {
    match name {
        "train" => &data.train,
        "val" => &data.val,
        _ => &data.test,
    }
}

fn batch_tensors(b: &Batch) -> (Tensor, Tensor) {
    // ids stay far below 2^24, so f32 holds them exactly
    let tokens = Tensor::new(
        vec![b.len(), b.seq_len],
        b.tokens.iter().map(|&t| t as f32).collect(),
    )
    .expect("tokens fill the batch");
    let labels = Tensor::vector(b.labels.iter().map(|&l| l as f32).collect());
    (tokens, labels)
}

fn to_ids(t: &Tensor, what: &str) -> Result<Vec<u32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as u32)
            } else {
                Err(Error::Format(format!("{what} holds non-integer value {v}")))
            }
        })
        .collect()
}

/// Writes `suite.toml`, `base.tpte` and `tasks/<id>.tpte`.
pub fn save_suite(
    dir: &Path,
    suite: &Suite,
    model: &ModelConfig,
    base: &ModelParams,
) -> Result<()> {
    fs::create_dir_all(dir.join("tasks"))?;
    for task in &suite.tasks {
        let mut owned: Vec<(String, Tensor)> = vec![
            ("spec.theta".into(), task.spec.theta.clone()),
            ("spec.class_logits".into(), task.spec.class_logits.clone()),
        ];
        for s in SPLITS {
            let (tokens, labels) = batch_tensors(split(&task.data, s));
            owned.push((format!("{s}.tokens"), tokens));
            owned.push((format!("{s}.labels"), labels));
        }
        let named: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_tensors(
            &dir.join("tasks").join(format!("{}.tpte", task.spec.id)),
            &named,
        )?;
    }
    save_tensors(&dir.join("base.tpte"), &base.tensors())?;
    let manifest = SuiteManifest {
        seed: suite.seed,
        config: suite.config.clone(),
        model: *model,
        config_hash: model.hash(),
        tasks: suite
            .tasks
            .iter()
            .map(|t| TaskEntry {
                id: t.spec.id.clone(),
                cluster: t.spec.cluster,
                family: t.spec.family,
            })
            .collect(),
        created: unix_now(),
    };
    save_toml(&dir.join("suite.toml"), &manifest)
}

pub struct LoadedSuite {
    pub manifest: SuiteManifest,
    pub suite: Suite,
    pub base: ModelParams,
}

pub fn load_suite(dir: &Path) -> Result<LoadedSuite> {
    let manifest: SuiteManifest = load_toml(&dir.join("suite.toml"))?;
    if manifest.config_hash != manifest.model.hash() {
        return Err(Error::Format(
            "suite.toml: config hash does not match its model".into(),
        ));
    }
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let path = dir.join("tasks").join(format!("{}.tpte", entry.id));
        let named = load_tensors(&path)?;
        let get = |n: &str| {
            named
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("{}: missing `{n}`", path.display())))
        };
        let mut batches = Vec::new();
        for s in SPLITS {
            let tokens = get(&format!("{s}.tokens"))?;
            let labels = to_ids(get(&format!("{s}.labels"))?, "labels")?;
            let seq_len = if tokens.rank() == 2 {
                tokens.cols()
            } else {
                manifest.config.seq_len
            };
            batches.push(Batch::new(to_ids(tokens, "tokens")?, labels, seq_len)?);
        }
        let test = batches.pop().expect("three splits");
        let val = batches.pop().expect("three splits");
        let train = batches.pop().expect("three splits");
        tasks.push(Task {
            spec: TaskSpec {
                id: entry.id.clone(),
                cluster: entry.cluster,
                family: entry.family,
                theta: get("spec.theta")?.clone(),
                class_logits: get("spec.class_logits")?.clone(),
            },
            data: TaskDataset { train, val, test },
        });
    }
    let named = load_tensors(&dir.join("base.tpte"))?;
    let base = ModelParams::from_named(&manifest.model, |n| {
        named.iter().find(|(k, _)| k == n).map(|(_, t)| t)
    })?;
    let suite = Suite {
        config: manifest.config.clone(),
        seed: manifest.seed,
        tasks,
    };
    Ok(LoadedSuite {
        manifest,
        suite,
        base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::{base_model, train_task};
    use crate::tasks::gen_suite;

    fn small() -> (Suite, ModelConfig, ModelParams) {
        let cfg = SuiteConfig {
            n_clusters: 2,
            tasks_per_cluster: 1,
            vocab_size: 12,
            seq_len: 4,
            train_size: 16,
            val_size: 8,
            test_size: 8,
            min_bayes_accuracy: 0.6,
            ..SuiteConfig::default()
        };
        let model = ModelConfig {
            vocab_size: 12,
            max_seq_len: 4,
            hidden_size: 4,
            n_heads: 2,
            n_layers: 1,
            ffn_size: 4,
            n_classes: 2,
        };
        let base = base_model(&model, 1).unwrap();
        (gen_suite(&cfg, 2).unwrap(), model, base)
    }

    #[test]
    fn suite_directory_round_trip() {
        let (suite, model, base) = small();
        let dir = tempfile::tempdir().unwrap();
        save_suite(dir.path(), &suite, &model, &base).unwrap();
        let back = load_suite(dir.path()).unwrap();
        assert_eq!(back.suite, suite);
        assert_eq!(back.base, base);
        assert_eq!(back.manifest.model, model);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let (suite, model, base) = small();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            early_epoch: 1,
            lr_grid: vec![1e-2],
            adapter: AdapterConfig {
                prefix_len: 2,
                lora_rank: 2,
                lora_alpha: 4.0,
            },
            ..TrainConfig::new(Method::Lora, 3)
        };
        let t = &suite.tasks[0];
        let out = train_task(&base, &t.spec.id, &t.data, &cfg, None).unwrap();
        let m = Manifest::for_checkpoint(&out.best, &cfg, &model, &out.curve);
        save_checkpoint(dir.path(), "best", &out.best, &m).unwrap();
        let (ck, m2) = load_checkpoint(dir.path(), &t.spec.id, "best", &model).unwrap();
        assert_eq!(ck, out.best);
        assert_eq!(m2, m);
        let other = ModelConfig {
            hidden_size: 8,
            ..model
        };
        assert!(matches!(
            load_checkpoint(dir.path(), &t.spec.id, "best", &other),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn embeddings_round_trip() {
        let (_, model, _) = small();
        let dir = tempfile::tempdir().unwrap();
        let kind = EmbedKind::Tupate(Method::Bias);
        let es = vec![
            TaskEmbedding::new(Tensor::vector(vec![1.0, 2.0]), kind, "t0").unwrap(),
            TaskEmbedding::new(Tensor::vector(vec![0.5, -2.0]), kind, "t1").unwrap(),
        ];
        let path = dir.path().join("e.tpte");
        save_embeddings(&path, &es, &model).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), es);
        let m: EmbeddingManifest = load_toml(&dir.path().join("e.toml")).unwrap();
        assert_eq!(m.kind, kind);
        assert_eq!(m.dim, 2);
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"first version, long").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_tensors(Path::new("/nonexistent/zz.tpte"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("zz.tpte"), "{err}");
    }
}
