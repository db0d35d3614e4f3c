//! Browser bindings for three small interactive views: tuned-parameter
//! counts, single-target ranking metrics, and a TuPaTE similarity heatmap
//! trained in the page.
//!
//! Each export wraps a plain Rust function so the logic is testable natively.

use transferlab::lab::{base_model, train_suite, tupate_matrix, TrainConfig, Which};
use transferlab::model::ModelConfig;
use transferlab::peft::{count_tuned_params, per_layer_dim, AdapterConfig, Method};
use transferlab::rank::{evaluate_target, random_ndcg, ScoreMatrix, TargetCandidates};
use transferlab::tasks::{gen_suite, SuiteConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// `[total, per_layer]` tuned parameters, classifier head excluded.
pub fn param_counts(
    method: &str,
    layers: usize,
    hidden: usize,
    ffn: usize,
    prefix_len: usize,
    lora_rank: usize,
) -> Result<Vec<f64>, String> {
    let method: Method = method.parse().map_err(|e| format!("{e}"))?;
    let model = ModelConfig {
        hidden_size: hidden,
        n_layers: layers,
        ffn_size: ffn,
        ..ModelConfig::default()
    };
    let cfg = AdapterConfig {
        prefix_len,
        lora_rank,
        lora_alpha: lora_rank as f64,
    };
    Ok(vec![
        count_tuned_params(method, &model, &cfg) as f64,
        per_layer_dim(method, &model, &cfg) as f64,
    ])
}

#[wasm_bindgen(js_name = paramCounts)]
pub fn param_counts_js(
    method: &str,
    layers: usize,
    hidden: usize,
    ffn: usize,
    prefix_len: usize,
    lora_rank: usize,
) -> Result<Vec<f64>, JsValue> {
    param_counts(method, layers, hidden, ffn, prefix_len, lora_rank).map_err(js_err)
}

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct TargetReport {
    ndcg: f64,
    best_rank: usize,
    random_ndcg: f64,
    order: Vec<u32>,
}

#[wasm_bindgen]
impl TargetReport {
    #[wasm_bindgen(getter)]
    pub fn ndcg(&self) -> f64 {
        self.ndcg
    }

    #[wasm_bindgen(getter, js_name = bestRank)]
    pub fn best_rank(&self) -> usize {
        self.best_rank
    }

    #[wasm_bindgen(getter, js_name = randomNdcg)]
    pub fn random_ndcg(&self) -> f64 {
        self.random_ndcg
    }

    /// Candidate indices, best predicted first.
    #[wasm_bindgen(getter)]
    pub fn order(&self) -> Vec<u32> {
        self.order.clone()
    }
}

/// Ranks candidate sources of a single target by `scores` and grades the
/// order against the measured `gains`.
pub fn rank_target(scores: &[f64], gains: &[f64]) -> Result<TargetReport, String> {
    if scores.len() != gains.len() {
        return Err(format!("{} scores for {} gains", scores.len(), gains.len()));
    }
    // zero-padded ids keep id order equal to index order for tie breaks
    let ids: Vec<String> = (0..scores.len()).map(|i| format!("s{i:03}")).collect();
    let target = vec!["target".to_string()];
    let s = ScoreMatrix::new(ids.clone(), target.clone(), scores.to_vec())
        .map_err(|e| e.to_string())?;
    let g = ScoreMatrix::new(ids.clone(), target, gains.to_vec()).map_err(|e| e.to_string())?;
    let c = TargetCandidates {
        target: "target".into(),
        sources: ids.clone(),
    };
    let r = evaluate_target(&s, &g, &c).map_err(|e| e.to_string())?;
    let order = r
        .order
        .iter()
        .map(|id| {
            ids.iter()
                .position(|x| x == id)
                .expect("order holds candidate ids") as u32
        })
        .collect();
    Ok(TargetReport {
        ndcg: r.ndcg,
        best_rank: r.best_rank,
        random_ndcg: random_ndcg(&g, &[c]).map_err(|e| e.to_string())?,
        order,
    })
}

#[wasm_bindgen(js_name = rankTarget)]
pub fn rank_target_js(scores: &[f64], gains: &[f64]) -> Result<TargetReport, JsValue> {
    rank_target(scores, gains).map_err(js_err)
}

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    size: usize,
    values: Vec<f64>,
    clusters: Vec<u32>,
}

#[wasm_bindgen]
impl Heatmap {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major cosine similarities, diagonal zero.
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn clusters(&self) -> Vec<u32> {
        self.clusters.clone()
    }
}

/// Generates a two-cluster toy suite, tunes one adapter per task, and returns
/// the cosine similarity of their TuPaTE embeddings.
pub fn tupate_heatmap(
    method: &str,
    tasks_per_cluster: usize,
    spread: f64,
    seed: u32,
) -> Result<Heatmap, String> {
    let method: Method = method.parse().map_err(|e| format!("{e}"))?;
    if !method.is_adapter() {
        return Err("heatmap needs an adapter method".into());
    }
    let seed = seed as u64;
    let model = ModelConfig {
        vocab_size: 32,
        max_seq_len: 8,
        hidden_size: 16,
        n_heads: 2,
        n_layers: 2,
        ffn_size: 32,
        n_classes: 2,
    };
    let suite = gen_suite(
        &SuiteConfig {
            n_clusters: 2,
            tasks_per_cluster,
            cluster_spread: spread,
            vocab_size: model.vocab_size,
            seq_len: model.max_seq_len,
            train_size: 300,
            val_size: 60,
            test_size: 60,
            ..SuiteConfig::default()
        },
        seed,
    )
    .map_err(|e| e.to_string())?;
    let base = base_model(&model, seed).map_err(|e| e.to_string())?;
    let scale = if method == Method::Prefix { 3.0 } else { 10.0 };
    let cfg = TrainConfig {
        epochs: 4,
        early_epoch: 2,
        adapter: AdapterConfig {
            prefix_len: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
        },
        ..TrainConfig::new(method, seed).scaled(scale)
    };
    let cfg = TrainConfig {
        lr_grid: cfg.lr_grid[..1].to_vec(),
        ..cfg
    };
    let outcomes = train_suite(&base, &suite, &cfg, false).map_err(|e| e.to_string())?;
    let m = tupate_matrix(&outcomes, Which::Best).map_err(|e| e.to_string())?;
    let k = suite.tasks.len();
    let values = (0..k * k).map(|i| m.at(i / k, i % k)).collect();
    Ok(Heatmap {
        size: k,
        values,
        clusters: suite.tasks.iter().map(|t| t.spec.cluster as u32).collect(),
    })
}

#[wasm_bindgen(js_name = tupateHeatmap)]
pub fn tupate_heatmap_js(
    method: &str,
    tasks_per_cluster: usize,
    spread: f64,
    seed: u32,
) -> Result<Heatmap, JsValue> {
    tupate_heatmap(method, tasks_per_cluster, spread, seed).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_at_bert_base_shape() {
        assert_eq!(
            param_counts("lora", 12, 768, 3072, 20, 8).unwrap(),
            vec![294_912.0, 24_576.0]
        );
        assert_eq!(
            param_counts("prefix", 12, 768, 3072, 20, 8).unwrap(),
            vec![368_640.0, 30_720.0]
        );
        assert!(param_counts("nope", 12, 768, 3072, 20, 8).is_err());
    }

    #[test]
    fn ranking_a_single_target() {
        let r = rank_target(&[0.1, 0.9, 0.5], &[1.0, 3.0, 2.0]).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        assert_eq!(r.best_rank, 1);
        assert_eq!(r.ndcg, 1.0);
        assert!(r.random_ndcg < 1.0);
        assert!(rank_target(&[0.1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn heatmap_is_symmetric_with_zero_diagonal() {
        let h = tupate_heatmap("bias", 2, 0.5, 7).unwrap();
        assert_eq!(h.size, 4);
        assert_eq!(h.clusters, vec![0, 0, 1, 1]);
        for s in 0..4 {
            assert_eq!(h.values[s * 4 + s], 0.0);
            for t in 0..4 {
                assert!((h.values[s * 4 + t] - h.values[t * 4 + s]).abs() < 1e-12);
            }
        }
        assert!(tupate_heatmap("full", 2, 0.5, 7).is_err());
    }
}
