use super::*;
use crate::numerics::Rng;
use crate::peft::{init_adapter, trainable_mask, AdapterConfig, Method};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_seq_len: 6,
        hidden_size: 8,
        n_heads: 2,
        n_layers: 2,
        ffn_size: 12,
        n_classes: 3,
    }
}

fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
    let mut rng = Rng::new(seed);
    let s = cfg.max_seq_len - 1;
    let tokens = (0..n * s)
        .map(|_| rng.below(cfg.vocab_size) as u32)
        .collect();
    let labels = (0..n).map(|_| rng.below(cfg.n_classes) as u32).collect();
    Batch::new(tokens, labels, s).unwrap()
}

fn perturbed(adapter: &AdapterParams<f32>, seed: u64) -> AdapterParams<f32> {
    let mut a = adapter.clone();
    let mut rng = Rng::new(seed);
    for (_, t) in a.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.normal(0.0, 0.2) as f32;
        }
    }
    a
}

fn adapter_cfg() -> AdapterConfig {
    AdapterConfig {
        prefix_len: 3,
        lora_rank: 2,
        lora_alpha: 4.0,
    }
}

#[test]
fn uniform_logits_give_ln2() {
    let cfg = ModelConfig {
        n_classes: 2,
        ..tiny()
    };
    let mut p = ModelParams::<f64>::init(&cfg, &mut Rng::new(0)).unwrap();
    p.classifier.weight.fill(0.0);
    let b = batch(&cfg, 4, 1);
    let loss = loss_value(&p, None, &b).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny();
    let p = ModelParams::<f32>::init(&cfg, &mut Rng::new(2)).unwrap();
    let b = batch(&cfg, 3, 3);
    let err = gradient_check(
        &p,
        None,
        &b,
        &trainable_mask(Method::Full, &cfg),
        200,
        &mut Rng::new(4),
    )
    .unwrap();
    assert!(err <= 1e-3, "full: {err}");
    for method in Method::PEFT {
        let a = init_adapter(method, &cfg, &adapter_cfg(), &mut Rng::new(5)).unwrap();
        let a = perturbed(&a, 6);
        let mask = trainable_mask(method, &cfg);
        let err = gradient_check(&p, Some(&a), &b, &mask, 100, &mut Rng::new(7)).unwrap();
        assert!(err <= 1e-3, "{method}: {err}");
    }
}

#[test]
fn mask_limits_gradient_set() {
    let cfg = tiny();
    let p = ModelParams::<f32>::init(&cfg, &mut Rng::new(2)).unwrap();
    let a = init_adapter(Method::Bias, &cfg, &adapter_cfg(), &mut Rng::new(5)).unwrap();
    let mask = trainable_mask(Method::Bias, &cfg);
    let (_, grads) = loss_and_grads(&p, Some(&a), &batch(&cfg, 2, 1), &mask).unwrap();
    let got: Vec<&str> = grads.keys().map(String::as_str).collect();
    let mut want: Vec<&str> = mask.iter().collect();
    let mut got_sorted = got.clone();
    got_sorted.sort();
    want.sort();
    assert_eq!(got_sorted, want);
}

#[test]
fn bias_delta_grad_equals_bias_grad() {
    let cfg = tiny();
    let p = ModelParams::<f64>::init(&cfg, &mut Rng::new(8)).unwrap();
    let a = init_adapter::<f64>(Method::Bias, &cfg, &adapter_cfg(), &mut Rng::new(0)).unwrap();
    let mut names: Vec<String> = trainable_mask(Method::Bias, &cfg)
        .iter()
        .map(String::from)
        .collect();
    names.push("layers.1.attn.k.bias".into());
    names.push("layers.0.ffn.up.bias".into());
    let mask = TrainableMask::from_names(names);
    let (_, g) = loss_and_grads(&p, Some(&a), &batch(&cfg, 3, 9), &mask).unwrap();
    assert_eq!(g["layers.1.attn.k.bias"], g["layers.1.bitfit.k"]);
    assert_eq!(g["layers.0.ffn.up.bias"], g["layers.0.bitfit.up"]);
}

#[test]
fn empty_and_unknown_masks() {
    let cfg = tiny();
    let p = ModelParams::<f32>::init(&cfg, &mut Rng::new(0)).unwrap();
    let b = batch(&cfg, 1, 0);
    let empty = TrainableMask::from_names(Vec::<String>::new());
    assert!(matches!(
        loss_and_grads(&p, None, &b, &empty),
        Err(Error::EmptyMask)
    ));
    let unknown = TrainableMask::from_names(vec!["nope".to_string()]);
    assert!(loss_and_grads(&p, None, &b, &unknown).is_err());
}

#[test]
fn identity_adapters_reproduce_base_logits() {
    let cfg = tiny();
    let p = ModelParams::<f32>::init(&cfg, &mut Rng::new(3)).unwrap();
    let b = batch(&cfg, 4, 2);
    let base = forward(&p, None, &b).unwrap().logits;
    for method in [Method::Bias, Method::Lora] {
        let a = init_adapter(method, &cfg, &adapter_cfg(), &mut Rng::new(1)).unwrap();
        assert!(
            forward(&p, Some(&a), &b).unwrap().logits.bit_eq(&base),
            "{method}"
        );
    }
    let empty = AdapterConfig {
        prefix_len: 0,
        ..adapter_cfg()
    };
    let a = init_adapter(Method::Prefix, &cfg, &empty, &mut Rng::new(1)).unwrap();
    assert!(forward(&p, Some(&a), &b).unwrap().logits.bit_eq(&base));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny();
    let p = ModelParams::<f32>::init(&cfg, &mut Rng::new(3)).unwrap();
    let a = perturbed(
        &init_adapter(Method::Prefix, &cfg, &adapter_cfg(), &mut Rng::new(1)).unwrap(),
        2,
    );
    let b = batch(&cfg, 4, 2);
    let x = forward(&p, Some(&a), &b).unwrap();
    let y = forward(&p, Some(&a), &b).unwrap();
    assert!(x.logits.bit_eq(&y.logits));
    assert_eq!(x.layer_outputs.len(), cfg.n_layers);
    assert_eq!(
        x.last_hidden.dims(),
        &[4, cfg.max_seq_len - 1, cfg.hidden_size]
    );
}

#[test]
fn batch_validation() {
    let cfg = tiny();
    let p = ModelParams::<f32>::init(&cfg, &mut Rng::new(3)).unwrap();
    let bad_token = Batch::new(vec![99, 0], vec![0], 2).unwrap();
    assert!(forward(&p, None, &bad_token).is_err());
    let bad_label = Batch::new(vec![1, 0], vec![7], 2).unwrap();
    assert!(forward(&p, None, &bad_label).is_err());
    assert!(Batch::new(vec![1, 0, 3], vec![0], 2).is_err());
}

#[test]
fn evaluate_counts_argmax_hits() {
    let cfg = ModelConfig {
        n_classes: 2,
        ..tiny()
    };
    let mut p = ModelParams::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
    // constant predictor: always class 1
    p.classifier.weight.fill(0.0);
    p.classifier.bias = Tensor::vector(vec![0.0, 1.0]);
    let mut b = batch(&cfg, 6, 4);
    b.labels = vec![1; 6];
    assert_eq!(evaluate(&p, None, &b).unwrap(), 1.0);
    b.labels = vec![0, 1, 0, 1, 0, 1];
    assert_eq!(evaluate(&p, None, &b).unwrap(), 0.5);
    let empty = Batch {
        tokens: vec![],
        labels: vec![],
        seq_len: 5,
    };
    assert!(matches!(
        evaluate(&p, None, &empty),
        Err(Error::EmptyDataset)
    ));
}
