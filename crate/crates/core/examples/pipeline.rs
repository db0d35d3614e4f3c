//! End-to-end run on a small synthetic suite, printing timings and metrics.
//! Sizes come from environment variables so the run can be tuned by hand.

use std::env;
use std::time::Instant;

use transferlab::lab::{
    base_model, datasize_matrix, evaluate_predictor, families, train_suite, transfer_gain_matrix,
    tupate_matrix, Checkpoint, TrainConfig, Which,
};
use transferlab::model::ModelConfig;
use transferlab::peft::{AdapterConfig, Method};
use transferlab::rank::{Grouping, Regime};
use transferlab::tasks::{gen_suite, SuiteConfig};

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = var("SEED", 7);
    let model = ModelConfig {
        vocab_size: var("VOCAB", 32),
        max_seq_len: var("SEQ", 8),
        hidden_size: var("D", 16),
        n_heads: 2,
        n_layers: var("LAYERS", 2),
        ffn_size: var("FFN", 32),
        n_classes: 2,
    };
    let suite_cfg = SuiteConfig {
        vocab_size: model.vocab_size,
        seq_len: model.max_seq_len,
        train_size: var("TRAIN", 400),
        val_size: var("VAL", 100),
        test_size: var("TEST", 200),
        signal: var("SIGNAL", 1.0),
        cluster_spread: var("SPREAD", 0.5),
        ..SuiteConfig::default()
    };
    let adapter = AdapterConfig {
        prefix_len: var("PREFIX", 4),
        lora_rank: var("RANK", 4),
        lora_alpha: var("ALPHA", 4.0),
    };
    let t0 = Instant::now();
    let suite = gen_suite(&suite_cfg, seed)?;
    let limited = suite.limited(var("LIMIT", 40), seed)?;
    let base = base_model(&model, seed)?;
    let fam = families(&suite);
    println!("suite {:.1}s", t0.elapsed().as_secs_f64());
    let epochs: usize = var("EPOCHS", 10);
    let cfg_for = |m: Method| TrainConfig {
        epochs,
        early_epoch: 2.min(epochs),
        adapter,
        ..TrainConfig::new(m, seed)
            .scaled(var(&format!("SCALE_{}", m.as_str().to_uppercase()), 10.0))
    };

    let gain_method: Method = env::var("GAIN_METHOD").unwrap_or("lora".into()).parse()?;
    let mut outcomes = std::collections::HashMap::new();
    let methods: Vec<Method> = env::var("METHODS")
        .unwrap_or("prefix,bias,lora".into())
        .split(',')
        .map(|m| m.parse())
        .collect::<Result<_, _>>()?;
    for &m in &methods {
        let t = Instant::now();
        let out = train_suite(&base, &suite, &cfg_for(m), false)?;
        let accs: Vec<String> = out
            .iter()
            .map(|o| format!("{:.2}", o.best.val_accuracy))
            .collect();
        println!(
            "train {m}: {:.1}s val [{}]",
            t.elapsed().as_secs_f64(),
            accs.join(" ")
        );
        let sim = tupate_matrix(&out, Which::Best)?;
        let (mut within, mut cross, mut nw, mut nc) = (0.0, 0.0, 0, 0);
        for s in 0..10 {
            for t in 0..10 {
                if s == t {
                    continue;
                }
                if suite.tasks[s].spec.cluster == suite.tasks[t].spec.cluster {
                    within += sim.at(s, t);
                    nw += 1;
                } else {
                    cross += sim.at(s, t);
                    nc += 1;
                }
            }
        }
        println!(
            "  cosine within {:.4} cross {:.4}",
            within / nw as f64,
            cross / nc as f64
        );
        outcomes.insert(m, out);
    }
    if !var("GAINS", true) {
        return Ok(());
    }
    let t = Instant::now();
    let sources: Vec<Checkpoint> = outcomes[&gain_method]
        .iter()
        .map(|o| o.best.clone())
        .collect();
    let tcfg = TrainConfig {
        epochs: var("TEPOCHS", epochs),
        ..cfg_for(gain_method)
    };
    let tr = transfer_gain_matrix(&base, &sources, &limited, &tcfg, false)?;
    println!(
        "gains {:.1}s direct {:?}",
        t.elapsed().as_secs_f64(),
        tr.direct_accuracy
    );
    let g = &tr.gains;
    let (mut within, mut cross, mut nw, mut nc) = (0.0, 0.0, 0, 0);
    for s in 0..10 {
        for t in 0..10 {
            if s == t {
                continue;
            }
            if suite.tasks[s].spec.cluster == suite.tasks[t].spec.cluster {
                within += g.at(s, t);
                nw += 1;
            } else {
                cross += g.at(s, t);
                nc += 1;
            }
        }
    }
    println!(
        "  gain within {:.4} cross {:.4}",
        within / nw as f64,
        cross / nc as f64
    );
    let rnd = transferlab::rank::random_ndcg(g, &transferlab::rank::all_candidates(g))?;
    println!("  random ndcg {rnd:.4} rho {:.1}", 5.0);
    for &m in &methods {
        for w in [Which::Early, Which::Best] {
            let s = tupate_matrix(&outcomes[&m], w)?;
            let r = evaluate_predictor(
                "tupate",
                &s,
                g,
                Grouping::AllClass,
                &fam,
                Regime::FullToLimited,
            )?;
            println!(
                "  {m} {w:?}: rho {:.2} ndcg {:.4}",
                r.metrics.rho, r.metrics.ndcg
            );
        }
    }
    let ds = datasize_matrix(&suite)?;
    let r = evaluate_predictor(
        "datasize",
        &ds,
        g,
        Grouping::AllClass,
        &fam,
        Regime::FullToLimited,
    )?;
    println!(
        "  datasize: rho {:.2} ndcg {:.4}",
        r.metrics.rho, r.metrics.ndcg
    );
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
