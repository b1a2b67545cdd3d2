use htsr_core::schedule::SchedulerConfig;
use htsr_core::train::{
    build_model, clip_global_norm, evaluate, forward_backward, synthetic_corpus, token_nll, train_run, Corpus,
    ModelConfig, OptimizerKind, TrainConfig,
};

fn small() -> ModelConfig {
    ModelConfig { hidden: 16, intermediate: 32, heads: 2, layers: 2, vocab: 256, context: 16 }
}

fn config(steps: usize, lr: f64, scheduler: SchedulerConfig) -> TrainConfig {
    TrainConfig {
        lr,
        steps,
        warmup_fraction: 0.1,
        batch: 4,
        seq_len: 16,
        clip: 1.0,
        seed: 31,
        optimizer: OptimizerKind::AdamW,
        scheduler,
        min_lr_ratio: 0.1,
        eval_windows: 32,
        analysis_threads: 1,
    }
}

#[test]
fn untrained_perplexity_is_near_vocab_size() {
    let corpus = Corpus::split_fraction(&synthetic_corpus(20_000, 3), 0.2).unwrap();
    let params = build_model(&small(), 0).unwrap();
    let held_out = corpus.validation_batches(4, 16, 64).unwrap();
    let (ce, ppl) = evaluate(&small(), &params, &held_out).unwrap();
    assert!((ce - 256f64.ln()).abs() < 0.05 * 256f64.ln(), "{ce}");
    assert!((ppl - 256.0).abs() < 0.1 * 256.0, "{ppl}");
}

#[test]
fn perplexity_matches_token_product() {
    let cfg = ModelConfig { context: 20, ..small() };
    let corpus = Corpus::split_fraction(&synthetic_corpus(20_000, 4), 0.2).unwrap();
    let params = build_model(&cfg, 1).unwrap();
    // 5 windows × 20 tokens = 100 predictions.
    let held_out = corpus.validation_batches(5, 20, 5).unwrap();
    let (_, ppl) = evaluate(&cfg, &params, &held_out).unwrap();
    let nll: Vec<f64> = held_out.iter().flat_map(|b| token_nll(&cfg, &params, b).unwrap()).collect();
    assert_eq!(nll.len(), 100);
    let product: f64 = nll.iter().map(|l| (-l).exp()).product();
    let oracle = product.powf(-1.0 / nll.len() as f64);
    assert!((ppl - oracle).abs() <= 1e-9 * oracle, "{ppl} vs {oracle}");
}

#[test]
fn memorizer_reaches_unit_perplexity() {
    let corpus = Corpus::split(&vec![b'a'; 4_000], 3_000).unwrap();
    let mut cfg = config(150, 1e-2, SchedulerConfig::uniform(0.0));
    cfg.eval_windows = 16;
    let out = train_run(&small(), &cfg, &corpus).unwrap();
    let ppl = out.log.perplexity.unwrap();
    assert!(ppl < 1.01, "perplexity {ppl}");
}

#[test]
fn identical_configs_give_identical_runs() {
    let corpus = Corpus::split_fraction(&synthetic_corpus(20_000, 5), 0.1).unwrap();
    let mut sched = SchedulerConfig::alpha_decay(0.1, 0.67, 5.0);
    sched.interval = 10;
    let a = train_run(&small(), &config(40, 3e-3, sched.clone()), &corpus).unwrap();
    let b = train_run(&small(), &config(40, 3e-3, sched), &corpus).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.final_val_loss.unwrap().to_bits(), b.log.final_val_loss.unwrap().to_bits());
}

#[test]
fn threaded_analysis_does_not_change_the_run() {
    let corpus = Corpus::split_fraction(&synthetic_corpus(20_000, 6), 0.1).unwrap();
    let mut sched = SchedulerConfig::alpha_decay(0.1, 0.67, 5.0);
    sched.interval = 10;
    let serial = config(30, 3e-3, sched);
    let threaded = TrainConfig { analysis_threads: 4, ..serial.clone() };
    let a = train_run(&small(), &serial, &corpus).unwrap();
    let b = train_run(&small(), &threaded, &corpus).unwrap();
    assert_eq!(a.log, b.log);
}

#[test]
fn clipping_preserves_direction_under_loss_scaling() {
    let cfg = small();
    let corpus = Corpus::split_fraction(&synthetic_corpus(20_000, 7), 0.1).unwrap();
    let params = build_model(&cfg, 2).unwrap();
    let batch = corpus.sample_batch(4, 16, 0, 0).unwrap();
    let (_, grads) = forward_backward(&cfg, &params, &batch).unwrap();
    let norm = grads.global_norm();
    let clip = 0.5 * norm;
    let mut plain = grads.clone();
    clip_global_norm(&mut plain, clip);
    for c in [3.0, 1e3] {
        let mut scaled = grads.clone();
        scaled.tensors_mut().iter_mut().for_each(|t| t.mapv_inplace(|g| c * g));
        let stats = clip_global_norm(&mut scaled, clip);
        assert!((stats.grad_norm - c * norm).abs() <= 1e-12 * c * norm);
        assert!((scaled.global_norm() - clip).abs() <= 1e-12 * clip);
        for (a, b) in scaled.tensors().iter().zip(plain.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * clip));
        }
    }
}

#[test]
fn gradient_norm_metric_starts_uniform() {
    use htsr_core::schedule::{AssignFn, MetricKind};
    let corpus = Corpus::split_fraction(&synthetic_corpus(20_000, 8), 0.1).unwrap();
    let sched = SchedulerConfig {
        assign: AssignFn::SigmoidLike { beta: 4.0 },
        metric: MetricKind::GradNorm,
        interval: 10,
        ..SchedulerConfig::uniform(0.1)
    };
    let log = train_run(&small(), &config(20, 3e-3, sched), &corpus).unwrap().log;
    assert!(log.recomputes[0].plan.assignments.values().all(|&d| d == 0.1));
    let later = &log.recomputes[1].plan;
    assert!(later.assignments.values().any(|&d| d != 0.1));
    assert!(later.assignments.values().all(|&d| d > 0.0 && d < 0.2));
}
