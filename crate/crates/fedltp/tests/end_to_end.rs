//! Integration tests: the orchestrator against a hand-rolled reference
//! loop, ticket caching, snapshot spill, and CLI behavior.

use fedltp::config::{ExperimentConfig, Scheme};
use fedltp::data::EpochSampler;
use fedltp::lth::TicketFile;
use fedltp::nn::{clip_gradient, GradientVector};
use fedltp::orchestrator::Experiment;
use fedltp::rng::{purpose, RngStream};

#[allow(clippy::field_reassign_with_default)]
fn small_config(scheme: Scheme, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scheme = scheme;
    cfg.seed = seed;
    cfg.clients = 4;
    cfg.sample_ratio = 0.5; // K = 2
    cfg.rounds = 1;
    cfg.local_steps = 5;
    cfg.batch_size = 10;
    cfg.sigma = 0.0;
    cfg.lambda_val = f64::INFINITY; // validation noise off
    cfg.ticket_count = 2;
    cfg.ticket_iters = 40;
    cfg.prune_degree = 0.3;
    cfg.hidden = vec![6];
    cfg.data.dim = 5;
    cfg.data.classes = 3;
    cfg.data.public_size = 90;
    cfg.data.private_size = 400;
    cfg.data.separation = 6.0;
    cfg
}

/// With noise off and homogeneous masks, one round of the orchestrator is
/// exactly a plain FedAvg round on the masked model: replicate it with a
/// short reference loop sharing only the model primitives and the stream
/// derivations.
#[test]
fn round_equals_reference_fedavg_when_noiseless() {
    let cfg = small_config(Scheme::FedOneShot, 11);
    let mut experiment = Experiment::new(cfg.clone()).unwrap();
    let start_global = experiment.global().clone();
    experiment.run().unwrap();

    // Reference: sample the same cohort, run tau plain momentum-SGD steps
    // per client, average the deltas.
    let data = experiment.dataset().clone();
    let mut cohort_rng = RngStream::derive(cfg.seed, purpose::COHORT, &[0]);
    let cohort = cohort_rng.sample_without_replacement(cfg.clients, 2);
    let d = start_global.param_count();
    let mut mean_delta = vec![0.0; d];
    for &client in &cohort {
        let train = experiment.client_train_indices(client).to_vec();
        let mut rng = RngStream::derive(cfg.seed, purpose::CLIENT_UPDATE, &[client as u64, 0]);
        let mut theta = start_global.clone();
        let mut buffer = GradientVector::zeros(d);
        let mut sampler = EpochSampler::new(train.clone(), cfg.batch_size.min(train.len()));
        for _ in 0..cfg.local_steps {
            let batch = sampler.next_batch(&mut rng).to_vec();
            let (x, y) = data.gather(&batch);
            let (_, grad) = theta.loss_and_grad(&x, &y).unwrap();
            let clipped = clip_gradient(&grad, cfg.clip);
            theta.sgd_momentum_step(&clipped, cfg.learning_rate, cfg.momentum, &mut buffer);
        }
        for (m, (a, b)) in mean_delta.iter_mut().zip(
            theta
                .params()
                .values()
                .iter()
                .zip(start_global.params().values()),
        ) {
            *m += (a - b) / cohort.len() as f64;
        }
    }
    let reference: Vec<f64> = start_global
        .params()
        .values()
        .iter()
        .zip(&mean_delta)
        .map(|(p, m)| p + m)
        .collect();
    for (got, want) in experiment.global().params().values().iter().zip(&reference) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    // with noise off, the round's validation total is the sum of true counts
    let rec = &experiment.records()[0];
    assert_eq!(rec.noisy_val_total.fract(), 0.0);
}

#[test]
fn cached_tickets_reproduce_the_uncached_run() {
    let dir = std::env::temp_dir().join(format!("fedltp-tickets-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let tickets_path = dir.join("tickets.json");

    let mut cfg = small_config(Scheme::FedOneShot, 21);
    cfg.rounds = 2;
    let mut plain = Experiment::new(cfg.clone()).unwrap();
    plain.run().unwrap();

    // Produce the cache exactly as `pretrain` would, then run from it.
    {
        use fedltp::lth::{generate_winning_tickets, TicketGenConfig};
        use fedltp::nn::mlp_layers;
        let mut rng = RngStream::derive(cfg.seed, purpose::DATA_PUBLIC, &[]);
        let public = fedltp::data::synthesize_blobs(
            cfg.data.classes,
            cfg.data.dim,
            cfg.data.public_size,
            cfg.data.separation,
            &mut rng,
        )
        .unwrap();
        let layers = mlp_layers(cfg.data.dim, &cfg.hidden, cfg.data.classes);
        let tickets = generate_winning_tickets(
            &public,
            &layers,
            &TicketGenConfig {
                count: cfg.ticket_count,
                train_iters: cfg.ticket_iters,
                prune_degree: cfg.prune_degree,
                mode: cfg.prune_mode,
                learning_rate: cfg.lth_learning_rate,
                batch_size: cfg.batch_size,
            },
            cfg.seed,
        )
        .unwrap();
        TicketFile::save(&tickets_path, &layers, &tickets).unwrap();
    }
    let mut cached_cfg = cfg.clone();
    cached_cfg.tickets_path = Some(tickets_path.clone());
    let mut cached = Experiment::new(cached_cfg).unwrap();
    cached.run().unwrap();

    assert_eq!(plain.records(), cached.records());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn snapshot_spill_matches_in_memory() {
    let dir = std::env::temp_dir().join(format!("fedltp-snapshots-{}", std::process::id()));
    let mut cfg = small_config(Scheme::FedIterative, 31);
    cfg.rounds = 3;
    cfg.sigma = 0.4;
    cfg.lambda_val = 10.0;
    let mut in_memory = Experiment::new(cfg.clone()).unwrap();
    in_memory.run().unwrap();
    let mut spilled_cfg = cfg.clone();
    spilled_cfg.snapshot_dir = Some(dir.clone());
    let mut spilled = Experiment::new(spilled_cfg).unwrap();
    spilled.run().unwrap();
    assert_eq!(in_memory.records(), spilled.records());
    assert_eq!(
        in_memory.final_model().unwrap(),
        spilled.final_model().unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn recompute_masks_keeps_nesting() {
    let mut cfg = small_config(Scheme::FedIterative, 41);
    cfg.rounds = 3;
    cfg.sigma = 0.2;
    cfg.lambda_val = 10.0;
    cfg.recompute_masks = true;
    cfg.further_prune = 0.05;
    cfg.hidden = vec![10];
    let mut experiment = Experiment::new(cfg).unwrap();
    experiment.run().unwrap();
    assert_eq!(experiment.records().len(), 3);
    // the global support can only shrink under recomputation
    let final_ones = experiment.global().mask().ones();
    assert!(final_ones <= experiment.global().param_count());
}

#[test]
fn iterative_validation_polls_every_client() {
    let mut cfg = small_config(Scheme::FedIterative, 51);
    cfg.sigma = 0.3;
    cfg.lambda_val = 5.0;
    let mut experiment = Experiment::new(cfg.clone()).unwrap();
    experiment.run().unwrap();
    let rec = &experiment.records()[0];
    assert_eq!(rec.per_client_noisy.len(), cfg.clients);
    assert!((rec.noisy_val_total - rec.per_client_noisy.iter().sum::<f64>()).abs() < 1e-9);
    // true scores are withheld unless debug mode asks for them
    assert!(rec.per_client_true.is_none());
    let mut debug_cfg = cfg.clone();
    debug_cfg.debug_true_scores = true;
    let mut debug_experiment = Experiment::new(debug_cfg).unwrap();
    debug_experiment.run().unwrap();
    assert!(debug_experiment.records()[0].per_client_true.is_some());
}

// ---------------------------------------------------------------------------
// CLI behavior
// ---------------------------------------------------------------------------

fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_fedltp"))
}

#[test]
fn cli_usage_errors_are_exit_code_2() {
    let out = bin().arg("nonsense").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["run", "--bogus", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_config_errors_are_exit_code_3() {
    let dir = std::env::temp_dir().join(format!("fedltp-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.conf");
    std::fs::write(&bad, "rounds = banana\n").unwrap();
    let out = bin()
        .args(["run", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("rounds"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn cli_accountant_prints_a_table() {
    let out = bin()
        .args([
            "accountant",
            "--sigma",
            "1.4",
            "--q",
            "0.015625",
            "--tau",
            "300",
            "--rounds",
            "3",
            "--lambda-val",
            "20",
            "--delta",
            "1e-3",
            "--mode",
            "per-round",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.trim_end().lines().collect();
    assert_eq!(lines.len(), 4, "stdout: {stdout}");
    assert!(lines[0].starts_with("t\tepsilon"));
    // epsilon column is nondecreasing
    let eps: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(eps.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn cli_pretrain_then_run_from_cache() {
    let dir = std::env::temp_dir().join(format!("fedltp-cli-pre-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let conf = dir.join("exp.conf");
    let tickets = dir.join("tickets.json");
    std::fs::write(
        &conf,
        format!(
            "scheme = one-shot\nclients = 4\nsample_ratio = 0.5\nrounds = 1\nlocal_steps = 4\n\
             sigma = 0.5\nticket_count = 2\nticket_iters = 20\nhidden = 6\n\
             tickets_path = {}\n[data]\ndim = 5\nclasses = 3\npublic_size = 60\nprivate_size = 300\n",
            tickets.display()
        ),
    )
    .unwrap();
    let out = bin()
        .args([
            "pretrain",
            "--config",
            conf.to_str().unwrap(),
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(tickets.exists());
    // sanity: the cache is a valid ticket file
    let (_, loaded) = TicketFile::load(&tickets).unwrap();
    assert_eq!(loaded.len(), 2);
    let out = bin()
        .args([
            "run",
            "--config",
            conf.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            dir.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("out/metrics.csv").exists());
    assert!(dir.join("out/summary.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}
