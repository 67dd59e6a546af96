//! The federated training loop: initialization via pretrained tickets and
//! server-side pruning, cohort sampling, differentially private local
//! updates, heterogeneous aggregation, Laplace-noised validation, ledger
//! advancement, budget-based termination, and final-model selection by the
//! highest noisy validation total.

use std::path::PathBuf;

use crate::config::{ExperimentConfig, Scheme, SourceKind};
use crate::data::partition::{dirichlet_partition, split_train_val_test};
use crate::data::{idx, synthesize_blobs, Dataset, EpochSampler};
use crate::dp::{
    add_gaussian_noise, perturb_score, Accountant, BudgetDecision, GaussianParams, LaplaceParams,
    PrivacyLedger, RdpOrderGrid,
};
use crate::error::{Error, Result};
use crate::lth::{
    generate_winning_tickets, select_ticket_softmax, TicketFile, TicketGenConfig, WinningTicket,
};
use crate::matrix::Matrix;
use crate::metrics::MetricsRow;
use crate::nn::{clip_gradient, mlp_layers, GradientVector, Mask, MaskedModel};
use crate::pruning::{
    aggregate, assign_models, fed_iterative, fed_one_shot, nested_masks, AssignmentState,
    ClientModelSpec, RetentionSchedule,
};
use crate::rng::{purpose, RngStream};

/// Why a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    RoundLimit,
    Budget,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::RoundLimit => "round-limit",
            StopReason::Budget => "budget",
        }
    }
}

/// Everything recorded about one communication round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub snapshot_id: usize,
    /// Sum of all clients' noisy validation scores.
    pub noisy_val_total: f64,
    pub per_client_noisy: Vec<f64>,
    /// True correct counts, kept only in debug mode.
    pub per_client_true: Option<Vec<usize>>,
    pub test_accuracy: f64,
    pub epsilon: f64,
    pub comm_bits_cumulative: f64,
}

/// End-of-run report.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub scheme: &'static str,
    pub seed: u64,
    pub rounds_executed: usize,
    pub stop_reason: StopReason,
    /// Round whose snapshot was selected as the final model; `None` when no
    /// round ran.
    pub selected_round: Option<u64>,
    pub final_test_accuracy: f64,
    pub last_round_test_accuracy: Option<f64>,
    pub epsilon_final: f64,
    pub comm_bits_total: f64,
    pub param_count: usize,
    pub retention_p: f64,
    pub sample_rate: f64,
}

/// Hyperparameters of one private local update.
#[derive(Clone, Copy, Debug)]
pub struct LocalUpdateOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub sigma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Run `steps` noisy mini-batch steps from the received model and return the
/// model delta (zero off-support). Batches are drawn without replacement
/// with a reshuffle per epoch; each step clips the gradient, adds Gaussian
/// noise, and applies a masked momentum-SGD step. The momentum buffer
/// starts at zero for every call.
pub fn dp_local_update(
    model: &MaskedModel,
    data: &Dataset,
    train: &[usize],
    opts: &LocalUpdateOpts,
    rng: &mut RngStream,
) -> Result<GradientVector> {
    if train.is_empty() {
        return Err(Error::invalid("client has an empty train shard"));
    }
    let batch = opts.batch_size.min(train.len());
    let gaussian = GaussianParams::new(opts.sigma, opts.clip)?;
    let mut theta = model.clone();
    let mut buffer = GradientVector::zeros(model.param_count());
    let mut sampler = EpochSampler::new(train.to_vec(), batch);
    for _ in 0..opts.steps {
        let batch_idx = sampler.next_batch(rng).to_vec();
        let (x, y) = data.gather(&batch_idx);
        let (_, grad) = theta.loss_and_grad(&x, &y)?;
        let clipped = clip_gradient(&grad, opts.clip);
        let noised = add_gaussian_noise(&clipped, &gaussian, theta.mask(), rng);
        theta.sgd_momentum_step(&noised, opts.learning_rate, opts.momentum, &mut buffer);
    }
    let delta: Vec<f64> = theta
        .params()
        .values()
        .iter()
        .zip(model.params().values())
        .map(|(a, b)| a - b)
        .collect();
    Ok(GradientVector::from_values(delta))
}

/// Index of the record with the highest noisy validation total; ties go to
/// the earliest round (less privacy spent).
pub fn select_final_model(records: &[RoundRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::invalid("no rounds recorded"));
    }
    let mut best = 0;
    for (i, r) in records.iter().enumerate().skip(1) {
        if r.noisy_val_total > records[best].noisy_val_total {
            best = i;
        }
    }
    Ok(best)
}

struct ClientState {
    train: Vec<usize>,
    val_x: Matrix,
    val_y: Vec<u32>,
    clamp_warned: bool,
}

/// Compressed global snapshot: the on-support values plus a mask version.
struct Snapshot {
    support_values: SnapshotStorage,
    mask_version: usize,
}

enum SnapshotStorage {
    Memory(Vec<f64>),
    Disk(PathBuf),
}

impl Snapshot {
    fn values(&self) -> Result<Vec<f64>> {
        match &self.support_values {
            SnapshotStorage::Memory(v) => Ok(v.clone()),
            SnapshotStorage::Disk(path) => {
                let bytes =
                    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::invalid("snapshot file is not a multiple of 8 bytes"));
                }
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect())
            }
        }
    }
}

/// A fully initialized experiment; drive it with [`Experiment::run`].
pub struct Experiment {
    cfg: ExperimentConfig,
    private: Dataset,
    global: MaskedModel,
    specs: Vec<ClientModelSpec>,
    schedule: Option<RetentionSchedule>,
    assignment: AssignmentState,
    clients: Vec<ClientState>,
    ledger: PrivacyLedger,
    accountant: Accountant,
    records: Vec<RoundRecord>,
    snapshots: Vec<Snapshot>,
    mask_versions: Vec<Mask>,
    test_x: Matrix,
    test_y: Vec<u32>,
    retention_p: f64,
    comm_bits: f64,
    stop_reason: Option<StopReason>,
}

fn build_source(
    kind: &SourceKind,
    size: usize,
    data: &crate::config::DataConfig,
    seed: u64,
    purpose_tag: u64,
) -> Result<Dataset> {
    match kind {
        SourceKind::Blobs => {
            let mut rng = RngStream::derive(seed, purpose_tag, &[]);
            synthesize_blobs(data.classes, data.dim, size, data.separation, &mut rng)
        }
        SourceKind::Idx { images, labels } => {
            if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                return Err(Error::invalid(
                    "idx source needs both images and labels paths",
                ));
            }
            idx::load_idx_files(images, labels, data.idx_classes)
        }
    }
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;

        // Data pools.
        let (public, private) = if let Some(fraction) = cfg.data.carve_public_fraction {
            let full = build_source(
                &cfg.data.private,
                cfg.data.private_size,
                &cfg.data,
                seed,
                purpose::DATA_PRIVATE,
            )?;
            let mut rng = RngStream::derive(seed, purpose::CARVE, &[]);
            full.carve(fraction, &mut rng)?
        } else {
            let public = build_source(
                &cfg.data.public,
                cfg.data.public_size,
                &cfg.data,
                seed,
                purpose::DATA_PUBLIC,
            )?;
            let private = build_source(
                &cfg.data.private,
                cfg.data.private_size,
                &cfg.data,
                seed,
                purpose::DATA_PRIVATE,
            )?;
            (public, private)
        };
        if public.dim() != private.dim() || public.class_count() != private.class_count() {
            return Err(Error::invalid(
                "public and private pools must share feature dim and class count",
            ));
        }

        // Partition and per-client splits.
        let mut part_rng = RngStream::derive(seed, purpose::PARTITION, &[]);
        let shards = dirichlet_partition(
            private.labels(),
            cfg.clients,
            cfg.dirichlet_alpha,
            &mut part_rng,
        )?;
        let f_tr = 1.0 - cfg.val_fraction - cfg.test_fraction;
        let mut clients = Vec::with_capacity(cfg.clients);
        let mut test_all: Vec<usize> = Vec::new();
        for (client, shard) in shards.iter().enumerate() {
            let mut split_rng = RngStream::derive(seed, purpose::SPLIT, &[client as u64]);
            let (train, val, test) = split_train_val_test(
                shard,
                private.labels(),
                (f_tr, cfg.val_fraction, cfg.test_fraction),
                &mut split_rng,
            )?;
            if train.is_empty() {
                return Err(Error::invalid(format!(
                    "client {client} has no training data; shard too small"
                )));
            }
            let (val_x, val_y) = private.gather(&val);
            test_all.extend_from_slice(&test);
            clients.push(ClientState {
                train,
                val_x,
                val_y,
                clamp_warned: false,
            });
        }
        let (test_x, test_y) = private.gather(&test_all);

        // Model structure.
        let layers = mlp_layers(private.dim(), &cfg.hidden, private.class_count());
        let k = cfg.cohort_size();
        let (global, specs, schedule, retention_p) = match cfg.scheme {
            Scheme::DpFedBaseline => {
                let mut rng = RngStream::derive(seed, purpose::DENSE_INIT, &[]);
                let global = MaskedModel::init_dense(layers.clone(), &mut rng)?;
                (global, Vec::new(), None, 1.0)
            }
            Scheme::FedOneShot => {
                let ticket = Self::obtain_ticket(&cfg, &public, &layers, seed)?;
                let (global, p) = fed_one_shot(&ticket, &layers)?;
                (global, Vec::new(), None, p)
            }
            Scheme::FedIterative => {
                let ticket = Self::obtain_ticket(&cfg, &public, &layers, seed)?;
                let (global, specs, schedule) =
                    fed_iterative(&ticket, &layers, k, cfg.further_prune, cfg.prune_mode)?;
                let p = specs.iter().map(|s| s.retention).sum::<f64>() / specs.len() as f64;
                (global, specs, Some(schedule), p)
            }
        };

        // Conservative sampling rate: the maximum over clients.
        let sample_rate = clients
            .iter()
            .map(|c| {
                let b = cfg.batch_size.min(c.train.len());
                b as f64 / c.train.len() as f64
            })
            .fold(0.0f64, f64::max);
        let ledger = PrivacyLedger::new(
            cfg.local_steps as u64,
            sample_rate,
            cfg.sigma,
            cfg.lambda_val,
            cfg.delta,
            cfg.composition,
            cfg.validation_bound,
        )?;
        let accountant = Accountant::new(RdpOrderGrid::default(), cfg.sigma, sample_rate);

        if let Some(dir) = &cfg.snapshot_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }

        let mut experiment = Experiment {
            cfg,
            private,
            global,
            specs,
            schedule,
            assignment: AssignmentState::new(),
            clients,
            ledger,
            accountant,
            records: Vec::new(),
            snapshots: Vec::new(),
            mask_versions: Vec::new(),
            test_x,
            test_y,
            retention_p,
            comm_bits: 0.0,
            stop_reason: None,
        };
        experiment
            .mask_versions
            .push(experiment.global.mask().clone());
        experiment.push_snapshot(0)?;
        Ok(experiment)
    }

    fn obtain_ticket(
        cfg: &ExperimentConfig,
        public: &Dataset,
        layers: &[crate::nn::LayerSpec],
        seed: u64,
    ) -> Result<WinningTicket> {
        let tickets = match &cfg.tickets_path {
            Some(path) if path.exists() => {
                let (file_layers, tickets) = TicketFile::load(path)?;
                if file_layers != layers {
                    return Err(Error::invalid(format!(
                        "cached tickets in {} were built for a different layer stack",
                        path.display()
                    )));
                }
                tickets
            }
            _ => generate_winning_tickets(
                public,
                layers,
                &TicketGenConfig {
                    count: cfg.ticket_count,
                    train_iters: cfg.ticket_iters,
                    prune_degree: cfg.prune_degree,
                    mode: cfg.prune_mode,
                    learning_rate: cfg.lth_learning_rate,
                    batch_size: cfg.batch_size,
                },
                seed,
            )?,
        };
        let mut rng = RngStream::derive(seed, purpose::TICKET_SELECT, &[]);
        let chosen = select_ticket_softmax(&tickets, cfg.temperature, &mut rng)?;
        Ok(tickets.into_iter().nth(chosen).expect("index in range"))
    }

    fn push_snapshot(&mut self, mask_version: usize) -> Result<()> {
        let support: Vec<f64> = self
            .global
            .params()
            .values()
            .iter()
            .zip(self.global.mask().bits())
            .filter(|(_, &b)| b == 1)
            .map(|(&v, _)| v)
            .collect();
        let id = self.snapshots.len();
        let storage = if let Some(dir) = &self.cfg.snapshot_dir {
            let path = dir.join(format!("snapshot_{id:05}.bin"));
            let bytes: Vec<u8> = support.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
            SnapshotStorage::Disk(path)
        } else {
            SnapshotStorage::Memory(support)
        };
        self.snapshots.push(Snapshot {
            support_values: storage,
            mask_version,
        });
        Ok(())
    }

    fn model_from_snapshot(&self, id: usize) -> Result<MaskedModel> {
        let snapshot = self
            .snapshots
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown snapshot {id}")))?;
        let mask = self.mask_versions[snapshot.mask_version].clone();
        let support = snapshot.values()?;
        let mut params = vec![0.0; mask.len()];
        let mut cursor = 0;
        for (i, &b) in mask.bits().iter().enumerate() {
            if b == 1 {
                params[i] = support[cursor];
                cursor += 1;
            }
        }
        MaskedModel::new(
            self.global.layers().to_vec(),
            crate::nn::ParamVector::from_values(params),
            mask,
        )
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn global(&self) -> &MaskedModel {
        &self.global
    }

    pub fn dataset(&self) -> &Dataset {
        &self.private
    }

    pub fn client_train_indices(&self, client: usize) -> &[usize] {
        &self.clients[client].train
    }

    pub fn ledger(&self) -> &PrivacyLedger {
        &self.ledger
    }

    pub fn schedule(&self) -> Option<&RetentionSchedule> {
        self.schedule.as_ref()
    }

    pub fn retention(&self) -> f64 {
        self.retention_p
    }

    pub fn sample_rate(&self) -> f64 {
        self.ledger.sample_rate
    }

    pub fn param_count(&self) -> usize {
        self.global.param_count()
    }

    /// Execute rounds until the round limit or the privacy budget stops the
    /// run, then select the final model by the highest noisy validation
    /// total and evaluate it on the union of client test shards.
    pub fn run(&mut self) -> Result<RunSummary> {
        for t in 0..self.cfg.rounds {
            if self
                .accountant
                .budget_check(&self.ledger, self.cfg.epsilon_budget)
                == BudgetDecision::Stop
            {
                self.stop_reason = Some(StopReason::Budget);
                break;
            }
            self.run_round(t as u64)?;
        }
        let stop_reason = self.stop_reason.unwrap_or(StopReason::RoundLimit);

        let (selected_round, snapshot_id) = if self.records.is_empty() {
            (None, 0)
        } else {
            let best = select_final_model(&self.records)?;
            (
                Some(self.records[best].round),
                self.records[best].snapshot_id,
            )
        };
        let final_model = self.model_from_snapshot(snapshot_id)?;
        let final_test_accuracy = if self.test_y.is_empty() {
            0.0
        } else {
            final_model.evaluate(&self.test_x, &self.test_y) as f64 / self.test_y.len() as f64
        };
        Ok(RunSummary {
            scheme: self.cfg.scheme.as_str(),
            seed: self.cfg.seed,
            rounds_executed: self.records.len(),
            stop_reason,
            selected_round,
            final_test_accuracy,
            last_round_test_accuracy: self.records.last().map(|r| r.test_accuracy),
            epsilon_final: self.records.last().map_or(0.0, |r| r.epsilon),
            comm_bits_total: self.comm_bits,
            param_count: self.global.param_count(),
            retention_p: self.retention_p,
            sample_rate: self.ledger.sample_rate,
        })
    }

    fn run_round(&mut self, t: u64) -> Result<()> {
        let k = self.cfg.cohort_size();
        let mut cohort_rng = RngStream::derive(self.cfg.seed, purpose::COHORT, &[t]);
        let cohort = cohort_rng.sample_without_replacement(self.cfg.clients, k);

        // Assign a model structure to every selected client.
        let assignments: Vec<(usize, Mask)> = if self.cfg.scheme == Scheme::FedIterative {
            if self.cfg.recompute_masks && t > 0 {
                self.recompute_specs()?;
            }
            let mut shuffle_rng = RngStream::derive(self.cfg.seed, purpose::MODEL_SHUFFLE, &[t]);
            assign_models(
                &cohort,
                self.specs.len(),
                &mut self.assignment,
                &mut shuffle_rng,
            )
            .into_iter()
            .map(|(client, pos)| (client, self.specs[pos].mask.clone()))
            .collect()
        } else {
            cohort
                .iter()
                .map(|&c| (c, self.global.mask().clone()))
                .collect()
        };

        // Local updates.
        let eta_t = self.cfg.learning_rate * self.cfg.lr_decay.powi(t as i32);
        let mut deltas = Vec::with_capacity(assignments.len());
        let mut masks = Vec::with_capacity(assignments.len());
        let mut upload_bits = 0.0;
        for (client, mask) in &assignments {
            let state = &mut self.clients[*client];
            if self.cfg.batch_size > state.train.len() && !state.clamp_warned {
                eprintln!(
                    "note: client {client} clamps batch size {} to its shard size {}",
                    self.cfg.batch_size,
                    state.train.len()
                );
                state.clamp_warned = true;
            }
            let model = self.global.with_mask(mask.clone())?;
            let opts = LocalUpdateOpts {
                steps: self.cfg.local_steps,
                batch_size: self.cfg.batch_size,
                clip: self.cfg.clip,
                sigma: self.cfg.sigma,
                learning_rate: eta_t,
                momentum: self.cfg.momentum,
            };
            let mut rng =
                RngStream::derive(self.cfg.seed, purpose::CLIENT_UPDATE, &[*client as u64, t]);
            let delta = dp_local_update(&model, &self.private, &state.train, &opts, &mut rng)?;
            upload_bits += mask.retention() * self.global.param_count() as f64 * 32.0;
            deltas.push(delta);
            masks.push(mask.clone());
        }
        let mask_refs: Vec<&Mask> = masks.iter().collect();
        self.global = aggregate(&self.global, &deltas, &mask_refs)?;

        // Validation: every client scores the new global model and releases
        // a noisy count.
        let noise_enabled = self.cfg.lambda_val.is_finite();
        let laplace = if noise_enabled {
            Some(LaplaceParams::new(self.cfg.lambda_val)?)
        } else {
            None
        };
        let mut per_client_noisy = Vec::with_capacity(self.clients.len());
        let mut per_client_true = Vec::with_capacity(self.clients.len());
        let mut total = 0.0;
        for (u, state) in self.clients.iter().enumerate() {
            let true_score = self.global.evaluate(&state.val_x, &state.val_y);
            let noisy = match &laplace {
                Some(params) => {
                    let mut rng =
                        RngStream::derive(self.cfg.seed, purpose::VALIDATION_NOISE, &[u as u64, t]);
                    perturb_score(true_score, params, &mut rng)
                }
                None => true_score as f64,
            };
            per_client_noisy.push(noisy);
            per_client_true.push(true_score);
            total += noisy;
        }

        // Ledger and bookkeeping.
        self.ledger.advance_round();
        let (epsilon, _) = self.accountant.epsilon(&self.ledger);
        let test_accuracy = if self.test_y.is_empty() {
            0.0
        } else {
            self.global.evaluate(&self.test_x, &self.test_y) as f64 / self.test_y.len() as f64
        };
        let download_bits = if self.cfg.direction_factor == 2 {
            assignments.len() as f64
                * self.global.mask().retention()
                * self.global.param_count() as f64
                * 32.0
        } else {
            0.0
        };
        self.comm_bits += upload_bits + download_bits;

        let mask_version = self.mask_versions.len() - 1;
        self.push_snapshot(mask_version)?;
        self.records.push(RoundRecord {
            round: t,
            snapshot_id: self.snapshots.len() - 1,
            noisy_val_total: total,
            per_client_noisy,
            per_client_true: self.cfg.debug_true_scores.then_some(per_client_true),
            test_accuracy,
            epsilon,
            comm_bits_cumulative: self.comm_bits,
        });
        Ok(())
    }

    /// Experimental: rebuild the nested structures from the current global
    /// weights and re-point the global mask at the largest one.
    fn recompute_specs(&mut self) -> Result<()> {
        let masks = nested_masks(
            self.global.params(),
            self.global.layout(),
            self.specs.len(),
            self.cfg.further_prune,
            self.cfg.prune_mode,
        )?;
        for (spec, mask) in self.specs.iter_mut().zip(masks) {
            spec.retention = mask.retention();
            spec.mask = mask;
        }
        self.global = self.global.with_mask(self.specs[0].mask.clone())?;
        self.mask_versions.push(self.global.mask().clone());
        Ok(())
    }

    /// Metrics rows for the completed rounds.
    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        self.records
            .iter()
            .map(|r| MetricsRow {
                round: r.round,
                test_accuracy: r.test_accuracy,
                noisy_val_score: r.noisy_val_total,
                epsilon: r.epsilon,
                comm_bits_cumulative: r.comm_bits_cumulative,
                retention_p: self.retention_p,
                scheme: self.cfg.scheme.as_str().to_string(),
                seed: self.cfg.seed,
            })
            .collect()
    }

    /// Final model for an already-completed run (the selected snapshot).
    pub fn final_model(&self) -> Result<MaskedModel> {
        if self.records.is_empty() {
            return self.model_from_snapshot(0);
        }
        let best = select_final_model(&self.records)?;
        self.model_from_snapshot(self.records[best].snapshot_id)
    }
}

/// Convenience: build and run an experiment in one call.
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<RoundRecord>,
    pub rows: Vec<MetricsRow>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut experiment = Experiment::new(cfg.clone())?;
    let summary = experiment.run()?;
    Ok(RunOutput {
        summary,
        rows: experiment.metrics_rows(),
        records: experiment.records,
    })
}
