//! Winning-ticket generation on public data: train, magnitude-prune,
//! reset to the initial weights, and pick a ticket by a softmax over
//! validation scores.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EpochSampler};
use crate::error::{Error, Result};
use crate::nn::{GradientVector, LayerSpec, Mask, MaskedModel, ParamLayout, ParamVector};
use crate::rng::{purpose, RngStream};

/// How magnitude pruning selects survivors within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// Keep a weight iff `|w| > degree * |w_max|` of its layer.
    Threshold,
    /// Prune the smallest-magnitude `degree` fraction of the layer's
    /// currently surviving weights, so retention multiplies by
    /// `1 - degree` per application.
    Percentile,
}

impl std::str::FromStr for PruneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(PruneMode::Threshold),
            "percentile" => Ok(PruneMode::Percentile),
            other => Err(Error::invalid(format!("unknown prune mode '{other}'"))),
        }
    }
}

/// Per-layer magnitude mask over a flat parameter vector.
///
/// Coordinates that are exactly zero count as already pruned in percentile
/// mode, which makes repeated application nest: the new support is always a
/// subset of the old one. In both modes the largest-magnitude weight of each
/// layer survives, so a layer never empties.
pub fn weight_based_mask(
    params: &ParamVector,
    layout: &ParamLayout,
    degree: f64,
    mode: PruneMode,
) -> Result<Mask> {
    if !(0.0..1.0).contains(&degree) {
        return Err(Error::invalid(format!(
            "pruning degree {degree} outside [0, 1)"
        )));
    }
    let values = params.values();
    let mut mask = Mask::all_ones(params.len());
    for &(offset, len) in layout.spans() {
        if len == 0 {
            continue;
        }
        let layer = &values[offset..offset + len];
        match mode {
            PruneMode::Threshold => {
                let w_max = layer.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                let cut = degree * w_max;
                for (i, &v) in layer.iter().enumerate() {
                    mask.set(offset + i, v.abs() > cut);
                }
            }
            PruneMode::Percentile => {
                let mut support: Vec<usize> = (0..len).filter(|&i| layer[i] != 0.0).collect();
                for (i, &w) in layer.iter().enumerate() {
                    if w == 0.0 {
                        mask.set(offset + i, false);
                    }
                }
                // Smallest magnitudes go first; ties break on index.
                support.sort_by(|&a, &b| {
                    layer[a]
                        .abs()
                        .partial_cmp(&layer[b].abs())
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let prune_n = ((degree * support.len() as f64).floor() as usize)
                    .min(support.len().saturating_sub(1));
                for &i in &support[..prune_n] {
                    mask.set(offset + i, false);
                }
            }
        }
        // The maximal-magnitude weight always survives.
        let keep_any = (0..len).any(|i| mask.bit(offset + i));
        if !keep_any {
            let argmax = (0..len)
                .max_by(|&a, &b| layer[a].abs().partial_cmp(&layer[b].abs()).unwrap())
                .expect("nonempty layer");
            mask.set(offset + argmax, true);
        }
    }
    Ok(mask)
}

/// One train-prune-reset product: the surviving support, the initial
/// weights restricted to it, and the public-data score of the trained,
/// masked network.
#[derive(Clone, Debug, PartialEq)]
pub struct WinningTicket {
    pub init_params: ParamVector,
    pub mask: Mask,
    /// Correct-prediction count of the trained-then-masked model on the
    /// public dataset.
    pub score: usize,
    pub prune_degree: f64,
}

/// Knobs for ticket generation.
#[derive(Clone, Debug)]
pub struct TicketGenConfig {
    /// Number of tickets to generate.
    pub count: usize,
    /// Training iterations per ticket.
    pub train_iters: usize,
    /// Pruning degree applied after training.
    pub prune_degree: f64,
    pub mode: PruneMode,
    /// Pretraining learning rate (plain SGD).
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Train `count` fresh networks on the public data, prune each by
/// magnitude, reset survivors to their initial values, and score the
/// trained-then-masked model. Each ticket uses its own stream derived from
/// `(master_seed, ticket index)`.
pub fn generate_winning_tickets(
    public: &Dataset,
    layers: &[LayerSpec],
    cfg: &TicketGenConfig,
    master_seed: u64,
) -> Result<Vec<WinningTicket>> {
    if cfg.count == 0 {
        return Err(Error::invalid("ticket count must be at least 1"));
    }
    if public.is_empty() {
        return Err(Error::invalid("public dataset is empty"));
    }
    let layout = ParamLayout::new(layers);
    let mut tickets = Vec::with_capacity(cfg.count);
    for ticket_idx in 0..cfg.count {
        let mut rng = RngStream::derive(master_seed, purpose::TICKET, &[ticket_idx as u64]);
        let init = ParamVector::init_uniform(layers, &layout, &mut rng);
        let mut model = MaskedModel::new(
            layers.to_vec(),
            init.clone(),
            Mask::all_ones(layout.total_len()),
        )?;
        // Dense pretraining, plain SGD.
        if cfg.train_iters > 0 {
            let batch = cfg.batch_size.clamp(1, public.len());
            let mut sampler = EpochSampler::new((0..public.len()).collect(), batch);
            let mut buffer = GradientVector::zeros(layout.total_len());
            for _ in 0..cfg.train_iters {
                let batch_idx = sampler.next_batch(&mut rng).to_vec();
                let (x, y) = public.gather(&batch_idx);
                let (_, grad) = model.loss_and_grad(&x, &y)?;
                model.sgd_momentum_step(&grad, cfg.learning_rate, 0.0, &mut buffer);
            }
        }
        let mask = weight_based_mask(model.params(), &layout, cfg.prune_degree, cfg.mode)?;
        // Score the trained network on the surviving support.
        let trained_masked = model.with_mask(mask.clone())?;
        let score = trained_masked.evaluate(public.features(), public.labels());
        // Reset survivors to their initial values.
        let mut reset = init;
        mask.apply(reset.values_mut());
        tickets.push(WinningTicket {
            init_params: reset,
            mask,
            score,
            prune_degree: cfg.prune_degree,
        });
    }
    Ok(tickets)
}

/// Softmax probabilities over ticket scores, computed in log space with max
/// subtraction. `temperature` of 1 reproduces the plain softmax.
pub fn softmax_probs(scores: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .map(|&s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Sample a ticket index with probability proportional to
/// `exp(score / temperature)`.
pub fn select_ticket_softmax(
    tickets: &[WinningTicket],
    temperature: f64,
    rng: &mut RngStream,
) -> Result<usize> {
    if tickets.is_empty() {
        return Err(Error::invalid("cannot select from an empty ticket list"));
    }
    let scores: Vec<f64> = tickets.iter().map(|t| t.score as f64).collect();
    let probs = softmax_probs(&scores, temperature);
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

// ---------------------------------------------------------------------------
// Ticket cache file
// ---------------------------------------------------------------------------

/// Versioned JSON container so pretraining can be cached between runs.
/// Parameters are stored as JSON numbers (lossless for f64), masks as an
/// LSB-first packed-bit hex string.
#[derive(Debug, Serialize, Deserialize)]
pub struct TicketFile {
    pub version: u32,
    pub layers: Vec<LayerSpec>,
    pub tickets: Vec<TicketRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TicketRecord {
    pub init_params: Vec<f64>,
    pub mask_hex: String,
    pub param_count: usize,
    pub score: usize,
    pub prune_degree: f64,
}

pub const TICKET_FILE_VERSION: u32 = 1;

impl TicketFile {
    pub fn new(layers: &[LayerSpec], tickets: &[WinningTicket]) -> Self {
        TicketFile {
            version: TICKET_FILE_VERSION,
            layers: layers.to_vec(),
            tickets: tickets
                .iter()
                .map(|t| TicketRecord {
                    init_params: t.init_params.values().to_vec(),
                    mask_hex: t.mask.to_hex(),
                    param_count: t.init_params.len(),
                    score: t.score,
                    prune_degree: t.prune_degree,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<(Vec<LayerSpec>, Vec<WinningTicket>)> {
        let file: TicketFile = serde_json::from_slice(bytes)?;
        if file.version != TICKET_FILE_VERSION {
            return Err(Error::invalid(format!(
                "unsupported ticket file version {}",
                file.version
            )));
        }
        crate::nn::validate_layers(&file.layers)?;
        let layout = ParamLayout::new(&file.layers);
        let mut tickets = Vec::with_capacity(file.tickets.len());
        for (i, rec) in file.tickets.iter().enumerate() {
            if rec.param_count != layout.total_len() || rec.init_params.len() != rec.param_count {
                return Err(Error::invalid(format!(
                    "ticket {i}: parameter count does not match the layer stack"
                )));
            }
            if !rec.init_params.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("ticket {i}: non-finite parameter")));
            }
            if !(0.0..1.0).contains(&rec.prune_degree) {
                return Err(Error::invalid(format!(
                    "ticket {i}: pruning degree outside [0, 1)"
                )));
            }
            let mask = Mask::from_hex(&rec.mask_hex, rec.param_count)?;
            let mut init = ParamVector::from_values(rec.init_params.clone());
            // Enforce the ticket invariant on load: zeros off-support.
            mask.apply(init.values_mut());
            tickets.push(WinningTicket {
                init_params: init,
                mask,
                score: rec.score,
                prune_degree: rec.prune_degree,
            });
        }
        Ok((file.layers, tickets))
    }

    pub fn save(
        path: &std::path::Path,
        layers: &[LayerSpec],
        tickets: &[WinningTicket],
    ) -> Result<()> {
        let json = TicketFile::new(layers, tickets).to_json()?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<(Vec<LayerSpec>, Vec<WinningTicket>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        TicketFile::from_json_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_blobs;
    use crate::nn::mlp_layers;

    fn single_layer_layout(weights: usize) -> (Vec<LayerSpec>, ParamLayout) {
        // A dense layer with exactly `weights` parameters: in=weights-1 out=1
        // gives weights-1 weights + 1 bias.
        let layers = vec![LayerSpec::dense(weights - 1, 1), LayerSpec::loss_head(1)];
        let layout = ParamLayout::new(&layers);
        assert_eq!(layout.total_len(), weights);
        (layers, layout)
    }

    #[test]
    fn degree_zero_keeps_everything() {
        let (_, layout) = single_layer_layout(5);
        let params = ParamVector::from_values(vec![0.3, -0.1, 0.7, 0.2, -0.5]);
        for mode in [PruneMode::Threshold, PruneMode::Percentile] {
            let mask = weight_based_mask(&params, &layout, 0.0, mode).unwrap();
            assert_eq!(mask.ones(), 5);
            assert!((mask.retention() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_mode_hand_example() {
        // weights [0.5, -0.2, 0.05, -0.9], degree 0.5 -> cut 0.45 -> [1,0,0,1]
        let (_, layout) = single_layer_layout(4);
        let params = ParamVector::from_values(vec![0.5, -0.2, 0.05, -0.9]);
        let mask = weight_based_mask(&params, &layout, 0.5, PruneMode::Threshold).unwrap();
        assert_eq!(mask.bits(), &[1, 0, 0, 1]);
    }

    #[test]
    fn percentile_mode_hand_example() {
        // prune the 2 smallest magnitudes of 4 -> [1,0,0,1]
        let (_, layout) = single_layer_layout(4);
        let params = ParamVector::from_values(vec![0.5, -0.2, 0.05, -0.9]);
        let mask = weight_based_mask(&params, &layout, 0.5, PruneMode::Percentile).unwrap();
        assert_eq!(mask.bits(), &[1, 0, 0, 1]);
    }

    #[test]
    fn degree_out_of_range_rejected() {
        let (_, layout) = single_layer_layout(4);
        let params = ParamVector::from_values(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(weight_based_mask(&params, &layout, 1.0, PruneMode::Percentile).is_err());
        assert!(weight_based_mask(&params, &layout, -0.1, PruneMode::Threshold).is_err());
    }

    #[test]
    fn max_weight_survives_even_all_zero_layer() {
        let (_, layout) = single_layer_layout(4);
        let params = ParamVector::from_values(vec![0.0; 4]);
        for mode in [PruneMode::Threshold, PruneMode::Percentile] {
            let mask = weight_based_mask(&params, &layout, 0.9, mode).unwrap();
            assert_eq!(mask.ones(), 1);
        }
    }

    #[test]
    fn repeated_percentile_pruning_nests() {
        let mut rng = RngStream::from_seed(11);
        let layers = mlp_layers(6, &[8], 3);
        let layout = ParamLayout::new(&layers);
        let mut params = ParamVector::init_uniform(&layers, &layout, &mut rng);
        let mut prev = Mask::all_ones(layout.total_len());
        for _ in 0..5 {
            let mask = weight_based_mask(&params, &layout, 0.3, PruneMode::Percentile).unwrap();
            assert!(mask.is_subset_of(&prev), "new support escaped old support");
            mask.apply(params.values_mut());
            prev = mask;
        }
    }

    #[test]
    fn percentile_retention_tracks_one_minus_degree() {
        let mut rng = RngStream::from_seed(12);
        let layers = mlp_layers(10, &[12], 4);
        let layout = ParamLayout::new(&layers);
        let params = ParamVector::init_uniform(&layers, &layout, &mut rng);
        let degree = 0.35;
        let mask = weight_based_mask(&params, &layout, degree, PruneMode::Percentile).unwrap();
        // retention within one coordinate per parameterized layer
        for &(offset, len) in layout.spans() {
            if len == 0 {
                continue;
            }
            let kept = (0..len).filter(|&i| mask.bit(offset + i)).count();
            let want = (1.0 - degree) * len as f64;
            assert!(
                (kept as f64 - want).abs() <= 1.0,
                "kept {kept}, want {want}"
            );
        }
    }

    #[test]
    fn degenerate_ticket_pipeline() {
        // M = 1, k = 0, degree 0: ticket is the raw init with all-ones mask.
        let mut rng = RngStream::from_seed(13);
        let public = synthesize_blobs(2, 4, 20, 6.0, &mut rng).unwrap();
        let layers = mlp_layers(4, &[], 2);
        let cfg = TicketGenConfig {
            count: 1,
            train_iters: 0,
            prune_degree: 0.0,
            mode: PruneMode::Percentile,
            learning_rate: 1.2e-3,
            batch_size: 8,
        };
        let tickets = generate_winning_tickets(&public, &layers, &cfg, 99).unwrap();
        assert_eq!(tickets.len(), 1);
        let t = &tickets[0];
        assert_eq!(t.mask.ones(), t.mask.len());
        let model =
            MaskedModel::new(layers.clone(), t.init_params.clone(), t.mask.clone()).unwrap();
        assert_eq!(model.evaluate(public.features(), public.labels()), t.score);
    }

    #[test]
    fn ticket_generation_is_deterministic() {
        let mut rng = RngStream::from_seed(14);
        let public = synthesize_blobs(2, 4, 40, 6.0, &mut rng).unwrap();
        let layers = mlp_layers(4, &[5], 2);
        let cfg = TicketGenConfig {
            count: 3,
            train_iters: 25,
            prune_degree: 0.5,
            mode: PruneMode::Percentile,
            learning_rate: 0.01,
            batch_size: 10,
        };
        let a = generate_winning_tickets(&public, &layers, &cfg, 7).unwrap();
        let b = generate_winning_tickets(&public, &layers, &cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tickets_reset_to_initial_values_on_support() {
        let mut rng = RngStream::from_seed(15);
        let public = synthesize_blobs(2, 4, 40, 6.0, &mut rng).unwrap();
        let layers = mlp_layers(4, &[5], 2);
        let layout = ParamLayout::new(&layers);
        let cfg = TicketGenConfig {
            count: 2,
            train_iters: 30,
            prune_degree: 0.4,
            mode: PruneMode::Percentile,
            learning_rate: 0.01,
            batch_size: 10,
        };
        let tickets = generate_winning_tickets(&public, &layers, &cfg, 21).unwrap();
        for (j, t) in tickets.iter().enumerate() {
            // Recreate the untouched init from the same stream derivation.
            let mut rng_j = RngStream::derive(21, purpose::TICKET, &[j as u64]);
            let w0 = ParamVector::init_uniform(&layers, &layout, &mut rng_j);
            for i in 0..t.init_params.len() {
                if t.mask.bit(i) {
                    assert_eq!(t.init_params.values()[i], w0.values()[i]);
                } else {
                    assert_eq!(t.init_params.values()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn trained_tickets_beat_chance_on_separable_data() {
        // 2-class linearly separable shard; after 200 iterations every
        // ticket should score above the 50% chance count for nearly all
        // seeds.
        let layers = mlp_layers(4, &[6], 2);
        let cfg = TicketGenConfig {
            count: 2,
            train_iters: 200,
            prune_degree: 0.5,
            mode: PruneMode::Percentile,
            learning_rate: 0.05,
            batch_size: 15,
        };
        let mut good_seeds = 0;
        for seed in 0..20u64 {
            let mut rng = RngStream::derive(seed, crate::rng::purpose_tag("test/blobs"), &[]);
            let public = synthesize_blobs(2, 4, 60, 8.0, &mut rng).unwrap();
            let chance = public.len() / 2;
            let tickets = generate_winning_tickets(&public, &layers, &cfg, seed).unwrap();
            if tickets.iter().all(|t| t.score > chance) {
                good_seeds += 1;
            }
        }
        assert!(good_seeds >= 19, "only {good_seeds}/20 seeds beat chance");
    }

    #[test]
    fn softmax_uniform_when_scores_equal() {
        let probs = softmax_probs(&[10.0, 10.0, 10.0], 1.0);
        for &p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // empirical frequency over many draws
        let tickets: Vec<WinningTicket> = (0..3)
            .map(|_| WinningTicket {
                init_params: ParamVector::from_values(vec![1.0]),
                mask: Mask::all_ones(1),
                score: 10,
                prune_degree: 0.0,
            })
            .collect();
        let mut rng = RngStream::from_seed(16);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            counts[select_ticket_softmax(&tickets, 1.0, &mut rng).unwrap()] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn softmax_huge_gap_always_picks_leader() {
        // scores [100, 0]: the trailing probability is e^-100 < 1e-40.
        let probs = softmax_probs(&[100.0, 0.0], 1.0);
        assert!(probs[1] < 1e-40);
        let tickets: Vec<WinningTicket> = [100usize, 0]
            .iter()
            .map(|&s| WinningTicket {
                init_params: ParamVector::from_values(vec![1.0]),
                mask: Mask::all_ones(1),
                score: s,
                prune_degree: 0.0,
            })
            .collect();
        let mut rng = RngStream::from_seed(17);
        for _ in 0..100_000 {
            assert_eq!(select_ticket_softmax(&tickets, 1.0, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn softmax_singleton_and_empty() {
        let t = WinningTicket {
            init_params: ParamVector::from_values(vec![1.0]),
            mask: Mask::all_ones(1),
            score: 5,
            prune_degree: 0.0,
        };
        let mut rng = RngStream::from_seed(18);
        assert_eq!(select_ticket_softmax(&[t], 1.0, &mut rng).unwrap(), 0);
        assert!(select_ticket_softmax(&[], 1.0, &mut rng).is_err());
    }

    #[test]
    fn softmax_probs_sum_to_one_and_shift_invariant() {
        let scores = [3.0, 1.0, 4.0, 1.0, 5.0];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.0).collect();
        let a = softmax_probs(&scores, 1.0);
        let b = softmax_probs(&shifted, 1.0);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ticket_file_round_trip() {
        let mut rng = RngStream::from_seed(19);
        let public = synthesize_blobs(2, 4, 30, 6.0, &mut rng).unwrap();
        let layers = mlp_layers(4, &[5], 2);
        let cfg = TicketGenConfig {
            count: 2,
            train_iters: 10,
            prune_degree: 0.5,
            mode: PruneMode::Percentile,
            learning_rate: 0.01,
            batch_size: 10,
        };
        let tickets = generate_winning_tickets(&public, &layers, &cfg, 3).unwrap();
        let json = TicketFile::new(&layers, &tickets).to_json().unwrap();
        let (layers2, tickets2) = TicketFile::from_json_bytes(json.as_bytes()).unwrap();
        assert_eq!(layers, layers2);
        assert_eq!(tickets, tickets2);
    }

    #[test]
    fn ticket_file_rejects_bad_version() {
        let json = r#"{"version": 99, "layers": [], "tickets": []}"#;
        assert!(TicketFile::from_json_bytes(json.as_bytes()).is_err());
    }
}
