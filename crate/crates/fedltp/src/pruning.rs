//! Server-side pruning: turn the selected winning ticket into the global
//! model, build the nested family of per-client model structures, assign
//! structures to clients with a sticky shuffle, and aggregate heterogeneous
//! updates.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::lth::{weight_based_mask, PruneMode, WinningTicket};
use crate::nn::{GradientVector, LayerSpec, Mask, MaskedModel, ParamLayout};
use crate::rng::RngStream;

/// One client model structure in the nested family.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModelSpec {
    /// 1-based position in the family; retention decreases with the index.
    pub index: usize,
    pub mask: Mask,
    /// Measured retention of `mask`.
    pub retention: f64,
}

/// Theoretical retention schedule of the iterative scheme:
/// `gamma_i = (1 - p2)^i`, `p_i = gamma_i * (1 - p1)`, `p = mean(p_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionSchedule {
    pub p1: f64,
    pub p2: f64,
    pub gammas: Vec<f64>,
    pub per_client: Vec<f64>,
    pub average: f64,
}

pub fn retention_schedule(p1: f64, p2: f64, k: usize) -> RetentionSchedule {
    assert!((0.0..1.0).contains(&p1), "p1 outside [0, 1)");
    assert!((0.0..1.0).contains(&p2), "p2 outside [0, 1)");
    assert!(k >= 1, "schedule needs at least one client");
    let gammas: Vec<f64> = (1..=k).map(|i| (1.0 - p2).powi(i as i32)).collect();
    let per_client: Vec<f64> = gammas.iter().map(|g| g * (1.0 - p1)).collect();
    let average = per_client.iter().sum::<f64>() / k as f64;
    RetentionSchedule {
        p1,
        p2,
        gammas,
        per_client,
        average,
    }
}

/// Use the selected ticket directly as the global model; every client
/// receives this one structure. Returns the model and its retention rate.
pub fn fed_one_shot(ticket: &WinningTicket, layers: &[LayerSpec]) -> Result<(MaskedModel, f64)> {
    let model = MaskedModel::new(
        layers.to_vec(),
        ticket.init_params.clone(),
        ticket.mask.clone(),
    )?;
    let p = model.mask().retention();
    Ok((model, p))
}

/// Chain of `k` nested masks obtained by pruning the surviving weights of
/// `params` again by `p2`, `k` times. Errors if a step removes nothing
/// (the family could not be made distinct).
pub fn nested_masks(
    params: &crate::nn::ParamVector,
    layout: &ParamLayout,
    k: usize,
    p2: f64,
    mode: PruneMode,
) -> Result<Vec<Mask>> {
    if k == 0 {
        return Err(Error::invalid("need at least one structure"));
    }
    if !(0.0 < p2 && p2 < 1.0) {
        return Err(Error::invalid("further pruning degree must be in (0, 1)"));
    }
    let mut current = params.clone();
    let mut prev_ones = current.values().iter().filter(|&&v| v != 0.0).count();
    let mut masks = Vec::with_capacity(k);
    for i in 1..=k {
        let mask = weight_based_mask(&current, layout, p2, mode)?;
        let ones = mask.ones();
        if ones == prev_ones {
            return Err(Error::PruneExhausted(format!(
                "structure {i} of {k} would remove no parameters"
            )));
        }
        mask.apply(current.values_mut());
        masks.push(mask);
        prev_ones = ones;
    }
    Ok(masks)
}

/// Build `k` progressively sparser structures by pruning the reset ticket
/// again by `p2`, `k` times; the global model shares the structure of the
/// first (largest) one. Errors if a pruning step cannot remove anything.
pub fn fed_iterative(
    ticket: &WinningTicket,
    layers: &[LayerSpec],
    k: usize,
    p2: f64,
    mode: PruneMode,
) -> Result<(MaskedModel, Vec<ClientModelSpec>, RetentionSchedule)> {
    let layout = ParamLayout::new(layers);
    // Rank by the reset ticket's weights; each step prunes the survivors.
    let mut seed_params = ticket.init_params.clone();
    ticket.mask.apply(seed_params.values_mut());
    let masks = nested_masks(&seed_params, &layout, k, p2, mode)?;
    let specs: Vec<ClientModelSpec> = masks
        .into_iter()
        .enumerate()
        .map(|(i, mask)| ClientModelSpec {
            index: i + 1,
            retention: mask.retention(),
            mask,
        })
        .collect();
    let global = MaskedModel::new(
        layers.to_vec(),
        ticket.init_params.clone(),
        specs[0].mask.clone(),
    )?;
    let schedule = retention_schedule(ticket.prune_degree, p2, k);
    Ok((global, specs, schedule))
}

/// Sticky spec assignment across rounds.
#[derive(Clone, Debug, Default)]
pub struct AssignmentState {
    assigned: BTreeMap<usize, usize>,
    bound: BTreeSet<usize>,
}

impl AssignmentState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn spec_of(&self, client: usize) -> Option<usize> {
        self.assigned.get(&client).copied()
    }
}

/// Assign structures to the selected cohort: returning clients keep their
/// sticky structure; first-timers draw a shuffle (without replacement) of
/// the structures not already held by returning clients in this cohort.
/// Returns `(client, spec position)` pairs in cohort order.
pub fn assign_models(
    selected: &[usize],
    spec_count: usize,
    state: &mut AssignmentState,
    rng: &mut RngStream,
) -> Vec<(usize, usize)> {
    assert!(
        spec_count >= selected.len(),
        "cohort larger than spec family"
    );
    let mut taken: BTreeSet<usize> = BTreeSet::new();
    let mut duplicate_seen = false;
    for client in selected {
        if let Some(spec) = state.assigned.get(client) {
            if !taken.insert(*spec) {
                duplicate_seen = true;
            }
        }
    }
    if duplicate_seen {
        eprintln!(
            "note: cohort contains returning clients sharing a model structure; \
             per-cohort distinctness is infeasible this round"
        );
    }
    let mut pool: Vec<usize> = (0..spec_count).filter(|s| !taken.contains(s)).collect();
    rng.shuffle(&mut pool);
    let mut pool_iter = pool.into_iter();
    let mut out = Vec::with_capacity(selected.len());
    for &client in selected {
        let spec = match state.assigned.get(&client) {
            Some(&s) => s,
            None => {
                let s = pool_iter.next().expect("pool covers first-timers");
                state.assigned.insert(client, s);
                state.bound.insert(s);
                s
            }
        };
        out.push((client, spec));
    }
    out
}

/// Merge client updates into the global model. Each coordinate moves by the
/// mean of the updates from clients whose mask covers it; uncovered
/// coordinates stay put. The global mask is re-applied afterwards.
pub fn aggregate(
    global: &MaskedModel,
    deltas: &[GradientVector],
    masks: &[&Mask],
) -> Result<MaskedModel> {
    if deltas.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} deltas but {} masks",
            deltas.len(),
            masks.len()
        )));
    }
    let d = global.param_count();
    for (i, (delta, mask)) in deltas.iter().zip(masks).enumerate() {
        if delta.len() != d || mask.len() != d {
            return Err(Error::shape(format!(
                "client {i}: delta/mask length does not match d = {d}"
            )));
        }
    }
    let mut out = global.clone();
    let mut params = out.params().clone();
    for c in 0..d {
        let mut sum = 0.0;
        let mut covered = 0u32;
        for (delta, mask) in deltas.iter().zip(masks) {
            if mask.bit(c) {
                sum += delta.values()[c];
                covered += 1;
            }
        }
        if covered > 0 {
            params.values_mut()[c] += sum / covered as f64;
        }
    }
    out.set_params(params)?;
    Ok(out)
}
