//! Federated round loop.
//!
//! Each round: every device trains its dispatched hierarchy model locally on
//! private data and reports the cumulative weight delta (trained minus
//! dispatched). The server averages each named array over exactly the
//! devices that hold it — layer-alignment averaging — applies the averaged
//! delta to the global model as a unit step, runs the cloud phase
//! (meta-learner update plus hierarchical self-distillation on public data),
//! and re-dispatches capability subsets. Devices may join between rounds and
//! receive the current global subset.
//!
//! Device training runs in parallel; determinism is preserved because every
//! device draws from its own `(round, id)` seed stream and aggregation sums
//! in ascending id order.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::ensemble::{distill_epochs, DistillConfig, DistillStats, EnsembleLibrary};
use crate::error::{Error, Result};
use crate::model::{
    build_network, extract_subset, merge_named_update, record_forward_exit, register_params,
    HierarchyNetSpec, ParameterStore,
};
use crate::rng::{self, stream};
use crate::tensor::{Array, GradientMap, Tape};

/// Per-round schedule and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    /// Total federated rounds.
    pub rounds: usize,
    /// Local epochs per device per round (the E of the round loop).
    pub local_epochs: usize,
    /// Local mini-batch size.
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Decay the rate every this many rounds…
    pub lr_decay_every: usize,
    /// …by this factor.
    pub lr_decay_factor: f64,
    /// Step size applied to the averaged delta (1 = unit step).
    pub server_lr: f64,
    /// Master seed; all round-level streams derive from it.
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            rounds: 30,
            local_epochs: 5,
            batch_size: 32,
            lr0: 0.05,
            lr_decay_every: 30,
            lr_decay_factor: 0.1,
            server_lr: 1.0,
            seed: 1234,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be ≥ 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return Err(Error::Config(format!(
                "server_lr must be positive, got {}",
                self.server_lr
            )));
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a 1-based round number:
/// `lr0 · factor^⌊(round−1)/every⌋`.
///
/// Panics if `round` is 0; rounds are numbered from 1.
pub fn lr_for_round(cfg: &RoundConfig, round: u64) -> f64 {
    assert!(round >= 1, "rounds are numbered from 1");
    let steps = ((round - 1) / cfg.lr_decay_every as u64) as i32;
    cfg.lr0 * cfg.lr_decay_factor.powi(steps)
}

/// One simulated device: an id, a capability level, private data, and the
/// hierarchy model it currently holds.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub capability: usize,
    data: Dataset,
    params: ParameterStore,
}

impl DeviceState {
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }
}

/// Uploaded deltas keyed by device id.
pub type GradientBuffer = BTreeMap<usize, GradientMap>;

/// The server: global model, ensemble library, and round counter.
#[derive(Debug, Clone)]
pub struct ServerState {
    spec: HierarchyNetSpec,
    global: ParameterStore,
    library: EnsembleLibrary,
    completed_rounds: u64,
}

impl ServerState {
    /// Fresh server with a seeded global model and a uniform library.
    pub fn new(spec: HierarchyNetSpec, init_seed: u64) -> Result<Self> {
        let global = build_network(&spec, init_seed)?;
        let library = EnsembleLibrary::new(spec.num_exits)?;
        Ok(ServerState {
            spec,
            global,
            library,
            completed_rounds: 0,
        })
    }

    /// Rebuild a server around checkpointed state.
    pub fn from_parts(
        spec: HierarchyNetSpec,
        global: ParameterStore,
        library: EnsembleLibrary,
        completed_rounds: u64,
    ) -> Result<Self> {
        spec.validate()?;
        crate::model::check_full_store(&global, &spec)?;
        if library.num_exits() != spec.num_exits {
            return Err(Error::Protocol(format!(
                "library has {} exits but the model has {}",
                library.num_exits(),
                spec.num_exits
            )));
        }
        Ok(ServerState {
            spec,
            global,
            library,
            completed_rounds,
        })
    }

    pub fn spec(&self) -> &HierarchyNetSpec {
        &self.spec
    }

    pub fn global(&self) -> &ParameterStore {
        &self.global
    }

    pub fn library(&self) -> &EnsembleLibrary {
        &self.library
    }

    pub fn completed_rounds(&self) -> u64 {
        self.completed_rounds
    }

    /// The capability-`c` subset of the current global model.
    pub fn dispatch_to(&self, capability: usize) -> Result<ParameterStore> {
        extract_subset(&self.global, &self.spec, capability)
    }

    /// Admit a device (initial enrollment or a hot-plug join between
    /// rounds): it receives the subset of the current global model.
    pub fn add_device(&self, id: usize, capability: usize, data: Dataset) -> Result<DeviceState> {
        if data.input_dim() != self.spec.input_dim {
            return Err(Error::Protocol(format!(
                "device {id}: data have {} features but the model expects {}",
                data.input_dim(),
                self.spec.input_dim
            )));
        }
        if data.num_classes != self.spec.num_classes {
            return Err(Error::Protocol(format!(
                "device {id}: data declare {} classes but the model expects {}",
                data.num_classes, self.spec.num_classes
            )));
        }
        let params = self.dispatch_to(capability)?;
        Ok(DeviceState {
            id,
            capability,
            data,
            params,
        })
    }

    /// Apply an averaged delta to the global model: `w += server_lr · δ`.
    pub fn apply_global_update(&mut self, delta: &GradientMap, server_lr: f64) -> Result<()> {
        if !(server_lr > 0.0 && server_lr.is_finite()) {
            return Err(Error::Protocol(format!(
                "server_lr must be positive, got {server_lr}"
            )));
        }
        if server_lr == 1.0 {
            merge_named_update(&mut self.global, delta)
        } else {
            let scaled: GradientMap = delta
                .iter()
                .map(|(name, a)| {
                    let values = a.values().iter().map(|&v| server_lr * v).collect();
                    Array::new(a.shape().to_vec(), values).map(|a| (name.clone(), a))
                })
                .collect::<Result<_>>()?;
            merge_named_update(&mut self.global, &scaled)
        }
    }
}

/// Train a device's model in place for `epochs` seeded-shuffled passes of
/// mini-batch cross-entropy SGD, and return the cumulative weight delta
/// (trained minus dispatched) for every array the device holds.
///
/// A zero learning rate short-circuits to an explicit zero delta.
pub fn local_train(
    device: &mut DeviceState,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<GradientMap> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
    }
    if lr == 0.0 {
        return device
            .params
            .map()
            .iter()
            .map(|(name, a)| Array::zeros(a.shape().to_vec()).map(|z| (name.clone(), z)))
            .collect();
    }

    let dispatched = device.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..device.data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let (x, y) = device.data.gather(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let vars = register_params(&mut tape, &device.params)?;
            let exit = record_forward_exit(&mut tape, &vars, device.capability, xv)?;
            let loss = tape.cross_entropy(exit.logits, &y)?;
            let grads = tape.backward(loss)?;
            device.params.sgd_step(&grads, lr)?;
        }
    }

    let mut delta = GradientMap::new();
    for (name, after) in device.params.map() {
        let before = dispatched.get(name)?;
        let values = after
            .values()
            .iter()
            .zip(before.values())
            .map(|(&a, &b)| a - b)
            .collect();
        delta.insert(name.clone(), Array::new(after.shape().to_vec(), values)?);
    }
    Ok(delta)
}

/// Layer-alignment averaging: each named array is the mean of the uploads
/// from exactly the devices that hold that name, summed in ascending device
/// id order.
pub fn layer_alignment_average(buffer: &GradientBuffer) -> Result<GradientMap> {
    if buffer.is_empty() {
        return Err(Error::Protocol("no device uploads to aggregate".into()));
    }
    let mut sums: BTreeMap<&str, (Array, usize)> = BTreeMap::new();
    for (id, delta) in buffer {
        for (name, a) in delta {
            match sums.get_mut(name.as_str()) {
                None => {
                    sums.insert(name, (a.clone(), 1));
                }
                Some((sum, count)) => {
                    if sum.shape() != a.shape() {
                        return Err(Error::Protocol(format!(
                            "device {id}: upload for {name:?} has shape {:?} \
                             but an earlier upload had {:?}",
                            a.shape(),
                            sum.shape()
                        )));
                    }
                    for (s, &v) in sum.values_mut().iter_mut().zip(a.values()) {
                        *s += v;
                    }
                    *count += 1;
                }
            }
        }
    }
    let mut mean = GradientMap::new();
    for (name, (mut sum, count)) in sums {
        let n = count as f64;
        for v in sum.values_mut() {
            *v /= n;
        }
        mean.insert(name.to_string(), sum);
    }
    Ok(mean)
}

/// What one round produced, for the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct RoundOutcome {
    /// 1-based round number.
    pub round: u64,
    /// Device learning rate used this round.
    pub lr: f64,
    pub distill: DistillStats,
}

/// Run one full round over `devices`: parallel local training, aggregation,
/// global update, cloud phase, re-dispatch.
pub fn run_round(
    server: &mut ServerState,
    devices: &mut [DeviceState],
    cfg: &RoundConfig,
    distill: &DistillConfig,
    public: &Dataset,
) -> Result<RoundOutcome> {
    cfg.validate()?;
    if devices.is_empty() {
        return Err(Error::Protocol("cannot run a round with no devices".into()));
    }
    let mut ids = BTreeSet::new();
    for d in devices.iter() {
        if !ids.insert(d.id) {
            return Err(Error::Protocol(format!("duplicate device id {}", d.id)));
        }
    }
    let round = server.completed_rounds + 1;
    let lr = lr_for_round(cfg, round);

    let uploads: Vec<(usize, usize, GradientMap)> = devices
        .par_iter_mut()
        .map(|d| {
            let seed = rng::derive(cfg.seed, &[stream::LOCAL_TRAIN, round, d.id as u64]);
            local_train(d, cfg.local_epochs, lr, cfg.batch_size, seed)
                .map(|delta| (d.id, d.capability, delta))
        })
        .collect::<Result<_>>()?;

    let mut buffer = GradientBuffer::new();
    for (id, capability, delta) in uploads {
        let mut expected = server.spec.subset_names(capability)?;
        expected.sort();
        let got: Vec<&String> = delta.keys().collect();
        if got.len() != expected.len() || !got.iter().zip(&expected).all(|(g, e)| *g == e) {
            return Err(Error::Protocol(format!(
                "device {id}: upload names do not match its capability-{capability} subset"
            )));
        }
        buffer.insert(id, delta);
    }

    let mean = layer_alignment_average(&buffer)?;
    server.apply_global_update(&mean, cfg.server_lr)?;

    let stats = distill_epochs(
        &mut server.global,
        &server.spec,
        &mut server.library,
        public,
        distill,
        lr,
        cfg.seed,
        round,
    )?;

    for d in devices.iter_mut() {
        d.params = extract_subset(&server.global, &server.spec, d.capability)?;
    }
    server.completed_rounds = round;
    Ok(RoundOutcome {
        round,
        lr,
        distill: stats,
    })
}
