//! Ensemble library and hierarchical self-distillation.
//!
//! The library holds K trainable meta-logits; softmax of those logits gives
//! the exit weights M. The meta-learner trains by cross-entropy of the mixed
//! probabilities Σ M_i·P_i on public labels (probabilities are mixed first,
//! then the log is taken — not a mixture of logits). The ensemble outputs
//! P_M = Σ M_i·P_i and F_M = Σ M_i·F_i then act as fixed teachers for the
//! distillation loss: every exit below the top imitates the top exit, and
//! the top exit imitates the ensemble. Teachers never receive gradient;
//! the meta step touches only the meta-logits and the distillation step
//! touches only model weights.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    check_full_store, forward_all_exits, record_forward_all, register_params, ExitOutputs,
    HierarchyNetSpec, ParameterStore, TapedExit,
};
use crate::rng::{self, stream};
use crate::tensor::{self, sgd_step, Array, Tape, Var};

/// Which parts of the cloud phase run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    /// Skip the whole phase: plain layer-alignment averaging only.
    Off,
    /// Meta + KL terms only (the MSE weight is forced to zero).
    LogitsOnly,
    /// Meta + KL + feature MSE terms.
    Full,
}

impl DistillMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::Off => "off",
            DistillMode::LogitsOnly => "logits_only",
            DistillMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DistillMode::Off),
            "logits_only" => Ok(DistillMode::LogitsOnly),
            "full" => Ok(DistillMode::Full),
            other => Err(Error::Config(format!(
                "unknown distill mode {other:?} (expected off | logits_only | full)"
            ))),
        }
    }
}

/// Cloud-phase settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Distillation epochs per round (the C of the round loop).
    pub epochs: usize,
    /// Weight of the feature-MSE terms.
    pub beta: f64,
    /// Overrides the round's device lr when set.
    pub lr_override: Option<f64>,
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mode: DistillMode::Full,
            epochs: 5,
            beta: 0.1,
            lr_override: None,
            batch_size: 32,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be a finite nonnegative scalar, got {}",
                self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "distill batch_size must be ≥ 1".into(),
            ));
        }
        if let Some(lr) = self.lr_override {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "distill lr override must be positive, got {lr}"
                )));
            }
        }
        Ok(())
    }

    /// The MSE weight actually applied under this mode.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            DistillMode::LogitsOnly => 0.0,
            _ => self.beta,
        }
    }
}

const META_PARAM: &str = "meta.m";

/// Server-side bundle: trainable meta-logits plus the cached ensemble
/// outputs of the most recent batch.
#[derive(Debug, Clone)]
pub struct EnsembleLibrary {
    meta_logits: Array,
    cached_prediction: Option<Array>,
    cached_feature: Option<Array>,
}

impl EnsembleLibrary {
    /// Fresh library with zero logits — uniform weights 1/K.
    pub fn new(num_exits: usize) -> Result<Self> {
        if num_exits == 0 {
            return Err(Error::InvalidArgument("num_exits must be ≥ 1".into()));
        }
        Ok(EnsembleLibrary {
            meta_logits: Array::zeros(vec![num_exits])?,
            cached_prediction: None,
            cached_feature: None,
        })
    }

    /// Restore a library from checkpointed logits.
    pub fn from_logits(meta_logits: Array) -> Result<Self> {
        if meta_logits.shape().len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "meta logits must be 1-D, got shape {:?}",
                meta_logits.shape()
            )));
        }
        Ok(EnsembleLibrary {
            meta_logits,
            cached_prediction: None,
            cached_feature: None,
        })
    }

    pub fn num_exits(&self) -> usize {
        self.meta_logits.numel()
    }

    pub fn meta_logits(&self) -> &Array {
        &self.meta_logits
    }

    /// Current exit weights M = softmax(meta logits).
    pub fn weights(&self) -> Result<Vec<f64>> {
        Ok(tensor::softmax_vec(&self.meta_logits)?.values().to_vec())
    }

    /// Cached `(P_M, F_M)` from the last [`compute_ensemble`] call.
    pub fn cached(&self) -> Option<(&Array, &Array)> {
        self.cached_prediction
            .as_ref()
            .zip(self.cached_feature.as_ref())
    }

    fn check_exits(&self, outputs: &ExitOutputs) -> Result<()> {
        if outputs.num_exits() != self.num_exits() {
            return Err(Error::InvalidArgument(format!(
                "library has {} exits but outputs carry {}",
                self.num_exits(),
                outputs.num_exits()
            )));
        }
        Ok(())
    }

    /// One SGD step on the meta-logits under the mixed-probability
    /// cross-entropy; exit outputs are constants here. Returns the loss
    /// before the step.
    pub fn update_meta_learner(
        &mut self,
        outputs: &ExitOutputs,
        labels: &[usize],
        lr: f64,
    ) -> Result<f64> {
        self.check_exits(outputs)?;
        let mut tape = Tape::new();
        let m = tape.param(META_PARAM, self.meta_logits.clone())?;
        let weights = tape.softmax_vec(m)?;
        let mixed = tape.mix_probs(weights, outputs.probs.clone())?;
        let loss = tape.nll_probs(mixed, labels)?;
        let loss_value = tape.scalar(loss)?;
        let grads = tape.backward(loss)?;

        let mut params = std::collections::BTreeMap::new();
        params.insert(META_PARAM.to_string(), self.meta_logits.clone());
        sgd_step(&mut params, &grads, lr)?;
        self.meta_logits = params.remove(META_PARAM).expect("meta param present");
        self.cached_prediction = None;
        self.cached_feature = None;
        Ok(loss_value)
    }

    /// Ensemble outputs under the current weights: `P_M = Σ M_i·P_i`,
    /// `F_M = Σ M_i·F_i`. Both are cached and treated as constants by the
    /// subsequent distillation step.
    pub fn compute_ensemble(&mut self, outputs: &ExitOutputs) -> Result<(Array, Array)> {
        self.check_exits(outputs)?;
        let weights = self.weights()?;
        let p_m = weighted_sum(&weights, &outputs.probs)?;
        let f_m = weighted_sum(&weights, &outputs.features)?;
        self.cached_prediction = Some(p_m.clone());
        self.cached_feature = Some(f_m.clone());
        Ok((p_m, f_m))
    }
}

pub(crate) fn weighted_sum(weights: &[f64], mats: &[Array]) -> Result<Array> {
    if weights.len() != mats.len() || mats.is_empty() {
        return Err(Error::Shape {
            op: "weighted_sum",
            detail: format!("{} weights for {} matrices", weights.len(), mats.len()),
        });
    }
    let shape = mats[0].shape().to_vec();
    for m in mats {
        if m.shape() != shape {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("matrix shapes {:?} and {:?} differ", m.shape(), shape),
            });
        }
    }
    let mut out = vec![0.0; mats[0].numel()];
    for (&w, m) in weights.iter().zip(mats) {
        for (o, &v) in out.iter_mut().zip(m.values()) {
            *o += w * v;
        }
    }
    Array::new(shape, out)
}

/// Record the self-distillation loss on `tape`:
/// `Σ_{i<K} [KL(P_K ‖ exit i) + β·MSE(F_i, F_K)] + KL(P_M ‖ exit K) + β·MSE(F_K, F_M)`.
///
/// The top exit's outputs are read off the tape as detached values, so the
/// teachers (P_K, F_K, P_M, F_M) receive no gradient. `β = 0` zeroes the MSE
/// contributions exactly while keeping the K-KL/K-MSE term structure.
pub fn record_distill_loss(
    tape: &mut Tape,
    exits: &[TapedExit],
    p_m: &Array,
    f_m: &Array,
    beta: f64,
) -> Result<Var> {
    if exits.is_empty() {
        return Err(Error::InvalidArgument("at least one exit required".into()));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta must be a finite nonnegative scalar, got {beta}"
        )));
    }
    let k = exits.len();
    let top = exits[k - 1];
    let teacher_p = tensor::softmax(tape.value(top.logits))?;
    let teacher_f = tape.value(top.feature).clone();

    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, term: Var| -> Result<()> {
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
        Ok(())
    };
    for e in &exits[..k - 1] {
        let kl = tape.kl_divergence(&teacher_p, e.logits)?;
        push(tape, kl)?;
        let mse = tape.mean_squared_error(e.feature, &teacher_f)?;
        let scaled = tape.scale(mse, beta)?;
        push(tape, scaled)?;
    }
    let kl_top = tape.kl_divergence(p_m, top.logits)?;
    push(tape, kl_top)?;
    let mse_top = tape.mean_squared_error(top.feature, f_m)?;
    let scaled_top = tape.scale(mse_top, beta)?;
    push(tape, scaled_top)?;
    Ok(total.expect("at least the top-exit terms were pushed"))
}

/// The individual KL and MSE term values of the distillation loss, in exit
/// order (index K-1 holds the ensemble-taught top exit).
#[derive(Debug, Clone)]
pub struct DistillTerms {
    pub kl: Vec<f64>,
    pub mse: Vec<f64>,
}

/// Value-level term breakdown of the distillation loss.
pub fn distill_loss_terms(outputs: &ExitOutputs, p_m: &Array, f_m: &Array) -> Result<DistillTerms> {
    let k = outputs.num_exits();
    let teacher_p = &outputs.probs[k - 1];
    let teacher_f = &outputs.features[k - 1];
    let mut kl = Vec::with_capacity(k);
    let mut mse = Vec::with_capacity(k);
    for i in 0..k - 1 {
        kl.push(tensor::kl_divergence(teacher_p, &outputs.logits[i])?);
        mse.push(tensor::mean_squared_error(&outputs.features[i], teacher_f)?);
    }
    kl.push(tensor::kl_divergence(p_m, &outputs.logits[k - 1])?);
    mse.push(tensor::mean_squared_error(&outputs.features[k - 1], f_m)?);
    Ok(DistillTerms { kl, mse })
}

/// Value-level distillation loss (same term order as the recorded form).
pub fn hierarchical_distill_loss(
    outputs: &ExitOutputs,
    p_m: &Array,
    f_m: &Array,
    beta: f64,
) -> Result<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta must be a finite nonnegative scalar, got {beta}"
        )));
    }
    let terms = distill_loss_terms(outputs, p_m, f_m)?;
    let mut total = 0.0;
    for (kl, mse) in terms.kl.iter().zip(&terms.mse) {
        total += kl + beta * mse;
    }
    Ok(total)
}

/// Mean losses over one cloud phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct DistillStats {
    pub batches: usize,
    pub mean_meta_loss: f64,
    pub mean_distill_loss: f64,
}

/// Run the cloud phase: `cfg.epochs` seeded-shuffled passes over the public
/// set. Per batch: plain forward → one meta step → ensemble outputs →
/// recorded distillation loss → one SGD step on the model weights (the
/// meta-logits are frozen for that step). `Off` mode and zero epochs are
/// clean no-ops.
#[allow(clippy::too_many_arguments)]
pub fn distill_epochs(
    store: &mut ParameterStore,
    spec: &HierarchyNetSpec,
    library: &mut EnsembleLibrary,
    public: &Dataset,
    cfg: &DistillConfig,
    round_lr: f64,
    master_seed: u64,
    round: u64,
) -> Result<DistillStats> {
    cfg.validate()?;
    if cfg.mode == DistillMode::Off || cfg.epochs == 0 {
        return Ok(DistillStats::default());
    }
    check_full_store(store, spec)?;
    if library.num_exits() != spec.num_exits {
        return Err(Error::InvalidArgument(format!(
            "library has {} exits but the model has {}",
            library.num_exits(),
            spec.num_exits
        )));
    }
    let lr = cfg.lr_override.unwrap_or(round_lr);
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "distill lr must be positive, got {lr}"
        )));
    }
    let beta = cfg.effective_beta();

    let mut stats = DistillStats::default();
    let mut meta_sum = 0.0;
    let mut distill_sum = 0.0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng::rng_for(master_seed, &[stream::DISTILL, round, epoch as u64]);
        let mut order: Vec<usize> = (0..public.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = public.gather(chunk)?;
            let outputs = forward_all_exits(store, spec, &x)?;
            meta_sum += library.update_meta_learner(&outputs, &y, lr)?;
            let (p_m, f_m) = library.compute_ensemble(&outputs)?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let vars = register_params(&mut tape, store)?;
            let exits = record_forward_all(&mut tape, &vars, spec, xv)?;
            let loss = record_distill_loss(&mut tape, &exits, &p_m, &f_m, beta)?;
            distill_sum += tape.scalar(loss)?;
            let grads = tape.backward(loss)?;
            store.sgd_step(&grads, lr)?;
            stats.batches += 1;
        }
    }
    if stats.batches > 0 {
        stats.mean_meta_loss = meta_sum / stats.batches as f64;
        stats.mean_distill_loss = distill_sum / stats.batches as f64;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, extract_subset};
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_spec(k: usize) -> HierarchyNetSpec {
        HierarchyNetSpec {
            num_exits: k,
            input_dim: 6,
            trunk_widths: vec![8; k],
            feature_dim: 5,
            num_classes: 3,
        }
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array {
        use rand::distributions::{Distribution, Uniform};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        Array::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    fn outputs_for(spec: &HierarchyNetSpec, store: &ParameterStore, seed: u64) -> ExitOutputs {
        let x = random_batch(4, spec.input_dim, seed);
        forward_all_exits(store, spec, &x).unwrap()
    }

    /// Store whose exits all emit bit-identical outputs: trunk block 2 is the
    /// identity (valid because post-ReLU activations are nonnegative) and
    /// both exit heads share weights.
    fn identical_exit_store() -> (HierarchyNetSpec, ParameterStore) {
        let spec = tiny_spec(2);
        let mut store = build_network(&spec, 50).unwrap();
        let w = spec.trunk_widths[0];
        let mut eye = Array::zeros(vec![w, w]).unwrap();
        for i in 0..w {
            eye.values_mut()[i * w + i] = 1.0;
        }
        store.insert("trunk.2.W", eye);
        store.insert("trunk.2.b", Array::zeros(vec![w]).unwrap());
        for part in ["proj.W", "proj.b", "cls.W", "cls.b"] {
            let v = store.get(&format!("exit.1.{part}")).unwrap().clone();
            store.insert(format!("exit.2.{part}"), v);
        }
        (spec, store)
    }

    #[test]
    fn fresh_library_is_uniform() {
        let lib = EnsembleLibrary::new(4).unwrap();
        let w = lib.weights().unwrap();
        assert_eq!(w, vec![0.25; 4]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exit_count_mismatch_rejected() {
        let spec = tiny_spec(2);
        let store = build_network(&spec, 1).unwrap();
        let outputs = outputs_for(&spec, &store, 2);
        let mut lib = EnsembleLibrary::new(3).unwrap();
        assert!(lib
            .update_meta_learner(&outputs, &[0, 1, 2, 0], 0.1)
            .is_err());
        assert!(lib.compute_ensemble(&outputs).is_err());
    }

    #[test]
    fn identical_exit_probs_leave_meta_unchanged() {
        let (spec, store) = identical_exit_store();
        let outputs = outputs_for(&spec, &store, 3);
        assert!(outputs.probs[0].bitwise_eq(&outputs.probs[1]));
        let mut lib = EnsembleLibrary::new(2).unwrap();
        let before = lib.meta_logits().clone();
        lib.update_meta_learner(&outputs, &[0, 1, 2, 0], 0.5)
            .unwrap();
        assert!(lib.meta_logits().bitwise_eq(&before));
    }

    #[test]
    fn single_exit_meta_step_is_a_no_op() {
        let spec = tiny_spec(1);
        let store = build_network(&spec, 4).unwrap();
        let outputs = outputs_for(&spec, &store, 5);
        let mut lib = EnsembleLibrary::new(1).unwrap();
        let before = lib.meta_logits().clone();
        lib.update_meta_learner(&outputs, &[0, 1, 2, 0], 0.5)
            .unwrap();
        assert!(lib.meta_logits().bitwise_eq(&before));
        assert_eq!(lib.weights().unwrap(), vec![1.0]);
    }

    #[test]
    fn perfect_predictor_weight_climbs_toward_one() {
        // exit 2 of 3 nails every label; the others emit uniform rows
        let batch = 6;
        let classes = 3;
        let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
        let uniform = Array::new(vec![batch, classes], vec![1.0 / 3.0; batch * classes]).unwrap();
        let mut perfect = vec![0.001; batch * classes];
        for (r, &y) in labels.iter().enumerate() {
            perfect[r * classes + y] = 0.998;
        }
        let perfect = Array::new(vec![batch, classes], perfect).unwrap();
        let outputs = ExitOutputs {
            features: vec![Array::zeros(vec![batch, 2]).unwrap(); 3],
            logits: vec![uniform.clone(); 3],
            probs: vec![uniform.clone(), perfect, uniform],
        };
        let mut lib = EnsembleLibrary::new(3).unwrap();
        let mut last = lib.weights().unwrap()[1];
        for _ in 0..200 {
            lib.update_meta_learner(&outputs, &labels, 0.5).unwrap();
            let w = lib.weights().unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w[1] >= last, "perfect exit's weight decreased");
            last = w[1];
        }
        assert!(last > 0.9, "weight only reached {last}");
    }

    #[test]
    fn ensemble_mixes_probabilities() {
        let p1 = Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p2 = Array::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let outputs = ExitOutputs {
            features: vec![
                Array::new(vec![1, 2], vec![2.0, 0.0]).unwrap(),
                Array::new(vec![1, 2], vec![0.0, 4.0]).unwrap(),
            ],
            logits: vec![p1.clone(), p2.clone()],
            probs: vec![p1, p2],
        };
        let mut lib = EnsembleLibrary::new(2).unwrap();
        let (p_m, f_m) = lib.compute_ensemble(&outputs).unwrap();
        assert_eq!(p_m.values(), &[0.5, 0.5]);
        assert_eq!(f_m.values(), &[1.0, 2.0]);
        assert!(lib.cached().is_some());
    }

    #[test]
    fn one_hot_meta_collapses_ensemble_exactly() {
        let spec = tiny_spec(2);
        let store = build_network(&spec, 6).unwrap();
        let outputs = outputs_for(&spec, &store, 7);
        // logits [-2000, 0] underflow to the exact one-hot weights [0, 1]
        let mut lib =
            EnsembleLibrary::from_logits(Array::new(vec![2], vec![-2000.0, 0.0]).unwrap()).unwrap();
        assert_eq!(lib.weights().unwrap(), vec![0.0, 1.0]);
        let (p_m, f_m) = lib.compute_ensemble(&outputs).unwrap();
        assert!(p_m.bitwise_eq(&outputs.probs[1]));
        assert!(f_m.bitwise_eq(&outputs.features[1]));
    }

    #[test]
    fn ensemble_is_a_convex_combination() {
        let spec = tiny_spec(3);
        let store = build_network(&spec, 8).unwrap();
        let outputs = outputs_for(&spec, &store, 9);
        let mut lib =
            EnsembleLibrary::from_logits(Array::new(vec![3], vec![0.3, -0.8, 1.1]).unwrap())
                .unwrap();
        let (p_m, _) = lib.compute_ensemble(&outputs).unwrap();
        for r in 0..p_m.shape()[0] {
            let mut row_sum = 0.0;
            for c in 0..p_m.shape()[1] {
                let v = p_m.at2(r, c);
                row_sum += v;
                let lo = outputs
                    .probs
                    .iter()
                    .map(|p| p.at2(r, c))
                    .fold(f64::MAX, f64::min);
                let hi = outputs
                    .probs
                    .iter()
                    .map(|p| p.at2(r, c))
                    .fold(f64::MIN, f64::max);
                assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_on_best_exit_makes_meta_loss_that_exits_ce() {
        let spec = tiny_spec(2);
        let store = build_network(&spec, 60).unwrap();
        let x = random_batch(5, spec.input_dim, 61);
        let labels = vec![0usize, 1, 2, 0, 1];
        let outputs = forward_all_exits(&store, &spec, &x).unwrap();
        let ce: Vec<f64> = (0..2)
            .map(|i| tensor::cross_entropy(&outputs.logits[i], &labels).unwrap())
            .collect();
        let best = if ce[0] <= ce[1] { 0 } else { 1 };
        let mut logits = vec![-2000.0; 2];
        logits[best] = 0.0;
        let mut lib = EnsembleLibrary::from_logits(Array::new(vec![2], logits).unwrap()).unwrap();
        // read the loss without moving the weights materially
        let loss = {
            let outputs = outputs.clone();
            let mut probe = lib.clone();
            probe.update_meta_learner(&outputs, &labels, 1e-12).unwrap()
        };
        assert!((loss - ce[best]).abs() < 1e-12);
        let _ = lib.compute_ensemble(&outputs).unwrap();
    }

    #[test]
    fn fixed_point_loss_and_gradients_vanish() {
        let (spec, store) = identical_exit_store();
        let x = random_batch(4, spec.input_dim, 51);
        let outputs = forward_all_exits(&store, &spec, &x).unwrap();
        assert!(outputs.logits[0].bitwise_eq(&outputs.logits[1]));

        let mut lib =
            EnsembleLibrary::from_logits(Array::new(vec![2], vec![-2000.0, 0.0]).unwrap()).unwrap();
        let (p_m, f_m) = lib.compute_ensemble(&outputs).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = register_params(&mut tape, &store).unwrap();
        let exits = record_forward_all(&mut tape, &vars, &spec, xv).unwrap();
        let loss = record_distill_loss(&mut tape, &exits, &p_m, &f_m, 0.1).unwrap();
        assert!(tape.scalar(loss).unwrap().abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        for (name, g) in &grads {
            assert!(
                g.values().iter().all(|&v| v == 0.0),
                "gradient on {name} is not exactly zero"
            );
        }

        // the meta gradient vanishes too: identical probs → symmetric mixture
        let before = lib.meta_logits().clone();
        lib.update_meta_learner(&outputs, &[0, 1, 2, 0], 0.5)
            .unwrap();
        assert!(lib.meta_logits().bitwise_eq(&before));
    }

    #[test]
    fn single_exit_distill_loss_is_degenerate_zero() {
        let spec = tiny_spec(1);
        let store = build_network(&spec, 70).unwrap();
        let x = random_batch(3, spec.input_dim, 71);
        let outputs = forward_all_exits(&store, &spec, &x).unwrap();
        let mut lib = EnsembleLibrary::new(1).unwrap();
        let (p_m, f_m) = lib.compute_ensemble(&outputs).unwrap();
        assert!(p_m.bitwise_eq(&outputs.probs[0]));

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = register_params(&mut tape, &store).unwrap();
        let exits = record_forward_all(&mut tape, &vars, &spec, xv).unwrap();
        let loss = record_distill_loss(&mut tape, &exits, &p_m, &f_m, 0.1).unwrap();
        assert!(tape.scalar(loss).unwrap().abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        for (name, g) in &grads {
            assert!(
                g.values().iter().all(|&v| v == 0.0),
                "gradient on {name} is not exactly zero"
            );
        }
    }

    #[test]
    fn term_structure_counts_k_kl_and_k_mse() {
        for k in 1..=4 {
            let spec = tiny_spec(k);
            let store = build_network(&spec, 80 + k as u64).unwrap();
            let outputs = outputs_for(&spec, &store, 90 + k as u64);
            let mut lib = EnsembleLibrary::new(k).unwrap();
            let (p_m, f_m) = lib.compute_ensemble(&outputs).unwrap();
            let terms = distill_loss_terms(&outputs, &p_m, &f_m).unwrap();
            assert_eq!(terms.kl.len(), k);
            assert_eq!(terms.mse.len(), k);
        }
    }

    #[test]
    fn beta_zero_equals_kl_only_sum() {
        let spec = tiny_spec(3);
        let store = build_network(&spec, 82).unwrap();
        let outputs = outputs_for(&spec, &store, 83);
        let mut lib =
            EnsembleLibrary::from_logits(Array::new(vec![3], vec![0.2, -0.1, 0.4]).unwrap())
                .unwrap();
        let (p_m, f_m) = lib.compute_ensemble(&outputs).unwrap();
        let loss0 = hierarchical_distill_loss(&outputs, &p_m, &f_m, 0.0).unwrap();
        let terms = distill_loss_terms(&outputs, &p_m, &f_m).unwrap();
        let kl_sum: f64 = terms.kl.iter().sum();
        assert!((loss0 - kl_sum).abs() < 1e-12);
        let loss_beta = hierarchical_distill_loss(&outputs, &p_m, &f_m, 0.1).unwrap();
        assert!(loss_beta >= loss0);
        assert!(hierarchical_distill_loss(&outputs, &p_m, &f_m, -0.1).is_err());
    }

    #[test]
    fn distill_step_never_touches_meta_and_meta_step_never_touches_model() {
        let spec = tiny_spec(2);
        let mut store = build_network(&spec, 84).unwrap();
        let x = random_batch(4, spec.input_dim, 85);
        let labels = vec![0usize, 1, 2, 0];
        let mut lib = EnsembleLibrary::new(2).unwrap();

        let store_before = store.clone();
        let outputs = forward_all_exits(&store, &spec, &x).unwrap();
        lib.update_meta_learner(&outputs, &labels, 0.3).unwrap();
        assert!(store.bitwise_eq(&store_before));

        let meta_before = lib.meta_logits().clone();
        let (p_m, f_m) = lib.compute_ensemble(&outputs).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = register_params(&mut tape, &store).unwrap();
        let exits = record_forward_all(&mut tape, &vars, &spec, xv).unwrap();
        let loss = record_distill_loss(&mut tape, &exits, &p_m, &f_m, 0.1).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.contains_key(META_PARAM));
        store.sgd_step(&grads, 0.3).unwrap();
        assert!(lib.meta_logits().bitwise_eq(&meta_before));
        assert!(!store.bitwise_eq(&store_before));
    }

    #[test]
    fn off_mode_and_zero_epochs_are_no_ops() {
        let spec = tiny_spec(2);
        let mut store = build_network(&spec, 86).unwrap();
        let mut lib = EnsembleLibrary::new(2).unwrap();
        let public = crate::data::generate_synthetic(3, 6, 4, 0.3, 87).unwrap();
        let before = store.clone();
        let meta_before = lib.meta_logits().clone();

        let off = DistillConfig {
            mode: DistillMode::Off,
            ..DistillConfig::default()
        };
        let stats = distill_epochs(&mut store, &spec, &mut lib, &public, &off, 0.05, 1, 1).unwrap();
        assert_eq!(stats.batches, 0);
        assert!(store.bitwise_eq(&before));
        assert!(lib.meta_logits().bitwise_eq(&meta_before));

        let zero = DistillConfig {
            epochs: 0,
            ..DistillConfig::default()
        };
        let stats =
            distill_epochs(&mut store, &spec, &mut lib, &public, &zero, 0.05, 1, 1).unwrap();
        assert_eq!(stats.batches, 0);
        assert!(store.bitwise_eq(&before));
    }

    #[test]
    fn distill_epochs_is_deterministic() {
        let spec = tiny_spec(2);
        let public = crate::data::generate_synthetic(3, 6, 20, 0.3, 88).unwrap();
        let run = || {
            let mut store = build_network(&spec, 89).unwrap();
            let mut lib = EnsembleLibrary::new(2).unwrap();
            let cfg = DistillConfig::default();
            distill_epochs(&mut store, &spec, &mut lib, &public, &cfg, 0.05, 42, 3).unwrap();
            (store, lib)
        };
        let (s1, l1) = run();
        let (s2, l2) = run();
        assert!(s1.bitwise_eq(&s2));
        assert!(l1.meta_logits().bitwise_eq(l2.meta_logits()));
    }

    #[test]
    fn distillation_improves_a_weak_exit_taught_by_a_strong_one() {
        // train exit 2 supervised on the public set, then check distillation
        // pulls exit 1's public cross-entropy down, on 3 seeds
        for seed in [101u64, 102, 103] {
            let spec = tiny_spec(2);
            let mut store = build_network(&spec, seed).unwrap();
            let public = crate::data::generate_synthetic(3, 6, 12, 0.25, seed + 10).unwrap();
            let (x, y) = public
                .gather(&(0..public.len()).collect::<Vec<_>>())
                .unwrap();

            // supervised warm-up of the top exit only
            let top = extract_subset(&store, &spec, 2).unwrap();
            let mut top_map = top.map().clone();
            for _ in 0..120 {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let vars = {
                    let mut vars = std::collections::BTreeMap::new();
                    for (name, value) in &top_map {
                        vars.insert(name.clone(), tape.param(name, value.clone()).unwrap());
                    }
                    vars
                };
                let exit = crate::model::record_forward_exit(&mut tape, &vars, 2, xv).unwrap();
                let loss = tape.cross_entropy(exit.logits, &y).unwrap();
                let grads = tape.backward(loss).unwrap();
                sgd_step(&mut top_map, &grads, 0.2).unwrap();
            }
            for (name, value) in top_map {
                store.insert(name, value);
            }

            let ce_before = {
                let out = forward_all_exits(&store, &spec, &x).unwrap();
                tensor::cross_entropy(&out.logits[0], &y).unwrap()
            };
            let mut lib = EnsembleLibrary::new(2).unwrap();
            let cfg = DistillConfig {
                epochs: 20,
                ..DistillConfig::default()
            };
            distill_epochs(&mut store, &spec, &mut lib, &public, &cfg, 0.05, seed, 1).unwrap();
            let ce_after = {
                let out = forward_all_exits(&store, &spec, &x).unwrap();
                tensor::cross_entropy(&out.logits[0], &y).unwrap()
            };
            assert!(
                ce_after < ce_before,
                "seed {seed}: exit 1 CE rose from {ce_before} to {ce_after}"
            );
        }
    }

    #[test]
    fn single_exit_distillation_leaves_weights_bit_identical() {
        // K=1 zero-gradient fixed point: distilling changes nothing at all
        let spec = tiny_spec(1);
        let mut store = build_network(&spec, 91).unwrap();
        let mut lib = EnsembleLibrary::new(1).unwrap();
        let public = crate::data::generate_synthetic(3, 6, 10, 0.3, 92).unwrap();
        let before = store.clone();
        let meta_before = lib.meta_logits().clone();
        let cfg = DistillConfig::default();
        let stats = distill_epochs(&mut store, &spec, &mut lib, &public, &cfg, 0.05, 7, 2).unwrap();
        assert!(stats.batches > 0);
        assert!(store.bitwise_eq(&before));
        assert!(lib.meta_logits().bitwise_eq(&meta_before));
    }
}
