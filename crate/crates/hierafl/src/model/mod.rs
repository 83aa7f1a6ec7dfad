//! The global multi-exit network and its nested hierarchy submodels.
//!
//! The network is a K-block dense ReLU trunk. After block i sits exit head i:
//! a projector mapping the trunk activation to a common feature width
//! (post-ReLU output = the exit's feature F_i) followed by a linear
//! classifier producing logits V_i. The hierarchy model of capability c is
//! the prefix `trunk.1..c` plus `exit.c` — nothing else — so devices of
//! different budgets share trunk prefixes while owning their own heads.
//!
//! Canonical parameter names: `trunk.{b}.W`, `trunk.{b}.b` for b ∈ 1..=K and
//! `exit.{i}.proj.W`, `exit.{i}.proj.b`, `exit.{i}.cls.W`, `exit.{i}.cls.b`
//! for i ∈ 1..=K. Every cross-module contract (aggregation membership,
//! checkpoints, gradient maps) speaks this naming scheme.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Array, GradientMap, Tape, Var};

/// Architecture of the global multi-exit network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyNetSpec {
    /// Number of trunk blocks and exit heads, K.
    pub num_exits: usize,
    /// Input feature dimension d0.
    pub input_dim: usize,
    /// Output width of each trunk block; length K.
    pub trunk_widths: Vec<usize>,
    /// Common width of every exit's projector output.
    pub feature_dim: usize,
    /// Number of classes C.
    pub num_classes: usize,
}

impl HierarchyNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_exits == 0 {
            return Err(Error::InvalidArgument("num_exits must be ≥ 1".into()));
        }
        if self.trunk_widths.len() != self.num_exits {
            return Err(Error::InvalidArgument(format!(
                "trunk_widths has {} entries for {} exits",
                self.trunk_widths.len(),
                self.num_exits
            )));
        }
        for (&d, what) in [self.input_dim, self.feature_dim, self.num_classes]
            .iter()
            .zip(["input_dim", "feature_dim", "num_classes"])
        {
            if d == 0 {
                return Err(Error::InvalidArgument(format!("{what} must be ≥ 1")));
            }
        }
        if let Some(b) = self.trunk_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "trunk width for block {} must be ≥ 1",
                b + 1
            )));
        }
        Ok(())
    }

    /// Input width of trunk block `b` (1-based).
    fn trunk_in(&self, b: usize) -> usize {
        if b == 1 {
            self.input_dim
        } else {
            self.trunk_widths[b - 2]
        }
    }

    /// Canonical `(name, shape)` list: trunk blocks 1..=K, then exits 1..=K.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.num_exits;
        let mut out = Vec::with_capacity(6 * k);
        for b in 1..=k {
            let (din, dout) = (self.trunk_in(b), self.trunk_widths[b - 1]);
            out.push((format!("trunk.{b}.W"), vec![din, dout]));
            out.push((format!("trunk.{b}.b"), vec![dout]));
        }
        for i in 1..=k {
            let width = self.trunk_widths[i - 1];
            out.push((format!("exit.{i}.proj.W"), vec![width, self.feature_dim]));
            out.push((format!("exit.{i}.proj.b"), vec![self.feature_dim]));
            out.push((
                format!("exit.{i}.cls.W"),
                vec![self.feature_dim, self.num_classes],
            ));
            out.push((format!("exit.{i}.cls.b"), vec![self.num_classes]));
        }
        out
    }

    /// Names owned by a capability-`c` hierarchy model: trunk 1..=c plus exit c.
    pub fn subset_names(&self, capability: usize) -> Result<Vec<String>> {
        if capability == 0 || capability > self.num_exits {
            return Err(Error::InvalidArgument(format!(
                "capability {capability} out of range 1..={}",
                self.num_exits
            )));
        }
        let mut names = Vec::with_capacity(2 * capability + 4);
        for b in 1..=capability {
            names.push(format!("trunk.{b}.W"));
            names.push(format!("trunk.{b}.b"));
        }
        names.push(format!("exit.{capability}.proj.W"));
        names.push(format!("exit.{capability}.proj.b"));
        names.push(format!("exit.{capability}.cls.W"));
        names.push(format!("exit.{capability}.cls.b"));
        Ok(names)
    }

    /// Reconstruct the architecture from a full store's names and shapes
    /// (used when evaluating a checkpoint without its original config).
    pub fn infer_from(store: &ParameterStore) -> Result<HierarchyNetSpec> {
        let mut k = 0;
        while store.contains(&format!("trunk.{}.W", k + 1)) {
            k += 1;
        }
        if k == 0 {
            return Err(Error::Parameter(
                "store has no trunk.1.W; cannot infer an architecture".into(),
            ));
        }
        let input_dim = store.get("trunk.1.W")?.shape()[0];
        let trunk_widths: Vec<usize> = (1..=k)
            .map(|b| store.get(&format!("trunk.{b}.W")).map(|a| a.shape()[1]))
            .collect::<Result<_>>()?;
        let feature_dim = store.get("exit.1.proj.W")?.shape()[1];
        let num_classes = store.get("exit.1.cls.W")?.shape()[1];
        let spec = HierarchyNetSpec {
            num_exits: k,
            input_dim,
            trunk_widths,
            feature_dim,
            num_classes,
        };
        check_full_store(store, &spec)?;
        Ok(spec)
    }
}

/// Named parameter arrays with value semantics; iteration is always in
/// lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Array>,
}

impl ParameterStore {
    pub fn from_map(params: BTreeMap<String, Array>) -> Self {
        ParameterStore { params }
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn map(&self) -> &BTreeMap<String, Array> {
        &self.params
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Array> {
        &mut self.params
    }

    /// `p ← p − lr·g` for every gradient key (see [`tensor::sgd_step`]).
    pub fn sgd_step(&mut self, grads: &GradientMap, lr: f64) -> Result<()> {
        tensor::sgd_step(&mut self.params, grads, lr)
    }

    /// True when both stores hold identical names with bit-identical values.
    pub fn bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((an, av), (bn, bv))| an == bn && av.bitwise_eq(bv))
    }
}

/// Per-exit outputs of a full forward pass: features F_i (B×f), logits V_i
/// (B×C), and probabilities P_i = softmax(V_i). Index 0 holds exit 1.
#[derive(Debug, Clone)]
pub struct ExitOutputs {
    pub features: Vec<Array>,
    pub logits: Vec<Array>,
    pub probs: Vec<Array>,
}

impl ExitOutputs {
    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }

    pub fn batch_size(&self) -> usize {
        self.logits[0].shape()[0]
    }
}

/// Taped handles to one exit's feature and logits.
#[derive(Debug, Clone, Copy)]
pub struct TapedExit {
    pub feature: Var,
    pub logits: Var,
}

/// Initialize a full network: weights uniform in ±sqrt(6/(fan_in+fan_out)),
/// biases zero, drawn in canonical parameter order from a seeded generator
/// (biases consume no draws).
pub fn build_network(spec: &HierarchyNetSpec, seed: u64) -> Result<ParameterStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in spec.param_shapes() {
        let numel: usize = shape.iter().product();
        let values = if name.ends_with(".W") {
            let (fan_in, fan_out) = (shape[0], shape[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            (0..numel).map(|_| dist.sample(&mut rng)).collect()
        } else {
            vec![0.0; numel]
        };
        params.insert(name, Array::new(shape, values)?);
    }
    Ok(ParameterStore::from_map(params))
}

/// Verify `store` holds every parameter of `spec` with conforming shape;
/// missing names are all listed in the diagnostic.
pub fn check_full_store(store: &ParameterStore, spec: &HierarchyNetSpec) -> Result<()> {
    let mut missing = Vec::new();
    for (name, shape) in spec.param_shapes() {
        match store.params.get(&name) {
            None => missing.push(name),
            Some(a) if a.shape() != shape => {
                return Err(Error::Parameter(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    a.shape()
                )));
            }
            Some(_) => {}
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "store is not a full global model; missing: {}",
            missing.join(", ")
        )))
    }
}

/// Register every store entry as a trainable tape leaf.
pub fn register_params(tape: &mut Tape, store: &ParameterStore) -> Result<BTreeMap<String, Var>> {
    let mut vars = BTreeMap::new();
    for (name, value) in &store.params {
        vars.insert(name.clone(), tape.param(name, value.clone())?);
    }
    Ok(vars)
}

/// Register every store entry as a constant tape leaf (no gradients).
pub fn register_constants(tape: &mut Tape, store: &ParameterStore) -> BTreeMap<String, Var> {
    let mut vars = BTreeMap::new();
    for (name, value) in &store.params {
        vars.insert(name.clone(), tape.constant(value.clone()));
    }
    vars
}

fn var_of(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Parameter(format!("parameter {name:?} not registered on the tape")))
}

/// Record trunk blocks 1..=depth; returns the activation after each block.
fn record_trunk(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    x: Var,
    depth: usize,
) -> Result<Vec<Var>> {
    let mut h = x;
    let mut acts = Vec::with_capacity(depth);
    for b in 1..=depth {
        let w = var_of(vars, &format!("trunk.{b}.W"))?;
        let bias = var_of(vars, &format!("trunk.{b}.b"))?;
        let z = tape.linear(h, w, bias)?;
        h = tape.relu(z)?;
        acts.push(h);
    }
    Ok(acts)
}

/// Record exit head `i` on trunk activation `h`: F = relu(proj(h)),
/// V = cls(F).
fn record_exit_head(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    h: Var,
    i: usize,
) -> Result<TapedExit> {
    let pw = var_of(vars, &format!("exit.{i}.proj.W"))?;
    let pb = var_of(vars, &format!("exit.{i}.proj.b"))?;
    let cw = var_of(vars, &format!("exit.{i}.cls.W"))?;
    let cb = var_of(vars, &format!("exit.{i}.cls.b"))?;
    let pre = tape.linear(h, pw, pb)?;
    let feature = tape.relu(pre)?;
    let logits = tape.linear(feature, cw, cb)?;
    Ok(TapedExit { feature, logits })
}

/// Record the full network: all K trunk blocks, all K exits.
pub fn record_forward_all(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    spec: &HierarchyNetSpec,
    x: Var,
) -> Result<Vec<TapedExit>> {
    let acts = record_trunk(tape, vars, x, spec.num_exits)?;
    let mut exits = Vec::with_capacity(spec.num_exits);
    for i in 1..=spec.num_exits {
        exits.push(record_exit_head(tape, vars, acts[i - 1], i)?);
    }
    Ok(exits)
}

/// Record the capability-`c` hierarchy model: trunk 1..=c plus exit c.
pub fn record_forward_exit(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    capability: usize,
    x: Var,
) -> Result<TapedExit> {
    if capability == 0 {
        return Err(Error::InvalidArgument("capability must be ≥ 1".into()));
    }
    let acts = record_trunk(tape, vars, x, capability)?;
    record_exit_head(tape, vars, acts[capability - 1], capability)
}

/// Value-only forward through every exit of a full store.
pub fn forward_all_exits(
    store: &ParameterStore,
    spec: &HierarchyNetSpec,
    x: &Array,
) -> Result<ExitOutputs> {
    check_full_store(store, spec)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = register_constants(&mut tape, store);
    let exits = record_forward_all(&mut tape, &vars, spec, xv)?;
    let mut out = ExitOutputs {
        features: Vec::with_capacity(exits.len()),
        logits: Vec::with_capacity(exits.len()),
        probs: Vec::with_capacity(exits.len()),
    };
    for e in exits {
        out.features.push(tape.value(e.feature).clone());
        let logits = tape.value(e.logits).clone();
        out.probs.push(tensor::softmax(&logits)?);
        out.logits.push(logits);
    }
    Ok(out)
}

/// Capability of a subset store, verifying it is exactly `trunk.1..=c`
/// plus `exit.c`.
pub fn capability_of_subset(store: &ParameterStore) -> Result<usize> {
    let mut c = 0;
    while store.contains(&format!("trunk.{}.W", c + 1)) {
        c += 1;
    }
    if c == 0 {
        return Err(Error::Parameter("subset store has no trunk.1.W".into()));
    }
    let mut expected: Vec<String> = Vec::new();
    for b in 1..=c {
        expected.push(format!("trunk.{b}.W"));
        expected.push(format!("trunk.{b}.b"));
    }
    for part in ["proj.W", "proj.b", "cls.W", "cls.b"] {
        expected.push(format!("exit.{c}.{part}"));
    }
    let mut expected_sorted = expected.clone();
    expected_sorted.sort();
    let actual: Vec<String> = store.names().map(String::from).collect();
    if actual != expected_sorted {
        return Err(Error::Parameter(format!(
            "malformed capability-{c} subset; expected names {expected_sorted:?}, got {actual:?}"
        )));
    }
    Ok(c)
}

/// Value-only forward through a capability-`c` subset store.
/// Returns `(V, P, F)`: logits, probabilities, feature.
pub fn forward_exit(store: &ParameterStore, x: &Array) -> Result<(Array, Array, Array)> {
    let c = capability_of_subset(store)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = register_constants(&mut tape, store);
    let exit = record_forward_exit(&mut tape, &vars, c, xv)?;
    let logits = tape.value(exit.logits).clone();
    let probs = tensor::softmax(&logits)?;
    let feature = tape.value(exit.feature).clone();
    Ok((logits, probs, feature))
}

/// Copy the capability-`c` slice (trunk 1..=c plus exit c) out of a full store.
pub fn extract_subset(
    global: &ParameterStore,
    spec: &HierarchyNetSpec,
    capability: usize,
) -> Result<ParameterStore> {
    check_full_store(global, spec)?;
    let mut params = BTreeMap::new();
    for name in spec.subset_names(capability)? {
        params.insert(name.clone(), global.get(&name)?.clone());
    }
    Ok(ParameterStore::from_map(params))
}

/// `p ← p + delta` for every update key; other parameters keep their bits.
/// Every key must name an existing parameter of matching shape.
pub fn merge_named_update(global: &mut ParameterStore, update: &GradientMap) -> Result<()> {
    for (name, delta) in update {
        let p = global
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("merge: unknown parameter {name:?}")))?;
        if p.shape() != delta.shape() {
            return Err(Error::Shape {
                op: "merge_named_update",
                detail: format!(
                    "parameter {name:?} has shape {:?} but update has {:?}",
                    p.shape(),
                    delta.shape()
                ),
            });
        }
        for (pv, &dv) in p.values_mut().iter_mut().zip(delta.values()) {
            *pv += dv;
        }
        if let Some(bad) = p.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArray(format!(
                "merge: parameter {name:?} became non-finite ({bad})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> HierarchyNetSpec {
        HierarchyNetSpec {
            num_exits: 4,
            input_dim: 64,
            trunk_widths: vec![64, 64, 64, 64],
            feature_dim: 32,
            num_classes: 10,
        }
    }

    fn tiny_spec(k: usize) -> HierarchyNetSpec {
        HierarchyNetSpec {
            num_exits: k,
            input_dim: 5,
            trunk_widths: vec![6; k],
            feature_dim: 4,
            num_classes: 3,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        Array::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = small_spec();
        let a = build_network(&spec, 7).unwrap();
        let b = build_network(&spec, 7).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = build_network(&spec, 8).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn build_shape_bookkeeping() {
        // 4 trunk blocks × (W, b) + 4 exits × (proj.W, proj.b, cls.W, cls.b)
        let spec = small_spec();
        let store = build_network(&spec, 1).unwrap();
        assert_eq!(store.len(), 24);
        assert_eq!(store.get("trunk.1.W").unwrap().shape(), &[64, 64]);
        assert_eq!(store.get("exit.3.proj.W").unwrap().shape(), &[64, 32]);
        assert_eq!(store.get("exit.3.cls.W").unwrap().shape(), &[32, 10]);
        assert_eq!(store.get("exit.2.cls.b").unwrap().shape(), &[10]);
    }

    #[test]
    fn biases_start_at_zero_and_weights_respect_limits() {
        let spec = tiny_spec(2);
        let store = build_network(&spec, 3).unwrap();
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let a = store.get(&name).unwrap();
            if name.ends_with(".b") {
                assert!(a.values().iter().all(|&v| v == 0.0), "{name} not zero");
            } else {
                let limit = (6.0 / (a.shape()[0] + a.shape()[1]) as f64).sqrt();
                assert!(
                    a.values().iter().all(|&v| v.abs() <= limit),
                    "{name} exceeds ±{limit}"
                );
            }
        }
    }

    #[test]
    fn forward_all_shape_contract() {
        let spec = small_spec();
        let store = build_network(&spec, 2).unwrap();
        let x = random_input(1, 64, 9);
        let out = forward_all_exits(&store, &spec, &x).unwrap();
        assert_eq!(out.num_exits(), 4);
        for i in 0..4 {
            assert_eq!(out.features[i].shape(), &[1, 32]);
            assert_eq!(out.logits[i].shape(), &[1, 10]);
            assert_eq!(out.probs[i].shape(), &[1, 10]);
        }
    }

    #[test]
    fn all_zero_weights_give_uniform_probs() {
        let spec = tiny_spec(3);
        let zeros: BTreeMap<String, Array> = spec
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Array::zeros(s).unwrap()))
            .collect();
        let store = ParameterStore::from_map(zeros);
        let x = random_input(5, 5, 11);
        let out = forward_all_exits(&store, &spec, &x).unwrap();
        for p in &out.probs {
            for &v in p.values() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exit_outputs_depend_only_on_their_trunk_prefix() {
        let spec = small_spec();
        let store = build_network(&spec, 4).unwrap();
        let x = random_input(3, 64, 5);
        let base = forward_all_exits(&store, &spec, &x).unwrap();

        for i in 1..4usize {
            let mut perturbed = store.clone();
            let name = format!("trunk.{}.W", i + 1);
            let mut w = perturbed.get(&name).unwrap().clone();
            w.values_mut()[0] += 10.0;
            perturbed.insert(name, w);
            let out = forward_all_exits(&perturbed, &spec, &x).unwrap();
            for j in 0..i {
                assert!(
                    out.features[j].bitwise_eq(&base.features[j]),
                    "F_{} changed",
                    j + 1
                );
                assert!(
                    out.probs[j].bitwise_eq(&base.probs[j]),
                    "P_{} changed",
                    j + 1
                );
            }
            assert!(
                !out.logits[i].bitwise_eq(&base.logits[i]),
                "V_{} should change",
                i + 1
            );
        }
    }

    #[test]
    fn subset_forward_agrees_with_full_forward_on_100_fixtures() {
        for trial in 0..100u64 {
            let k = 1 + (trial % 4) as usize;
            let spec = tiny_spec(k);
            let store = build_network(&spec, 100 + trial).unwrap();
            let c = 1 + (trial as usize / 4) % k;
            let x = random_input(2, 5, 200 + trial);
            let subset = extract_subset(&store, &spec, c).unwrap();
            let (v, p, f) = forward_exit(&subset, &x).unwrap();
            let full = forward_all_exits(&store, &spec, &x).unwrap();
            // identical kernel sequence → bitwise agreement, stronger than 1e-12
            assert!(v.bitwise_eq(&full.logits[c - 1]));
            assert!(p.bitwise_eq(&full.probs[c - 1]));
            assert!(f.bitwise_eq(&full.features[c - 1]));
        }
    }

    #[test]
    fn extract_subset_naming_contract() {
        let spec = small_spec();
        let store = build_network(&spec, 6).unwrap();
        let sub = extract_subset(&store, &spec, 2).unwrap();
        let names: Vec<&str> = sub.names().collect();
        assert_eq!(
            names,
            vec![
                "exit.2.cls.W",
                "exit.2.cls.b",
                "exit.2.proj.W",
                "exit.2.proj.b",
                "trunk.1.W",
                "trunk.1.b",
                "trunk.2.W",
                "trunk.2.b",
            ]
        );
        let top = extract_subset(&store, &spec, 4).unwrap();
        assert_eq!(top.len(), 12);
        assert!(top.contains("exit.4.cls.W"));
        assert!(!top.contains("exit.3.cls.W"));

        assert!(extract_subset(&store, &spec, 0).is_err());
        assert!(extract_subset(&store, &spec, 5).is_err());
    }

    #[test]
    fn trunk_prefixes_nest_across_capabilities() {
        let spec = small_spec();
        for c1 in 1..4usize {
            for c2 in (c1 + 1)..=4 {
                let n1: Vec<String> = spec
                    .subset_names(c1)
                    .unwrap()
                    .into_iter()
                    .filter(|n| !n.starts_with(&format!("exit.{c1}.")))
                    .collect();
                let n2: Vec<String> = spec
                    .subset_names(c2)
                    .unwrap()
                    .into_iter()
                    .filter(|n| !n.starts_with(&format!("exit.{c2}.")))
                    .collect();
                assert!(n1.len() < n2.len());
                assert!(n1.iter().all(|n| n2.contains(n)));
            }
        }
    }

    #[test]
    fn forward_all_rejects_subset_store() {
        let spec = small_spec();
        let store = build_network(&spec, 6).unwrap();
        let sub = extract_subset(&store, &spec, 2).unwrap();
        let x = random_input(1, 64, 1);
        let err = forward_all_exits(&sub, &spec, &x).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("trunk.3.W"),
            "diagnostic should list missing names: {msg}"
        );
        assert!(msg.contains("exit.1.proj.W"), "got: {msg}");
    }

    #[test]
    fn merge_roundtrip_and_unknown_key() {
        let spec = tiny_spec(2);
        let mut store = build_network(&spec, 13).unwrap();
        let before = store.clone();
        merge_named_update(&mut store, &GradientMap::new()).unwrap();
        assert!(store.bitwise_eq(&before));

        let mut unknown = GradientMap::new();
        unknown.insert("trunk.9.W".into(), Array::scalar(1.0).unwrap());
        assert!(merge_named_update(&mut store, &unknown).is_err());
    }

    #[test]
    fn merge_touching_one_exit_leaves_the_rest_bit_identical() {
        let spec = tiny_spec(3);
        let mut store = build_network(&spec, 14).unwrap();
        let before = store.clone();
        let mut update = GradientMap::new();
        let shape = store.get("exit.1.cls.b").unwrap().shape().to_vec();
        update.insert(
            "exit.1.cls.b".into(),
            Array::new(shape.clone(), vec![0.25; shape[0]]).unwrap(),
        );
        merge_named_update(&mut store, &update).unwrap();
        for name in before.names() {
            if name == "exit.1.cls.b" {
                assert!(!store
                    .get(name)
                    .unwrap()
                    .bitwise_eq(before.get(name).unwrap()));
            } else {
                assert!(store
                    .get(name)
                    .unwrap()
                    .bitwise_eq(before.get(name).unwrap()));
            }
        }
    }

    #[test]
    fn merge_with_lr_scaled_deltas_equals_sgd_step() {
        let spec = tiny_spec(2);
        let store = build_network(&spec, 15).unwrap();
        let mut grads = GradientMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dist = Uniform::new(-1.0, 1.0);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let shape = store.get(&name).unwrap().shape().to_vec();
            let numel: usize = shape.iter().product();
            grads.insert(
                name,
                Array::new(shape, (0..numel).map(|_| dist.sample(&mut rng)).collect()).unwrap(),
            );
        }
        let lr = 0.05;

        let mut via_sgd = store.clone();
        via_sgd.sgd_step(&grads, lr).unwrap();

        let deltas: GradientMap = grads
            .iter()
            .map(|(n, g)| {
                let scaled: Vec<f64> = g.values().iter().map(|&v| -lr * v).collect();
                (n.clone(), Array::new(g.shape().to_vec(), scaled).unwrap())
            })
            .collect();
        let mut via_merge = store.clone();
        merge_named_update(&mut via_merge, &deltas).unwrap();

        assert!(via_sgd.bitwise_eq(&via_merge));
    }

    #[test]
    fn spec_validation_rejects_bad_architectures() {
        let mut spec = tiny_spec(2);
        spec.trunk_widths = vec![6];
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec(2);
        spec.num_classes = 0;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec(2);
        spec.trunk_widths = vec![6, 0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn infer_from_roundtrips_build() {
        let spec = HierarchyNetSpec {
            num_exits: 3,
            input_dim: 7,
            trunk_widths: vec![9, 5, 8],
            feature_dim: 6,
            num_classes: 4,
        };
        let store = build_network(&spec, 21).unwrap();
        assert_eq!(HierarchyNetSpec::infer_from(&store).unwrap(), spec);

        let sub = extract_subset(&store, &spec, 2).unwrap();
        assert!(HierarchyNetSpec::infer_from(&sub).is_err());
    }

    #[test]
    fn capability_of_subset_checks_exact_name_set() {
        let spec = tiny_spec(3);
        let store = build_network(&spec, 30).unwrap();
        for c in 1..=3 {
            let sub = extract_subset(&store, &spec, c).unwrap();
            assert_eq!(capability_of_subset(&sub).unwrap(), c);
        }
        let mut broken = extract_subset(&store, &spec, 2).unwrap();
        broken.insert("exit.1.cls.b", Array::scalar(0.0).unwrap());
        assert!(capability_of_subset(&broken).is_err());
    }
}
