//! Datasets, synthetic generation, the cloud's public split, and device
//! partitioning.
//!
//! Everything here is a pure seeded function: same inputs, same bytes out.
//! The synthetic generator draws one unit-norm Gaussian center per class and
//! scatters examples around it; the public split is stratified so the
//! server's tiny labeled set covers every class it can; partitioning is
//! either IID chunking or the per-class Dirichlet convention (proportions
//! over devices drawn per class, largest-remainder rounding, empty devices
//! repaired by moving one example from the largest device).

pub mod csv;
pub mod idx;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Labeled examples: features M×d0, one integer label per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (rows, _) = features.dims2("Dataset::new", "features")?;
        if labels.len() != rows {
            return Err(Error::Data(format!(
                "{} labels for {rows} feature rows",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Data("num_classes must be ≥ 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    /// Number of examples M.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension d0.
    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Gather rows by index into a feature batch plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Array, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("cannot gather an empty batch".into()));
        }
        let d = self.input_dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            values.extend_from_slice(&self.features.values()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Ok((Array::new(vec![indices.len(), d], values)?, labels))
    }

    /// New dataset holding the given rows (same class count).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.gather(indices)?;
        Dataset::new(features, labels, self.num_classes)
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Seeded Gaussian-blob dataset: one unit-norm center per class, examples are
/// `center + spread·N(0, I)`, laid out class-major (all of class 0, then
/// class 1, ...). Centers are drawn first, then examples in class order, so
/// the layout is stable for per-class splitting.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || input_dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument(
            "num_classes, input_dim and per_class must all be ≥ 1".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spread must be a finite nonnegative scalar, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // essentially impossible draw; fall back to a fixed axis vector
            v = vec![0.0; input_dim];
            v[0] = 1.0;
        } else {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        centers.push(v);
    }
    let mut values = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &cv in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(cv + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Array::new(vec![num_classes * per_class, input_dim], values)?,
        labels,
        num_classes,
    )
}

/// The server-held public set and the device pool left over.
#[derive(Debug, Clone)]
pub struct PublicSplit {
    pub public: Dataset,
    pub remainder: Dataset,
    pub fraction: f64,
}

/// Stratified public/remainder split. `|public| = round(fraction·M)` exactly;
/// every class gets at least one public example whenever the budget allows.
pub fn split_public(data: &Dataset, fraction: f64, seed: u64) -> Result<PublicSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1), got {fraction}"
        )));
    }
    let m = data.len();
    let target = (fraction * m as f64).round() as usize;
    if target == 0 {
        return Err(Error::Data(format!(
            "public split of fraction {fraction} over {m} examples would be empty"
        )));
    }
    if target >= m {
        return Err(Error::Data(format!(
            "public split of {target} examples would exhaust the {m}-example pool"
        )));
    }

    // per-class quotas by largest remainder, summing to target exactly
    let counts = data.class_counts();
    let mut quotas: Vec<usize> = counts
        .iter()
        .map(|&n| (fraction * n as f64).floor() as usize)
        .collect();
    let mut deficit = target - quotas.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..data.num_classes).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = fraction * counts[a] as f64 - quotas[a] as f64;
        let rb = fraction * counts[b] as f64 - quotas[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in by_remainder.iter().cycle().take(data.num_classes * 2) {
        if deficit == 0 {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            deficit -= 1;
        }
    }
    // coverage repair: every nonempty class gets one example when affordable
    if target >= data.num_classes {
        while let Some(starved) = (0..data.num_classes).find(|&c| quotas[c] == 0 && counts[c] > 0) {
            let donor = (0..data.num_classes)
                .max_by_key(|&c| (quotas[c], std::cmp::Reverse(c)))
                .unwrap();
            if quotas[donor] <= 1 {
                break;
            }
            quotas[donor] -= 1;
            quotas[starved] += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_public = vec![false; m];
    for (c, &quota) in quotas.iter().enumerate() {
        let mut class_idx: Vec<usize> = (0..m).filter(|&i| data.labels[i] == c).collect();
        class_idx.shuffle(&mut rng);
        for &i in class_idx.iter().take(quota) {
            is_public[i] = true;
        }
    }
    let public_idx: Vec<usize> = (0..m).filter(|&i| is_public[i]).collect();
    let remainder_idx: Vec<usize> = (0..m).filter(|&i| !is_public[i]).collect();
    Ok(PublicSplit {
        public: data.subset(&public_idx)?,
        remainder: data.subset(&remainder_idx)?,
        fraction,
    })
}

/// How a dataset was spread across devices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionKind {
    Iid,
    Dirichlet(f64),
}

/// Disjoint, complete, no-empty-device assignment of example indices.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub kind: PartitionKind,
    pub num_devices: usize,
    pub seed: u64,
    /// `assignment[d]` holds the example indices of device `d`.
    pub assignment: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Per-device class histogram (device × class counts).
    pub fn class_histograms(&self, data: &Dataset) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(self.num_devices);
        for idx in &self.assignment {
            let mut counts = vec![0usize; data.num_classes];
            for &i in idx {
                if i >= data.len() {
                    return Err(Error::Data(format!(
                        "plan index {i} out of range for {} examples",
                        data.len()
                    )));
                }
                counts[data.labels[i]] += 1;
            }
            out.push(counts);
        }
        Ok(out)
    }
}

fn check_partition_args(data: &Dataset, num_devices: usize) -> Result<()> {
    if num_devices == 0 {
        return Err(Error::InvalidArgument("num_devices must be ≥ 1".into()));
    }
    if num_devices > data.len() {
        return Err(Error::Data(format!(
            "{num_devices} devices cannot each get an example from {} rows",
            data.len()
        )));
    }
    Ok(())
}

/// Move one example from the largest device to each empty one.
fn repair_empty_devices(assignment: &mut [Vec<usize>]) {
    loop {
        let Some(empty) = assignment.iter().position(Vec::is_empty) else {
            return;
        };
        let donor = (0..assignment.len())
            .max_by_key(|&d| (assignment[d].len(), std::cmp::Reverse(d)))
            .unwrap();
        debug_assert!(assignment[donor].len() >= 2, "pigeonhole violated");
        let moved = assignment[donor].pop().unwrap();
        assignment[empty].push(moved);
    }
}

/// Allocate `total` items over weights by largest-remainder rounding.
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|&p| (p * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = proportions[a] * total as f64 - counts[a] as f64;
        let rb = proportions[b] * total as f64 - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    // floor drops < 1 per slot, so the deficit never exceeds the slot count
    let deficit = total - assigned;
    debug_assert!(deficit <= order.len());
    for &i in order.iter().take(deficit) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet partition: for every class, draw device proportions
/// from `Dirichlet(alpha·1_N)` and deal that class's examples accordingly.
/// Smaller `alpha` concentrates classes on fewer devices.
pub fn dirichlet_partition(
    data: &Dataset,
    num_devices: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    check_partition_args(data, num_devices)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Vec::new(); num_devices];
    for c in 0..data.num_classes {
        let mut class_idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if class_idx.is_empty() {
            continue;
        }
        class_idx.shuffle(&mut rng);
        let proportions = if num_devices == 1 {
            vec![1.0]
        } else {
            Dirichlet::new_with_size(alpha, num_devices)
                .map_err(|e| Error::InvalidArgument(format!("dirichlet: {e}")))?
                .sample(&mut rng)
        };
        let counts = largest_remainder_counts(&proportions, class_idx.len());
        let mut cursor = 0;
        for (d, &n) in counts.iter().enumerate() {
            assignment[d].extend_from_slice(&class_idx[cursor..cursor + n]);
            cursor += n;
        }
    }
    repair_empty_devices(&mut assignment);
    Ok(PartitionPlan {
        kind: PartitionKind::Dirichlet(alpha),
        num_devices,
        seed,
        assignment,
    })
}

/// Seeded shuffle then near-equal contiguous chunks; the first `M mod N`
/// devices take one extra example.
pub fn iid_partition(data: &Dataset, num_devices: usize, seed: u64) -> Result<PartitionPlan> {
    check_partition_args(data, num_devices)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut rng);
    let base = data.len() / num_devices;
    let extra = data.len() % num_devices;
    let mut assignment = Vec::with_capacity(num_devices);
    let mut cursor = 0;
    for d in 0..num_devices {
        let take = base + usize::from(d < extra);
        assignment.push(indices[cursor..cursor + take].to_vec());
        cursor += take;
    }
    Ok(PartitionPlan {
        kind: PartitionKind::Iid,
        num_devices,
        seed,
        assignment,
    })
}
