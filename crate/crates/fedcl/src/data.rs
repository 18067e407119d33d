//! Dataset generation, CSV loading, and the m-way q-shot partitioner.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// Labelled samples with a known class count and feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(Tensor, usize)>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<(Tensor, usize)>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        }
        let dim = samples[0].0.len();
        let mut seen = vec![false; num_classes];
        for (i, (x, y)) in samples.iter().enumerate() {
            if x.len() != dim {
                return Err(Error::shape_mismatch("Dataset sample", [dim], x.shape()));
            }
            if *y >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} labelled {y}, but num_classes is {num_classes}"
                )));
            }
            seen[*y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "class {missing} has no samples"
            )));
        }
        Ok(Dataset { samples, num_classes, dim })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, (_, y)) in self.samples.iter().enumerate() {
            by_class[*y].push(i);
        }
        by_class
    }
}

/// Radius of the sphere the blob centers are drawn on. Unit scale keeps
/// features and gradients O(1); task difficulty is controlled by `spread`
/// relative to this radius.
const BLOB_CENTER_RADIUS: f64 = 1.0;

/// Synthetic Gaussian blobs: class `c` is `N(μ_c, spread²·I)` with `μ_c`
/// drawn uniformly on a sphere of fixed radius, all seeded.
pub fn gen_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "blobs need at least 2 classes, got {num_classes}"
        )));
    }
    if dim == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "blob dim and samples per class must be positive".into(),
        ));
    }
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be > 0, got {spread}")));
    }
    let mut stream = rng::stream(seed, &[rng::salt::DATASET]);
    let normal = StandardNormal;
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..dim)
                .map(|_| Distribution::<f64>::sample(&normal, &mut stream))
                .collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.into_iter().map(|v| v / norm * BLOB_CENTER_RADIUS).collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(num_classes * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let point: Vec<f64> = center
                .iter()
                .map(|&mu| mu + spread * Distribution::<f64>::sample(&normal, &mut stream))
                .collect();
            samples.push((Tensor::vector(point), c));
        }
    }
    Dataset::new(samples, num_classes)
}

/// m-way q-shot partition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Classes per client.
    pub m: usize,
    /// Samples per owned class.
    pub q: usize,
    pub seed: u64,
}

const ASSIGNMENT_RETRIES: usize = 1000;

/// Splits a dataset into `K` client shards of exactly `m` distinct classes
/// with `q` samples each, drawn without replacement.
///
/// Class sets are sampled independently per client (overlap allowed); the
/// assignment is resampled until every class is owned by at least one client
/// and no class pool is oversubscribed, with a bounded number of retries.
/// Returns per-client lists of sample indices; shards are disjoint.
pub fn partition_mwayqshot(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if spec.clients == 0 {
        return Err(Error::Config("partition needs at least one client".into()));
    }
    if spec.m == 0 || spec.m > ds.num_classes {
        return Err(Error::Config(format!(
            "m must be in [1, {}], got {}",
            ds.num_classes, spec.m
        )));
    }
    if spec.q == 0 {
        return Err(Error::Config("q must be positive".into()));
    }
    if spec.clients * spec.m < ds.num_classes {
        return Err(Error::Config(format!(
            "cannot cover {} classes with {} clients owning {} each",
            ds.num_classes, spec.clients, spec.m
        )));
    }
    let by_class = ds.indices_by_class();
    let mut stream = rng::stream(spec.seed, &[rng::salt::PARTITION]);
    let classes: Vec<usize> = (0..ds.num_classes).collect();

    let mut assignment: Option<Vec<Vec<usize>>> = None;
    let mut last_violation = 0usize;
    for _ in 0..ASSIGNMENT_RETRIES {
        let candidate: Vec<Vec<usize>> = (0..spec.clients)
            .map(|_| {
                let mut picked = classes.clone();
                picked.shuffle(&mut stream);
                picked.truncate(spec.m);
                picked.sort_unstable();
                picked
            })
            .collect();
        let mut demand = vec![0usize; ds.num_classes];
        for owned in &candidate {
            for &c in owned {
                demand[c] += 1;
            }
        }
        let covered = demand.iter().all(|&d| d > 0);
        let feasible = demand
            .iter()
            .enumerate()
            .all(|(c, &d)| d * spec.q <= by_class[c].len());
        if covered && feasible {
            assignment = Some(candidate);
            break;
        }
        last_violation = demand
            .iter()
            .enumerate()
            .find(|(c, &d)| d == 0 || d * spec.q > by_class[*c].len())
            .map(|(c, _)| c)
            .unwrap_or(0);
    }
    let assignment = assignment.ok_or_else(|| {
        Error::Config(format!(
            "no satisfiable class assignment after {ASSIGNMENT_RETRIES} reshuffles; \
             class {last_violation} violated (uncovered or oversubscribed)"
        ))
    })?;

    // Deal samples without replacement from per-class pools, shuffled once.
    let mut pools: Vec<Vec<usize>> = by_class;
    for pool in &mut pools {
        pool.shuffle(&mut stream);
    }
    let mut cursors = vec![0usize; ds.num_classes];
    let mut shards = Vec::with_capacity(spec.clients);
    for owned in &assignment {
        let mut shard = Vec::with_capacity(spec.m * spec.q);
        for &c in owned {
            let start = cursors[c];
            shard.extend_from_slice(&pools[c][start..start + spec.q]);
            cursors[c] += spec.q;
        }
        shards.push(shard);
    }
    Ok(shards)
}

/// Loads a dataset from a CSV file with header `y,x0,x1,...`.
///
/// The class count is inferred as `max(y) + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"y") || cols.len() < 2 {
        return Err(Error::parse(path, 1, format!("expected header `y,x0,...`, got `{header}`")));
    }
    let dim = cols.len() - 1;
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} fields, got {}", dim + 1, fields.len()),
            ));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad label `{}`", fields[0])))?;
        let mut x = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad number `{f}`")))?;
            x.push(v);
        }
        max_label = max_label.max(label);
        samples.push((Tensor::vector(x), label));
    }
    if samples.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    Dataset::new(samples, max_label + 1)
}

/// Writes a dataset in the `load_csv` format. Floats use the shortest
/// representation that round-trips exactly, so save → load → save is stable.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("y");
    for i in 0..ds.dim {
        write!(out, ",x{i}").unwrap();
    }
    out.push('\n');
    for (x, y) in &ds.samples {
        write!(out, "{y}").unwrap();
        for v in x.data() {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Draws `batch` sample positions from a shard without replacement
/// (the whole shard when it is smaller than `batch`).
///
/// The algorithm is pinned for reproducibility: a full Fisher–Yates shuffle
/// of `0..len` via `SliceRandom::shuffle`, truncated to the batch size.
pub fn sample_batch_indices<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.truncate(batch.min(len));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seed_deterministic() {
        let a = gen_blobs(4, 16, 20, 1.0, 9).unwrap();
        let b = gen_blobs(4, 16, 20, 1.0, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_blobs(4, 16, 20, 1.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blob_centroids_are_distinct() {
        let ds = gen_blobs(4, 16, 200, 1.0, 3).unwrap();
        let by_class = ds.indices_by_class();
        let mut means = Vec::new();
        for idxs in &by_class {
            let mut mean = vec![0.0; ds.dim];
            for &i in idxs {
                for (m, v) in mean.iter_mut().zip(ds.samples[i].0.data()) {
                    *m += v / idxs.len() as f64;
                }
            }
            means.push(mean);
        }
        for a in 0..means.len() {
            for b in (a + 1)..means.len() {
                let d2: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(d2 > 0.0, "classes {a} and {b} share a centroid");
            }
        }
    }

    #[test]
    fn tiny_spread_is_linearly_separable() {
        let ds = gen_blobs(3, 8, 30, 1e-6, 4).unwrap();
        // Nearest-centroid classification must be perfect at negligible spread.
        let by_class = ds.indices_by_class();
        let means: Vec<Vec<f64>> = by_class
            .iter()
            .map(|idxs| {
                let mut mean = vec![0.0; ds.dim];
                for &i in idxs {
                    for (m, v) in mean.iter_mut().zip(ds.samples[i].0.data()) {
                        *m += v / idxs.len() as f64;
                    }
                }
                mean
            })
            .collect();
        for (x, y) in &ds.samples {
            let best = (0..means.len())
                .min_by(|&a, &b| {
                    let da: f64 = means[a]
                        .iter()
                        .zip(x.data())
                        .map(|(m, v)| (m - v) * (m - v))
                        .sum();
                    let db: f64 = means[b]
                        .iter()
                        .zip(x.data())
                        .map(|(m, v)| (m - v) * (m - v))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, *y);
        }
    }

    #[test]
    fn degenerate_blob_params_rejected() {
        assert!(gen_blobs(1, 4, 10, 1.0, 0).is_err());
        assert!(gen_blobs(3, 0, 10, 1.0, 0).is_err());
        assert!(gen_blobs(3, 4, 10, 0.0, 0).is_err());
    }

    #[test]
    fn partition_shapes_and_disjointness() {
        let ds = gen_blobs(4, 8, 100, 1.0, 7).unwrap();
        let spec = PartitionSpec { clients: 6, m: 2, q: 10, seed: 7 };
        let shards = partition_mwayqshot(&ds, &spec).unwrap();
        assert_eq!(shards.len(), 6);
        let mut seen = std::collections::HashSet::new();
        for shard in &shards {
            assert_eq!(shard.len(), 2 * 10);
            for &i in shard {
                assert!(i < ds.len());
                assert!(seen.insert(i), "index {i} appears in two shards");
            }
            let classes: std::collections::HashSet<usize> =
                shard.iter().map(|&i| ds.samples[i].1).collect();
            assert_eq!(classes.len(), 2, "shard must hold exactly m distinct classes");
        }
        // Every class owned by someone.
        let owned: std::collections::HashSet<usize> = shards
            .iter()
            .flat_map(|s| s.iter().map(|&i| ds.samples[i].1))
            .collect();
        assert_eq!(owned.len(), 4);
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = gen_blobs(3, 8, 60, 1.0, 2).unwrap();
        let spec = PartitionSpec { clients: 4, m: 2, q: 5, seed: 11 };
        assert_eq!(
            partition_mwayqshot(&ds, &spec).unwrap(),
            partition_mwayqshot(&ds, &spec).unwrap()
        );
    }

    #[test]
    fn full_class_shards_when_m_equals_c() {
        let ds = gen_blobs(3, 4, 50, 1.0, 5).unwrap();
        let spec = PartitionSpec { clients: 2, m: 3, q: 10, seed: 5 };
        let shards = partition_mwayqshot(&ds, &spec).unwrap();
        for shard in &shards {
            let classes: std::collections::HashSet<usize> =
                shard.iter().map(|&i| ds.samples[i].1).collect();
            assert_eq!(classes.len(), 3);
        }
    }

    #[test]
    fn one_way_with_k_equals_c_covers_all_classes() {
        // m = 1, K = C: coverage forces a bijection-like assignment.
        let ds = gen_blobs(4, 4, 80, 1.0, 13).unwrap();
        let spec = PartitionSpec { clients: 4, m: 1, q: 20, seed: 13 };
        let shards = partition_mwayqshot(&ds, &spec).unwrap();
        let mut class_of_client = Vec::new();
        for shard in &shards {
            let classes: std::collections::HashSet<usize> =
                shard.iter().map(|&i| ds.samples[i].1).collect();
            assert_eq!(classes.len(), 1);
            class_of_client.push(*classes.iter().next().unwrap());
        }
        let distinct: std::collections::HashSet<usize> =
            class_of_client.iter().copied().collect();
        assert_eq!(distinct.len(), 4, "each of the 4 clients owns a distinct class");
    }

    #[test]
    fn total_client_data_constant_across_m() {
        let ds = gen_blobs(4, 8, 200, 1.0, 17).unwrap();
        // K·m·q held at 384 while m varies.
        for (m, q) in [(1usize, 48usize), (2, 24), (4, 12)] {
            let spec = PartitionSpec { clients: 8, m, q, seed: 17 };
            let shards = partition_mwayqshot(&ds, &spec).unwrap();
            let total: usize = shards.iter().map(Vec::len).sum();
            assert_eq!(total, 384);
        }
    }

    #[test]
    fn unsatisfiable_spec_names_a_class() {
        let ds = gen_blobs(3, 4, 10, 1.0, 1).unwrap();
        // Demands 4 * 30 samples from pools of 10.
        let spec = PartitionSpec { clients: 4, m: 3, q: 30, seed: 1 };
        let err = partition_mwayqshot(&ds, &spec).unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = gen_blobs(3, 5, 4, 1.0, 21).unwrap();
        save_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(ds, loaded);
        // Byte-stable on a second save.
        let bytes1 = std::fs::read(&path).unwrap();
        save_csv(&loaded, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn csv_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "").unwrap();
        assert!(load_csv(&path).is_err());

        std::fs::write(&path, "y,x0,x1\n0,1.0,2.0\n1,3.0\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":3"), "ragged row line number: {err}");

        std::fs::write(&path, "y,x0,x1\n0,1.0,oops\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":2"), "bad number line: {err}");

        assert!(load_csv(dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn fixture_with_ten_classes_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ten.csv");
        let ds = gen_blobs(10, 6, 10, 0.5, 30).unwrap();
        save_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.num_classes, 10);
        assert_eq!(loaded.len(), 100);
        assert_eq!(loaded.dim, 6);
    }

    #[test]
    fn batch_sampler_draws_without_replacement() {
        let mut r = rng::stream(3, &[rng::salt::BATCH]);
        let idxs = sample_batch_indices(10, 4, &mut r);
        assert_eq!(idxs.len(), 4);
        let set: std::collections::HashSet<usize> = idxs.iter().copied().collect();
        assert_eq!(set.len(), 4);
        let all = sample_batch_indices(3, 10, &mut r);
        assert_eq!(all.len(), 3);
    }
}
