//! Synthetic graph families: stochastic block models with class-dependent
//! Gaussian features, standing in for a distribution over related graphs.
//!
//! Every graph in a family shares the same class-mean geometry (a regular
//! simplex with a family-specific rotation), so class-dependent feature
//! structure transfers across graphs. An optional per-graph orthogonal
//! rotation of the feature space keeps that transfer nontrivial: absolute
//! feature axes mean nothing across graphs, while within-graph geometry and
//! the block topology are preserved.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::fnv1a;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    /// Number of classes (= SBM blocks).
    pub classes: usize,
    pub nodes_per_class_min: usize,
    pub nodes_per_class_max: usize,
    /// Within-block edge probability.
    pub p_in: f64,
    /// Cross-block edge probability.
    pub p_out: f64,
    pub feature_dim: usize,
    /// Pairwise distance between class means.
    pub mean_separation: f64,
    /// Standard deviation of per-node Gaussian feature noise.
    pub feature_noise: f64,
    /// Apply a random orthogonal rotation to each graph's features.
    pub rotate_per_graph: bool,
    pub train_graphs: usize,
    pub val_graphs: usize,
    pub test_graphs: usize,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            classes: 4,
            nodes_per_class_min: 25,
            nodes_per_class_max: 35,
            // Sparse blocks: node degrees stay low enough that k-hop
            // common-neighbor counts vary instead of saturating, and label
            // propagation cannot coast on topology alone.
            p_in: 0.10,
            p_out: 0.03,
            feature_dim: 16,
            mean_separation: 1.4,
            feature_noise: 0.5,
            rotate_per_graph: true,
            train_graphs: 40,
            val_graphs: 5,
            test_graphs: 10,
            seed: 7,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidConfig(
                "family needs at least one class".into(),
            ));
        }
        if self.nodes_per_class_min == 0 || self.nodes_per_class_min > self.nodes_per_class_max {
            return Err(Error::InvalidConfig(format!(
                "bad nodes-per-class range [{}, {}]; blocks must be nonempty",
                self.nodes_per_class_min, self.nodes_per_class_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return Err(Error::InvalidConfig(
                "edge probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.p_out >= self.p_in {
            return Err(Error::InvalidConfig(format!(
                "p_out ({}) must be below p_in ({})",
                self.p_out, self.p_in
            )));
        }
        if self.mean_separation <= 0.0 {
            return Err(Error::InvalidConfig(
                "mean separation must be positive".into(),
            ));
        }
        if self.feature_noise < 0.0 {
            return Err(Error::InvalidConfig(
                "feature noise must be non-negative".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "feature dimension must be positive".into(),
            ));
        }
        if self.classes > self.feature_dim + 1 {
            return Err(Error::InvalidConfig(format!(
                "{} equidistant class means do not fit in {} dimensions",
                self.classes, self.feature_dim
            )));
        }
        if self.train_graphs == 0 || self.val_graphs == 0 || self.test_graphs == 0 {
            return Err(Error::InvalidConfig(
                "all split counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A generated family with its meta-train/validation/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFamily {
    pub config: FamilyConfig,
    pub train: Vec<Graph>,
    pub val: Vec<Graph>,
    pub test: Vec<Graph>,
}

impl GraphFamily {
    pub fn all_graphs(&self) -> impl Iterator<Item = &Graph> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// K mutually equidistant mean vectors (a regular simplex scaled so every
/// pairwise distance is `separation`), randomly rotated.
fn class_means(cfg: &FamilyConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let (k, h) = (cfg.classes, cfg.feature_dim);
    let scale = cfg.mean_separation / std::f64::consts::SQRT_2;
    let centroid = 1.0 / k as f64;
    // Simplex on the first k basis vectors, centered.
    let mut means = vec![vec![0.0; h]; k];
    for (c, mean) in means.iter_mut().enumerate() {
        for (j, m) in mean.iter_mut().enumerate().take(k) {
            let e = if j == c { 1.0 } else { 0.0 };
            *m = (e - centroid) * scale;
        }
    }
    // Rotate so the means are not axis-aligned.
    let q = random_orthogonal(h, rng);
    means.iter().map(|m| rotate_row(m, &q)).collect()
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(h: usize, rng: &mut Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(h);
    while cols.len() < h {
        let mut v: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw; retry
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    Tensor::from_fn(h, h, |i, j| cols[j][i])
}

fn rotate_row(x: &[f64], q: &Tensor) -> Vec<f64> {
    let h = x.len();
    (0..h)
        .map(|j| (0..h).map(|i| x[i] * q.at(i, j)).sum())
        .collect()
}

/// Generates the meta-train/validation/test graph lists for a family.
///
/// Each graph derives its own RNG stream from the family seed and its global
/// index, so generation order (or parallel generation) cannot change results
/// and the same seed always yields a byte-identical family.
pub fn generate_family(cfg: &FamilyConfig) -> Result<GraphFamily> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut mean_rng = root.derive(0);
    let means = class_means(cfg, &mut mean_rng);

    let total = cfg.train_graphs + cfg.val_graphs + cfg.test_graphs;
    let mut graphs = Vec::with_capacity(total);
    for graph_index in 0..total {
        let mut rng = root.derive(1 + graph_index as u64);
        graphs.push(generate_graph(cfg, &means, &mut rng)?);
    }

    let mut iter = graphs.into_iter();
    let train: Vec<Graph> = iter.by_ref().take(cfg.train_graphs).collect();
    let val: Vec<Graph> = iter.by_ref().take(cfg.val_graphs).collect();
    let test: Vec<Graph> = iter.collect();
    Ok(GraphFamily {
        config: cfg.clone(),
        train,
        val,
        test,
    })
}

fn generate_graph(cfg: &FamilyConfig, means: &[Vec<f64>], rng: &mut Rng) -> Result<Graph> {
    let block_sizes: Vec<usize> = (0..cfg.classes)
        .map(|_| rng.range_inclusive(cfg.nodes_per_class_min, cfg.nodes_per_class_max))
        .collect();
    let n: usize = block_sizes.iter().sum();

    let mut labels = Vec::with_capacity(n);
    for (class, &size) in block_sizes.iter().enumerate() {
        labels.extend(std::iter::repeat_n(class, size));
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.bernoulli(p) {
                edges.push((u, v));
            }
        }
    }

    let h = cfg.feature_dim;
    let mut features = Tensor::zeros(n, h);
    for i in 0..n {
        let mean = &means[labels[i]];
        for j in 0..h {
            features.set(i, j, mean[j] + cfg.feature_noise * rng.normal());
        }
    }
    if cfg.rotate_per_graph {
        let q = random_orthogonal(h, rng);
        let rotated = features.matmul(&q);
        features = rotated;
    }

    Graph::from_edges(n, &edges, features, labels)
}

// ── Serialization ───────────────────────────────────────────────────────
//
// Layout (integers little-endian):
//   magic    8 bytes "GFLFAM\0\0"
//   version  u32 (currently 1)
//   manifest u32 length + JSON bytes ({"config": FamilyConfig})
//   graph*   in train, val, test order:
//            u32 n, u32 feature_dim, u32 num_edges,
//            edge* (u32 u, u32 v with u < v),
//            features as n*feature_dim f64 bit patterns (u64),
//            labels as n u32
//   footer   u64 FNV-1a of all preceding bytes

const MAGIC: &[u8; 8] = b"GFLFAM\0\0";
const VERSION: u32 = 1;

pub fn save_family(family: &GraphFamily, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let manifest = serde_json::json!({ "config": family.config }).to_string();
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    for g in family.all_graphs() {
        write_graph(&mut buf, g);
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn write_graph(buf: &mut Vec<u8>, g: &Graph) {
    let edges = g.edges();
    buf.extend_from_slice(&(g.n() as u32).to_le_bytes());
    buf.extend_from_slice(&(g.feature_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(edges.len() as u32).to_le_bytes());
    for (u, v) in edges {
        buf.extend_from_slice(&(u as u32).to_le_bytes());
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &x in g.features().data() {
        buf.extend_from_slice(&x.to_bits().to_le_bytes());
    }
    for &l in g.labels() {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
}

pub fn load_family(path: &Path) -> Result<GraphFamily> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = FileReader {
        path: path.display().to_string(),
        bytes: &bytes,
        offset: 0,
    };

    if r.take(8)? != MAGIC {
        return Err(r.error_at(0, "bad magic; not a graph-family file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: r.path.clone(),
            found: version,
            expected: VERSION,
        });
    }
    let manifest_len = r.u32()? as usize;
    let manifest_bytes = r.take(manifest_len)?.to_vec();
    let manifest: serde_json::Value = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| r.error_here(&format!("bad manifest JSON: {e}")))?;
    let config: FamilyConfig = serde_json::from_value(
        manifest
            .get("config")
            .cloned()
            .unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| r.error_here(&format!("bad family config in manifest: {e}")))?;

    let total = config.train_graphs + config.val_graphs + config.test_graphs;
    let mut graphs = Vec::with_capacity(total);
    for _ in 0..total {
        graphs.push(read_graph(&mut r)?);
    }
    let body_end = r.offset;
    let stored = r.u64()?;
    if r.offset != bytes.len() {
        return Err(r.error_here("trailing bytes after checksum"));
    }
    if stored != fnv1a(&bytes[..body_end]) {
        return Err(r.error_at(body_end as u64, "checksum mismatch; file is corrupted"));
    }

    let mut iter = graphs.into_iter();
    let train: Vec<Graph> = iter.by_ref().take(config.train_graphs).collect();
    let val: Vec<Graph> = iter.by_ref().take(config.val_graphs).collect();
    let test: Vec<Graph> = iter.collect();
    Ok(GraphFamily {
        config,
        train,
        val,
        test,
    })
}

fn read_graph(r: &mut FileReader) -> Result<Graph> {
    let record_start = r.offset as u64;
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let num_edges = r.u32()? as usize;
    if n == 0 || h == 0 || n > 10_000_000 {
        return Err(r.error_at(
            record_start,
            &format!("implausible graph header n={n}, h={h}"),
        ));
    }
    let mut edges = Vec::with_capacity(num_edges);
    for _ in 0..num_edges {
        let u = r.u32()? as usize;
        let v = r.u32()? as usize;
        if u >= v || v >= n {
            return Err(r.error_here(&format!("bad edge ({u},{v}) in a {n}-node record")));
        }
        edges.push((u, v));
    }
    let mut data = Vec::with_capacity(n * h);
    for _ in 0..n * h {
        data.push(f64::from_bits(r.u64()?));
    }
    let features = Tensor::new(vec![n, h], data);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32()? as usize);
    }
    Graph::from_edges(n, &edges, features, labels)
        .map_err(|e| r.error_at(record_start, &format!("invalid graph record: {e}")))
}

struct FileReader<'a> {
    path: String,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> FileReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(self.error_here(&format!(
                "unexpected end of file (wanted {n} bytes, {} left)",
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn error_here(&self, reason: &str) -> Error {
        self.error_at(self.offset as u64, reason)
    }

    fn error_at(&self, offset: u64, reason: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            reason: reason.to_string(),
        }
    }
}
