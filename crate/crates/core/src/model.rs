//! Shared data model: layered feature bundles, concept sets, reference
//! mechanisms, per-layer partitions and perturbation records.
//!
//! Vectors are addressed by `(layer_index, position)`. Partitions store
//! positions, never copies, so grouping, perturbation and assessment agree on
//! identity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved metadata keys.
pub const META_MODEL: &str = "model";
pub const META_DATASET: &str = "dataset";
pub const META_CONCEPT_SET: &str = "concept_set";
/// Prefix for per-layer grid shapes, e.g. `grid.3 = "14x14"`.
pub const META_GRID_PREFIX: &str = "grid.";

/// Dense row-major matrix of `f64`, one row per feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols && m.rows > 0 {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {} columns onto {cols}",
                    m.cols
                )));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }
}

/// One layer's feature set X_i: `n_vectors` vectors of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub index: usize,
    dim: usize,
    data: Vec<f64>,
    /// Externally supplied sensitivity scores, one per vector.
    pub scores: Option<Vec<f64>>,
    /// Ground-truth sensitive flags (synthetic data), one per vector.
    pub sensitive_flags: Option<Vec<bool>>,
}

impl Layer {
    pub fn new(index: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput(format!(
                "layer {index}: dimension must be at least 1"
            )));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "layer {index}: {} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            index,
            dim,
            data,
            scores: None,
            sensitive_flags: None,
        })
    }

    pub fn from_matrix(index: usize, m: Matrix) -> Result<Self> {
        Self::new(index, m.cols, m.data)
    }

    pub fn with_scores(mut self, scores: Vec<f64>) -> Self {
        self.scores = Some(scores);
        self
    }

    pub fn with_flags(mut self, flags: Vec<bool>) -> Self {
        self.sensitive_flags = Some(flags);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.len(),
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    /// Copy the selected vectors, in the given order, into a matrix.
    pub fn select(&self, ids: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &j in ids {
            data.extend_from_slice(self.vector(j));
        }
        Matrix {
            rows: ids.len(),
            cols: self.dim,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Original,
    Perturbed,
}

impl fmt::Display for BundleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BundleKind::Original => f.write_str("original"),
            BundleKind::Perturbed => f.write_str("perturbed"),
        }
    }
}

/// Hierarchical feature sets {X_i}, i = 1..n, either original or perturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredFeatureBundle {
    pub layers: Vec<Layer>,
    pub kind: BundleKind,
    pub metadata: BTreeMap<String, String>,
}

impl LayeredFeatureBundle {
    pub fn new(layers: Vec<Layer>, kind: BundleKind) -> Self {
        Self {
            layers,
            kind,
            metadata: BTreeMap::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, index: usize) -> Option<&Layer> {
        self.layers.iter().find(|l| l.index == index)
    }

    /// Total number of scalar entries across all layers.
    pub fn n_values(&self) -> usize {
        self.layers.iter().map(|l| l.values().len()).sum()
    }

    /// Grid shape (rows, cols) recorded for a layer in metadata, if any.
    pub fn grid_shape(&self, layer_index: usize) -> Option<(usize, usize)> {
        let raw = self
            .metadata
            .get(&format!("{META_GRID_PREFIX}{layer_index}"))?;
        let (h, w) = raw.split_once('x')?;
        Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
    }

    /// Check both bundles have the same layer indices and shapes.
    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layers vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.index != b.index || a.len() != b.len() || a.dim() != b.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} is {}x{}, layer {} is {}x{}",
                    a.index,
                    a.len(),
                    a.dim(),
                    b.index,
                    b.len(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

/// A structural problem found by [`validate_bundle`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "{}, layer {i}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Check every bundle invariant. Violations are returned as data; an empty
/// list means the bundle is well formed.
pub fn validate_bundle(bundle: &LayeredFeatureBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    if bundle.layers.is_empty() {
        out.push(Violation {
            layer: None,
            message: "bundle has no layers".into(),
        });
        return out;
    }
    let contiguous = bundle
        .layers
        .iter()
        .enumerate()
        .all(|(pos, l)| l.index == pos + 1);
    if !contiguous {
        out.push(Violation {
            layer: None,
            message: "non-contiguous layer indices".into(),
        });
    }
    for layer in &bundle.layers {
        let i = Some(layer.index);
        if layer.is_empty() {
            out.push(Violation {
                layer: i,
                message: "layer has no vectors".into(),
            });
        }
        if layer.values().iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                layer: i,
                message: "non-finite value".into(),
            });
        }
        if let Some(s) = &layer.scores {
            if s.len() != layer.len() {
                out.push(Violation {
                    layer: i,
                    message: format!("{} scores for {} vectors", s.len(), layer.len()),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                out.push(Violation {
                    layer: i,
                    message: "non-finite score".into(),
                });
            }
        }
        if let Some(f) = &layer.sensitive_flags {
            if f.len() != layer.len() {
                out.push(Violation {
                    layer: i,
                    message: format!("{} flags for {} vectors", f.len(), layer.len()),
                });
            }
        }
    }
    out
}

/// A non-empty set of sensitive concept labels (S).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub id: String,
    concepts: BTreeSet<String>,
}

impl ConceptSet {
    pub fn new<I, S>(id: impl Into<String>, labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut concepts = BTreeSet::new();
        for label in labels {
            let label = label.into();
            if !concepts.insert(label.clone()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate concept label '{label}'"
                )));
            }
        }
        if concepts.is_empty() {
            return Err(Error::InvalidInput("concept set is empty".into()));
        }
        Ok(Self {
            id: id.into(),
            concepts,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Laplace,
    Gaussian,
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseFamily::Laplace => f.write_str("laplace"),
            NoiseFamily::Gaussian => f.write_str("gaussian"),
        }
    }
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(NoiseFamily::Laplace),
            "gaussian" => Ok(NoiseFamily::Gaussian),
            other => Err(Error::InvalidInput(format!(
                "unknown noise family '{other}'"
            ))),
        }
    }
}

/// Reference mechanism M_ref(ε; η): additive noise of family η with scale c/ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMechanism {
    pub family: NoiseFamily,
    pub epsilon: f64,
    pub c: f64,
}

impl ReferenceMechanism {
    pub fn new(family: NoiseFamily, epsilon: f64, c: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "calibration constant must be positive, got {c}"
            )));
        }
        Ok(Self { family, epsilon, c })
    }

    /// Laplace b or Gaussian σ.
    pub fn scale(&self) -> f64 {
        self.c / self.epsilon
    }
}

/// Partition of one layer into G^(s) (score ≥ τ) and G^(n) (score < τ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub layer_index: usize,
    sensitive_ids: Vec<usize>,
    nonsensitive_ids: Vec<usize>,
    scores: Vec<f64>,
    tau: f64,
}

impl LayerPartition {
    /// Build the partition from raw scores. Scores are clamped into [0, 1]
    /// first; ties at τ go to the sensitive side.
    pub fn from_scores(layer_index: usize, scores: Vec<f64>, tau: f64) -> Self {
        let scores: Vec<f64> = scores.into_iter().map(clamp_score).collect();
        let (mut sensitive_ids, mut nonsensitive_ids) = (Vec::new(), Vec::new());
        for (j, &s) in scores.iter().enumerate() {
            if s >= tau {
                sensitive_ids.push(j);
            } else {
                nonsensitive_ids.push(j);
            }
        }
        Self {
            layer_index,
            sensitive_ids,
            nonsensitive_ids,
            scores,
            tau,
        }
    }

    /// Build a partition from a membership mask. Scores become indicators
    /// and τ = 1 so the score invariant still holds.
    pub fn from_mask(layer_index: usize, mask: &[bool]) -> Self {
        let scores = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Self::from_scores(layer_index, scores, 1.0)
    }

    pub fn sensitive_ids(&self) -> &[usize] {
        &self.sensitive_ids
    }

    pub fn nonsensitive_ids(&self) -> &[usize] {
        &self.nonsensitive_ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_sensitive(&self, j: usize) -> bool {
        self.sensitive_ids.binary_search(&j).is_ok()
    }

    pub fn sensitive_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.scores.len()];
        for &j in &self.sensitive_ids {
            mask[j] = true;
        }
        mask
    }

    /// Check the disjoint/exhaustive and score-threshold invariants.
    pub fn check_invariants(&self) -> bool {
        let n = self.scores.len();
        let mut seen = vec![0u8; n];
        for &j in self.sensitive_ids.iter().chain(&self.nonsensitive_ids) {
            if j >= n {
                return false;
            }
            seen[j] += 1;
        }
        seen.iter().all(|&c| c == 1)
            && self
                .sensitive_ids
                .iter()
                .all(|&j| self.scores[j] >= self.tau)
            && self
                .nonsensitive_ids
                .iter()
                .all(|&j| self.scores[j] < self.tau)
    }
}

fn clamp_score(s: f64) -> f64 {
    if s.is_nan() {
        0.0
    } else {
        s.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Bua,
    Tda,
    Random,
    /// Partition read directly from the bundle's sensitive flags.
    Flags,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Bua => "bua",
            Strategy::Tda => "tda",
            Strategy::Random => "random",
            Strategy::Flags => "flags",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bua" => Ok(Strategy::Bua),
            "tda" => Ok(Strategy::Tda),
            "random" => Ok(Strategy::Random),
            "flags" => Ok(Strategy::Flags),
            other => Err(Error::InvalidInput(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Top-down links between layer `upper` and layer `upper - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSets {
    pub upper_layer: usize,
    pub lower_layer: usize,
    /// L^(s): lower-layer ids reached from sensitive upper-layer vectors that
    /// are themselves sensitive.
    pub sensitive: Vec<usize>,
    /// L^(n), analogously for the non-sensitive groups.
    pub nonsensitive: Vec<usize>,
    /// Lower-layer ids promoted to sensitive by refinement.
    pub promoted: Vec<usize>,
}

/// Output of a grouping strategy: one partition per bundle layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingResult {
    pub strategy: Strategy,
    pub partitions: Vec<LayerPartition>,
    /// NCP(G^(s)_i) per layer, when microaggregation diagnostics ran.
    pub ncp_sensitive: Option<Vec<f64>>,
    /// NCP(G^(n)_i) per layer.
    pub ncp_nonsensitive: Option<Vec<f64>>,
    /// Mean NCP of the MDAV microclusters per layer.
    pub microcluster_ncp: Option<Vec<f64>>,
    pub links: Vec<LinkSets>,
}

impl GroupingResult {
    pub fn new(strategy: Strategy, partitions: Vec<LayerPartition>) -> Self {
        Self {
            strategy,
            partitions,
            ncp_sensitive: None,
            ncp_nonsensitive: None,
            microcluster_ncp: None,
            links: Vec::new(),
        }
    }

    /// Partition every layer by its ground-truth sensitive flags.
    pub fn from_flags(bundle: &LayeredFeatureBundle) -> Result<Self> {
        let partitions = bundle
            .layers
            .iter()
            .map(|l| {
                let flags = l.sensitive_flags.as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!("layer {} has no sensitive flags", l.index))
                })?;
                Ok(LayerPartition::from_mask(l.index, flags))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(Strategy::Flags, partitions))
    }

    pub fn sensitive_sizes(&self) -> Vec<usize> {
        self.partitions
            .iter()
            .map(|p| p.sensitive_ids().len())
            .collect()
    }

    /// Check that the grouping addresses exactly the bundle's layers.
    pub fn check_matches(&self, bundle: &LayeredFeatureBundle) -> Result<()> {
        if self.partitions.len() != bundle.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "grouping has {} layers, bundle has {}",
                self.partitions.len(),
                bundle.layers.len()
            )));
        }
        for (p, l) in self.partitions.iter().zip(&bundle.layers) {
            if p.layer_index != l.index || p.len() != l.len() {
                return Err(Error::ShapeMismatch(format!(
                    "partition for layer {} covers {} vectors, layer {} has {}",
                    p.layer_index,
                    p.len(),
                    l.index,
                    l.len()
                )));
            }
        }
        Ok(())
    }
}

/// Original sensitive values t, injected noise u and observed values v = t + u
/// for the perturbed vectors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTriple {
    pub layer_index: usize,
    pub ids: Vec<usize>,
    pub t: Matrix,
    pub u: Matrix,
    pub v: Matrix,
}

impl PerturbationTriple {
    /// Largest elementwise |v - (t + u)|.
    pub fn reconstruction_error(&self) -> f64 {
        self.v
            .as_slice()
            .iter()
            .zip(self.t.as_slice().iter().zip(self.u.as_slice()))
            .map(|(v, (t, u))| (v - (t + u)).abs())
            .fold(0.0, f64::max)
    }
}

/// Sensitive vectors pooled across layers, with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivePool {
    /// `(layer_index, ids)` in pooling order.
    pub blocks: Vec<(usize, Vec<usize>)>,
    pub data: Matrix,
}

impl SensitivePool {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Concatenate the sensitive vectors of the selected layers in
/// (layer, position) order. All selected layers must share one dimension.
pub fn pool_sensitive_features(
    bundle: &LayeredFeatureBundle,
    grouping: &GroupingResult,
    layer_selection: &BTreeSet<usize>,
) -> Result<SensitivePool> {
    grouping.check_matches(bundle)?;
    let mut dim = None;
    let mut blocks = Vec::new();
    let mut parts = Vec::new();
    for (layer, part) in bundle.layers.iter().zip(&grouping.partitions) {
        if !layer_selection.contains(&layer.index) {
            continue;
        }
        match dim {
            None => dim = Some(layer.dim()),
            Some(d) if d != layer.dim() => {
                return Err(Error::DimensionMismatch {
                    layer: layer.index,
                    expected: d,
                    found: layer.dim(),
                })
            }
            Some(_) => {}
        }
        let ids = part.sensitive_ids().to_vec();
        parts.push(layer.select(&ids));
        blocks.push((layer.index, ids));
    }
    let mut data = Matrix::vstack(&parts)?;
    if data.cols == 0 {
        data.cols = dim.unwrap_or(0);
    }
    Ok(SensitivePool { blocks, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(n_layers: usize, n: usize, d: usize) -> LayeredFeatureBundle {
        let layers = (1..=n_layers)
            .map(|i| Layer::new(i, d, (0..n * d).map(|k| k as f64 * 0.01).collect()).unwrap())
            .collect();
        LayeredFeatureBundle::new(layers, BundleKind::Original)
    }

    #[test]
    fn well_formed_bundle_validates() {
        assert!(validate_bundle(&bundle(4, 200, 8)).is_empty());
    }

    #[test]
    fn nan_is_reported_with_layer() {
        let mut b = bundle(4, 200, 8);
        b.layers[1].vector_mut(3)[2] = f64::NAN;
        let v = validate_bundle(&b);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "non-finite value, layer 2");
    }

    #[test]
    fn gap_in_layer_indices_is_reported() {
        let mut b = bundle(2, 10, 2);
        b.layers[1].index = 3;
        let v = validate_bundle(&b);
        assert!(v
            .iter()
            .any(|x| x.message == "non-contiguous layer indices"));
    }

    #[test]
    fn layer_rejects_ragged_data() {
        assert!(Layer::new(1, 3, vec![0.0; 7]).is_err());
        assert!(Layer::new(1, 0, vec![]).is_err());
    }

    #[test]
    fn mechanism_scale_and_validation() {
        let m = ReferenceMechanism::new(NoiseFamily::Laplace, 0.1, 1.0).unwrap();
        assert!((m.scale() - 10.0).abs() < 1e-12);
        assert!(ReferenceMechanism::new(NoiseFamily::Laplace, 0.0, 1.0).is_err());
        assert!(ReferenceMechanism::new(NoiseFamily::Gaussian, 1.0, -1.0).is_err());
    }

    #[test]
    fn concept_set_rules() {
        assert!(ConceptSet::new("s", Vec::<String>::new()).is_err());
        assert!(ConceptSet::new("s", ["person", "person"]).is_err());
        let s = ConceptSet::new("traffic", ["person", "car", "bus"]).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn partition_clamps_and_breaks_ties_sensitive() {
        let p = LayerPartition::from_scores(1, vec![-0.5, 0.5, 0.5, 1.7], 0.5);
        assert_eq!(p.scores(), &[0.0, 0.5, 0.5, 1.0]);
        assert_eq!(p.sensitive_ids(), &[1, 2, 3]);
        assert_eq!(p.nonsensitive_ids(), &[0]);
        assert!(p.check_invariants());
    }

    #[test]
    fn pooling_counts_and_order() {
        let b = bundle(4, 200, 8);
        let parts = b
            .layers
            .iter()
            .map(|l| {
                let mask: Vec<bool> = (0..200).map(|j| j % 10 < 3).collect();
                LayerPartition::from_mask(l.index, &mask)
            })
            .collect();
        let g = GroupingResult::new(Strategy::Flags, parts);
        let sel: BTreeSet<usize> = (1..=4).collect();
        let pool = pool_sensitive_features(&b, &g, &sel).unwrap();
        assert_eq!(pool.len(), 240);
        assert_eq!(pool.data.cols(), 8);
        assert_eq!(pool.data.row(1), b.layers[0].vector(1));
        assert_eq!(pool.blocks[3].0, 4);
    }

    #[test]
    fn pooling_empty_group_and_dim_mismatch() {
        let mut b = bundle(2, 10, 8);
        let g = GroupingResult::new(
            Strategy::Flags,
            vec![
                LayerPartition::from_mask(1, &[false; 10]),
                LayerPartition::from_mask(2, &[true; 10]),
            ],
        );
        let pool = pool_sensitive_features(&b, &g, &BTreeSet::from([1])).unwrap();
        assert!(pool.is_empty());

        b.layers[1] = Layer::new(2, 16, vec![0.0; 160]).unwrap();
        let err = pool_sensitive_features(&b, &g, &BTreeSet::from([1, 2])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn triple_reconstruction_is_exact() {
        let t = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let u = Matrix::from_rows(&[vec![0.1, -3.3]]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![1.0 + 0.1, 2.0 + -3.3]).unwrap();
        let tr = PerturbationTriple {
            layer_index: 1,
            ids: vec![0],
            t,
            u,
            v,
        };
        assert_eq!(tr.reconstruction_error(), 0.0);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn partition_is_disjoint_cover(scores in prop::collection::vec(-0.5f64..1.5, 0..100), tau in 0.0f64..1.0) {
            let p = LayerPartition::from_scores(1, scores.clone(), tau);
            prop_assert!(p.check_invariants());
            prop_assert_eq!(p.sensitive_ids().len() + p.nonsensitive_ids().len(), scores.len());
            for (j, s) in scores.iter().enumerate() {
                prop_assert_eq!(p.is_sensitive(j), s.clamp(0.0, 1.0) >= tau);
            }
        }
    }
}
