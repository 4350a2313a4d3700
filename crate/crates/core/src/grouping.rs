//! Sensitivity scoring, thresholding and the partitioning strategies:
//! bottom-up (BUA), top-down (TDA) and the random-partition baseline.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microagg::{estimate_ranges, mdav, ncp, normalize_rows, uniform_weights, MdavConfig};
use crate::model::{
    ConceptSet, GroupingResult, Layer, LayerPartition, LayeredFeatureBundle, LinkSets, Strategy,
};
use crate::rng::{substream, TAG_RANDOM_PARTITION, TAG_SCORE};
use crate::stats::{l2_norm, quantile};

/// Where per-vector sensitivity scores come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SensitivityScorer {
    /// Planted flags: sensitive vectors score in [0.75, 1), the rest in
    /// [0, 0.25), with seeded jitter.
    GroundTruth { seed: u64 },
    /// Max clamped cosine similarity against concept prototypes.
    Prototype {
        concepts: ConceptSet,
        prototypes: BTreeMap<String, Vec<f64>>,
    },
    /// Scores stored in the bundle.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ThresholdPolicy {
    Quantile(f64),
    Fixed(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Quantile(0.90)
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Quantile(q) if !(q > 0.0 && q < 1.0) => Err(Error::InvalidInput(
                format!("threshold quantile must lie in (0, 1), got {q}"),
            )),
            ThresholdPolicy::Fixed(t) if !t.is_finite() => Err(Error::InvalidInput(format!(
                "fixed threshold must be finite, got {t}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceKind {
    /// Identity for equal cardinalities, nearest grid cell otherwise.
    #[default]
    Auto,
    Identity,
    NearestSpatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub policy: ThresholdPolicy,
    /// Run MDAV per layer and record NCP diagnostics.
    pub mdav: Option<MdavConfig>,
    pub correspondence: CorrespondenceKind,
    /// TDA promotion factor: a linked vector is promoted when its score
    /// reaches `alpha · τ`.
    pub alpha: f64,
    /// Quantile bounds for NCP ranges.
    pub range_quantiles: (f64, f64),
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            policy: ThresholdPolicy::default(),
            mdav: Some(MdavConfig::default()),
            correspondence: CorrespondenceKind::Auto,
            alpha: 0.9,
            range_quantiles: (0.05, 0.95),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Per-vector scores in [0, 1] for one layer.
pub fn score_layer(layer: &Layer, scorer: &SensitivityScorer) -> Result<Vec<f64>> {
    match scorer {
        SensitivityScorer::GroundTruth { seed } => {
            let flags = layer.sensitive_flags.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("layer {} has no sensitive flags", layer.index))
            })?;
            let mut rng = substream(*seed, TAG_SCORE, layer.index as u64);
            Ok(flags
                .iter()
                .map(|&f| {
                    let r: f64 = rng.random();
                    if f {
                        0.75 + 0.25 * r
                    } else {
                        0.25 * r
                    }
                })
                .collect())
        }
        SensitivityScorer::Prototype {
            concepts,
            prototypes,
        } => {
            let mut protos = Vec::with_capacity(concepts.len());
            for c in concepts.iter() {
                let q = prototypes
                    .get(c)
                    .ok_or_else(|| Error::MissingPrototype(c.to_string()))?;
                if q.len() != layer.dim() {
                    return Err(Error::DimensionMismatch {
                        layer: layer.index,
                        expected: layer.dim(),
                        found: q.len(),
                    });
                }
                protos.push(q);
            }
            Ok(layer
                .vectors()
                .map(|x| {
                    protos
                        .iter()
                        .map(|q| cosine(x, q).clamp(0.0, 1.0))
                        .fold(0.0, f64::max)
                })
                .collect())
        }
        SensitivityScorer::External => {
            let s = layer.scores.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("layer {} has no scores", layer.index))
            })?;
            if s.len() != layer.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: {} scores for {} vectors",
                    layer.index,
                    s.len(),
                    layer.len()
                )));
            }
            Ok(s.iter()
                .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect())
        }
    }
}

/// Threshold value for the given (already clamped) scores.
pub fn threshold(scores: &[f64], policy: &ThresholdPolicy) -> f64 {
    match *policy {
        ThresholdPolicy::Quantile(q) => quantile(scores, q),
        ThresholdPolicy::Fixed(t) => t,
    }
}

pub fn partition_layer(
    layer_index: usize,
    scores: &[f64],
    policy: &ThresholdPolicy,
) -> LayerPartition {
    let clamped: Vec<f64> = scores
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
        .collect();
    let tau = threshold(&clamped, policy);
    LayerPartition::from_scores(layer_index, clamped, tau)
}

struct NcpDiag {
    sensitive: f64,
    nonsensitive: f64,
    micro_mean: f64,
}

fn ncp_diagnostics(
    layer: &Layer,
    part: &LayerPartition,
    cfg: &MdavConfig,
    q: (f64, f64),
) -> Result<NcpDiag> {
    let raw = layer.to_matrix();
    let x = if cfg.normalize {
        normalize_rows(&raw)
    } else {
        raw
    };
    let ranges = estimate_ranges(&x, q.0, q.1)?;
    let w = uniform_weights(x.cols());
    let clusters = mdav(
        &x,
        &MdavConfig {
            normalize: false,
            ..*cfg
        },
    )?;
    let micro_mean = clusters
        .iter()
        .map(|c| ncp(&c.members, &x, &w, &ranges))
        .sum::<f64>()
        / clusters.len() as f64;
    Ok(NcpDiag {
        sensitive: ncp(part.sensitive_ids(), &x, &w, &ranges),
        nonsensitive: ncp(part.nonsensitive_ids(), &x, &w, &ranges),
        micro_mean,
    })
}

fn attach_diagnostics(
    result: &mut GroupingResult,
    bundle: &LayeredFeatureBundle,
    config: &GroupingConfig,
) -> Result<()> {
    let Some(mcfg) = config.mdav else {
        return Ok(());
    };
    let diags = bundle
        .layers
        .par_iter()
        .zip(&result.partitions)
        .map(|(l, p)| ncp_diagnostics(l, p, &mcfg, config.range_quantiles))
        .collect::<Result<Vec<_>>>()?;
    result.ncp_sensitive = Some(diags.iter().map(|d| d.sensitive).collect());
    result.ncp_nonsensitive = Some(diags.iter().map(|d| d.nonsensitive).collect());
    result.microcluster_ncp = Some(diags.iter().map(|d| d.micro_mean).collect());
    Ok(())
}

/// Bottom-up strategy: score and threshold every layer independently,
/// i = 1..n, with optional MDAV/NCP diagnostics.
pub fn bua(
    bundle: &LayeredFeatureBundle,
    scorer: &SensitivityScorer,
    config: &GroupingConfig,
) -> Result<GroupingResult> {
    config.policy.validate()?;
    let partitions = bundle
        .layers
        .par_iter()
        .map(|l| {
            Ok(partition_layer(
                l.index,
                &score_layer(l, scorer)?,
                &config.policy,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = GroupingResult::new(Strategy::Bua, partitions);
    attach_diagnostics(&mut result, bundle, config)?;
    Ok(result)
}

/// Map every id of `upper` to an id of `lower`.
pub fn correspondence(
    bundle: &LayeredFeatureBundle,
    upper: &Layer,
    lower: &Layer,
    kind: CorrespondenceKind,
) -> Result<Vec<usize>> {
    let identity = match kind {
        CorrespondenceKind::Identity => {
            if upper.len() != lower.len() {
                return Err(Error::ShapeMismatch(format!(
                    "identity correspondence needs equal cardinalities (layer {} has {}, layer {} has {})",
                    upper.index,
                    upper.len(),
                    lower.index,
                    lower.len()
                )));
            }
            true
        }
        CorrespondenceKind::Auto => upper.len() == lower.len(),
        CorrespondenceKind::NearestSpatial => false,
    };
    if identity {
        return Ok((0..upper.len()).collect());
    }
    let grid = |l: &Layer| {
        bundle.grid_shape(l.index).ok_or_else(|| {
            Error::InvalidInput(format!(
                "layer {} has no grid coordinates; spatial correspondence is impossible",
                l.index
            ))
        })
    };
    let (hu, wu) = grid(upper)?;
    let (hl, wl) = grid(lower)?;
    let (cu, cl) = (hu * wu, hl * wl);
    if cu == 0
        || cl == 0
        || !upper.len().is_multiple_of(cu)
        || !lower.len().is_multiple_of(cl)
        || upper.len() / cu != lower.len() / cl
    {
        return Err(Error::ShapeMismatch(format!(
            "grids {hu}x{wu} (layer {}) and {hl}x{wl} (layer {}) do not tile the same number of images",
            upper.index, lower.index
        )));
    }
    Ok((0..upper.len())
        .map(|j| {
            let (img, p) = (j / cu, j % cu);
            let y = (p / wu) as f64 + 0.5;
            let x = (p % wu) as f64 + 0.5;
            // nearest lower cell centre to the normalized upper cell centre
            let r = ((y / hu as f64) * hl as f64).floor().min(hl as f64 - 1.0) as usize;
            let c = ((x / wu as f64) * wl as f64).floor().min(wl as f64 - 1.0) as usize;
            img * cl + r * wl + c
        })
        .collect())
}

/// Top-down strategy. Layer n is thresholded directly; each lower layer is
/// thresholded, then linked vectors mapped down from the refined sensitive
/// group are promoted when their score reaches `alpha · τ`. A promoted
/// vector's score is raised to τ so the partition invariant holds.
pub fn tda(
    bundle: &LayeredFeatureBundle,
    scorer: &SensitivityScorer,
    config: &GroupingConfig,
) -> Result<GroupingResult> {
    config.policy.validate()?;
    let n = bundle.layers.len();
    if n == 0 {
        return Err(Error::InvalidInput("bundle has no layers".into()));
    }
    let scores = bundle
        .layers
        .par_iter()
        .map(|l| score_layer(l, scorer))
        .collect::<Result<Vec<_>>>()?;

    let mut parts: Vec<Option<LayerPartition>> = vec![None; n];
    parts[n - 1] = Some(partition_layer(
        bundle.layers[n - 1].index,
        &scores[n - 1],
        &config.policy,
    ));
    let mut links = Vec::new();
    for pos in (1..n).rev() {
        let upper = &bundle.layers[pos];
        let lower = &bundle.layers[pos - 1];
        let upper_part = parts[pos]
            .as_ref()
            .expect("upper layer already partitioned");
        let prelim = partition_layer(lower.index, &scores[pos - 1], &config.policy);
        let pi = correspondence(bundle, upper, lower, config.correspondence)?;

        let image_s: BTreeSet<usize> = upper_part.sensitive_ids().iter().map(|&j| pi[j]).collect();
        let image_n: BTreeSet<usize> = upper_part
            .nonsensitive_ids()
            .iter()
            .map(|&j| pi[j])
            .collect();

        let tau = prelim.tau();
        let mut refined_scores = prelim.scores().to_vec();
        let mut promoted = Vec::new();
        for &y in &image_s {
            let s = refined_scores[y];
            if s < tau && s >= config.alpha * tau {
                refined_scores[y] = tau;
                promoted.push(y);
            }
        }
        let refined = LayerPartition::from_scores(lower.index, refined_scores, tau);
        links.push(LinkSets {
            upper_layer: upper.index,
            lower_layer: lower.index,
            sensitive: image_s
                .iter()
                .copied()
                .filter(|&y| refined.is_sensitive(y))
                .collect(),
            nonsensitive: image_n
                .iter()
                .copied()
                .filter(|&y| !refined.is_sensitive(y))
                .collect(),
            promoted,
        });
        parts[pos - 1] = Some(refined);
    }
    let partitions = parts
        .into_iter()
        .map(|p| p.expect("every layer partitioned"))
        .collect();
    let mut result = GroupingResult::new(Strategy::Tda, partitions);
    result.links = links;
    attach_diagnostics(&mut result, bundle, config)?;
    Ok(result)
}

/// Uniformly random sensitive sets with the requested size per layer.
pub fn random_partition(
    bundle: &LayeredFeatureBundle,
    sizes: &[usize],
    seed: u64,
) -> Result<GroupingResult> {
    if sizes.len() != bundle.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sizes for {} layers",
            sizes.len(),
            bundle.layers.len()
        )));
    }
    let partitions = bundle
        .layers
        .iter()
        .zip(sizes)
        .map(|(l, &size)| {
            if size > l.len() {
                return Err(Error::SizeOverflow {
                    layer: l.index,
                    requested: size,
                    available: l.len(),
                });
            }
            let mut rng = substream(seed, TAG_RANDOM_PARTITION, l.index as u64);
            let mut mask = vec![false; l.len()];
            for j in rand::seq::index::sample(&mut rng, l.len(), size) {
                mask[j] = true;
            }
            Ok(LayerPartition::from_mask(l.index, &mask))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupingResult::new(Strategy::Random, partitions))
}

/// Run one strategy. `Random` uses the BUA sensitive-set sizes.
pub fn group(
    bundle: &LayeredFeatureBundle,
    strategy: Strategy,
    scorer: &SensitivityScorer,
    config: &GroupingConfig,
    seed: u64,
) -> Result<GroupingResult> {
    match strategy {
        Strategy::Bua => bua(bundle, scorer, config),
        Strategy::Tda => tda(bundle, scorer, config),
        Strategy::Random => {
            let sizes = bua(
                bundle,
                scorer,
                &GroupingConfig {
                    mdav: None,
                    ..*config
                },
            )?
            .sensitive_sizes();
            random_partition(bundle, &sizes, seed)
        }
        Strategy::Flags => GroupingResult::from_flags(bundle),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BundleKind;

    fn layer_with_scores(index: usize, scores: Vec<f64>) -> Layer {
        let n = scores.len();
        Layer::new(index, 2, (0..2 * n).map(|k| k as f64).collect())
            .unwrap()
            .with_scores(scores)
    }

    #[test]
    fn prototype_scores() {
        let concepts = ConceptSet::new("s", ["a", "b"]).unwrap();
        let prototypes = BTreeMap::from([
            ("a".to_string(), vec![1.0, 0.0]),
            ("b".to_string(), vec![0.0, 1.0]),
        ]);
        let scorer = SensitivityScorer::Prototype {
            concepts,
            prototypes,
        };
        let x = Layer::new(1, 2, vec![2.0, 0.0, -1.0, 0.0, 0.3, 0.7]).unwrap();
        let s = score_layer(&x, &scorer).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        let expected = 0.7 / (0.3f64.powi(2) + 0.7f64.powi(2)).sqrt();
        assert!((s[2] - expected).abs() < 1e-12);
    }

    #[test]
    fn prototype_max_over_concepts() {
        // unit vectors whose cosine with each prototype is 0.3 and 0.7
        let concepts = ConceptSet::new("s", ["a", "b"]).unwrap();
        let b = [0.7, (1.0f64 - 0.49).sqrt()];
        let a = [0.3, (1.0f64 - 0.09).sqrt()];
        let prototypes = BTreeMap::from([
            ("a".to_string(), vec![a[0], a[1]]),
            ("b".to_string(), vec![b[0], b[1]]),
        ]);
        let scorer = SensitivityScorer::Prototype {
            concepts,
            prototypes,
        };
        // x = e1: cos(x, a) = 0.3, cos(x, b) = 0.7
        let x = Layer::new(1, 2, vec![1.0, 0.0]).unwrap();
        let s = score_layer(&x, &scorer).unwrap();
        assert!((s[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn missing_prototype() {
        let concepts = ConceptSet::new("s", ["person"]).unwrap();
        let scorer = SensitivityScorer::Prototype {
            concepts,
            prototypes: BTreeMap::new(),
        };
        let x = Layer::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(
            matches!(score_layer(&x, &scorer), Err(Error::MissingPrototype(c)) if c == "person")
        );
    }

    #[test]
    fn quantile_partition_sizes() {
        let scores: Vec<f64> = (0..200).map(|j| j as f64 / 199.0).collect();
        let p = partition_layer(1, &scores, &ThresholdPolicy::Quantile(0.9));
        // brute-force count of scores at or above the threshold
        let tau = p.tau();
        assert_eq!(scores.iter().filter(|&&s| s >= tau).count(), 20);
        assert_eq!(p.sensitive_ids().len(), 20);

        let p = partition_layer(1, &scores, &ThresholdPolicy::Fixed(1.1));
        assert!(p.sensitive_ids().is_empty());

        let p = partition_layer(1, &[0.4; 10], &ThresholdPolicy::Quantile(0.9));
        assert_eq!(p.sensitive_ids().len(), 10);
    }

    #[test]
    fn single_layer_bua_and_tda() {
        let b = LayeredFeatureBundle::new(
            vec![layer_with_scores(
                1,
                (0..20).map(|j| j as f64 / 20.0).collect(),
            )],
            BundleKind::Original,
        );
        let cfg = GroupingConfig {
            mdav: Some(MdavConfig {
                k: 3,
                normalize: true,
            }),
            ..GroupingConfig::default()
        };
        let g = bua(&b, &SensitivityScorer::External, &cfg).unwrap();
        assert_eq!(g.partitions.len(), 1);
        assert_eq!(g.ncp_sensitive.as_ref().unwrap().len(), 1);
        let t = tda(&b, &SensitivityScorer::External, &cfg).unwrap();
        assert_eq!(t.partitions, g.partitions);
        assert!(t.links.is_empty());
    }

    #[test]
    fn tda_identical_layers_link_everything() {
        let s: Vec<f64> = (0..10).map(|j| j as f64 / 10.0).collect();
        let b = LayeredFeatureBundle::new(
            (1..=3).map(|i| layer_with_scores(i, s.clone())).collect(),
            BundleKind::Original,
        );
        let cfg = GroupingConfig {
            mdav: None,
            ..GroupingConfig::default()
        };
        let t = tda(&b, &SensitivityScorer::External, &cfg).unwrap();
        for (link, lower) in t.links.iter().zip([2usize, 1]) {
            assert_eq!(link.sensitive, t.partitions[lower - 1].sensitive_ids());
            assert!(link.promoted.is_empty());
        }
    }

    #[test]
    fn tda_disjoint_layers_have_no_sensitive_links() {
        let up: Vec<f64> = (0..10).map(|j| if j < 2 { 1.0 } else { 0.0 }).collect();
        let down: Vec<f64> = (0..10).map(|j| if j >= 8 { 1.0 } else { 0.0 }).collect();
        let b = LayeredFeatureBundle::new(
            vec![layer_with_scores(1, down.clone()), layer_with_scores(2, up)],
            BundleKind::Original,
        );
        let cfg = GroupingConfig {
            mdav: None,
            policy: ThresholdPolicy::Fixed(0.5),
            ..GroupingConfig::default()
        };
        let t = tda(&b, &SensitivityScorer::External, &cfg).unwrap();
        assert!(t.links[0].sensitive.is_empty());
        assert!(t.links[0].promoted.is_empty());
        assert_eq!(t.partitions[0].sensitive_ids(), &[8, 9]);
    }

    #[test]
    fn tda_promotes_near_threshold_links() {
        let up = vec![1.0, 0.0, 0.0, 0.0];
        let down = vec![0.46, 0.0, 0.2, 1.0];
        let b = LayeredFeatureBundle::new(
            vec![layer_with_scores(1, down), layer_with_scores(2, up)],
            BundleKind::Original,
        );
        let cfg = GroupingConfig {
            mdav: None,
            policy: ThresholdPolicy::Fixed(0.5),
            ..GroupingConfig::default()
        };
        let t = tda(&b, &SensitivityScorer::External, &cfg).unwrap();
        assert_eq!(t.links[0].promoted, vec![0]);
        assert_eq!(t.partitions[0].sensitive_ids(), &[0, 3]);
        assert!(t.partitions[0].check_invariants());
    }

    #[test]
    fn spatial_correspondence_maps_grid_cells() {
        let mut b = LayeredFeatureBundle::new(
            vec![
                Layer::new(1, 1, vec![0.0; 36]).unwrap(),
                Layer::new(2, 1, vec![0.0; 4]).unwrap(),
            ],
            BundleKind::Original,
        );
        assert!(correspondence(&b, &b.layers[1], &b.layers[0], CorrespondenceKind::Auto).is_err());
        b.metadata.insert("grid.1".into(), "6x6".into());
        b.metadata.insert("grid.2".into(), "2x2".into());
        let pi = correspondence(&b, &b.layers[1], &b.layers[0], CorrespondenceKind::Auto).unwrap();
        // upper centres at 0.25 and 0.75 land on lower rows/cols 1 and 4
        assert_eq!(pi, vec![7, 10, 25, 28]);
    }

    #[test]
    fn random_partition_contract() {
        let layers = (1..=2)
            .map(|i| Layer::new(i, 1, vec![0.0; 200]).unwrap())
            .collect();
        let b = LayeredFeatureBundle::new(layers, BundleKind::Original);
        let g = random_partition(&b, &[60, 0], 4).unwrap();
        assert_eq!(g.sensitive_sizes(), vec![60, 0]);
        assert_eq!(g, random_partition(&b, &[60, 0], 4).unwrap());
        assert_ne!(g, random_partition(&b, &[60, 0], 5).unwrap());
        assert!(matches!(
            random_partition(&b, &[201, 0], 4),
            Err(Error::SizeOverflow { layer: 1, .. })
        ));
    }
}
