//! Calibrated additive noise and sensitive-subset perturbation.
//!
//! Samples are drawn at unit scale and multiplied by `c/ε`, so two runs that
//! differ only in ε see the same underlying draws.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BundleKind, GroupingResult, LayeredFeatureBundle, Matrix, NoiseFamily, PerturbationTriple,
    ReferenceMechanism,
};
use crate::rng::{substream, TAG_NOISE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    SensitiveOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mechanism: ReferenceMechanism,
    pub seed: u64,
    pub target: NoiseTarget,
}

impl NoiseConfig {
    pub fn new(mechanism: ReferenceMechanism, seed: u64) -> Self {
        Self {
            mechanism,
            seed,
            target: NoiseTarget::SensitiveOnly,
        }
    }
}

/// One unit-scale draw of the given family.
fn unit_draw<R: Rng + ?Sized>(rng: &mut R, family: NoiseFamily) -> f64 {
    match family {
        NoiseFamily::Gaussian => StandardNormal.sample(rng),
        NoiseFamily::Laplace => {
            // |X| ~ Exp(1) with a fair random sign is Laplace(0, 1)
            let e: f64 = Exp1.sample(rng);
            if rng.random::<bool>() {
                e
            } else {
                -e
            }
        }
    }
}

/// `count × dim` i.i.d. draws at scale `mechanism.scale()` from the stream
/// `(seed, tag, index)`.
pub fn noise_block(
    mechanism: &ReferenceMechanism,
    seed: u64,
    tag: &str,
    index: u64,
    count: usize,
    dim: usize,
) -> Matrix {
    let mut rng = substream(seed, tag, index);
    let scale = mechanism.scale();
    let data = (0..count * dim)
        .map(|_| scale * unit_draw(&mut rng, mechanism.family))
        .collect();
    Matrix::from_vec(count, dim, data).expect("length matches shape")
}

pub fn sample_noise(count: usize, dim: usize, config: &NoiseConfig) -> Matrix {
    noise_block(&config.mechanism, config.seed, TAG_NOISE, 0, count, dim)
}

/// Add noise to the sensitive vectors of every layer (or to all vectors when
/// `target = All`). Layer `i` draws from its own stream keyed by `i`.
pub fn perturb_sensitive(
    bundle: &LayeredFeatureBundle,
    grouping: &GroupingResult,
    config: &NoiseConfig,
) -> Result<(LayeredFeatureBundle, Vec<PerturbationTriple>)> {
    if bundle.kind != BundleKind::Original {
        return Err(Error::InvalidInput(
            "perturbation expects an original bundle".into(),
        ));
    }
    grouping.check_matches(bundle)?;

    let mut out = bundle.clone();
    out.kind = BundleKind::Perturbed;
    let mut triples = Vec::with_capacity(bundle.layers.len());
    for (layer, part) in out.layers.iter_mut().zip(&grouping.partitions) {
        let ids: Vec<usize> = match config.target {
            NoiseTarget::SensitiveOnly => part.sensitive_ids().to_vec(),
            NoiseTarget::All => (0..layer.len()).collect(),
        };
        let t = layer.select(&ids);
        let u = noise_block(
            &config.mechanism,
            config.seed,
            TAG_NOISE,
            layer.index as u64,
            ids.len(),
            layer.dim(),
        );
        let mut v = t.clone();
        for (vi, ui) in v.as_mut_slice().iter_mut().zip(u.as_slice()) {
            *vi += ui;
        }
        for (row, &j) in ids.iter().enumerate() {
            layer.vector_mut(j).copy_from_slice(v.row(row));
        }
        triples.push(PerturbationTriple {
            layer_index: layer.index,
            ids,
            t,
            u,
            v,
        });
    }
    let m = &config.mechanism;
    out.metadata
        .insert("noise.family".into(), m.family.to_string());
    out.metadata
        .insert("noise.epsilon".into(), m.epsilon.to_string());
    out.metadata.insert("noise.c".into(), m.c.to_string());
    out.metadata
        .insert("noise.seed".into(), config.seed.to_string());
    Ok((out, triples))
}
