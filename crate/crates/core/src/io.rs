//! On-disk formats: layered feature bundles (LFB), partition files, run
//! configuration and experiment reports.
//!
//! An LFB file is a JSON manifest. Vector values are stored as contiguous
//! little-endian `f32`, layer-major then vector-major then dimension-major,
//! either base64-encoded inside the manifest (small bundles) or in a sibling
//! binary file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::empa::Assessment;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentReport, ProtocolConfig};
use crate::model::{
    BundleKind, GroupingResult, Layer, LayerPartition, LayeredFeatureBundle, Matrix, Strategy,
};

pub const FORMAT_VERSION: &str = "1";
/// Payloads up to this many bytes are stored inline.
pub const INLINE_LIMIT: usize = 8 * 1024 * 1024;

pub const ENCODING_INLINE: &str = "base64-inline";
pub const ENCODING_SIBLING: &str = "sibling";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub index: usize,
    pub n_vectors: usize,
    pub dim: usize,
    pub byte_offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_flags: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub n_layers: usize,
    pub layers: Vec<LayerEntry>,
    pub kind: BundleKind,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub payload_encoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadMode {
    /// Inline below [`INLINE_LIMIT`], sibling file above.
    Auto,
    Inline,
    Sibling,
}

fn encode_payload(bundle: &LayeredFeatureBundle) -> Result<(Vec<LayerEntry>, Vec<u8>)> {
    let mut bytes = Vec::with_capacity(bundle.n_values() * 4);
    let mut entries = Vec::with_capacity(bundle.layers.len());
    for layer in &bundle.layers {
        entries.push(LayerEntry {
            index: layer.index,
            n_vectors: layer.len(),
            dim: layer.dim(),
            byte_offset: bytes.len(),
            scores: layer.scores.clone(),
            sensitive_flags: layer.sensitive_flags.clone(),
        });
        for &v in layer.values() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "layer {} holds a non-finite value",
                    layer.index
                )));
            }
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok((entries, bytes))
}

/// Write `bundle` as an LFB manifest at `path`. Values are stored as `f32`.
pub fn write_bundle_with(
    bundle: &LayeredFeatureBundle,
    path: &Path,
    mode: PayloadMode,
) -> Result<()> {
    let (layers, bytes) = encode_payload(bundle)?;
    let sibling = match mode {
        PayloadMode::Auto => bytes.len() > INLINE_LIMIT,
        PayloadMode::Inline => false,
        PayloadMode::Sibling => true,
    };
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        n_layers: bundle.layers.len(),
        layers,
        kind: bundle.kind,
        metadata: bundle.metadata.clone(),
        payload_encoding: ENCODING_INLINE.into(),
        payload: None,
        payload_file: None,
    };
    if sibling {
        let name = format!(
            "{}.bin",
            path.file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::InvalidInput(format!(
                    "bad output path {}",
                    path.display()
                )))?
        );
        fs::write(path.with_file_name(&name), &bytes)?;
        manifest.payload_encoding = ENCODING_SIBLING.into();
        manifest.payload_file = Some(name);
    } else {
        manifest.payload = Some(B64.encode(&bytes));
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_bundle(bundle: &LayeredFeatureBundle, path: &Path) -> Result<()> {
    write_bundle_with(bundle, path, PayloadMode::Auto)
}

/// Parse a manifest, checking the format version before anything else.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    match value.get("format_version") {
        Some(Value::String(v)) if v == FORMAT_VERSION => {}
        Some(Value::String(v)) => return Err(Error::UnsupportedVersion(v.clone())),
        Some(other) => return Err(Error::UnsupportedVersion(other.to_string())),
        None => return Err(Error::MalformedManifest("missing format_version".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::MalformedManifest(e.to_string()))
}

/// Decode a manifest whose sibling payload (if any) lives in `base_dir`.
pub fn bundle_from_manifest(manifest: &Manifest, base_dir: &Path) -> Result<LayeredFeatureBundle> {
    if manifest.n_layers != manifest.layers.len() {
        return Err(Error::MalformedManifest(format!(
            "n_layers is {} but {} layers are listed",
            manifest.n_layers,
            manifest.layers.len()
        )));
    }
    let payload = match manifest.payload_encoding.as_str() {
        ENCODING_INLINE => {
            let text = manifest.payload.as_ref().ok_or_else(|| {
                Error::MalformedManifest("inline encoding without payload".into())
            })?;
            B64.decode(text).map_err(|e| {
                Error::MalformedManifest(format!("payload is not valid base64: {e}"))
            })?
        }
        ENCODING_SIBLING => {
            let name = manifest.payload_file.as_ref().ok_or_else(|| {
                Error::MalformedManifest("sibling encoding without payload_file".into())
            })?;
            fs::read(base_dir.join(name))?
        }
        other => {
            return Err(Error::MalformedManifest(format!(
                "unknown payload_encoding '{other}'"
            )))
        }
    };

    let mut expected_offset = 0usize;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if entry.byte_offset != expected_offset {
            return Err(Error::MalformedManifest(format!(
                "layer {} starts at byte {} but the previous layers end at {}",
                entry.index, entry.byte_offset, expected_offset
            )));
        }
        let needed = entry
            .n_vectors
            .checked_mul(entry.dim)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| {
                Error::MalformedManifest(format!("layer {} shape overflows", entry.index))
            })?;
        if entry.byte_offset + needed > payload.len() {
            return Err(Error::TruncatedPayload {
                layer: entry.index,
                offset: entry.byte_offset,
                needed,
                available: payload.len().saturating_sub(entry.byte_offset),
            });
        }
        let data = payload[entry.byte_offset..entry.byte_offset + needed]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut layer = Layer::new(entry.index, entry.dim, data)
            .map_err(|e| Error::MalformedManifest(format!("layer {}: {e}", entry.index)))?;
        if let Some(s) = &entry.scores {
            if s.len() != entry.n_vectors {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: {} scores for {} vectors",
                    entry.index,
                    s.len(),
                    entry.n_vectors
                )));
            }
            layer.scores = Some(s.clone());
        }
        if let Some(f) = &entry.sensitive_flags {
            if f.len() != entry.n_vectors {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: {} flags for {} vectors",
                    entry.index,
                    f.len(),
                    entry.n_vectors
                )));
            }
            layer.sensitive_flags = Some(f.clone());
        }
        expected_offset += needed;
        layers.push(layer);
    }
    if expected_offset != payload.len() {
        return Err(Error::ShapeMismatch(format!(
            "payload holds {} bytes but the layers declare {}",
            payload.len(),
            expected_offset
        )));
    }
    Ok(LayeredFeatureBundle {
        layers,
        kind: manifest.kind,
        metadata: manifest.metadata.clone(),
    })
}

pub fn read_bundle(path: &Path) -> Result<LayeredFeatureBundle> {
    let text = fs::read_to_string(path)?;
    let manifest = parse_manifest(&text)?;
    bundle_from_manifest(&manifest, path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionEntry {
    pub layer_index: usize,
    pub tau: f64,
    pub sensitive_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub partitions: Vec<PartitionEntry>,
}

/// Serialize the partitions only: per layer the threshold and sensitive ids.
pub fn partitions_to_string(grouping: &GroupingResult) -> Result<String> {
    let file = PartitionFile {
        partitions: grouping
            .partitions
            .iter()
            .map(|p| PartitionEntry {
                layer_index: p.layer_index,
                tau: p.tau(),
                sensitive_ids: p.sensitive_ids().to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

/// Rebuild a grouping for `bundle` from a partition file. Scores are not
/// stored, so the result uses indicator scores.
pub fn partitions_from_str(text: &str, bundle: &LayeredFeatureBundle) -> Result<GroupingResult> {
    let file: PartitionFile = serde_json::from_str(text)
        .map_err(|e| Error::InvalidInput(format!("bad partition file: {e}")))?;
    let partitions = file
        .partitions
        .iter()
        .map(|p| {
            let layer = bundle.layer(p.layer_index).ok_or_else(|| {
                Error::ShapeMismatch(format!("partition for missing layer {}", p.layer_index))
            })?;
            let mut mask = vec![false; layer.len()];
            for &j in &p.sensitive_ids {
                *mask.get_mut(j).ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "id {j} out of range for layer {} with {} vectors",
                        p.layer_index,
                        layer.len()
                    ))
                })? = true;
            }
            Ok(LayerPartition::from_mask(p.layer_index, &mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let g = GroupingResult::new(Strategy::Flags, partitions);
    g.check_matches(bundle)?;
    Ok(g)
}

/// The shipped synthetic protocol configuration.
pub const SYNTHETIC_DEFAULT: &str = include_str!("../../../configs/synthetic_default.toml");
pub const SYNTHETIC_DEFAULT_NAME: &str = "synthetic_default";

pub fn parse_config(text: &str) -> Result<ProtocolConfig> {
    let cfg: ProtocolConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config by built-in name or file path.
pub fn load_config(name_or_path: &str) -> Result<ProtocolConfig> {
    if name_or_path == SYNTHETIC_DEFAULT_NAME {
        return parse_config(SYNTHETIC_DEFAULT);
    }
    let text = fs::read_to_string(name_or_path)
        .map_err(|e| Error::Config(format!("cannot read config '{name_or_path}': {e}")))?;
    parse_config(&text)
}

/// C-style `%.9g`: 9 significant digits, trailing zeros removed, exponent
/// form outside `[1e-4, 1e9)`.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mant = strip_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn round9(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.8e}").parse().unwrap_or(x)
    } else {
        x
    }
}

/// Round every floating-point number in a JSON tree to 9 significant digits.
fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n
                .as_f64()
                .map(round9)
                .and_then(serde_json::Number::from_f64)
            {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Long-format per-cell values: `strategy,epsilon,seed,metric,value`.
pub fn cells_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("strategy,epsilon,seed,metric,value\n");
    for c in &report.cells {
        for (m, v) in &c.metrics {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.strategy,
                fmt_g9(c.epsilon),
                c.seed,
                m,
                fmt_g9(*v)
            );
        }
    }
    s
}

pub fn aggregate_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("strategy,epsilon,metric,mean,std,ci_lo,ci_hi\n");
    for r in &report.aggregates {
        let a = &r.stats;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.strategy,
            fmt_g9(r.epsilon),
            r.metric,
            fmt_g9(a.mean),
            fmt_g9(a.std),
            fmt_g9(a.ci_lo),
            fmt_g9(a.ci_hi)
        );
    }
    s
}

pub fn figures_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("figure,series,epsilon,mean,std\n");
    for p in report.figure_series() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.figure,
            p.series,
            fmt_g9(p.epsilon),
            fmt_g9(p.mean),
            fmt_g9(p.std)
        );
    }
    s
}

pub fn supplementary_csv(report: &ExperimentReport) -> String {
    let sup = &report.supplementary;
    let mut s = String::from("baseline,seed,epsilon,estimate\n");
    for (name, rows) in [
        ("moment_reg", &sup.moment_reg),
        ("noise_mle", &sup.noise_mle),
    ] {
        for r in rows {
            let _ = writeln!(
                s,
                "{name},{},{},{}",
                r.seed,
                fmt_g9(r.epsilon),
                fmt_g9(r.estimate)
            );
        }
    }
    for (name, v) in [
        ("moment_reg_loo_rmse", sup.moment_reg_loo_rmse),
        ("noise_mle_rmse", sup.noise_mle_rmse),
    ] {
        if let Some(v) = v {
            let _ = writeln!(s, "{name},,,{}", fmt_g9(v));
        }
    }
    s
}

pub fn failures_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("strategy,epsilon,seed,reason\n");
    for c in report.failures() {
        let reason = c.error.as_deref().unwrap_or("").replace(['\n', ','], " ");
        let _ = writeln!(
            s,
            "{},{},{},{}",
            c.strategy,
            fmt_g9(c.epsilon),
            c.seed,
            reason
        );
    }
    s
}

pub const REPORT_FILES: [&str; 5] = [
    "cells.csv",
    "aggregate.csv",
    "figures.csv",
    "supplementary.csv",
    "report.json",
];

/// Write every report file into `dir` (created if needed). A failures file
/// is added only when some cell failed.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("cells.csv"), cells_csv(report))?;
    fs::write(dir.join("aggregate.csv"), aggregate_csv(report))?;
    fs::write(dir.join("figures.csv"), figures_csv(report))?;
    fs::write(dir.join("supplementary.csv"), supplementary_csv(report))?;
    fs::write(dir.join("report.json"), to_json_string(report)?)?;
    if report.failures().next().is_some() {
        fs::write(dir.join("failures.csv"), failures_csv(report))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Assessment scores as `metric,value` rows.
pub fn assessment_csv(a: &Assessment) -> String {
    let mut s = String::from("metric,value\n");
    for (name, v) in [
        ("bas", a.bas),
        ("bias_ref", a.bias_ref),
        ("bias_uniform", a.bias_uniform),
    ] {
        let _ = writeln!(s, "{name},{}", fmt_g9(v));
    }
    let _ = writeln!(s, "pooled,{}", a.pooled);
    s
}

/// `layer,id,group,pc1,pc2` rows for a 2-D projection of stacked layers.
pub fn projection_csv(rows: &[(usize, usize, bool)], coords: &Matrix) -> String {
    let mut s = String::from("layer,id,group,pc1,pc2\n");
    for (&(layer, id, sensitive), p) in rows.iter().zip(coords.iter_rows()) {
        let g = if sensitive {
            "sensitive"
        } else {
            "nonsensitive"
        };
        let _ = writeln!(s, "{layer},{id},{g},{},{}", fmt_g9(p[0]), fmt_g9(p[1]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_formatting() {
        assert_eq!(fmt_g9(5.45), "5.45");
        assert_eq!(fmt_g9(0.1), "0.1");
        assert_eq!(fmt_g9(0.01), "0.01");
        assert_eq!(fmt_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_g9(16900000.0), "16900000");
        assert_eq!(fmt_g9(1.69e10), "1.69e+10");
        assert_eq!(fmt_g9(2.12e-5), "2.12e-05");
        assert_eq!(fmt_g9(0.0001), "0.0001");
        assert_eq!(fmt_g9(-3.0), "-3");
        assert_eq!(fmt_g9(0.0), "0");
        assert_eq!(fmt_g9(123456789.4), "123456789");
        assert_eq!(fmt_g9(999999999.6), "1e+09");
    }

    #[test]
    fn version_gate_runs_first() {
        let err = parse_manifest(r#"{"format_version": "2", "anything": 1}"#).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(v) if v == "2"));
        assert!(matches!(
            parse_manifest("{"),
            Err(Error::MalformedManifest(_))
        ));
        assert!(matches!(
            parse_manifest("{}"),
            Err(Error::MalformedManifest(_))
        ));
    }

    fn synthetic() -> LayeredFeatureBundle {
        crate::experiment::generate_synthetic(&crate::experiment::SyntheticConfig::default())
            .unwrap()
            .0
    }

    fn same_bits(a: &LayeredFeatureBundle, b: &LayeredFeatureBundle) -> bool {
        a.layers.len() == b.layers.len()
            && a.layers.iter().zip(&b.layers).all(|(x, y)| {
                x.index == y.index
                    && x.dim() == y.dim()
                    && x.values()
                        .iter()
                        .zip(y.values())
                        .all(|(p, q)| p.to_bits() == q.to_bits())
                    && x.sensitive_flags == y.sensitive_flags
                    && x.scores == y.scores
            })
    }

    #[test]
    fn round_trip_inline_and_sibling() {
        let b = synthetic();
        let dir = tempfile::tempdir().unwrap();
        for (name, mode) in [
            ("a.lfb.json", PayloadMode::Inline),
            ("b.lfb.json", PayloadMode::Sibling),
        ] {
            let p = dir.path().join(name);
            write_bundle_with(&b, &p, mode).unwrap();
            let back = read_bundle(&p).unwrap();
            assert!(same_bits(&b, &back), "{name}");
            assert_eq!(back.metadata, b.metadata);
            assert_eq!(back.kind, b.kind);
        }
        assert!(dir.path().join("b.lfb.json.bin").exists());
        assert!(!dir.path().join("a.lfb.json.bin").exists());
    }

    #[test]
    fn short_payload_names_layer() {
        let b = synthetic();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.lfb.json");
        write_bundle_with(&b, &p, PayloadMode::Sibling).unwrap();
        let bin = dir.path().join("c.lfb.json.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        match read_bundle(&p) {
            Err(Error::TruncatedPayload { layer, .. }) => assert_eq!(layer, 4),
            other => panic!("expected truncated payload, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_offsets_rejected() {
        let b = synthetic();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.lfb.json");
        write_bundle_with(&b, &p, PayloadMode::Inline).unwrap();
        let mut m = parse_manifest(&fs::read_to_string(&p).unwrap()).unwrap();
        m.layers[2].byte_offset += 4;
        assert!(bundle_from_manifest(&m, dir.path()).is_err());

        let mut m = parse_manifest(&fs::read_to_string(&p).unwrap()).unwrap();
        m.n_layers = 7;
        assert!(matches!(
            bundle_from_manifest(&m, dir.path()),
            Err(Error::MalformedManifest(_))
        ));
    }

    #[test]
    fn version_two_file_is_not_read() {
        let b = synthetic();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.lfb.json");
        write_bundle(&b, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap().replacen(
            r#""format_version": "1""#,
            r#""format_version": "2""#,
            1,
        );
        fs::write(&p, text).unwrap();
        assert!(matches!(read_bundle(&p), Err(Error::UnsupportedVersion(v)) if v == "2"));
    }

    #[test]
    fn partitions_round_trip() {
        let b = synthetic();
        let g = GroupingResult::from_flags(&b).unwrap();
        let text = partitions_to_string(&g).unwrap();
        let back = partitions_from_str(&text, &b).unwrap();
        assert_eq!(back.sensitive_sizes(), g.sensitive_sizes());
        for (x, y) in back.partitions.iter().zip(&g.partitions) {
            assert_eq!(x.sensitive_ids(), y.sensitive_ids());
        }
        assert!(partitions_from_str(
            r#"{"partitions":[{"layer_index":1,"tau":1,"sensitive_ids":[999]}]}"#,
            &b
        )
        .is_err());
    }

    #[test]
    fn report_csvs_are_deterministic() {
        let mut cfg = load_config(SYNTHETIC_DEFAULT_NAME).unwrap();
        cfg.protocol.seeds = vec![0, 1];
        cfg.protocol.epsilons = vec![0.1];
        let a = crate::experiment::run_protocol(&cfg).unwrap();
        let b = crate::experiment::run_protocol(&cfg).unwrap();
        assert_eq!(cells_csv(&a), cells_csv(&b));
        assert_eq!(aggregate_csv(&a), aggregate_csv(&b));
        let dir = tempfile::tempdir().unwrap();
        write_report(&a, dir.path()).unwrap();
        for f in REPORT_FILES {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = read_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(aggregate_csv(&back), aggregate_csv(&a));
    }

    #[test]
    fn shipped_config_parses() {
        let cfg = load_config(SYNTHETIC_DEFAULT_NAME).unwrap();
        assert_eq!(cfg.protocol.seeds, vec![0, 1, 2, 3, 4]);
        assert!(parse_config("[protocol]\nbogus = 1\n").is_err());
        assert!(parse_config("").is_ok());
    }
}
