//! Point-cloud and flow file formats, ground removal, dataset manifests,
//! solver-config loading, and tab-separated report tables.
//!
//! Two cloud formats:
//!
//! * `csv` - one point per line, comma-separated decimal floats; the first
//!   three columns are x, y, z in meters and any remaining columns become
//!   feature channels.
//! * `f32bin` - a 16-byte header (magic `PCF1`, little-endian u32 point
//!   count, little-endian u32 channel count >= 3, four reserved zero bytes)
//!   followed by count x channels little-endian f32 values. Channels beyond
//!   the first three become features.
//!
//! Flow files use the same binary container with exactly three channels.
//! Values are widened to f64 in memory; a save/load round trip is bit-exact
//! at 32-bit precision. Loading never silently truncates: the declared
//! count must match the payload size exactly.
//!
//! Manifests and solver configs are TOML. Manifest paths are resolved
//! relative to the manifest file's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BinnedReport, EvalSummary};
use crate::optim::FitTrace;
use crate::types::{Features, FlowField, PointCloud, SolverConfig, Vec3};

const MAGIC: &[u8; 4] = b"PCF1";
const HEADER_LEN: usize = 16;

/// On-disk cloud encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    Csv,
    F32Bin,
}

impl CloudFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            CloudFormat::Csv => "csv",
            CloudFormat::F32Bin => "pcf",
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::FileIo {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::FileIo {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a point cloud; the frame label is the file stem.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        CloudFormat::Csv => load_cloud_csv(path, frame_id),
        CloudFormat::F32Bin => {
            let (positions, extra, channels) = load_f32bin(path)?;
            let cloud = PointCloud::new(positions, frame_id)?;
            if channels > 3 {
                cloud.with_features(Features::new(channels - 3, extra)?)
            } else {
                Ok(cloud)
            }
        }
    }
}

fn load_cloud_csv(path: &Path, frame_id: String) -> Result<PointCloud> {
    let err = |line: usize, what: String| Error::MalformedCsv {
        path: path.display().to_string(),
        line,
        what,
    };
    let text = fs::read_to_string(path).map_err(|source| Error::FileIo {
        path: path.display().to_string(),
        source,
    })?;
    let mut positions = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut feature_dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = Vec::new();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(lineno, format!("cannot parse float from {field:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value {v}")));
            }
            values.push(v);
        }
        if values.len() < 3 {
            return Err(err(
                lineno,
                format!("expected at least 3 columns, found {}", values.len()),
            ));
        }
        let dim = values.len() - 3;
        match feature_dim {
            None => feature_dim = Some(dim),
            Some(d) if d != dim => {
                return Err(err(
                    lineno,
                    format!("inconsistent column count: expected {}, found {}", d + 3, dim + 3),
                ))
            }
            _ => {}
        }
        positions.push(Vec3::new(values[0], values[1], values[2]));
        features.extend_from_slice(&values[3..]);
    }
    if positions.is_empty() {
        return Err(err(1, "file contains no points".to_string()));
    }
    let cloud = PointCloud::new(positions, frame_id)?;
    match feature_dim {
        Some(dim) if dim > 0 => cloud.with_features(Features::new(dim, features)?),
        _ => Ok(cloud),
    }
}

/// Saves a point cloud in the requested format.
pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::Csv => {
            let mut out = String::new();
            for (i, p) in cloud.positions().iter().enumerate() {
                write!(out, "{},{},{}", p.x, p.y, p.z).expect("writing to String cannot fail");
                if let Some(f) = cloud.features() {
                    for v in f.row(i) {
                        write!(out, ",{v}").expect("writing to String cannot fail");
                    }
                }
                out.push('\n');
            }
            write_file(path, out.as_bytes())
        }
        CloudFormat::F32Bin => {
            let feature_dim = cloud.features().map_or(0, |f| f.dim());
            let channels = 3 + feature_dim;
            let mut values = Vec::with_capacity(cloud.len() * channels);
            for (i, p) in cloud.positions().iter().enumerate() {
                values.extend_from_slice(&[p.x, p.y, p.z]);
                if let Some(f) = cloud.features() {
                    values.extend_from_slice(f.row(i));
                }
            }
            save_f32bin(path, cloud.len(), channels, &values)
        }
    }
}

fn load_f32bin(path: &Path) -> Result<(Vec<Vec3>, Vec<f64>, usize)> {
    let display = path.display().to_string();
    let malformed = |what: String, offset: usize| Error::MalformedBinary {
        path: display.clone(),
        what,
        offset,
    };
    let bytes = read_file(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(malformed(
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            bytes.len(),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic { path: display });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if channels < 3 {
        return Err(malformed(format!("channel count {channels} < 3"), 8));
    }
    if bytes[12..16] != [0, 0, 0, 0] {
        return Err(malformed("reserved bytes are not zero".to_string(), 12));
    }
    let expected = HEADER_LEN + 4 * count * channels;
    if bytes.len() != expected {
        return Err(malformed(
            format!(
                "payload size mismatch: header declares {count} points x {channels} channels \
                 ({expected} bytes total), file has {} bytes",
                bytes.len()
            ),
            bytes.len().min(expected),
        ));
    }
    let mut positions = Vec::with_capacity(count);
    let mut extra = Vec::with_capacity(count * (channels - 3));
    for i in 0..count {
        let mut record = [0.0f64; 3];
        for c in 0..channels {
            let offset = HEADER_LEN + 4 * (i * channels + c);
            let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(malformed(format!("non-finite value {v}"), offset));
            }
            if c < 3 {
                record[c] = v;
            } else {
                extra.push(v);
            }
        }
        positions.push(Vec3::new(record[0], record[1], record[2]));
    }
    Ok((positions, extra, channels))
}

fn save_f32bin(path: &Path, count: usize, channels: usize, values: &[f64]) -> Result<()> {
    debug_assert_eq!(values.len(), count * channels);
    let count32 = u32::try_from(count).map_err(|_| Error::MalformedBinary {
        path: path.display().to_string(),
        what: format!("point count {count} exceeds the u32 header field"),
        offset: 4,
    })?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&count32.to_le_bytes());
    bytes.extend_from_slice(&(channels as u32).to_le_bytes());
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Saves a flow field as a three-channel `f32bin` container. Writing an
/// empty flow is an error.
pub fn save_flow(path: &Path, flow: &FlowField) -> Result<()> {
    if flow.is_empty() {
        return Err(Error::EmptyWrite {
            what: "flow field",
            path: path.display().to_string(),
        });
    }
    let mut values = Vec::with_capacity(flow.len() * 3);
    for d in flow.displacements() {
        values.extend_from_slice(&[d.x, d.y, d.z]);
    }
    save_f32bin(path, flow.len(), 3, &values)
}

/// Loads a flow field from a three-channel `f32bin` container.
pub fn load_flow(path: &Path) -> Result<FlowField> {
    let (positions, _, channels) = load_f32bin(path)?;
    if channels != 3 {
        return Err(Error::MalformedBinary {
            path: path.display().to_string(),
            what: format!("flow files must have exactly 3 channels, found {channels}"),
            offset: 8,
        });
    }
    FlowField::new(positions)
}

/// Drops points at or below `z_threshold`, preserving the order of the
/// survivors. Errors when nothing survives, since downstream stages need at
/// least one point.
pub fn remove_ground(cloud: &PointCloud, z_threshold: f64) -> Result<(PointCloud, usize)> {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.position(i).z > z_threshold)
        .collect();
    let removed = cloud.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::AllPointsRemoved {
            threshold: z_threshold,
            removed,
        });
    }
    Ok((cloud.select(&keep), removed))
}

/// One scene of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_flow_path: Option<PathBuf>,
    /// Cloud encoding for this scene's files.
    #[serde(default = "default_format")]
    pub format: CloudFormat,
}

fn default_format() -> CloudFormat {
    CloudFormat::F32Bin
}

/// A dataset: scene entries plus dataset-level preprocessing options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetManifest {
    /// Height threshold for ground removal, meters. Absent means the step is
    /// skipped; there is no meaningful universal default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_threshold: Option<f64>,
    #[serde(default, rename = "scene")]
    pub scenes: Vec<SceneEntry>,
}

/// Loads and validates a manifest: unique scene ids, referenced files
/// present. Relative paths are resolved against the manifest directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| Error::FileIo {
        path: display.clone(),
        source,
    })?;
    let mut manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::MalformedConfig {
            path: display.clone(),
            message: e.to_string(),
        })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    for entry in &mut manifest.scenes {
        if !seen.insert(entry.scene_id.clone()) {
            return Err(Error::InvalidManifest {
                path: display,
                what: format!("duplicate scene_id {:?}", entry.scene_id),
            });
        }
        for p in [&mut entry.source_path, &mut entry.target_path] {
            *p = resolve(base, p);
        }
        if let Some(gt) = &mut entry.gt_flow_path {
            *gt = resolve(base, gt);
        }
        let mut required = vec![&entry.source_path, &entry.target_path];
        if let Some(gt) = &entry.gt_flow_path {
            required.push(gt);
        }
        for p in required {
            if !p.exists() {
                return Err(Error::InvalidManifest {
                    path: display,
                    what: format!("scene {:?} references missing file {}", entry.scene_id, p.display()),
                });
            }
        }
    }
    Ok(manifest)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::MalformedConfig {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, text.as_bytes())
}

/// Loads a scene pair through a manifest entry, applying ground removal to
/// both clouds when the manifest sets a threshold.
pub fn load_scene_pair(entry: &SceneEntry, ground_threshold: Option<f64>) -> Result<crate::types::ScenePair> {
    let mut source = load_cloud(&entry.source_path, entry.format)?;
    let mut target = load_cloud(&entry.target_path, entry.format)?;
    let mut gt_flow = match &entry.gt_flow_path {
        Some(p) => Some(load_flow(p)?),
        None => None,
    };
    if let Some(threshold) = ground_threshold {
        let keep: Vec<usize> = (0..source.len())
            .filter(|&i| source.position(i).z > threshold)
            .collect();
        if keep.is_empty() {
            return Err(Error::AllPointsRemoved {
                threshold,
                removed: source.len(),
            });
        }
        // The ground-truth flow is indexed parallel to the source, so it is
        // filtered with the same survivor set.
        if let Some(gt) = gt_flow.take() {
            if gt.len() != source.len() {
                return Err(Error::LengthMismatch {
                    what: "gt flow vs. source cloud",
                    expected: source.len(),
                    actual: gt.len(),
                });
            }
            gt_flow = Some(FlowField::new_unchecked(
                keep.iter().map(|&i| gt.get(i)).collect(),
            ));
        }
        source = source.select(&keep);
        (target, _) = remove_ground(&target, threshold)?;
    }
    let mut pair = crate::types::ScenePair::new(source, target);
    if let Some(gt) = gt_flow {
        pair = pair.with_gt_flow(gt);
    }
    Ok(pair)
}

/// Loads a solver config from TOML.
pub fn load_solver_config(path: &Path) -> Result<SolverConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::FileIo {
        path: path.display().to_string(),
        source,
    })?;
    let config: SolverConfig = toml::from_str(&text).map_err(|e| Error::MalformedConfig {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Tab-separated report tables.
// ---------------------------------------------------------------------------

/// Per-scene evaluation rows plus a point-weighted aggregate row.
pub fn eval_table(rows: &[(String, EvalSummary)]) -> String {
    let mut out = String::from("scene_id\tn_points\tepe_m\tacc_0.05\tacc_0.1\n");
    let mut total_points = 0usize;
    let mut weighted = (0.0, 0.0, 0.0);
    for (id, s) in rows {
        writeln!(
            out,
            "{id}\t{}\t{:.6}\t{:.4}\t{:.4}",
            s.n_points, s.epe_mean, s.acc_strict, s.acc_relax
        )
        .expect("writing to String cannot fail");
        let w = s.n_points as f64;
        total_points += s.n_points;
        weighted.0 += s.epe_mean * w;
        weighted.1 += s.acc_strict * w;
        weighted.2 += s.acc_relax * w;
    }
    if total_points > 0 {
        let w = total_points as f64;
        writeln!(
            out,
            "ALL\t{total_points}\t{:.6}\t{:.4}\t{:.4}",
            weighted.0 / w,
            weighted.1 / w,
            weighted.2 / w
        )
        .expect("writing to String cannot fail");
    }
    out
}

/// Binned-report table: one row per bin including underflow and overflow.
pub fn binned_table(report: &BinnedReport, value_label: &str) -> String {
    let mut out = format!("{value_label}_lo\t{value_label}_hi\tcount\tmean_epe_m\tci95_m\n");
    let mut row = |lo: String, hi: String, stat: &crate::metrics::BinStat| {
        let mean = stat.mean.map_or("-".to_string(), |m| format!("{m:.6}"));
        writeln!(out, "{lo}\t{hi}\t{}\t{mean}\t{:.6}", stat.count, stat.ci95_half_width)
            .expect("writing to String cannot fail");
    };
    row(
        "-inf".to_string(),
        format!("{:.6}", report.edges[0]),
        &report.underflow,
    );
    for (k, stat) in report.bins.iter().enumerate() {
        row(
            format!("{:.6}", report.edges[k]),
            format!("{:.6}", report.edges[k + 1]),
            stat,
        );
    }
    row(
        format!("{:.6}", report.edges[report.edges.len() - 1]),
        "+inf".to_string(),
        &report.overflow,
    );
    out
}

/// Trace table over many scenes: one row per iteration per scene.
pub fn trace_table(rows: &[(String, &FitTrace)]) -> String {
    let mut out = String::from("scene_id\titeration\tnn_loss\tcycle_loss\tcombined\n");
    for (id, trace) in rows {
        for r in &trace.records {
            writeln!(
                out,
                "{id}\t{}\t{:.9e}\t{:.9e}\t{:.9e}",
                r.iteration, r.nn_loss, r.cycle_loss, r.combined
            )
            .expect("writing to String cannot fail");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(), "t").unwrap()
    }

    #[test]
    fn csv_two_point_cloud() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.csv");
        fs::write(&path, "0,0,0\n1,0,0").unwrap();
        let cloud = load_cloud(&path, CloudFormat::Csv).unwrap();
        assert_eq!(cloud.len(), 2);
        assert!(cloud.features().is_none());
        assert_eq!(cloud.position(1), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn csv_parse_error_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "0,0,0\n1,zzz,0\n").unwrap();
        match load_cloud(&path, CloudFormat::Csv) {
            Err(Error::MalformedCsv { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn f32bin_single_point_with_feature() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.pcf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PCF1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0; 4]);
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let cloud = load_cloud(&path, CloudFormat::F32Bin).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.position(0), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.features().unwrap().row(0), &[0.5]);
    }

    #[test]
    fn f32bin_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pcf");
        fs::write(&path, b"XXXX\0\0\0\0\x03\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            load_cloud(&path, CloudFormat::F32Bin),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn f32bin_truncated_payload_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.pcf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PCF1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0; 4]);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_cloud(&path, CloudFormat::F32Bin),
            Err(Error::MalformedBinary { .. })
        ));
    }

    #[test]
    fn f32bin_extra_bytes_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("long.pcf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PCF1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0; 4]);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        assert!(load_cloud(&path, CloudFormat::F32Bin).is_err());
    }

    #[test]
    fn cloud_round_trip_is_bit_exact_at_f32() {
        let dir = tempdir().unwrap();
        for format in [CloudFormat::Csv, CloudFormat::F32Bin] {
            let path = dir.path().join(format!("c.{}", format.extension()));
            let original = cloud(&[[0.125, -3.5, 7.25], [1e-3, 2.5, -0.0625]]);
            save_cloud(&path, &original, format).unwrap();
            let loaded = load_cloud(&path, format).unwrap();
            assert_eq!(loaded.positions(), original.positions());
        }
    }

    #[test]
    fn flow_round_trip_and_empty_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("flow.pcf");
        let flow = FlowField::new(vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        save_flow(&path, &flow).unwrap();
        assert_eq!(load_flow(&path).unwrap(), flow);
        assert!(matches!(
            save_flow(&dir.path().join("empty.pcf"), &FlowField::zeros(0)),
            Err(Error::EmptyWrite { .. })
        ));
    }

    #[test]
    fn flow_load_rejects_wrong_channel_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pcf");
        let original = cloud(&[[0.0, 0.0, 0.0]])
            .with_features(Features::new(1, vec![0.5]).unwrap())
            .unwrap();
        save_cloud(&path, &original, CloudFormat::F32Bin).unwrap();
        assert!(load_flow(&path).is_err());
    }

    #[test]
    fn remove_ground_keeps_points_above_threshold() {
        let c = cloud(&[[0.0, 0.0, -2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let (kept, removed) = remove_ground(&c, -1.5).unwrap();
        assert_eq!((kept.len(), removed), (2, 1));
        assert_eq!(kept.position(0).z, 0.0);
        assert_eq!(kept.position(1).z, 1.0);
    }

    #[test]
    fn remove_ground_below_min_is_identity() {
        let c = cloud(&[[0.0, 0.0, -2.0], [0.0, 0.0, 1.0]]);
        let (kept, removed) = remove_ground(&c, -10.0).unwrap();
        assert_eq!((kept.len(), removed), (2, 0));
    }

    #[test]
    fn remove_ground_above_max_errors() {
        let c = cloud(&[[0.0, 0.0, -2.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(
            remove_ground(&c, 5.0),
            Err(Error::AllPointsRemoved { removed: 2, .. })
        ));
    }

    #[test]
    fn remove_ground_is_idempotent() {
        let c = cloud(&[[0.0, 0.0, -0.5], [0.0, 0.0, 0.5], [0.0, 0.0, 2.0]]);
        let (once, _) = remove_ground(&c, 0.0).unwrap();
        let (twice, removed) = remove_ground(&once, 0.0).unwrap();
        assert_eq!(removed, 0);
        assert_eq!(once, twice);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("a_source.pcf");
        let tgt = dir.path().join("a_target.pcf");
        save_cloud(&src, &cloud(&[[0.0; 3]]), CloudFormat::F32Bin).unwrap();
        save_cloud(&tgt, &cloud(&[[1.0, 0.0, 0.0]]), CloudFormat::F32Bin).unwrap();
        let manifest = DatasetManifest {
            ground_threshold: None,
            scenes: vec![SceneEntry {
                scene_id: "a".to_string(),
                source_path: PathBuf::from("a_source.pcf"),
                target_path: PathBuf::from("a_target.pcf"),
                gt_flow_path: None,
                format: CloudFormat::F32Bin,
            }],
        };
        let mpath = dir.path().join("manifest.toml");
        save_manifest(&mpath, &manifest).unwrap();
        let loaded = load_manifest(&mpath).unwrap();
        assert_eq!(loaded.scenes.len(), 1);
        assert_eq!(loaded.scenes[0].source_path, src);

        let pair = load_scene_pair(&loaded.scenes[0], None).unwrap();
        assert_eq!(pair.source.len(), 1);
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("s.pcf");
        save_cloud(&src, &cloud(&[[0.0; 3]]), CloudFormat::F32Bin).unwrap();
        let entry = |id: &str| SceneEntry {
            scene_id: id.to_string(),
            source_path: PathBuf::from("s.pcf"),
            target_path: PathBuf::from("s.pcf"),
            gt_flow_path: None,
            format: CloudFormat::F32Bin,
        };
        let manifest = DatasetManifest {
            ground_threshold: None,
            scenes: vec![entry("x"), entry("x")],
        };
        let mpath = dir.path().join("manifest.toml");
        save_manifest(&mpath, &manifest).unwrap();
        assert!(matches!(
            load_manifest(&mpath),
            Err(Error::InvalidManifest { .. })
        ));
    }

    #[test]
    fn manifest_rejects_missing_files() {
        let dir = tempdir().unwrap();
        let mpath = dir.path().join("manifest.toml");
        fs::write(
            &mpath,
            "[[scene]]\nscene_id = \"x\"\nsource_path = \"gone.pcf\"\ntarget_path = \"gone.pcf\"\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&mpath),
            Err(Error::InvalidManifest { .. })
        ));
    }

    #[test]
    fn solver_config_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("solver.toml");
        fs::write(
            &path,
            "learning_rate = 0.001\nmax_iterations = 500\nestimator_kind = \"mlp\"\n",
        )
        .unwrap();
        let config = load_solver_config(&path).unwrap();
        assert_eq!(config.learning_rate, 0.001);
        assert_eq!(config.max_iterations, 500);
        assert_eq!(config.estimator_kind, crate::types::EstimatorKind::Mlp);
        assert_eq!(config.lambda_anchor, 0.5); // untouched default
    }

    proptest! {
        #[test]
        fn prop_f32bin_round_trip_exact(
            points in proptest::collection::vec(
                (-1e4f32..1e4, -1e4f32..1e4, -1e4f32..1e4), 1..200),
        ) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("roundtrip.pcf");
            let flow = FlowField::new(
                points.iter().map(|&(x, y, z)| Vec3::new(x as f64, y as f64, z as f64)).collect(),
            ).unwrap();
            save_flow(&path, &flow).unwrap();
            let loaded = load_flow(&path).unwrap();
            prop_assert_eq!(loaded, flow);
        }
    }
}
