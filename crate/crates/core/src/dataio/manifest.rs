//! JSON Lines dataset manifest.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_distance, GeoLocation, OverheadFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteEntry {
    pub path: String,
    pub center: GeoLocation,
    pub gsd: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanoramaEntry {
    pub path: String,
    pub lat: f64,
    pub lon: f64,
}

/// One manifest line as stored on disk. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub satellite: SatelliteEntry,
    pub panoramas: Vec<PanoramaEntry>,
    pub target: GeoLocation,
    pub target_pano_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaRef {
    pub path: PathBuf,
    pub location: GeoLocation,
    /// Haversine meters to the record's target.
    pub distance: f64,
}

/// Validated record with resolved paths; panoramas sorted by distance to the
/// target (stable, so ties keep manifest order).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub satellite_path: PathBuf,
    pub frame: OverheadFrame,
    pub panoramas: Vec<PanoramaRef>,
    pub target: GeoLocation,
    pub target_path: PathBuf,
    pub seg_path: Option<PathBuf>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest record serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Parses every non-blank line without touching the filesystem further.
pub fn read_manifest_records(path: &Path) -> Result<Vec<(usize, ManifestRecord)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Validates a parsed record and resolves its paths against `base`.
pub fn resolve_record(rec: &ManifestRecord, base: &Path, manifest: &Path, line: usize, check_files: bool) -> Result<SampleRecord> {
    let schema = |msg: String| Error::Schema {
        path: manifest.to_path_buf(),
        line,
        id: rec.id.clone(),
        msg,
    };
    if rec.id.is_empty() {
        return Err(schema("empty id".into()));
    }
    let frame = OverheadFrame::new(rec.satellite.center, rec.satellite.gsd, rec.satellite.size)
        .map_err(|e| schema(format!("satellite: {e}")))?;
    if !rec.target.is_valid() {
        return Err(schema(format!("invalid target {:?}", rec.target)));
    }
    if !frame.contains(rec.target) {
        return Err(schema(format!(
            "target ({}, {}) outside satellite footprint",
            rec.target.lat, rec.target.lon
        )));
    }
    let file = |p: &str, what: &str| -> Result<PathBuf> {
        let full = base.join(p);
        if check_files && !full.is_file() {
            return Err(Error::MissingFile {
                path: full,
                context: format!("{} line {line}, record '{}', {what}", manifest.display(), rec.id),
            });
        }
        Ok(full)
    };
    let mut panoramas = Vec::with_capacity(rec.panoramas.len());
    for (j, p) in rec.panoramas.iter().enumerate() {
        let location = GeoLocation::new(p.lat, p.lon).map_err(|e| schema(format!("panorama {j}: {e}")))?;
        panoramas.push(PanoramaRef {
            path: file(&p.path, "panorama")?,
            location,
            distance: haversine_distance(location, rec.target),
        });
    }
    panoramas.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    Ok(SampleRecord {
        id: rec.id.clone(),
        satellite_path: file(&rec.satellite.path, "satellite")?,
        frame,
        panoramas,
        target: rec.target,
        target_path: file(&rec.target_pano_path, "target panorama")?,
        seg_path: rec.seg_path.as_deref().map(|p| file(p, "segmentation")).transpose()?,
    })
}

/// Loads and validates a manifest. Image paths resolve relative to the
/// manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in read_manifest_records(path)? {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line,
                id: rec.id,
                msg: "duplicate id".into(),
            });
        }
        out.push(resolve_record(&rec, base, path, line, true)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> ManifestRecord {
        ManifestRecord {
            id: "a".into(),
            satellite: SatelliteEntry {
                path: "sat.png".into(),
                center: GeoLocation { lat: 40.0, lon: -74.0 },
                gsd: 1.0,
                size: 64,
            },
            panoramas: vec![],
            target: GeoLocation { lat: 40.0, lon: -74.0 },
            target_pano_path: "t.png".into(),
            seg_path: None,
        }
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn target_outside_footprint_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut r = record();
        r.id = "far-away".into();
        r.target.lat += 0.01;
        write_manifest(&p, &[r]).unwrap();
        match load_manifest(&p) {
            Err(Error::Schema { id, line, .. }) => {
                assert_eq!(id, "far-away");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&record()).unwrap();
        std::fs::write(&p, format!("{good}\n\n{{nope\n")).unwrap();
        assert!(matches!(read_manifest_records(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &[record()]).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::MissingFile { .. })));
    }

    #[test]
    fn optional_seg_path_is_omitted() {
        let s = serde_json::to_string(&record()).unwrap();
        assert!(!s.contains("seg_path"));
        let mut r = record();
        r.seg_path = Some("s.png".into());
        let back: ManifestRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
