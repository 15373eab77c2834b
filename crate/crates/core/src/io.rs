//! Manifest and report files, and crash-safe writes.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::pairing::{Eye, ImageRecord};
use crate::quality::{self, IrisGeometry, QualityError, QualityReport};

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::other(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Sidecar path holding the annotated geometry of an image.
pub fn geometry_sidecar(image_path: &Path) -> PathBuf {
    let mut s = image_path.as_os_str().to_owned();
    s.push(".geom.json");
    PathBuf::from(s)
}

/// Annotated geometry from the image's sidecar, if one exists.
pub fn read_geometry_sidecar(image_path: &Path) -> Option<Result<IrisGeometry, String>> {
    let path = geometry_sidecar(image_path);
    let text = std::fs::read_to_string(&path).ok()?;
    Some(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display())))
}

/// Geometry of a capture: the sidecar annotation when present and valid,
/// otherwise fitted from the pixels.
pub fn geometry_of(image_path: &Path, image: &image::GrayImage) -> Result<IrisGeometry, QualityError> {
    let annotation = match read_geometry_sidecar(image_path) {
        Some(Ok(g)) => Some(g),
        Some(Err(e)) => {
            log::warn!("ignoring unreadable geometry sidecar: {e}");
            None
        }
        None => None,
    };
    quality::fit_geometry(image, annotation.as_ref())
}

/// `target` expressed relative to directory `base`. Both are made absolute
/// first; the result uses `..` where needed.
pub fn relative_path(target: &Path, base: &Path) -> std::io::Result<PathBuf> {
    let target = std::path::absolute(target)?;
    let base = std::path::absolute(base)?;
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    Ok(out)
}

/// Lexically normalized absolute path, for comparing references to the
/// same file written in different ways.
pub fn normalized(path: &Path) -> PathBuf {
    let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            std::path::Component::ParentDir => {
                out.pop();
            }
            std::path::Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line}: duplicate (subject_id, path) {subject_id:?}, {path:?}")]
    Duplicate { line: usize, subject_id: String, path: PathBuf },
}

pub const MANIFEST_COLUMNS: [&str; 6] = ["subject_id", "eye", "session_date", "path", "mask_path", "overall_quality"];
pub const TWIN_GROUP_COLUMN: &str = "twin_group";

/// Records of one manifest file; relative paths are resolved against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let records = parse_manifest(file)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, records })
    }

    /// Absolute (or working-directory relative) location of a manifest path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Mask of the record whose image is `image`, resolved. `image` may be
    /// given as stored or in any form naming the same file.
    pub fn mask_for(&self, image: &Path) -> Option<PathBuf> {
        let wanted = normalized(image);
        self.records
            .iter()
            .find(|r| r.path == image || normalized(&self.resolve(&r.path)) == wanted)
            .and_then(|r| r.mask_path.as_deref().map(|m| self.resolve(m)))
    }

    /// Copy of `records` whose paths are rewritten relative to `dir`.
    pub fn records_relative_to(&self, records: &[ImageRecord], dir: &Path) -> std::io::Result<Vec<ImageRecord>> {
        records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.path = relative_path(&self.resolve(&r.path), dir)?;
                if let Some(m) = &r.mask_path {
                    r.mask_path = Some(relative_path(&self.resolve(m), dir)?);
                }
                Ok(r)
            })
            .collect()
    }
}

/// Parses manifest CSV. A `twin_group` column may follow the standard ones.
pub fn parse_manifest<R: Read>(reader: R) -> Result<Vec<ImageRecord>, ManifestError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| ManifestError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_twin = names.len() == 7 && names[6] == TWIN_GROUP_COLUMN;
    if names.is_empty() {
        return Ok(Vec::new());
    }
    if names[..names.len().min(6)] != MANIFEST_COLUMNS[..] || !(names.len() == 6 || has_twin) {
        return Err(ManifestError::Parse {
            line: 1,
            message: format!(
                "expected header {}[,{TWIN_GROUP_COLUMN}], got {}",
                MANIFEST_COLUMNS.join(","),
                names.join(",")
            ),
        });
    }
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, row) in csv.records().enumerate() {
        let line = i + 2;
        let err = |message: String| ManifestError::Parse { line, message };
        let row = row.map_err(|e| err(e.to_string()))?;
        let eye: Eye = row[1].parse().map_err(err)?;
        let session_date = chrono::NaiveDate::parse_from_str(&row[2], "%Y-%m-%d")
            .map_err(|e| err(format!("session_date {:?}: {e}", &row[2])))?;
        let quality = match &row[5] {
            "" => None,
            q => Some(QualityReport::from_overall(
                q.parse().map_err(|_| err(format!("overall_quality {q:?} is not an integer 0-255")))?,
            )),
        };
        let mut rec = ImageRecord::new(&row[0], eye, session_date, &row[3]);
        if row[0].is_empty() || row[3].is_empty() {
            return Err(err("subject_id and path must be nonempty".into()));
        }
        if !row[4].is_empty() {
            rec = rec.with_mask(&row[4]);
        }
        rec.quality = quality;
        if has_twin && !row[6].is_empty() {
            rec = rec.with_twin_group(&row[6]);
        }
        if !seen.insert((rec.subject_id.clone(), rec.path.clone())) {
            return Err(ManifestError::Duplicate {
                line,
                subject_id: rec.subject_id,
                path: rec.path,
            });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Serializes records as manifest CSV; the twin column is written only when
/// some record has a twin group.
pub fn manifest_csv(records: &[ImageRecord]) -> Vec<u8> {
    let with_twin = records.iter().any(|r| r.twin_group.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
    if with_twin {
        header.push(TWIN_GROUP_COLUMN);
    }
    w.write_record(&header).expect("in-memory write");
    for r in records {
        let mut row = vec![
            r.subject_id.clone(),
            r.eye.to_string(),
            r.session_date.format("%Y-%m-%d").to_string(),
            r.path.to_string_lossy().into_owned(),
            r.mask_path.as_ref().map(|m| m.to_string_lossy().into_owned()).unwrap_or_default(),
            r.quality.as_ref().map(|q| q.overall.to_string()).unwrap_or_default(),
        ];
        if with_twin {
            row.push(r.twin_group.clone().unwrap_or_default());
        }
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One line of a quality report file: the image path plus its report fields.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QualityLine {
    pub path: PathBuf,
    #[serde(flatten)]
    pub report: QualityReport,
}

/// One JSON object per image, one image per line.
pub fn quality_jsonl(lines: &[QualityLine]) -> Vec<u8> {
    let mut out = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut out, l).expect("report serialize");
        out.push(b'\n');
    }
    out
}

pub fn parse_quality_jsonl(text: &str) -> Result<Vec<QualityLine>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn sample() -> Vec<ImageRecord> {
        let d = NaiveDate::from_ymd_opt(2008, 4, 1).unwrap();
        let mut a = ImageRecord::new("s1", Eye::L, d, "img/a.png").with_mask("img/a_mask.png");
        a.quality = Some(QualityReport::from_overall(72));
        let b = ImageRecord::new("s1", Eye::R, d, "img/b.png").with_twin_group("g1");
        vec![a, b]
    }

    #[test]
    fn manifest_round_trip() {
        let recs = sample();
        let bytes = manifest_csv(&recs);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("subject_id,eye,session_date,path,mask_path,overall_quality,twin_group\n"));
        assert_eq!(parse_manifest(bytes.as_slice()).unwrap(), recs);
    }

    #[test]
    fn plain_header_without_twin_column() {
        let text = "subject_id,eye,session_date,path,mask_path,overall_quality\ns2,L,2009-01-02,x.png,,\n";
        let recs = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].mask_path.is_none() && recs[0].quality.is_none());
    }

    #[test]
    fn bad_rows_are_reported_with_line_numbers() {
        let text = "subject_id,eye,session_date,path,mask_path,overall_quality\ns2,X,2009-01-02,x.png,,\n";
        assert!(matches!(parse_manifest(text.as_bytes()), Err(ManifestError::Parse { line: 2, .. })));
        let text = "subject_id,eye,session_date,path,mask_path,overall_quality\ns,L,2009-01-02,x.png,,\ns,R,2009-01-03,x.png,,\n";
        assert!(matches!(parse_manifest(text.as_bytes()), Err(ManifestError::Duplicate { line: 3, .. })));
        assert!(parse_manifest("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn relative_paths_climb_and_descend() {
        let rel = relative_path(Path::new("/a/b/c/x.png"), Path::new("/a/d")).unwrap();
        assert_eq!(rel, PathBuf::from("../b/c/x.png"));
        let rel = relative_path(Path::new("/a/x.png"), Path::new("/a")).unwrap();
        assert_eq!(rel, PathBuf::from("x.png"));
        assert_eq!(normalized(Path::new("/a/d/../b/./x")), PathBuf::from("/a/b/x"));
    }

    #[test]
    fn masks_are_found_through_any_spelling() {
        let m = Manifest {
            base_dir: PathBuf::from("/data/set"),
            records: sample(),
        };
        let want = Some(PathBuf::from("/data/set/img/a_mask.png"));
        assert_eq!(m.mask_for(Path::new("img/a.png")), want);
        assert_eq!(m.mask_for(Path::new("/data/other/../set/img/a.png")), want);
        assert_eq!(m.mask_for(Path::new("img/b.png")), None);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn quality_lines_use_field_names() {
        let entry = QualityLine {
            path: PathBuf::from("img/a.png"),
            report: QualityReport::failed(),
        };
        let line = String::from_utf8(quality_jsonl(std::slice::from_ref(&entry))).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 13);
        assert!(keys.contains(&"path") && keys.contains(&"overall") && keys.contains(&"motion_blur"));
        assert_eq!(parse_quality_jsonl(&line).unwrap(), vec![entry]);
    }
}
