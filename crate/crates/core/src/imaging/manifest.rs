//! Dataset manifests for flat, class-folder and CSV-labelled directory layouts.
//!
//! Entries are sorted by relative path. Unless the root holds a `splits.jsonl`
//! file, each entry's split is chosen by a 64-bit FNV-1a hash of its relative
//! path: buckets 0..80 train, 80..90 val, 90..100 test.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Images directly under the root; unlabeled.
    Flat,
    /// `root/<class>/<image>`; class ids follow sorted folder names.
    ClassFolders,
    /// `root/labels.csv` with a `path,label` header naming classes per image.
    CsvLabels,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Layout::Flat),
            "class-folders" => Ok(Layout::ClassFolders),
            "csv-labels" => Ok(Layout::CsvLabels),
            other => Err(Error::Usage(format!(
                "unknown layout {other:?} (flat, class-folders, csv-labels)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: i64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];
const SPLIT_FILE: &str = "splits.jsonl";
const LABEL_FILE: &str = "labels.csv";

pub(crate) fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub(crate) fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn rel_key(rel: &Path) -> String {
    rel.to_string_lossy().replace('\\', "/")
}

/// Split bucket of a relative path under the fixed 80/10/10 hash rule.
pub fn hash_split(rel: &Path) -> Split {
    match fnv1a(rel_key(rel).as_bytes()) % 100 {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Deserialize)]
struct SplitLine {
    path: String,
    split: Split,
}

fn read_split_file(path: &Path) -> Result<std::collections::HashMap<String, Split>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: SplitLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        map.insert(l.path, l.split);
    }
    Ok(map)
}

fn parse_labels_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim().eq_ignore_ascii_case("path,label") => {}
        Some((i, h)) => {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected header `path,label`, found {h:?}"),
            })
        }
        None => return Err(Error::Parse { line: 1, msg: "empty labels.csv".into() }),
    }
    lines
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            match fields.as_slice() {
                [p, lab] if !p.is_empty() && !lab.is_empty() => Ok((p.to_string(), lab.to_string())),
                _ => Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected two non-empty fields, found {l:?}"),
                }),
            }
        })
        .collect()
}

/// Enumerate a dataset directory. Deterministic for a fixed directory state.
pub fn build_manifest(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    // (relative path, label)
    let mut found: Vec<(PathBuf, i64)> = Vec::new();
    let mut class_names = Vec::new();
    match layout {
        Layout::Flat => {
            for p in sorted_dir(root)? {
                if p.is_file() && is_image(&p) {
                    found.push((p.strip_prefix(root).unwrap().to_path_buf(), -1));
                }
            }
        }
        Layout::ClassFolders => {
            let classes: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
            for (id, dir) in classes.iter().enumerate() {
                class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
                for p in sorted_dir(dir)? {
                    if p.is_file() && is_image(&p) {
                        found.push((p.strip_prefix(root).unwrap().to_path_buf(), id as i64));
                    }
                }
            }
        }
        Layout::CsvLabels => {
            let rows = parse_labels_csv(&root.join(LABEL_FILE))?;
            let names: BTreeSet<&str> = rows.iter().map(|(_, l)| l.as_str()).collect();
            class_names = names.iter().map(|s| s.to_string()).collect();
            for (p, l) in &rows {
                let rel = PathBuf::from(p);
                let abs = root.join(&rel);
                if !abs.is_file() {
                    return Err(Error::io(
                        &abs,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in labels.csv"),
                    ));
                }
                let id = class_names.iter().position(|c| c == l).unwrap();
                found.push((rel, id as i64));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::EmptyManifest(root.to_path_buf()));
    }
    found.sort_by(|a, b| rel_key(&a.0).cmp(&rel_key(&b.0)));
    found.dedup_by(|a, b| a.0 == b.0);

    let split_path = root.join(SPLIT_FILE);
    let explicit = if split_path.is_file() { Some(read_split_file(&split_path)?) } else { None };
    let entries = found
        .into_iter()
        .map(|(rel, label)| {
            let split = explicit
                .as_ref()
                .and_then(|m| m.get(&rel_key(&rel)).copied())
                .unwrap_or_else(|| hash_split(&rel));
            ManifestEntry {
                path: root.join(rel),
                label,
                split,
            }
        })
        .collect();
    Ok(DatasetManifest { entries, class_names })
}

fn classes_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("classes.json")
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Write as JSON Lines. Paths under the manifest's directory are stored relative to it.
    /// Class names, when present, go to a `<name>.classes.json` sidecar.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = Vec::new();
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            let line = serde_json::json!({
                "path": rel_key(rel),
                "label": e.label,
                "split": e.split,
            });
            writeln!(out, "{line}").expect("write to vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        if !self.class_names.is_empty() {
            let cp = classes_path(path);
            fs::write(&cp, serde_json::to_vec(&self.class_names)?).map_err(|e| Error::io(&cp, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::Parse {
                line: i + 1,
                msg: err.to_string(),
            })?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        let cp = classes_path(path);
        let mut class_names: Vec<String> = if cp.is_file() {
            serde_json::from_slice(&fs::read(&cp).map_err(|e| Error::io(&cp, e))?)?
        } else {
            Vec::new()
        };
        let max_label = entries.iter().map(|e| e.label).max().unwrap_or(-1);
        while (class_names.len() as i64) <= max_label {
            class_names.push(format!("class{}", class_names.len()));
        }
        Ok(DatasetManifest { entries, class_names })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn touch_png(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3])).save(p).unwrap();
    }

    proptest::proptest! {
        /// The split depends only on the path string, and the separator style does not matter.
        #[test]
        fn split_is_a_pure_function_of_the_path(dir in "[a-z]{1,8}", file in "[a-z0-9_]{1,12}") {
            let unix = PathBuf::from(format!("{dir}/{file}.png"));
            let windows = PathBuf::from(format!("{dir}\\{file}.png"));
            proptest::prop_assert_eq!(hash_split(&unix), hash_split(&windows));
            proptest::prop_assert_eq!(rel_key(&unix), format!("{dir}/{file}.png"));
        }
    }

    #[test]
    fn class_folders_enumerates_and_labels() {
        let d = tempdir().unwrap();
        for c in ["healthy", "lesion"] {
            for i in 0..5 {
                touch_png(&d.path().join(c).join(format!("{i}.png")));
            }
        }
        let m = build_manifest(d.path(), Layout::ClassFolders).unwrap();
        assert_eq!(m.entries.len(), 10);
        assert_eq!(m.class_names, vec!["healthy", "lesion"]);
        let labels: BTreeSet<i64> = m.entries.iter().map(|e| e.label).collect();
        assert_eq!(labels, BTreeSet::from([0, 1]));
        assert_eq!(m, build_manifest(d.path(), Layout::ClassFolders).unwrap());
        let mut sorted = m.entries.clone();
        sorted.sort_by(|a, b| a.path.cmp(&b.path));
        assert_eq!(sorted, m.entries);
    }

    #[test]
    fn flat_is_unlabeled() {
        let d = tempdir().unwrap();
        for i in 0..4 {
            touch_png(&d.path().join(format!("img{i}.png")));
        }
        fs::write(d.path().join("notes.txt"), "x").unwrap();
        let m = build_manifest(d.path(), Layout::Flat).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert!(m.entries.iter().all(|e| e.label == -1));
    }

    #[test]
    fn empty_root_and_bad_csv() {
        let d = tempdir().unwrap();
        assert!(matches!(build_manifest(d.path(), Layout::Flat), Err(Error::EmptyManifest(_))));
        touch_png(&d.path().join("a.png"));
        fs::write(d.path().join("labels.csv"), "path,label\na.png,x\nb.png\n").unwrap();
        match build_manifest(d.path(), Layout::CsvLabels) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(d.path().join("labels.csv"), "path,label\na.png,x\n").unwrap();
        let m = build_manifest(d.path(), Layout::CsvLabels).unwrap();
        assert_eq!(m.class_names, vec!["x"]);
    }

    #[test]
    fn split_file_overrides_hash() {
        let d = tempdir().unwrap();
        for i in 0..6 {
            touch_png(&d.path().join(format!("{i}.png")));
        }
        fs::write(d.path().join("splits.jsonl"), "{\"path\":\"0.png\",\"split\":\"test\"}\n").unwrap();
        let m = build_manifest(d.path(), Layout::Flat).unwrap();
        assert_eq!(m.entries[0].split, Split::Test);
        for e in &m.entries[1..] {
            let rel = e.path.strip_prefix(d.path()).unwrap();
            assert_eq!(e.split, hash_split(rel));
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let d = tempdir().unwrap();
        for c in ["a", "b"] {
            touch_png(&d.path().join(c).join("x.png"));
        }
        let m = build_manifest(d.path(), Layout::ClassFolders).unwrap();
        let p = d.path().join("manifest.jsonl");
        m.write_jsonl(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["path"], "a/x.png");
        assert_eq!(DatasetManifest::read_jsonl(&p).unwrap(), m);
    }

    #[test]
    fn hash_split_is_roughly_80_10_10() {
        let mut counts = [0usize; 3];
        for i in 0..5000 {
            match hash_split(Path::new(&format!("img_{i:05}.png"))) {
                Split::Train => counts[0] += 1,
                Split::Val => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        assert!((3800..4200).contains(&counts[0]), "{counts:?}");
        assert!((350..650).contains(&counts[1]), "{counts:?}");
    }
}
