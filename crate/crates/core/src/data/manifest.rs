use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainTag, Label, SampleRecord, Split};
use crate::error::{MmrError, Result};

/// File name used when a manifest is stored inside a corpus directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `train/good`, `test/<defect|good>`, `ground_truth/<defect>/<stem>_mask.png`.
    Mvtec,
    /// `train/good`, `test/<domain>/<defect|good>`, `ground_truth/<domain>/<defect>/<stem>.png`.
    Aebad,
    /// JSON-lines file, or a directory holding `manifest.jsonl`.
    ManifestFile,
}

impl std::str::FromStr for Layout {
    type Err = MmrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "aebad" => Ok(Layout::Aebad),
            "manifest_file" | "manifest" => Ok(Layout::ManifestFile),
            other => Err(MmrError::config("data.layout", format!("unknown layout `{other}`"))),
        }
    }
}

/// Enumerate every sample under `root`, sorted by image path (manifest files
/// keep their own order).
pub fn load_manifest(root: &Path, layout: Layout) -> Result<Vec<SampleRecord>> {
    if !root.exists() {
        return Err(MmrError::NotFound(root.to_path_buf()));
    }
    let records = match layout {
        Layout::Mvtec => load_mvtec(root)?,
        Layout::Aebad => load_aebad(root)?,
        Layout::ManifestFile => {
            let file = if root.is_dir() { root.join(MANIFEST_FILE) } else { root.to_path_buf() };
            return load_manifest_file(&file);
        }
    };
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

fn load_mvtec(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = train_records(root)?;
    let test = root.join("test");
    if test.is_dir() {
        for class_dir in sorted_subdirs(&test)? {
            let class = dir_name(&class_dir);
            for image in sorted_images(&class_dir)? {
                let label = if class == "good" { Label::Normal } else { Label::Anomalous };
                let mask_path = if label == Label::Anomalous {
                    let gt_dir = root.join("ground_truth").join(&class);
                    Some(find_mask(&gt_dir, &image)?)
                } else {
                    None
                };
                records.push(SampleRecord {
                    image_path: image,
                    label,
                    mask_path,
                    domain_tag: DomainTag::Same,
                    split: Split::Test,
                });
            }
        }
    }
    records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(records)
}

fn load_aebad(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = train_records(root)?;
    let test = root.join("test");
    if test.is_dir() {
        for domain_dir in sorted_subdirs(&test)? {
            let name = dir_name(&domain_dir);
            let domain = DomainTag::parse(&name).filter(|d| *d != DomainTag::Train).ok_or_else(|| {
                MmrError::Manifest {
                    path: domain_dir.clone(),
                    message: format!("unknown test domain `{name}`"),
                }
            })?;
            for class_dir in sorted_subdirs(&domain_dir)? {
                let class = dir_name(&class_dir);
                for image in sorted_images(&class_dir)? {
                    let label = if class == "good" { Label::Normal } else { Label::Anomalous };
                    let mask_path = if label == Label::Anomalous {
                        let gt_dir = root.join("ground_truth").join(&name).join(&class);
                        Some(find_mask(&gt_dir, &image)?)
                    } else {
                        None
                    };
                    records.push(SampleRecord {
                        image_path: image,
                        label,
                        mask_path,
                        domain_tag: domain,
                        split: Split::Test,
                    });
                }
            }
        }
    }
    records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(records)
}

fn train_records(root: &Path) -> Result<Vec<SampleRecord>> {
    let good = root.join("train").join("good");
    if !good.is_dir() {
        return Err(MmrError::Manifest {
            path: good,
            message: "expected directory of normal training images".into(),
        });
    }
    Ok(sorted_images(&good)?
        .into_iter()
        .map(|image_path| SampleRecord {
            image_path,
            label: Label::Normal,
            mask_path: None,
            domain_tag: DomainTag::Train,
            split: Split::Train,
        })
        .collect())
}

fn find_mask(gt_dir: &Path, image: &Path) -> Result<PathBuf> {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    for candidate in [format!("{stem}.png"), format!("{stem}_mask.png")] {
        let p = gt_dir.join(candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(MmrError::Manifest {
        path: image.to_path_buf(),
        message: format!("anomalous image has no ground-truth mask in {}", gt_dir.display()),
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| MmrError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| MmrError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_manifest_file(file: &Path) -> Result<Vec<SampleRecord>> {
    let f = fs::File::open(file).map_err(|e| MmrError::io(file, e))?;
    let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| MmrError::io(file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: SampleRecord = serde_json::from_str(&line).map_err(|e| MmrError::Manifest {
            path: file.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        if record.image_path.is_relative() {
            record.image_path = base.join(&record.image_path);
        }
        if let Some(mask) = record.mask_path.as_mut() {
            if mask.is_relative() {
                *mask = base.join(&*mask);
            }
        }
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Write records as JSON lines, storing paths relative to the manifest's
/// directory where possible.
pub fn write_manifest(file: &Path, records: &[SampleRecord]) -> Result<()> {
    let base = file.parent().unwrap_or(Path::new(""));
    let mut out = fs::File::create(file).map_err(|e| MmrError::io(file, e))?;
    for r in records {
        let mut r = r.clone();
        if let Ok(rel) = r.image_path.strip_prefix(base) {
            r.image_path = rel.to_path_buf();
        }
        if let Some(m) = r.mask_path.as_mut() {
            if let Ok(rel) = m.strip_prefix(base) {
                *m = rel.to_path_buf();
            }
        }
        let line = serde_json::to_string(&r)?;
        writeln!(out, "{line}").map_err(|e| MmrError::io(file, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"").unwrap();
    }

    #[test]
    fn aebad_domain_inferred_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch(&root.join("train/good/000.png"));
        touch(&root.join("test/view/fracture/img1.png"));
        touch(&root.join("ground_truth/view/fracture/img1.png"));
        touch(&root.join("test/same/good/a.png"));
        let recs = load_manifest(root, Layout::Aebad).unwrap();
        assert_eq!(recs.len(), 3);
        let frac = recs.iter().find(|r| r.image_path.ends_with("img1.png")).unwrap();
        assert_eq!(frac.label, Label::Anomalous);
        assert_eq!(frac.domain_tag, DomainTag::View);
        assert_eq!(frac.split, Split::Test);
        assert!(frac.mask_path.is_some());
        let mut sorted = recs.clone();
        sorted.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        assert_eq!(recs, sorted);
    }

    #[test]
    fn mvtec_train_only() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("train/good/000.png"));
        let recs = load_manifest(dir.path(), Layout::Mvtec).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].split, Split::Train);
        assert_eq!(recs[0].label, Label::Normal);
    }

    #[test]
    fn missing_mask_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("train/good/000.png"));
        touch(&dir.path().join("test/crack/007.png"));
        let err = load_manifest(dir.path(), Layout::Mvtec).unwrap_err();
        match err {
            MmrError::Manifest { path, .. } => assert!(path.ends_with("007.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_root_is_not_found() {
        let err = load_manifest(Path::new("/definitely/not/here"), Layout::Aebad).unwrap_err();
        assert!(matches!(err, MmrError::NotFound(_)));
    }

    #[test]
    fn manifest_file_keeps_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("m.jsonl");
        fs::write(
            &file,
            concat!(
                "{\"image\":\"z.png\",\"label\":\"normal\",\"mask\":null,\"domain\":\"train\",\"split\":\"train\"}\n",
                "{\"image\":\"b.png\",\"label\":\"anomalous\",\"mask\":\"b_m.png\",\"domain\":\"view\",\"split\":\"test\"}\n",
                "{\"image\":\"a.png\",\"label\":\"normal\",\"mask\":null,\"domain\":\"same\",\"split\":\"test\"}\n",
            ),
        )
        .unwrap();
        let recs = load_manifest(&file, Layout::ManifestFile).unwrap();
        let names: Vec<_> = recs.iter().map(|r| r.image_path.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, ["z.png", "b.png", "a.png"]);
        assert_eq!(recs[1].mask_path.as_deref(), Some(dir.path().join("b_m.png").as_path()));
    }

    #[test]
    fn anomalous_training_sample_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("m.jsonl");
        fs::write(
            &file,
            "{\"image\":\"z.png\",\"label\":\"anomalous\",\"mask\":null,\"domain\":\"train\",\"split\":\"train\"}\n",
        )
        .unwrap();
        assert!(load_manifest(&file, Layout::ManifestFile).is_err());
    }
}
