//! Manifest files: delimited text with header `path,label,domain`.
//!
//! One manifest describes one domain. Loading decodes every referenced image,
//! resizes it to the configured side, and scales pixels to `[0, 1]`. Row
//! errors carry the file line number. `write_manifest` is the inverse of
//! `load_manifest` at the manifest level (same rows, same order).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array3;

use super::{DomainDataset, LabeledExample, NUM_CLASSES};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "path,label,domain";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub domain: usize,
}

/// Parse manifest rows without touching any image file. The last two
/// comma-separated fields are label and domain; everything before them is the
/// path, so paths containing commas survive.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(Error::ManifestRow {
                row: 1,
                msg: format!("expected header '{MANIFEST_HEADER}', got '{header}'"),
            })
        }
        None => return Err(Error::EmptyDataset),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let row_no = idx + 1; // 1-based file line number
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.rsplitn(3, ',');
        let domain_s = parts.next().unwrap_or("");
        let label_s = parts.next().unwrap_or("");
        let path_s = parts.next().unwrap_or("");
        if path_s.is_empty() {
            return Err(Error::ManifestRow {
                row: row_no,
                msg: "expected 'path,label,domain'".into(),
            });
        }
        let label: usize = label_s.trim().parse().map_err(|_| Error::ManifestRow {
            row: row_no,
            msg: format!("label '{label_s}' is not an integer"),
        })?;
        if label >= NUM_CLASSES {
            return Err(Error::ManifestRow {
                row: row_no,
                msg: format!("label {label} outside 0..{NUM_CLASSES}"),
            });
        }
        let domain: usize = domain_s.trim().parse().map_err(|_| Error::ManifestRow {
            row: row_no,
            msg: format!("domain '{domain_s}' is not an integer"),
        })?;
        rows.push(ManifestRow {
            path: path_s.to_string(),
            label,
            domain,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}

/// Load one domain dataset from a manifest. Relative image paths resolve
/// against the manifest's directory; images are resized to
/// `image_side x image_side` and scaled to `[0, 1]`.
pub fn load_manifest(path: &Path, image_side: usize) -> Result<DomainDataset> {
    let rows = parse_manifest(path)?;
    let domain = rows[0].domain;
    for (i, row) in rows.iter().enumerate() {
        if row.domain != domain {
            return Err(Error::ManifestRow {
                row: i + 2,
                msg: format!(
                    "manifest mixes domains {domain} and {}; one manifest per domain",
                    row.domain
                ),
            });
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut examples = Vec::with_capacity(rows.len());
    let mut paths = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let row_no = i + 2;
        let img_path: PathBuf = if Path::new(&row.path).is_absolute() {
            PathBuf::from(&row.path)
        } else {
            base.join(&row.path)
        };
        let decoded = image::open(&img_path).map_err(|e| Error::ManifestRow {
            row: row_no,
            msg: format!("cannot read image '{}': {e}", img_path.display()),
        })?;
        let resized = decoded
            .resize_exact(image_side as u32, image_side as u32, FilterType::Triangle)
            .to_rgb8();
        let mut image = Array3::<f64>::zeros((3, image_side, image_side));
        for (x, y, pixel) in resized.enumerate_pixels() {
            for c in 0..3 {
                image[[c, y as usize, x as usize]] = pixel.0[c] as f64 / 255.0;
            }
        }
        examples.push(LabeledExample {
            image,
            label: row.label,
            domain_id: domain,
        });
        paths.push(row.path.clone());
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("domain{domain}"));
    let mut dataset = DomainDataset::from_examples(domain, name, examples)?;
    dataset.paths = paths;
    Ok(dataset)
}

/// Write the manifest of a dataset loaded from (or exported to) disk.
pub fn write_manifest(dataset: &DomainDataset, path: &Path) -> Result<()> {
    if dataset.paths.len() != dataset.examples.len() {
        return Err(Error::invalid(
            "dataset has no per-example paths; export images first",
        ));
    }
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (p, ex) in dataset.paths.iter().zip(&dataset.examples) {
        out.push_str(&format!("{p},{},{}\n", ex.label, ex.domain_id));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Export datasets as PNG files plus one manifest per domain, mirroring the
/// on-disk layout `load_manifest` expects.
pub fn export_datasets(datasets: &[DomainDataset], dir: &Path) -> Result<Vec<PathBuf>> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut manifests = Vec::new();
    for d in datasets {
        let mut with_paths = d.clone();
        with_paths.paths.clear();
        for (i, ex) in d.examples.iter().enumerate() {
            let (c_n, h, w) = ex.image.dim();
            if c_n != 3 {
                return Err(Error::Image(format!(
                    "export expects 3-channel images, got {c_n}"
                )));
            }
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, pixel) in buf.enumerate_pixels_mut() {
                for c in 0..3 {
                    pixel.0[c] =
                        (ex.image[[c, y as usize, x as usize]] * 255.0).round() as u8;
                }
            }
            let rel = format!("images/domain{}_{i:05}.png", d.domain_id);
            buf.save(dir.join(&rel))
                .map_err(|e| Error::Image(e.to_string()))?;
            with_paths.paths.push(rel);
        }
        let manifest_path = dir.join(format!("domain{}.csv", d.domain_id));
        write_manifest(&with_paths, &manifest_path)?;
        manifests.push(manifest_path);
    }
    // free-form summary alongside, handy for humans
    let mut summary = fs::File::create(dir.join("summary.txt"))?;
    for d in datasets {
        writeln!(
            summary,
            "domain {} ({}): {} examples, class counts {:?}",
            d.domain_id,
            d.name,
            d.len(),
            d.class_counts
        )?;
    }
    Ok(manifests)
}

/// Load every `domain*.csv` manifest in a directory, sorted by domain id.
pub fn load_manifest_dir(dir: &Path, image_side: usize) -> Result<Vec<DomainDataset>> {
    let mut manifests: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|e| e == "csv").unwrap_or(false)
                && p.file_stem()
                    .map(|s| s.to_string_lossy().starts_with("domain"))
                    .unwrap_or(false)
        })
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut datasets: Vec<DomainDataset> = manifests
        .iter()
        .map(|m| load_manifest(m, image_side))
        .collect::<Result<_>>()?;
    datasets.sort_by_key(|d| d.domain_id);
    Ok(datasets)
}
