use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::data::{ClassLabel, Image, Manifest, ManifestMeta, Sample};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Reads the public BUSI layout (`<root>/{benign,malignant,normal}/*.png`), skipping
/// segmentation masks. Images are resized to `image_size` and kept in memory.
pub fn ingest_busi(root: &Path, image_size: usize) -> Result<Manifest> {
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for label in ClassLabel::ALL {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            return Err(Error::MissingClassDir { class: label.to_string(), root: root.to_path_buf() });
        }
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p) && !is_mask(p))
            .collect();
        files.sort();
        if files.is_empty() {
            warnings.push(format!("class `{label}` has no images in {}", dir.display()));
        }
        for path in files {
            let img = Image::load(&path, image_size)?;
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
            samples.push(Sample::real(rel, label, Some(Arc::new(img))));
        }
    }
    let meta = ManifestMeta { source: "busi".into(), creation_seed: 0, image_size, warnings };
    let mut m = Manifest::new(samples, meta);
    m.root = root.to_path_buf();
    Ok(m)
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

// BUSI names masks "<stem>_mask.png" and, for multi-lesion cases, "<stem>_mask_1.png".
fn is_mask(p: &Path) -> bool {
    p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.contains("_mask"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path) {
        Image::filled(6, 0.25).save_png(path).unwrap();
    }

    #[test]
    fn skips_masks_and_warns_on_empty_class() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["benign", "malignant", "normal"] {
            fs::create_dir(dir.path().join(c)).unwrap();
        }
        write(&dir.path().join("benign/benign (1).png"));
        write(&dir.path().join("benign/benign (1)_mask.png"));
        write(&dir.path().join("benign/benign (2).png"));
        write(&dir.path().join("malignant/malignant (1)_mask.png"));
        write(&dir.path().join("malignant/malignant (1)_mask_1.png"));
        fs::write(dir.path().join("normal/readme.txt"), "x").unwrap();

        let m = ingest_busi(dir.path(), 4).unwrap();
        let c = m.counts(None);
        assert_eq!(c[&ClassLabel::Benign], 2);
        assert_eq!(c[&ClassLabel::Malignant], 0);
        assert_eq!(c[&ClassLabel::Normal], 0);
        assert_eq!(m.meta.warnings.len(), 2);
        assert!(m.samples.iter().all(|s| !s.synthetic && s.split.is_none()));
        assert_eq!(m.samples[0].image.as_ref().unwrap().size(), 4);
    }

    #[test]
    fn missing_class_and_unreadable_image() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("benign")).unwrap();
        fs::create_dir(dir.path().join("normal")).unwrap();
        match ingest_busi(dir.path(), 4) {
            Err(Error::MissingClassDir { class, .. }) => assert_eq!(class, "malignant"),
            other => panic!("unexpected {other:?}"),
        }
        fs::create_dir(dir.path().join("malignant")).unwrap();
        fs::write(dir.path().join("normal/broken.png"), b"not a png").unwrap();
        match ingest_busi(dir.path(), 4) {
            Err(Error::ImageRead { path, .. }) => assert!(path.ends_with("broken.png")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
