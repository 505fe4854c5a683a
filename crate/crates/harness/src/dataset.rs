//! On-disk group layout.
//!
//! ```text
//! <root>/<group>/img/<name>.ppm   input images
//! <root>/<group>/gt/<name>.pgm    ground-truth masks
//! <pred>/<group>/<name>.pgm       predicted maps
//! ```
//! A directory that itself contains `img/` is treated as a single group.

use std::fs;
use std::path::{Path, PathBuf};

use cosal_core::ImageGroup;

use crate::error::{HarnessError, Result};
use crate::pnm;

pub const IMAGE_DIR: &str = "img";
pub const MASK_DIR: &str = "gt";

pub fn write_group(root: &Path, group: &ImageGroup) -> Result<PathBuf> {
    let dir = root.join(&group.id);
    let (img, gt) = (dir.join(IMAGE_DIR), dir.join(MASK_DIR));
    for d in [&img, &gt] {
        fs::create_dir_all(d).map_err(HarnessError::io(d))?;
    }
    for i in 0..group.len() {
        pnm::write_ppm(&img.join(format!("{}.ppm", group.names[i])), &group.images[i])?;
        pnm::write_mask(&gt.join(format!("{}.pgm", group.names[i])), &group.masks[i])?;
    }
    Ok(dir)
}

/// Sorted file stems with the given extension.
pub fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(HarnessError::io(dir))? {
        let path = entry.map_err(HarnessError::io(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Sorted names of the sub-directories of `dir`.
pub fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(HarnessError::io(dir))? {
        let entry = entry.map_err(HarnessError::io(dir))?;
        if entry.path().is_dir() {
            if let Some(s) = entry.file_name().to_str() {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads one group directory; every image needs a mask of the same name.
pub fn read_group(dir: &Path) -> Result<ImageGroup> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| HarnessError::Data(format!("{} has no usable name", dir.display())))?
        .to_string();
    let (img, gt) = (dir.join(IMAGE_DIR), dir.join(MASK_DIR));
    let names = stems(&img, "ppm")?;
    if names.is_empty() {
        return Err(HarnessError::Data(format!("{} holds no images", img.display())));
    }
    let mut images = Vec::with_capacity(names.len());
    let mut masks = Vec::with_capacity(names.len());
    for n in &names {
        images.push(pnm::read_ppm(&img.join(format!("{n}.ppm")))?);
        let mpath = gt.join(format!("{n}.pgm"));
        if !mpath.exists() {
            return Err(HarnessError::Data(format!("image {n} in {} has no mask", dir.display())));
        }
        masks.push(pnm::read_mask(&mpath)?);
    }
    ImageGroup::new(id, names, images, masks).map_err(|e| HarnessError::Data(e.to_string()))
}

/// Group directories under `root`, or `root` itself if it is a group.
pub fn group_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(IMAGE_DIR).is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let dirs: Vec<PathBuf> = subdirs(root)?
        .into_iter()
        .map(|s| root.join(s))
        .filter(|d| d.join(IMAGE_DIR).is_dir())
        .collect();
    if dirs.is_empty() {
        return Err(HarnessError::Data(format!("no groups under {}", root.display())));
    }
    Ok(dirs)
}

pub fn read_groups(root: &Path) -> Result<Vec<ImageGroup>> {
    group_dirs(root)?.iter().map(|d| read_group(d)).collect()
}

/// Where the maps of a group live in a prediction or ground-truth tree:
/// `<root>/<group>/gt` when present, else `<root>/<group>`.
pub fn map_dir(root: &Path, group: &str) -> PathBuf {
    let nested = root.join(group).join(MASK_DIR);
    if nested.is_dir() {
        nested
    } else {
        root.join(group)
    }
}
