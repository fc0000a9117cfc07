//! On-disk dataset layout and its manifest.
//!
//! A dataset directory looks like:
//!
//! ```text
//! scene/
//!   manifest.json
//!   images/view_000.png          8-bit RGB renders
//!   depth/view_000.bin           raw little-endian f32, row-major, w*h
//!   masks_gt/obj0_view_000.png   8-bit gray, 255 = inside mask
//! ```
//!
//! The manifest records image size, scene bounds, the near/far ray interval,
//! and per view: the train/test split label, a row-major 4x4 camera-to-world
//! matrix, pinhole intrinsics, and relative paths to the files. Depth and
//! ground-truth masks are optional (the decomposition itself never needs the
//! masks; evaluation does).

use crate::error::{Error, Result};
use crate::geom::{Aabb, CameraModel, RigidTransform, Vec3};
use crate::img::{self, BinMask, GrayImage, ImageRgb};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestView {
    pub index: usize,
    pub split: Split,
    pub camera: CameraModel,
    pub image: String,
    pub depth: Option<String>,
    pub masks_gt: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub bounds: Aabb,
    pub views: Vec<ManifestView>,
}

// Serialized form; kept separate from the in-memory types so the JSON schema
// stays explicit and stable.
#[derive(Serialize, Deserialize)]
struct ManifestJson {
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    scene_bounds: BoundsJson,
    views: Vec<ViewJson>,
}

#[derive(Serialize, Deserialize)]
struct BoundsJson {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    index: usize,
    split: Split,
    camera_to_world: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    masks_gt: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Manifest("zero image size".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Manifest(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        let e = self.bounds.extent();
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
            return Err(Error::Manifest("scene bounds are empty".into()));
        }
        if self.views.is_empty() {
            return Err(Error::Manifest("no views".into()));
        }
        if !self.views.iter().any(|v| v.split == Split::Train) {
            return Err(Error::Manifest("no training views".into()));
        }
        let n_masks = self.views[0].masks_gt.len();
        for (i, v) in self.views.iter().enumerate() {
            if v.index != i {
                return Err(Error::Manifest(format!(
                    "view {i} has index {} (must be consecutive from 0)",
                    v.index
                )));
            }
            if v.camera.width != self.width || v.camera.height != self.height {
                return Err(Error::Manifest(format!(
                    "view {i} camera size differs from dataset size"
                )));
            }
            v.camera
                .validate()
                .map_err(|e| Error::Manifest(format!("view {i}: {e}")))?;
            if v.masks_gt.len() != n_masks {
                return Err(Error::Manifest(format!(
                    "view {i} has {} ground-truth masks, view 0 has {n_masks}",
                    v.masks_gt.len()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let json = ManifestJson {
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
            scene_bounds: BoundsJson {
                min: self.bounds.min.to_array(),
                max: self.bounds.max.to_array(),
            },
            views: self
                .views
                .iter()
                .map(|v| ViewJson {
                    index: v.index,
                    split: v.split,
                    camera_to_world: v.camera.cam_to_world.to_mat4_row_major().to_vec(),
                    fx: v.camera.fx,
                    fy: v.camera.fy,
                    cx: v.camera.cx,
                    cy: v.camera.cy,
                    image: v.image.clone(),
                    depth: v.depth.clone(),
                    masks_gt: v.masks_gt.clone(),
                })
                .collect(),
        };
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&json)
            .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let json: ManifestJson = serde_json::from_str(&text)
            .map_err(|e| Error::file_format(&path, format!("manifest parse: {e}")))?;
        let mut views = Vec::with_capacity(json.views.len());
        for v in json.views {
            let m: [f64; 16] = v.camera_to_world.as_slice().try_into().map_err(|_| {
                Error::Manifest(format!(
                    "view {}: camera_to_world must have 16 entries",
                    v.index
                ))
            })?;
            views.push(ManifestView {
                index: v.index,
                split: v.split,
                camera: CameraModel {
                    width: json.width,
                    height: json.height,
                    fx: v.fx,
                    fy: v.fy,
                    cx: v.cx,
                    cy: v.cy,
                    cam_to_world: RigidTransform::from_mat4_row_major(&m)?,
                },
                image: v.image,
                depth: v.depth,
                masks_gt: v.masks_gt,
            });
        }
        let manifest = DatasetManifest {
            width: json.width,
            height: json.height,
            near: json.near,
            far: json.far,
            bounds: Aabb::new(
                Vec3::from_array(json.scene_bounds.min),
                Vec3::from_array(json.scene_bounds.max),
            ),
            views,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks that every referenced file exists (cheap existence pass, no
    /// pixel decoding).
    pub fn check_files(&self, dir: &Path) -> Result<()> {
        let mut missing: Vec<PathBuf> = Vec::new();
        for v in &self.views {
            for rel in std::iter::once(&v.image)
                .chain(v.depth.iter())
                .chain(v.masks_gt.iter())
            {
                let p = dir.join(rel);
                if !p.is_file() {
                    missing.push(p);
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(format!(
                "{} referenced files missing, first: {}",
                missing.len(),
                missing[0].display()
            )))
        }
    }
}

/// A fully loaded view.
#[derive(Clone, Debug)]
pub struct LoadedView {
    pub camera: CameraModel,
    pub split: Split,
    pub image: ImageRgb,
    pub depth: Option<GrayImage>,
    pub gt_masks: Vec<BinMask>,
}

/// Dataset with all pixel data in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub bounds: Aabb,
    pub views: Vec<LoadedView>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = DatasetManifest::load(dir)?;
        manifest.check_files(dir)?;
        let mut views = Vec::with_capacity(manifest.views.len());
        for v in &manifest.views {
            let image = img::load_png_rgb(&dir.join(&v.image))?;
            if image.width != manifest.width || image.height != manifest.height {
                return Err(Error::Manifest(format!(
                    "view {}: image size {}x{} does not match manifest {}x{}",
                    v.index, image.width, image.height, manifest.width, manifest.height
                )));
            }
            let depth = match &v.depth {
                Some(rel) => {
                    let data =
                        img::load_f32_raw(&dir.join(rel), manifest.width * manifest.height)?;
                    Some(GrayImage {
                        width: manifest.width,
                        height: manifest.height,
                        data,
                    })
                }
                None => None,
            };
            let mut gt_masks = Vec::with_capacity(v.masks_gt.len());
            for rel in &v.masks_gt {
                let m = img::load_png_mask(&dir.join(rel))?;
                if m.width != manifest.width || m.height != manifest.height {
                    return Err(Error::Manifest(format!(
                        "view {}: mask size does not match manifest",
                        v.index
                    )));
                }
                gt_masks.push(m);
            }
            views.push(LoadedView {
                camera: v.camera,
                split: v.split,
                image,
                depth,
                gt_masks,
            });
        }
        Ok(Dataset {
            width: manifest.width,
            height: manifest.height,
            near: manifest.near,
            far: manifest.far,
            bounds: manifest.bounds,
            views,
        })
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].split == Split::Train)
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].split == Split::Test)
            .collect()
    }

    /// Number of ground-truth object masks per view (0 when absent).
    pub fn n_gt_objects(&self) -> usize {
        self.views.first().map_or(0, |v| v.gt_masks.len())
    }

    pub fn has_depth(&self) -> bool {
        self.views.iter().all(|v| v.depth.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec3;

    fn tiny_manifest() -> DatasetManifest {
        let camera = CameraModel::look_at(
            vec3(0.0, -3.0, 1.5),
            vec3(0.0, 0.0, 0.3),
            vec3(0.0, 0.0, 1.0),
            8,
            6,
            45.0,
        )
        .unwrap();
        DatasetManifest {
            width: 8,
            height: 6,
            near: 0.5,
            far: 9.0,
            bounds: Aabb::new(vec3(-3.0, -3.0, -0.2), vec3(3.0, 3.0, 2.0)),
            views: vec![
                ManifestView {
                    index: 0,
                    split: Split::Train,
                    camera,
                    image: "images/view_000.png".into(),
                    depth: Some("depth/view_000.bin".into()),
                    masks_gt: vec!["masks_gt/obj0_view_000.png".into()],
                },
                ManifestView {
                    index: 1,
                    split: Split::Test,
                    camera,
                    image: "images/view_001.png".into(),
                    depth: None,
                    masks_gt: vec!["masks_gt/obj0_view_001.png".into()],
                },
            ],
        }
    }

    #[test]
    fn manifest_roundtrip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest();
        m.save(dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(m, back);
        // Re-saving produces byte-identical JSON.
        let first = std::fs::read(dir.path().join(MANIFEST_NAME)).unwrap();
        back.save(dir.path()).unwrap();
        let second = std::fs::read(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut m = tiny_manifest();
        m.views[1].masks_gt.clear();
        assert!(m.validate().is_err());

        let mut m = tiny_manifest();
        m.near = -1.0;
        assert!(m.validate().is_err());

        let mut m = tiny_manifest();
        m.views[0].split = Split::Test;
        // Both views test -> no training views.
        m.views[1].split = Split::Test;
        assert!(m.validate().is_err());

        let mut m = tiny_manifest();
        m.views[1].index = 5;
        assert!(m.validate().is_err());
    }

    #[test]
    fn check_files_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest();
        m.save(dir.path()).unwrap();
        let err = m.check_files(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
