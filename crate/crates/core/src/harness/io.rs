//! On-disk layout of scenes and checkpoints.
//!
//! A scene directory holds `scenes/<frame>.json`, KITTI-format ground truth
//! in `label_2/<frame>.txt` and the camera in `calib/<frame>.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::HarnessConfig;
use super::scene::SyntheticScene;
use super::student::StudentModel;
use crate::error::{Error, Result};
use crate::response::{write_label_file, SoftLabelSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: HarnessConfig,
    pub student: StudentModel,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes one scene in the directory layout above and returns its JSON path.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<PathBuf> {
    let name = format!("{:06}", scene.frame_id);
    let scenes = dir.join("scenes");
    let calib = dir.join("calib");
    fs::create_dir_all(&scenes)?;
    fs::create_dir_all(&calib)?;
    let path = scenes.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string(scene)?)?;
    fs::write(calib.join(format!("{name}.txt")), scene.camera.to_text())?;
    write_label_file(&dir.join("label_2"), &SoftLabelSet::new(scene.frame_id, scene.boxes.clone()))?;
    Ok(path)
}

pub fn read_scene(path: &Path) -> Result<SyntheticScene> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Scenes from a directory written by [`write_scene`], in frame order. A
/// path to a single scene file is also accepted.
pub fn read_scenes(path: &Path) -> Result<Vec<SyntheticScene>> {
    if path.is_file() {
        return Ok(vec![read_scene(path)?]);
    }
    let dir = if path.join("scenes").is_dir() {
        path.join("scenes")
    } else {
        path.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no scene files in `{}`", dir.display())));
    }
    files.iter().map(|p| read_scene(p)).collect()
}
