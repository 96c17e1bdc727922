//! Output-directory plumbing: model/plan files and the manifest of produced
//! files. Every write is registered so `outputs.json` always reflects the
//! directory contents; the manifest itself is sorted and deduplicated, so
//! repeated runs stay byte-identical.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use patchem_core::classifier::Model;
use patchem_core::em::{HiddenMask, IterationStats, MODEL_SLOTS};
use patchem_core::eval::SplitPlan;
use patchem_core::fusion::FusionModel;

use crate::error::{CliError, CliResult};

pub const MODEL_SLOT_NAMES: [&str; 4] = ["fine_mid", "fine_final", "coarse_mid", "coarse_final"];

#[derive(Debug, Default, Serialize, Deserialize)]
struct OutputsManifest {
    files: Vec<String>,
}

/// Tracks files produced under the output directory.
pub struct OutputDir {
    root: PathBuf,
    produced: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<OutputDir> {
        std::fs::create_dir_all(root)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", root.display())))?;
        Ok(OutputDir { root: root.to_path_buf(), produced: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::data(format!("cannot create {}: {e}", parent.display())))?;
        }
        std::fs::write(&path, text)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        self.produced.push(rel.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
        self.write_text(rel, &text)
    }

    pub fn register(&mut self, rel: &str) {
        self.produced.push(rel.to_string());
    }

    /// Merge this run's files into `outputs.json`.
    pub fn finish(mut self) -> CliResult<()> {
        let manifest_path = self.root.join("outputs.json");
        let mut files = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)
                .map_err(|e| CliError::data(format!("cannot read outputs.json: {e}")))?;
            serde_json::from_str::<OutputsManifest>(&text)
                .map_err(|e| CliError::data(format!("malformed outputs.json: {e}")))?
                .files
        } else {
            Vec::new()
        };
        files.append(&mut self.produced);
        files.sort();
        files.dedup();
        let text = serde_json::to_string_pretty(&OutputsManifest { files })
            .map_err(CliError::runtime)?;
        std::fs::write(&manifest_path, text)
            .map_err(|e| CliError::data(format!("cannot write outputs.json: {e}")))?;
        Ok(())
    }
}

pub fn write_models(out: &mut OutputDir, models: &[Model]) -> CliResult<()> {
    debug_assert_eq!(models.len(), MODEL_SLOTS.len());
    for (model, name) in models.iter().zip(MODEL_SLOT_NAMES) {
        out.write_text(&format!("models/{name}.json"), &model.to_json()?)?;
    }
    Ok(())
}

/// Load the four patch models, re-tagged by their slot.
pub fn read_models(root: &Path) -> CliResult<Vec<Model>> {
    MODEL_SLOT_NAMES
        .iter()
        .zip(MODEL_SLOTS)
        .map(|(name, (_, tag))| {
            let path = root.join(format!("models/{name}.json"));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
            Ok(Model::from_json(&text)?.with_tag(tag))
        })
        .collect()
}

pub fn write_fusion(out: &mut OutputDir, model: &FusionModel) -> CliResult<()> {
    out.write_text("fusion.json", &model.to_json()?)
}

pub fn read_fusion(root: &Path) -> CliResult<FusionModel> {
    let path = root.join("fusion.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(FusionModel::from_json(&text)?)
}

pub fn write_split(out: &mut OutputDir, plan: &SplitPlan) -> CliResult<()> {
    out.write_json("split.json", plan)
}

pub fn read_split(root: &Path) -> CliResult<SplitPlan> {
    let path = root.join("split.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("malformed split.json: {e}")))
}

pub fn write_history(out: &mut OutputDir, history: &[IterationStats]) -> CliResult<()> {
    out.write_json("history.json", &history)
}

pub fn write_masks(out: &mut OutputDir, masks: &[HiddenMask]) -> CliResult<()> {
    out.write_json("masks.json", &masks)
}
