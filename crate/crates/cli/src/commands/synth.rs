//! `patchem synth`: generate the seeded corpus into the dataset directory.

use patchem_core::synth;

use crate::config::PipelineConfig;
use crate::error::CliResult;

pub fn cmd_synth(config: &PipelineConfig) -> CliResult<()> {
    let spec = config.synth_spec()?;
    let (images, masks) = synth::generate_dataset(spec, config.seed)?;
    let dir = &config.paths.dataset_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| crate::error::CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    let produced = synth::write_corpus(dir, &images, &masks)?;
    log::info!(
        "wrote {} images ({} classes) and oracle masks to {}",
        images.len(),
        spec.classes.len(),
        dir.display()
    );
    log::debug!("{} files produced", produced.len());
    Ok(())
}
