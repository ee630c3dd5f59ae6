#![allow(dead_code)]

use std::path::Path;

use inpaint_core::models::DenoiserConfig;
use inpaint_pipeline::toy::write_toy_corpus;
use inpaint_pipeline::RunConfig;

/// The desk preset shrunk so that a full train/infer cycle takes seconds.
/// Writes the toy corpus under `dir` and points the config at it.
pub fn tiny_config(dir: &Path) -> RunConfig {
    let manifest = write_toy_corpus(&dir.join("corpus")).unwrap();
    let mut cfg = RunConfig::desk(manifest);
    cfg.output_dir = dir.join("out");
    cfg.schedule = inpaint_core::diffusion::ScheduleConfig::rescaled(8);
    cfg.model = DenoiserConfig::dit(16, 2, 1);
    cfg.classifier.dim = 8;
    cfg.train.steps = 10;
    cfg.train.batch_size = 2;
    cfg.train.checkpoint_every = 5;
    cfg.ctc_train.epochs = 4;
    cfg.ctc_train.batch_size = 4;
    cfg.inference.griffin_lim_iters = 2;
    cfg.inference.workers = 2;
    cfg
}
