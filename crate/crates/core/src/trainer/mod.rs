//! Model assembly, optimization, data, and the train/eval loops.

mod data;
mod optim;
mod sliding;
mod train;

pub use data::{load_dataset, make_synth_dataset, save_dataset, stack_batch, SegSample, MANIFEST};
pub use optim::{poly_lr, Adam};
pub use sliding::{gaussian_importance, sliding_window_infer, tile_starts};
pub use train::{
    evaluate, format_loss_log, load_checkpoint, save_checkpoint, checkpoint_file, train, StepLog, CONFIG_ENTRY,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapter_forward, init_adapter};
use crate::autodiff::{Tape, Var};
use crate::backbone::{backbone_forward, init_backbone};
use crate::config::{ModelConfig, Projection};
use crate::decoder::{decoder_forward, init_decoder};
use crate::error::{Error, Result};
use crate::fapm::{baseline_forward, fapm_forward, init_baseline, init_fapm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A configured network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Separate RNG stream per module, so swapping the projection module leaves
/// the other modules' initial weights unchanged.
fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    pub fn build(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        init_backbone(&cfg.backbone, &mut store, &mut module_rng(cfg.seed, 0));
        init_adapter(&cfg.adapter, &mut store, &mut module_rng(cfg.seed, 1));
        match cfg.projection {
            Projection::Fapm => init_fapm(&cfg.fapm, &mut store, &mut module_rng(cfg.seed, 2)),
            Projection::Baseline => init_baseline(&cfg.fapm, &mut store, &mut module_rng(cfg.seed, 3)),
        }
        init_decoder(&cfg.decoder, &mut store, &mut module_rng(cfg.seed, 4));
        Ok(Model { cfg, store })
    }

    /// Logits `[B, C, H, W]` for an image batch `x: [B, 3, H, W]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let m = self.cfg.size_multiple();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            return Err(Error::shape(
                "model_forward",
                format!("input {s:?} must be [B, 3, H, W] with H and W multiples of {m}"),
            ));
        }
        let vit = backbone_forward(tape, &self.store, &self.cfg.backbone, x)?;
        let pyramid = adapter_forward(tape, &self.store, &self.cfg.adapter, x, &vit)?;
        let skips = match self.cfg.projection {
            Projection::Fapm => fapm_forward(tape, &self.store, &self.cfg.fapm, &pyramid)?,
            Projection::Baseline => baseline_forward(tape, &self.store, &self.cfg.fapm, &pyramid)?,
        };
        decoder_forward(tape, &self.store, &self.cfg.decoder, &skips)
    }

    /// Plain full-image inference.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn trainable_count(&self) -> usize {
        self.store.numel_where(|_, e| e.trainable)
    }
}
