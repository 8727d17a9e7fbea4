//! Architectural and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone size family. `Desk` is the small default used for tests and
/// local runs; the others carry the embedding widths of the published
/// S/B/L/7B backbones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "desk")]
    Desk,
    S,
    B,
    L,
    #[serde(rename = "7B")]
    B7,
}

impl Variant {
    pub fn embed_dim(self) -> usize {
        match self {
            Variant::Desk => 32,
            Variant::S => 384,
            Variant::B => 768,
            Variant::L => 1024,
            Variant::B7 => 4096,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Desk => "desk",
            Variant::S => "S",
            Variant::B => "B",
            Variant::L => "L",
            Variant::B7 => "7B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "desk" => Variant::Desk,
            "S" => Variant::S,
            "B" => Variant::B,
            "L" => Variant::L,
            "7B" => Variant::B7,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices after which token maps are captured.
    pub tap_layers: Vec<usize>,
    /// Patch-grid size of the stored positional embedding (rows, cols).
    pub pos_grid: (usize, usize),
}

/// `n` taps spread evenly over `depth` blocks, the last one at `depth`.
pub fn even_taps(depth: usize, n: usize) -> Vec<usize> {
    (1..=n).map(|i| ((i * depth) as f64 / n as f64).round().max(1.0) as usize).collect()
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 16,
            embed_dim: 32,
            depth: 4,
            num_heads: 2,
            mlp_ratio: 4,
            tap_layers: even_taps(4, 4),
            pos_grid: (4, 4),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "backbone.embed_dim={} must be a positive multiple of backbone.num_heads={}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.patch_size == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("backbone patch_size, depth and mlp_ratio must be positive".into()));
        }
        if self.tap_layers.is_empty()
            || self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers[0] == 0
            || *self.tap_layers.last().unwrap() > self.depth
        {
            return Err(Error::Config(format!(
                "backbone.tap_layers={:?} must be strictly increasing within 1..={}",
                self.tap_layers, self.depth
            )));
        }
        if self.pos_grid.0 == 0 || self.pos_grid.1 == 0 {
            return Err(Error::Config("backbone.pos_grid must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub pyramid_strides: Vec<usize>,
    /// Channel width D shared with the backbone.
    pub channels: usize,
    /// Sampling points per query and head (K).
    pub num_points: usize,
    pub num_heads: usize,
    pub interaction_residual: bool,
    /// Base width of the spatial prior convolutions.
    pub spm_width: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            pyramid_strides: vec![4, 8, 16, 32],
            channels: 32,
            num_points: 4,
            num_heads: 1,
            interaction_residual: true,
            spm_width: 16,
        }
    }
}

impl AdapterConfig {
    pub fn num_scales(&self) -> usize {
        self.pyramid_strides.len()
    }

    pub fn max_stride(&self) -> usize {
        *self.pyramid_strides.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.pyramid_strides;
        if s.is_empty() || s[0] < 4 || s.iter().any(|v| !v.is_power_of_two()) || s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "adapter.pyramid_strides={s:?} must be strictly increasing powers of two starting at >= 4"
            )));
        }
        if self.num_points == 0 || self.num_heads == 0 || self.spm_width == 0 {
            return Err(Error::Config("adapter num_points, num_heads and spm_width must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "adapter.channels={} not divisible by adapter.num_heads={}",
                self.channels, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FapmConfig {
    pub rank: usize,
    pub in_dim: usize,
    pub out_dims: Vec<usize>,
    pub se_reduction: usize,
    pub dw_kernel: usize,
    /// Insert a GELU between the depthwise and pointwise convolutions.
    pub dw_gelu: bool,
}

impl Default for FapmConfig {
    fn default() -> Self {
        FapmConfig { rank: 16, in_dim: 32, out_dims: vec![16, 32, 64, 128], se_reduction: 4, dw_kernel: 3, dw_gelu: false }
    }
}

impl FapmConfig {
    /// Hidden width of the squeeze-and-excitation MLP for output width `d`.
    pub fn se_hidden(&self, d: usize) -> usize {
        d.div_ceil(self.se_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.in_dim == 0 {
            return Err(Error::Config("fapm.rank and fapm.in_dim must be positive".into()));
        }
        if self.out_dims.is_empty() || self.out_dims.contains(&0) {
            return Err(Error::Config(format!("fapm.out_dims={:?} must be non-empty and positive", self.out_dims)));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("fapm.se_reduction must be positive".into()));
        }
        if self.dw_kernel == 0 || self.dw_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("fapm.dw_kernel={} must be odd", self.dw_kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub skip_dims: Vec<usize>,
    pub num_classes: usize,
    /// Upsampling factor from the shallowest skip to input resolution.
    pub final_upsample: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { skip_dims: vec![16, 32, 64, 128], num_classes: 4, final_upsample: 4 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("decoder.num_classes={} must be >= 2", self.num_classes)));
        }
        if self.skip_dims.is_empty() || self.skip_dims.contains(&0) {
            return Err(Error::Config("decoder.skip_dims must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Which module turns adapter features into decoder skips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Fapm,
    /// One 1x1 convolution per scale (ablation).
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub fapm: FapmConfig,
    pub decoder: DecoderConfig,
    pub projection: Projection,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Desk,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            fapm: FapmConfig::default(),
            decoder: DecoderConfig::default(),
            projection: Projection::Fapm,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk defaults with the embedding width of `variant`; full-size
    /// variants also take rank 256.
    pub fn for_variant(variant: Variant) -> Self {
        let mut cfg = ModelConfig { variant, ..Default::default() };
        cfg.set_embed_dim(variant.embed_dim());
        if variant != Variant::Desk {
            cfg.fapm.rank = 256;
        }
        cfg
    }

    pub fn set_embed_dim(&mut self, d: usize) {
        self.backbone.embed_dim = d;
        self.adapter.channels = d;
        self.fapm.in_dim = d;
    }

    pub fn num_scales(&self) -> usize {
        self.adapter.num_scales()
    }

    /// Input side length divisibility required by the whole model.
    pub fn size_multiple(&self) -> usize {
        let s = self.adapter.max_stride();
        let p = self.backbone.patch_size;
        s / gcd(s, p) * p
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate()?;
        self.fapm.validate()?;
        self.decoder.validate()?;
        let d = self.backbone.embed_dim;
        if self.variant != Variant::Desk && self.variant.embed_dim() != d {
            return Err(Error::Config(format!(
                "variant={} implies embed_dim {} but backbone.embed_dim={d}",
                self.variant.name(),
                self.variant.embed_dim()
            )));
        }
        let n = self.num_scales();
        let pairs: [(&str, usize, &str, usize); 5] = [
            ("backbone.embed_dim", d, "adapter.channels", self.adapter.channels),
            ("backbone.embed_dim", d, "fapm.in_dim", self.fapm.in_dim),
            ("adapter.num_scales", n, "backbone.tap_layers.len", self.backbone.tap_layers.len()),
            ("adapter.num_scales", n, "fapm.out_dims.len", self.fapm.out_dims.len()),
            ("adapter.pyramid_strides[0]", self.adapter.pyramid_strides[0], "decoder.final_upsample", self.decoder.final_upsample),
        ];
        for (a, va, b, vb) in pairs {
            if va != vb {
                return Err(Error::Config(format!("{a}={va} does not match {b}={vb}")));
            }
        }
        if self.fapm.out_dims != self.decoder.skip_dims {
            return Err(Error::Config(format!(
                "fapm.out_dims={:?} does not match decoder.skip_dims={:?}",
                self.fapm.out_dims, self.decoder.skip_dims
            )));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            steps_per_epoch: 10,
            poly_power: 0.9,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The published regimen: 200 epochs of 250 mini-batches.
    pub fn reference_schedule() -> Self {
        TrainConfig { epochs: 200, steps_per_epoch: 250, ..Default::default() }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("train.lr0={} must be positive", self.lr0)));
        }
        if self.total_steps() == 0 {
            return Err(Error::Config("train.epochs * train.steps_per_epoch must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_taps_are_even() {
        assert_eq!(even_taps(4, 4), vec![1, 2, 3, 4]);
        assert_eq!(even_taps(12, 4), vec![3, 6, 9, 12]);
    }

    #[test]
    fn default_config_is_consistent() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().size_multiple(), 32);
        for v in [Variant::S, Variant::B, Variant::L, Variant::B7] {
            let c = ModelConfig::for_variant(v);
            c.validate().unwrap();
            assert_eq!(c.fapm.in_dim, v.embed_dim());
        }
    }

    #[test]
    fn mismatch_names_first_pair() {
        let mut c = ModelConfig::default();
        c.fapm.in_dim = 8;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("fapm.in_dim=8"), "{msg}");
        let mut c = ModelConfig::default();
        c.decoder.skip_dims = vec![1, 2, 3, 4];
        assert!(c.validate().unwrap_err().to_string().contains("decoder.skip_dims"));
    }

    #[test]
    fn rejects_bad_strides() {
        let mut c = AdapterConfig { pyramid_strides: vec![4, 12], ..Default::default() };
        assert!(c.validate().is_err());
        c.pyramid_strides = vec![8, 4];
        assert!(c.validate().is_err());
    }
}
