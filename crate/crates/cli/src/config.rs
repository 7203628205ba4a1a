use std::path::Path;

use anyhow::{bail, Context, Result};
use emf_core::backbone::ModelConfig;
use emf_core::detection::PostProcess;
use emf_core::encoder::EncoderConfig;
use emf_core::evaluation::{EvalProtocol, ProtocolName};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 42;

/// Everything a command needs besides its file arguments. Loaded from one
/// JSON document; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub postprocess: PostProcess,
    pub protocol: ProtocolName,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            postprocess: PostProcess::default(),
            protocol: ProtocolName::Gen1,
            seed: DEFAULT_SEED,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol::new(self.protocol)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder.validate()?;
        if self.model.input_channels != self.encoder.channels() {
            bail!(
                "model.input_channels is {} but the encoder produces 2 x {} bins = {} channels",
                self.model.input_channels,
                self.encoder.bins,
                self.encoder.channels()
            );
        }
        let divisor = self.eval_protocol().spatial_divisor;
        if divisor != self.encoder.spatial_divisor {
            bail!(
                "protocol {:?} expects spatial divisor {divisor}, encoder uses {}",
                self.protocol,
                self.encoder.spatial_divisor
            );
        }
        let pp = &self.postprocess;
        if !(0.0..=1.0).contains(&pp.score_thr) || !(0.0..=1.0).contains(&pp.iou_thr) {
            bail!("score and IoU thresholds must lie in [0, 1], got {pp:?}");
        }
        Ok(())
    }
}

/// Flags shared by commands that build or run a model.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Time bins per window.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Window length in milliseconds.
    #[arg(long)]
    pub dt_ms: Option<u64>,
    /// Integer spatial downscale applied by the encoder.
    #[arg(long)]
    pub divisor: Option<u16>,
    /// Size-filter protocol: gen1, 1mpx or none.
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

impl ConfigArgs {
    /// Loads the file (or defaults), applies overrides and validates.
    ///
    /// Choosing a protocol without an explicit divisor also sets the
    /// encoder divisor to the protocol's, and changing the bin count keeps
    /// the model input width in step.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.bins {
            cfg.encoder.bins = b;
            cfg.model.input_channels = cfg.encoder.channels();
            cfg.model.epe_channels = cfg.encoder.channels();
        }
        if let Some(ms) = self.dt_ms {
            cfg.encoder.dt_us = ms * 1000;
        }
        if let Some(p) = &self.protocol {
            let proto: EvalProtocol = p.parse()?;
            cfg.protocol = proto.name;
            if self.divisor.is_none() {
                cfg.encoder.spatial_divisor = proto.spatial_divisor;
            }
        }
        if let Some(d) = self.divisor {
            cfg.encoder.spatial_divisor = d;
        }
        if let Some(n) = self.num_classes {
            cfg.model.num_classes = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
