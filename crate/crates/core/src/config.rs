//! Aggregated model configuration shared by training, evaluation, and the CLI.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow_net::{FlowNet, FlowNetConfig};
use crate::fusion::{FusionConfig, FusionNet};
use crate::gating::{GateNet, GatingConfig, RegionScheme};
use crate::residual::{ResidualConfig, ResidualNets};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub voxel_bins: usize,
    pub flow: FlowNetConfig,
    pub gating: GatingConfig,
    pub residual: ResidualConfig,
    pub fusion: FusionConfig,
    pub region_scheme: RegionScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_channels: 1,
            voxel_bins: 5,
            flow: FlowNetConfig::default(),
            gating: GatingConfig::default(),
            residual: ResidualConfig::default(),
            fusion: FusionConfig::default(),
            region_scheme: RegionScheme::Overlapping9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.fusion.validate()?;
        Ok(())
    }

    pub fn flow_net(&self) -> FlowNet {
        FlowNet::new(self.flow.clone(), self.image_channels, self.voxel_bins)
    }

    pub fn gate_net(&self) -> GateNet {
        GateNet::new(self.gating.clone())
    }

    pub fn residual_nets(&self) -> ResidualNets {
        ResidualNets::new(
            self.residual.clone(),
            self.image_channels,
            self.voxel_bins,
            self.region_scheme.count(),
        )
    }

    pub fn fusion_net(&self) -> FusionNet {
        FusionNet::new(self.fusion.clone(), self.image_channels, self.voxel_bins)
    }
}
