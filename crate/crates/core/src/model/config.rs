use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Multi-channel and hierarchical.
    MuchgcnMh,
    /// Multi-channel only: one layer, no pooling.
    MuchgcnM,
    /// Hierarchical only: one channel per layer.
    MuchgcnH,
    /// K message-passing steps and a global max-pool readout.
    FlatGcn,
    /// Single-channel hierarchy with learned soft clustering.
    DiffpoolGcn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::FlatGcn,
        Variant::DiffpoolGcn,
        Variant::MuchgcnM,
        Variant::MuchgcnH,
        Variant::MuchgcnMh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MuchgcnMh => "muchgcn_mh",
            Variant::MuchgcnM => "muchgcn_m",
            Variant::MuchgcnH => "muchgcn_h",
            Variant::FlatGcn => "flat_gcn",
            Variant::DiffpoolGcn => "diffpool_gcn",
        }
    }

    pub fn is_multi_channel(self) -> bool {
        matches!(self, Variant::MuchgcnMh | Variant::MuchgcnM | Variant::MuchgcnH)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of layers `L`.
    pub layers: usize,
    /// Message-passing steps `K` per layer.
    pub steps: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    /// `r_l = n_{l+1}/n_l` for `l = 0..L−1`.
    pub assign_ratio: Vec<f64>,
    /// `T_l = C_{l+1}/C_l` for `l = 0..L`; the last entry sets the number of
    /// graphs generated at the top layer.
    pub channel_expansion: Vec<usize>,
    /// Padded node count `n_0`.
    pub max_nodes: usize,
    pub num_classes: usize,
    pub d_in: usize,
    pub entropy_weight: f64,
}

/// Static sizes of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerPlan {
    /// `n_l`
    pub nodes: usize,
    /// `C_l`
    pub channels: usize,
    /// `1 + K·C_l`
    pub multiset_len: usize,
    /// `C_l·T_l` generated graphs.
    pub embed_filters: usize,
    /// Same as `embed_filters` below the top layer, zero at the top.
    pub pool_filters: usize,
    /// Products inside the message-passing stage: two per step per pass,
    /// with `C_l` intra and `C_l(C_l−1)` inter passes.
    pub conv_matmuls: usize,
}

/// `⌈r·n⌉`, tolerant of `r·n` landing a rounding error above an integer.
pub fn next_node_count(ratio: f64, nodes: usize) -> usize {
    let raw = ratio * nodes as f64;
    ((raw - 1e-9).ceil().max(1.0)) as usize
}

impl ModelConfig {
    /// Paper-style defaults for a given variant: `K = 3`, `d = 64`, `T = 4`
    /// where multi-channel, `r = 0.1` for two layers and `0.25` for three.
    pub fn preset(variant: Variant, layers: usize, d_in: usize, num_classes: usize, max_nodes: usize) -> Self {
        let ratio = if layers >= 3 { 0.25 } else { 0.1 };
        let expansion = match variant {
            Variant::MuchgcnMh | Variant::MuchgcnM => 4,
            _ => 1,
        };
        ModelConfig {
            variant,
            layers,
            steps: 3,
            hidden: 64,
            assign_ratio: vec![ratio; layers.saturating_sub(1)],
            channel_expansion: vec![expansion; layers],
            max_nodes,
            num_classes,
            d_in,
            entropy_weight: 0.1,
        }
    }

    /// Range and length checks plus the per-variant shape rules.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let bad = |m: String| Err(Error::Config(m));
        let single = self.channel_expansion.iter().all(|&t| t == 1);
        let name = self.variant.name();
        match self.variant {
            Variant::MuchgcnM if self.layers != 1 || single => {
                bad(format!("{name} needs L = 1 and T > 1"))
            }
            Variant::MuchgcnH | Variant::DiffpoolGcn if self.layers < 2 || !single => {
                bad(format!("{name} needs L > 1 and T = 1"))
            }
            Variant::MuchgcnMh if self.layers < 2 || single => {
                bad(format!("{name} needs L > 1 and T > 1"))
            }
            Variant::FlatGcn if self.layers != 1 || !single => bad(format!("{name} needs L = 1 and T = 1")),
            _ => Ok(()),
        }
    }

    /// Range and length checks only. Any multi-channel schedule passing
    /// this can be built, whatever `variant` says.
    pub fn validate_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers < 1 {
            return bad("layers must be >= 1".into());
        }
        if self.steps < 1 {
            return bad("K must be >= 1".into());
        }
        if self.hidden < 1 || self.d_in < 1 || self.max_nodes < 1 {
            return bad("hidden, d_in and max_nodes must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.assign_ratio.len() != self.layers - 1 {
            return bad(format!(
                "assign_ratio needs {} entries, got {}",
                self.layers - 1,
                self.assign_ratio.len()
            ));
        }
        if let Some(r) = self.assign_ratio.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("assign ratio {r} outside (0, 1]"));
        }
        if self.channel_expansion.len() != self.layers {
            return bad(format!(
                "channel_expansion needs {} entries, got {}",
                self.layers,
                self.channel_expansion.len()
            ));
        }
        if self.channel_expansion.contains(&0) {
            return bad("channel expansion must be >= 1".into());
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return bad("entropy_weight must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Closed-form per-layer schedule: `n_{l+1} = ⌈r_l·n_l⌉`,
    /// `C_{l+1} = C_l·T_l`, multiset length `1 + K·C_l`.
    pub fn plan_shapes(&self) -> Result<Vec<LayerPlan>> {
        self.validate_structure()?;
        let mut plans = Vec::with_capacity(self.layers);
        let mut nodes = self.max_nodes;
        let mut channels = 1usize;
        for l in 0..self.layers {
            if nodes == 0 {
                return Err(Error::Config(format!("layer {l} has no nodes")));
            }
            let t = self.channel_expansion[l];
            let top = l + 1 == self.layers;
            let generated = channels * t;
            plans.push(LayerPlan {
                nodes,
                channels,
                multiset_len: 1 + self.steps * channels,
                embed_filters: generated,
                pool_filters: if top { 0 } else { generated },
                conv_matmuls: 2 * self.steps * channels * channels,
            });
            if !top {
                nodes = next_node_count(self.assign_ratio[l], nodes);
                channels = generated;
            }
        }
        Ok(plans)
    }

    /// Length of the concatenated readout `Y`.
    pub fn readout_width(&self) -> usize {
        self.hidden * self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, layers: usize, t: usize) -> ModelConfig {
        let mut c = ModelConfig::preset(variant, layers, 3, 2, 100);
        c.channel_expansion = vec![t; layers];
        c
    }

    #[test]
    fn node_schedule() {
        let mut c = cfg(Variant::MuchgcnH, 3, 1);
        c.assign_ratio = vec![0.25, 0.25];
        let n: Vec<usize> = c.plan_shapes().unwrap().iter().map(|p| p.nodes).collect();
        assert_eq!(n, vec![100, 25, 7]);
    }

    #[test]
    fn channel_schedule() {
        let c = cfg(Variant::MuchgcnMh, 2, 4);
        let plan = c.plan_shapes().unwrap();
        assert_eq!(plan.iter().map(|p| p.channels).collect::<Vec<_>>(), vec![1, 4]);
        assert_eq!(plan[1].multiset_len, 13);
        assert_eq!(plan[1].embed_filters, 16);
        assert_eq!(plan[1].pool_filters, 0);
    }

    #[test]
    fn two_by_two_at_layer_one() {
        let c = cfg(Variant::MuchgcnMh, 2, 2);
        let plan = c.plan_shapes().unwrap();
        assert_eq!(plan[1].channels, 2);
        assert_eq!(plan[1].embed_filters, 4);
    }

    #[test]
    fn ratio_rounding_is_not_fooled_by_fp_error() {
        assert_eq!(next_node_count(0.1, 70), 7);
        assert_eq!(next_node_count(0.1, 100), 10);
        assert_eq!(next_node_count(0.25, 25), 7);
        assert_eq!(next_node_count(0.01, 5), 1);
    }

    #[test]
    fn doubling_k_doubles_conv_products() {
        let mut c = cfg(Variant::MuchgcnMh, 2, 2);
        let before: usize = c.plan_shapes().unwrap().iter().map(|p| p.conv_matmuls).sum();
        c.steps *= 2;
        let after: usize = c.plan_shapes().unwrap().iter().map(|p| p.conv_matmuls).sum();
        assert_eq!(after, 2 * before);
    }

    #[test]
    fn validation() {
        let mut c = cfg(Variant::MuchgcnMh, 2, 2);
        c.assign_ratio = vec![0.0];
        assert!(c.validate().is_err());
        c.assign_ratio = vec![1.5];
        assert!(c.validate().is_err());
        c.assign_ratio = vec![1.0];
        assert!(c.validate().is_ok());
        c.steps = 0;
        assert!(c.validate().is_err());
        assert!(cfg(Variant::MuchgcnM, 2, 4).validate().is_err());
        assert!(cfg(Variant::MuchgcnM, 1, 4).validate().is_ok());
        assert!(cfg(Variant::MuchgcnH, 2, 2).validate().is_err());
        assert!(cfg(Variant::FlatGcn, 1, 1).validate().is_ok());
        assert!(cfg(Variant::DiffpoolGcn, 1, 1).validate().is_err());
    }
}
