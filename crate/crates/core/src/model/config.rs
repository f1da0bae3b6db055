use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How window radii evolve from the bottom cross-modal layer to the top.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleType {
    Fixed,
    Increase,
    #[default]
    Decrease,
}

/// Radius used by [`ScheduleType::Fixed`] when none is configured.
pub const DEFAULT_FIXED_RADIUS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw per-frame feature width F.
    pub feature_dim: usize,
    /// Hidden width D.
    pub d_model: usize,
    pub heads: usize,
    /// Layers in each single-modal encoder.
    pub enc_layers: usize,
    /// Cross-modal alignment layers M.
    pub cross_layers: usize,
    /// Feed-forward hidden width of every transformer layer.
    pub ffn_dim: usize,
    /// Anchor radii in frames, strictly increasing.
    pub anchor_scales: Vec<usize>,
    /// Explicit per-layer window radii; overrides the derived schedule.
    pub window_radii: Option<Vec<usize>>,
    pub schedule_type: ScheduleType,
    pub fixed_radius: Option<usize>,
    pub vocab_size: usize,
    pub max_t: usize,
    pub max_l: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            cross_layers: 4,
            ffn_dim: 128,
            anchor_scales: vec![4, 8, 16, 32],
            window_radii: None,
            schedule_type: ScheduleType::Decrease,
            fixed_radius: None,
            vocab_size: 32,
            max_t: 100,
            max_l: 16,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("cross_layers", self.cross_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_t", self.max_t),
            ("max_l", self.max_l),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.anchor_scales.is_empty()
            || self.anchor_scales[0] == 0
            || self.anchor_scales.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "anchor_scales must be strictly increasing positive integers, got {:?}",
                self.anchor_scales
            )));
        }
        if let Some(r) = &self.window_radii {
            if r.len() != self.cross_layers {
                return Err(Error::Config(format!(
                    "window_radii has {} entries for {} cross-modal layers",
                    r.len(),
                    self.cross_layers
                )));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-layer window radii and the anchor scales each layer predicts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiusSchedule {
    pub radii: Vec<usize>,
    pub layer_scales: Vec<Vec<usize>>,
}

impl RadiusSchedule {
    pub fn layers(&self) -> usize {
        self.radii.len()
    }

    /// Largest number of scales any single layer owns.
    pub fn max_scales_per_layer(&self) -> usize {
        self.layer_scales.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Splits the anchor scales into `M` contiguous groups, largest scales first.
fn descending_groups(scales: &[usize], m: usize) -> Option<Vec<Vec<usize>>> {
    let h = scales.len();
    let desc: Vec<usize> = scales.iter().rev().copied().collect();
    if h >= m && h.is_multiple_of(m) {
        Some(desc.chunks(h / m).map(<[usize]>::to_vec).collect())
    } else if h < m && m.is_multiple_of(h) {
        Some(desc.iter().flat_map(|&s| std::iter::repeat_n(s, m / h)).map(|s| vec![s]).collect())
    } else {
        None
    }
}

pub fn derive_schedule(config: &ModelConfig) -> Result<RadiusSchedule> {
    config.validate()?;
    let m = config.cross_layers;
    let scales = &config.anchor_scales;
    let groups = descending_groups(scales, m).ok_or_else(|| {
        Error::Config(format!(
            "cannot allocate {} anchor scales evenly over {m} layers",
            scales.len()
        ))
    })?;

    if let Some(radii) = &config.window_radii {
        return Ok(RadiusSchedule {
            radii: radii.clone(),
            layer_scales: groups,
        });
    }
    if scales.len() < m {
        return Err(Error::Config(format!(
            "{} anchor scales cannot give {m} layers distinct scales without explicit window_radii",
            scales.len()
        )));
    }

    let max_of = |g: &Vec<usize>| *g.iter().max().expect("non-empty group");
    Ok(match config.schedule_type {
        ScheduleType::Decrease => RadiusSchedule {
            radii: groups.iter().map(max_of).collect(),
            layer_scales: groups,
        },
        ScheduleType::Increase => {
            let groups: Vec<Vec<usize>> = groups.into_iter().rev().collect();
            RadiusSchedule {
                radii: groups.iter().map(max_of).collect(),
                layer_scales: groups,
            }
        }
        ScheduleType::Fixed => RadiusSchedule {
            radii: vec![config.fixed_radius.unwrap_or(DEFAULT_FIXED_RADIUS); m],
            layer_scales: groups,
        },
    })
}
