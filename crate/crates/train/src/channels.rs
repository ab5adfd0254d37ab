//! Selection of rendered channels fed to the embedding network.

use std::fmt;
use std::str::FromStr;

use mvcorr_core::ViewBuffers;

use crate::error::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSet {
    pub rgb: bool,
    pub normal: bool,
    pub depth: bool,
}

impl ChannelSet {
    pub const ALL: ChannelSet = ChannelSet {
        rgb: true,
        normal: true,
        depth: true,
    };

    pub fn count(&self) -> usize {
        3 * self.rgb as usize + 3 * self.normal as usize + self.depth as usize
    }

    /// Appends the view as planar (K, H, W) values to `out`.
    pub fn append_input(&self, view: &ViewBuffers, out: &mut Vec<f32>) {
        let n = view.num_pixels();
        let mut planes = |src: &[f32], comps: usize| {
            for c in 0..comps {
                out.extend((0..n).map(|p| src[p * comps + c]));
            }
        };
        if self.rgb {
            planes(&view.rgb, 3);
        }
        if self.normal {
            planes(&view.normal, 3);
        }
        if self.depth {
            planes(&view.depth, 1);
        }
    }
}

impl Default for ChannelSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for ChannelSet {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        let mut set = ChannelSet {
            rgb: false,
            normal: false,
            depth: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let flag = match part {
                "rgb" => &mut set.rgb,
                "normal" => &mut set.normal,
                "depth" => &mut set.depth,
                other => return Err(TrainError::Config(format!("unknown channel `{other}`"))),
            };
            if *flag {
                return Err(TrainError::Config(format!("channel `{part}` listed twice")));
            }
            *flag = true;
        }
        if set.count() == 0 {
            return Err(TrainError::Config("channel selection is empty".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.rgb, "rgb"), (self.normal, "normal"), (self.depth, "depth")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}
