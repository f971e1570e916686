use clap::ValueEnum;

use caf_core::active::{LoopConfig, SetPolicy};
use caf_core::forge::ForgeConfig;
use caf_core::net::NetConfig;
use caf_core::trainer::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 180x50 six-character codes over 62 symbols, full-size network.
    Paper,
    /// 60x24 three-digit codes, small network.
    Mini,
}

pub struct Expanded {
    pub forge: ForgeConfig,
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub looping: LoopConfig,
}

impl Preset {
    pub fn expand(self) -> Expanded {
        self.expand_for(SetPolicy::Augment)
    }

    /// The paper preset's loop depends on the set policy: augmenting uses the
    /// constant-budget protocol, replacing uses the decaying one.
    pub fn expand_for(self, set_policy: SetPolicy) -> Expanded {
        match self {
            Preset::Paper => Expanded {
                forge: ForgeConfig::paper(),
                net: NetConfig::paper(),
                optim: OptimConfig::paper(),
                looping: match set_policy {
                    SetPolicy::Augment => LoopConfig::paper_exp1(),
                    SetPolicy::Replace => LoopConfig::paper_exp2(),
                },
            },
            Preset::Mini => Expanded {
                forge: ForgeConfig::mini(),
                net: NetConfig::mini(),
                optim: OptimConfig::mini(),
                looping: LoopConfig::mini().with_set_policy(set_policy),
            },
        }
    }
}
