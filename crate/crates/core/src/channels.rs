//! The six monitored output channels (gas and liquid holdup of each well) and
//! their extraction from logged corpora.

use serde::{Deserialize, Serialize};

use crate::doe::Corpus;
use crate::plant::{TrajectorySample, N_WELLS};
use crate::structure::Segment;

/// Names of the exogenous inputs, in regressor order.
pub const EXOGENOUS_NAMES: [&str; 4] = ["Qg1", "Qg2", "Qg3", "Ppump"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Holdup {
    Mg,
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Channel {
    /// Zero-based well index.
    pub well: usize,
    pub holdup: Holdup,
}

impl Channel {
    pub fn all() -> Vec<Channel> {
        (0..N_WELLS)
            .flat_map(|well| {
                [Holdup::Mg, Holdup::Ml]
                    .into_iter()
                    .map(move |holdup| Channel { well, holdup })
            })
            .collect()
    }

    pub fn index(&self) -> usize {
        self.well * 2 + matches!(self.holdup, Holdup::Ml) as usize
    }

    /// File stem such as `well1_mg`.
    pub fn name(&self) -> String {
        let var = match self.holdup {
            Holdup::Mg => "mg",
            Holdup::Ml => "ml",
        };
        format!("well{}_{}", self.well + 1, var)
    }

    pub fn parse(name: &str) -> Option<Channel> {
        Channel::all().into_iter().find(|c| c.name() == name)
    }

    pub fn value(&self, s: &TrajectorySample) -> f64 {
        s.channel(self.well, matches!(self.holdup, Holdup::Ml) as usize)
    }
}

pub fn exogenous_of(s: &TrajectorySample) -> Vec<f64> {
    s.inputs.exogenous().to_vec()
}

/// One segment per plateau of the corpus.
pub fn corpus_segments(corpus: &Corpus, channel: Channel) -> Vec<Segment> {
    (0..corpus.n_plateaus())
        .map(|e| samples_segment(corpus.plateau(e), channel))
        .collect()
}

pub fn samples_segment(samples: &[TrajectorySample], channel: Channel) -> Segment {
    Segment {
        inputs: samples.iter().map(exogenous_of).collect(),
        output: samples.iter().map(|s| channel.value(s)).collect(),
    }
}
