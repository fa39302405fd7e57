//! Shared fixtures for the benchmarks.

use etc_core::expand::{build_dictionary, ExpansionConfig};
use etc_core::matchers::{score_dataset, Aggregation, InstanceScores, TokenEmbedder};
use etc_core::synth::{generate_dataset, SynthConfig};
use etc_core::{DescriptionDict, GroundingInstance};

pub struct Fixture {
    pub instances: Vec<GroundingInstance>,
    pub scores: Vec<InstanceScores>,
    pub dict: DescriptionDict,
    pub embedder: TokenEmbedder,
}

/// A synthetic benchmark split with its dictionary and score sequences.
pub fn fixture(n: usize, t: usize, c: usize) -> Fixture {
    let d = generate_dataset(&SynthConfig {
        n_instances: n,
        t,
        c,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config");
    let dict = build_dictionary(&d.instances, &d.truth.caption_provider(), &ExpansionConfig::default())
        .expect("echo captions cover every frame");
    let embedder = TokenEmbedder::with_dim(c);
    let scores = score_dataset(&d.instances, &dict, &embedder, Aggregation::Max).expect("complete dictionary");
    Fixture {
        instances: d.instances,
        scores,
        dict,
        embedder,
    }
}
