//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sdpn_core::data::{generate_synthetic_corpus, CorpusConfig, UnlabeledUtterance};
use sdpn_core::scoring::{EmbeddingStore, Trial, TrialLabel, TrialList};
use sdpn_core::RealMatrix;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> RealMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    RealMatrix::from_vec(rows, cols, data).expect("positive shape")
}

pub fn corpus(speakers: usize, utts: usize) -> Vec<UnlabeledUtterance> {
    let cfg = CorpusConfig {
        num_speakers: speakers,
        utts_per_speaker: utts,
        ..CorpusConfig::default()
    };
    generate_synthetic_corpus(&cfg)
        .expect("valid corpus config")
        .iter()
        .map(|u| u.without_label())
        .collect()
}

/// `n` random embeddings named `u0..`, plus every pair among the first `m` as trials.
pub fn store_and_trials(n: usize, dim: usize, m: usize, seed: u64) -> (EmbeddingStore, TrialList) {
    let vectors = gaussian(n, dim, seed);
    let mut store = EmbeddingStore::new();
    for (i, row) in vectors.iter_rows().enumerate() {
        store.insert(format!("u{i}"), row.to_vec()).expect("non-zero row");
    }
    let mut trials = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            trials.push(Trial {
                enroll: format!("u{i}"),
                test: format!("u{j}"),
                label: if (i + j) % 7 == 0 { TrialLabel::Target } else { TrialLabel::Nontarget },
            });
        }
    }
    (store, TrialList { trials })
}
