//! Byte-level language-modeling data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// A batch of `rows` sequences, each `seq_len` tokens, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn from_windows(windows: &[&[u8]]) -> Batch {
        let seq_len = windows[0].len() - 1;
        let mut inputs = Vec::with_capacity(windows.len() * seq_len);
        let mut targets = Vec::with_capacity(windows.len() * seq_len);
        for w in windows {
            assert_eq!(w.len(), seq_len + 1, "windows must share a length");
            inputs.extend(w[..seq_len].iter().map(|&b| u32::from(b)));
            targets.extend(w[1..].iter().map(|&b| u32::from(b)));
        }
        Batch { rows: windows.len(), seq_len, inputs, targets }
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.seq_len
    }
}

/// Raw bytes split at a fixed offset into training and held-out streams.
#[derive(Debug, Clone)]
pub struct Corpus {
    train: Vec<u8>,
    valid: Vec<u8>,
}

impl Corpus {
    pub fn split(bytes: &[u8], split_offset: usize) -> Result<Corpus, TrainError> {
        if bytes.is_empty() {
            return Err(TrainError::Corpus("corpus is empty".into()));
        }
        if split_offset == 0 || split_offset >= bytes.len() {
            return Err(TrainError::Corpus(format!(
                "split offset {split_offset} must lie strictly inside the {}-byte corpus",
                bytes.len()
            )));
        }
        Ok(Corpus { train: bytes[..split_offset].to_vec(), valid: bytes[split_offset..].to_vec() })
    }

    /// Holds out the trailing `fraction` of the bytes.
    pub fn split_fraction(bytes: &[u8], fraction: f64) -> Result<Corpus, TrainError> {
        let offset = ((bytes.len() as f64) * (1.0 - fraction)).round() as usize;
        Corpus::split(bytes, offset)
    }

    pub fn train(&self) -> &[u8] {
        &self.train
    }

    pub fn valid(&self) -> &[u8] {
        &self.valid
    }

    /// Random training windows; a pure function of `(seed, step)`.
    pub fn sample_batch(&self, rows: usize, seq_len: usize, seed: u64, step: usize) -> Result<Batch, TrainError> {
        if self.train.len() < seq_len + 1 {
            return Err(TrainError::Corpus(format!(
                "training split has {} bytes, need at least {}",
                self.train.len(),
                seq_len + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64 + 1);
        let last_start = self.train.len() - seq_len - 1;
        let windows: Vec<&[u8]> = (0..rows)
            .map(|_| {
                let start = rng.random_range(0..=last_start);
                &self.train[start..start + seq_len + 1]
            })
            .collect();
        Ok(Batch::from_windows(&windows))
    }

    /// Consecutive non-overlapping held-out windows, at most `max_windows`,
    /// grouped into batches of `rows`.
    pub fn validation_batches(&self, rows: usize, seq_len: usize, max_windows: usize) -> Result<Vec<Batch>, TrainError> {
        let windows: Vec<&[u8]> = self
            .valid
            .windows(seq_len + 1)
            .step_by(seq_len)
            .take(max_windows)
            .collect();
        if windows.is_empty() {
            return Err(TrainError::Corpus(format!(
                "held-out split has {} bytes, need at least {}",
                self.valid.len(),
                seq_len + 1
            )));
        }
        Ok(windows.chunks(rows.max(1)).map(Batch::from_windows).collect())
    }
}

/// Deterministic English-like text: a random lexicon, Zipfian word choice and
/// sticky word-to-word transitions, so there is structure to learn at both
/// the character and the word level.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> Vec<u8> {
    const LEXICON: usize = 400;
    const SUCCESSORS: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consonants = b"bcdfghjklmnprstvwz";
    let vowels = b"aeiou";
    let lexicon: Vec<Vec<u8>> = (0..LEXICON)
        .map(|i| {
            let syllables = 1 + (i % 3) + rng.random_range(0..2);
            let mut w = Vec::new();
            for _ in 0..syllables {
                w.push(consonants[rng.random_range(0..consonants.len())]);
                w.push(vowels[rng.random_range(0..vowels.len())]);
                if rng.random_bool(0.3) {
                    w.push(consonants[rng.random_range(0..consonants.len())]);
                }
            }
            w
        })
        .collect();
    // Zipf(1) over the lexicon via inverse CDF.
    let weights: Vec<f64> = (1..=LEXICON).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let successors: Vec<Vec<usize>> = (0..LEXICON)
        .map(|_| (0..SUCCESSORS).map(|_| rng.random_range(0..LEXICON)).collect())
        .collect();

    let mut out = Vec::with_capacity(bytes + 16);
    let mut word = 0usize;
    let mut sentence_left = 0usize;
    while out.len() < bytes {
        if sentence_left == 0 {
            sentence_left = rng.random_range(6..14);
            word = cdf.partition_point(|&c| c < rng.random::<f64>()).min(LEXICON - 1);
            let w = &lexicon[word];
            out.push(w[0].to_ascii_uppercase());
            out.extend_from_slice(&w[1..]);
        } else {
            word = if rng.random_bool(0.75) {
                successors[word][rng.random_range(0..SUCCESSORS)]
            } else {
                cdf.partition_point(|&c| c < rng.random::<f64>()).min(LEXICON - 1)
            };
            out.push(b' ');
            out.extend_from_slice(&lexicon[word]);
        }
        sentence_left -= 1;
        if sentence_left == 0 {
            out.extend_from_slice(if rng.random_bool(0.1) { b".\n" } else { b". " });
        }
    }
    out.truncate(bytes);
    out
}
