use rand::seq::index::sample;

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::numerics::rng;

/// Windows of record indices, each inside a single movie and in time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: Vec<Vec<usize>>,
    /// Movies with fewer than `N` clips.
    pub skipped_movies: usize,
}

/// How windows are drawn from a movie.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSampling {
    pub size: usize,
    pub consecutive: bool,
    pub stride: usize,
    pub seed: u64,
}

impl WindowSampling {
    pub fn consecutive(size: usize) -> Self {
        Self {
            size,
            consecutive: true,
            stride: 1,
            seed: 0,
        }
    }
}

/// Consecutive windows slide over each movie with the configured stride.
/// Non-consecutive sampling draws the same number of windows per movie,
/// each `N` records chosen uniformly without replacement and kept in time
/// order. Movies shorter than `N` are skipped and counted.
pub fn sample_windows(corpus: &Corpus, sampling: WindowSampling) -> Result<WindowSet> {
    let WindowSampling {
        size,
        consecutive,
        stride,
        seed,
    } = sampling;
    if size == 0 || stride == 0 {
        return Err(Error::invalid("window size and stride must be positive"));
    }
    let mut rng = rng::fork(seed, "windows");
    let mut windows = Vec::new();
    let mut skipped_movies = 0;
    for movie in corpus.movies() {
        let len = movie.len();
        if len < size {
            skipped_movies += 1;
            log::warn!(
                "movie {} has {len} clips, fewer than window size {size}; skipped",
                corpus.records()[movie.start].movie_id
            );
            continue;
        }
        let count = (len - size) / stride + 1;
        for w in 0..count {
            if consecutive {
                let start = movie.start + w * stride;
                windows.push((start..start + size).collect());
            } else {
                let mut picked = sample(&mut rng, len, size).into_vec();
                picked.sort_unstable();
                windows.push(picked.into_iter().map(|i| movie.start + i).collect());
            }
        }
    }
    Ok(WindowSet {
        windows,
        skipped_movies,
    })
}
