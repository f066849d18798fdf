use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Probability of drawing from a contiguous window instead of the whole clip.
pub const LOCAL_WINDOW_PROB: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Whether the local-window branch was taken.
    pub local: bool,
}

/// Draws `k + n_targets` distinct frame indices in random order, either from
/// the whole clip or from a random contiguous window of `window_len` frames
/// (widened if it could not hold the draw). The last `n_targets` are targets.
pub fn sample_training_views<R: Rng + ?Sized>(
    n_frames: usize,
    k: usize,
    n_targets: usize,
    window_len: usize,
    rng: &mut R,
) -> Result<ViewSample> {
    let need = k + n_targets;
    if k == 0 || n_targets == 0 {
        return Err(Error::config("views", "need at least one input and one target"));
    }
    if n_frames < need {
        return Err(Error::Invalid(format!(
            "scene has {n_frames} frames but {need} views were requested"
        )));
    }
    let local = rng.random_bool(LOCAL_WINDOW_PROB);
    let (start, len) = if local {
        let len = window_len.min(n_frames).max(need);
        (rng.random_range(0..=n_frames - len), len)
    } else {
        (0, n_frames)
    };
    let mut pool: Vec<usize> = (start..start + len).collect();
    let (chosen, _) = pool.partial_shuffle(rng, need);
    let targets = chosen[k..].to_vec();
    Ok(ViewSample {
        inputs: chosen[..k].to_vec(),
        targets,
        local,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn exact_fit_returns_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = sample_training_views(7, 6, 1, 30, &mut rng).unwrap();
            let mut all: Vec<usize> = s.inputs.iter().chain(&s.targets).copied().collect();
            all.sort();
            assert_eq!(all, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn too_few_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_training_views(5, 6, 1, 30, &mut rng).is_err());
    }
}
