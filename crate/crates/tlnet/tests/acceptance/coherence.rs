//! Coherence score and reweighting contracts on fuzzed feature pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlnet_core::tlnet::{coherence_scores, reweight, RoiFeaturePair};
use tlnet_core::Tensor4;

use crate::Outcome;

const PAIRS: usize = 100_000;
const SCALE_TOL: f64 = 1e-12;

fn random_map(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    // Mixed magnitudes, with the odd all-zero channel.
    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
    let mut t = Tensor4::from_vec(
        dims,
        (0..dims.iter().product())
            .map(|_| scale * rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    if rng.gen_bool(0.05) {
        let per = dims[2] * dims[3];
        let c = rng.gen_range(0..dims[1]);
        t.data_mut()[c * per..(c + 1) * per]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    t
}

fn channel_norms(t: &Tensor4) -> Vec<f64> {
    let per = t.h() * t.w();
    t.data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn check_pair(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let dims = [
        1,
        rng.gen_range(1..6),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    ];
    let pair = RoiFeaturePair::new(random_map(rng, dims), random_map(rng, dims)).unwrap();
    let s = coherence_scores(&pair).scores;
    if let Some(v) = s.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(format!("score {v} outside [-1, 1]"));
    }

    // Identical non-zero inputs.
    let mut same = random_map(rng, dims);
    same.data_mut()
        .iter_mut()
        .for_each(|v| *v += 1e-3 * v.signum() + 1e-3);
    let twin = RoiFeaturePair::new(same.clone(), same).unwrap();
    if let Some(v) = coherence_scores(&twin).scores.iter().find(|v| **v != 1.0) {
        return Err(format!("identical inputs scored {v}"));
    }

    // Positive per-channel scaling of either side.
    let per = dims[2] * dims[3];
    let mut scaled = pair.clone();
    for c in 0..dims[1] {
        let (kl, kr) = (
            10f64.powf(rng.gen_range(-3.0..3.0)),
            10f64.powf(rng.gen_range(-3.0..3.0)),
        );
        scaled.left.data_mut()[c * per..(c + 1) * per]
            .iter_mut()
            .for_each(|v| *v *= kl);
        scaled.right.data_mut()[c * per..(c + 1) * per]
            .iter_mut()
            .for_each(|v| *v *= kr);
    }
    let s2 = coherence_scores(&scaled).scores;
    // Channels scaled into the zero-norm guard legitimately change.
    let guarded = |p: &RoiFeaturePair, c: usize| {
        let (l, r) = (channel_norms(&p.left)[c], channel_norms(&p.right)[c]);
        l * r <= 1e-6
    };
    for c in 0..dims[1] {
        if guarded(&pair, c) || guarded(&scaled, c) {
            continue;
        }
        if (s[c] - s2[c]).abs() > SCALE_TOL {
            return Err(format!("scaling moved score {} -> {}", s[c], s2[c]));
        }
    }

    // Reweighting never grows a channel.
    let rw = reweight(&pair, &coherence_scores(&pair)).unwrap();
    for (before, after) in [(&pair.left, &rw.left), (&pair.right, &rw.right)] {
        for (b, a) in channel_norms(before).iter().zip(channel_norms(after)) {
            if a > *b {
                return Err(format!("channel norm grew {b} -> {a}"));
            }
        }
    }
    Ok(())
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x636f_6865);
    for i in 0..PAIRS {
        if let Err(e) = check_pair(&mut rng) {
            return Outcome::new(false, format!("pair {i}: {e}"));
        }
    }
    Outcome::new(
        true,
        format!("{PAIRS} pairs: scores in [-1, 1], twins score 1, scale invariance within {SCALE_TOL}, reweighted norms never grow"),
    )
}
