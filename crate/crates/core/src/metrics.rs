//! Scale-invariant SNR and best-permutation scoring.
//!
//! A perfect reconstruction (zero residual) scores `f64::INFINITY`; an
//! all-zero estimate scores `f64::NEG_INFINITY`.

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::perm::permutations;

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    } else {
        10.0 * (num / den).log10()
    }
}

fn check_lengths(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::invalid("empty signals"));
    }
    Ok(())
}

/// SI-SNR of `est` against `reference` in dB, on raw sample slices.
pub fn si_snr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(est, reference)?;
    let s = zero_mean(reference);
    let e = zero_mean(est);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = dot(&e, &s) / ss;
    let target: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let noise: f64 = e
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ratio_db(dot(&target, &target), noise))
}

pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_samples(est.samples(), reference.samples())
}

pub fn si_snr_improvement(est: &Waveform, reference: &Waveform, mixture: &Waveform) -> Result<f64> {
    Ok(si_snr(est, reference)? - si_snr(mixture, reference)?)
}

/// Plain SNR `10 log10(‖s‖² / ‖s − ŝ‖²)`.
pub fn snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_lengths(est.samples(), reference.samples())?;
    let s = reference.samples();
    let ss = dot(s, s);
    if ss == 0.0 {
        return Err(Error::ZeroReference);
    }
    let err: f64 = est
        .samples()
        .iter()
        .zip(s)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ratio_db(ss, err))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// `permutation[r]` is the estimate scored against reference `r`.
    pub permutation: Vec<usize>,
    pub si_snr: Vec<f64>,
    pub si_snri: Vec<f64>,
    pub snr: Vec<f64>,
}

impl ScoreReport {
    pub fn mean_si_snr(&self) -> f64 {
        mean(&self.si_snr)
    }

    pub fn mean_si_snri(&self) -> f64 {
        mean(&self.si_snri)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Median with the upper-middle convention averaged for even lengths.
pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores estimates under the output-to-reference assignment that maximises
/// mean SI-SNR (ties to the lexicographically first permutation).
pub fn score_with_permutation(ests: &[Waveform], refs: &[Waveform], mixture: &Waveform) -> Result<ScoreReport> {
    if ests.len() != refs.len() || refs.is_empty() {
        return Err(Error::shape(format!(
            "{} estimates for {} references",
            ests.len(),
            refs.len()
        )));
    }
    let c = refs.len();
    // pair[e][r] = SI-SNR of estimate e against reference r
    let mut pair = vec![vec![0.0; c]; c];
    for (e, est) in ests.iter().enumerate() {
        for (r, reference) in refs.iter().enumerate() {
            pair[e][r] = si_snr(est, reference)?;
        }
    }
    // Infinite scores (exact matches) are counted before finite ones are
    // summed, so one perfect pair cannot hide a wrong assignment elsewhere.
    let key = |perm: &[usize]| {
        let mut inf = 0i64;
        let mut finite = 0.0;
        for (r, &e) in perm.iter().enumerate() {
            match pair[e][r] {
                v if v == f64::INFINITY => inf += 1,
                v if v == f64::NEG_INFINITY => inf -= 1,
                v => finite += v,
            }
        }
        (inf, finite)
    };
    let mut best: Option<((i64, f64), Vec<usize>)> = None;
    for perm in permutations(c) {
        let k = key(&perm);
        let better = match &best {
            None => true,
            Some((b, _)) => k.0 > b.0 || (k.0 == b.0 && (k.1 > b.1 || (b.1.is_nan() && !k.1.is_nan()))),
        };
        if better {
            best = Some((k, perm));
        }
    }
    let (_, permutation) = best.expect("at least one permutation");
    let mut si = Vec::with_capacity(c);
    let mut sii = Vec::with_capacity(c);
    let mut plain = Vec::with_capacity(c);
    for (r, &e) in permutation.iter().enumerate() {
        si.push(pair[e][r]);
        sii.push(pair[e][r] - si_snr(mixture, &refs[r])?);
        plain.push(snr(&ests[e], &refs[r])?);
    }
    Ok(ScoreReport {
        permutation,
        si_snr: si,
        si_snri: sii,
        snr: plain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wav(x: Vec<f64>) -> Waveform {
        Waveform::new(x, 8000).unwrap()
    }

    fn add(a: &[f64], b: &[f64], k: f64) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + k * y).collect()
    }

    #[test]
    fn orthogonal_equal_power_noise_is_zero_db() {
        let s = [1.0, -1.0, 1.0, -1.0];
        let n = [1.0, 1.0, -1.0, -1.0];
        let v = si_snr_samples(&add(&s, &n, 1.0), &s).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn tenth_power_noise_is_ten_db() {
        let s = [1.0, -1.0, 1.0, -1.0];
        let n = [1.0, 1.0, -1.0, -1.0];
        // ‖s‖² = 4, so ‖k n‖² = 0.4 needs k² = 0.1
        let k = 0.1f64.sqrt();
        let v = si_snr_samples(&add(&s, &n, k), &s).unwrap();
        assert!((v - 10.0).abs() < 1e-9);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = s.iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
        let base = si_snr_samples(&e, &s).unwrap();
        for alpha in [0.1, 10.0] {
            let scaled: Vec<f64> = e.iter().map(|x| alpha * x).collect();
            assert!((si_snr_samples(&scaled, &s).unwrap() - base).abs() < 1e-9);
            let sref: Vec<f64> = s.iter().map(|x| alpha * x).collect();
            assert!((si_snr_samples(&e, &sref).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn errors_and_sentinels() {
        assert!(matches!(si_snr_samples(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::ZeroReference)));
        assert!(si_snr_samples(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(si_snr_samples(&[2.0, -2.0], &[1.0, -1.0]).unwrap(), f64::INFINITY);
        assert_eq!(si_snr_samples(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn improvement_examples() {
        let s = vec![1.0, -1.0, 1.0, -1.0];
        let n = vec![1.0, 1.0, -1.0, -1.0];
        let mix = wav(add(&s, &n, 1.0));
        let reference = wav(s.clone());
        assert_eq!(si_snr_improvement(&mix, &reference, &mix).unwrap(), 0.0);
        let est = wav(add(&s, &n, 0.1f64.sqrt()));
        let imp = si_snr_improvement(&est, &reference, &mix).unwrap();
        assert!((imp - 10.0).abs() < 1e-9);
    }

    #[test]
    fn matches_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Oracle: cos² of the angle between zero-mean signals.
            let s0 = zero_mean(&s);
            let e0 = zero_mean(&e);
            let cos2 = dot(&s0, &e0).powi(2) / (dot(&s0, &s0) * dot(&e0, &e0));
            let oracle = 10.0 * (cos2 / (1.0 - cos2)).log10();
            assert!((si_snr_samples(&e, &s).unwrap() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn swapped_estimates_recover_permutation() {
        let a = wav(vec![1.0, -1.0, 0.5, 0.0]);
        let b = wav(vec![0.0, 1.0, 1.0, -2.0]);
        let mix = wav(add(a.samples(), b.samples(), 1.0));
        let r = score_with_permutation(&[b.clone(), a.clone()], &[a, b], &mix).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        assert!(r.si_snr.iter().all(|v| *v == f64::INFINITY));
    }

    #[test]
    fn three_source_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let refs: Vec<Waveform> = (0..3)
            .map(|_| wav((0..200).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let ests: Vec<Waveform> = [2, 0, 1]
            .iter()
            .map(|&i| {
                wav(refs[i]
                    .samples()
                    .iter()
                    .map(|x| x + rng.random_range(-0.8..0.8))
                    .collect())
            })
            .collect();
        let mix = wav((0..200).map(|j| refs.iter().map(|r| r.samples()[j]).sum()).collect());
        let report = score_with_permutation(&ests, &refs, &mix).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut best_perm = vec![];
        for p in permutations(3) {
            let m: f64 = (0..3).map(|r| si_snr(&ests[p[r]], &refs[r]).unwrap()).sum::<f64>() / 3.0;
            if m > best {
                best = m;
                best_perm = p;
            }
        }
        assert_eq!(report.permutation, best_perm);
        assert_eq!(report.permutation, vec![1, 2, 0]);
        assert!((report.mean_si_snr() - best).abs() < 1e-12);
        let identity: f64 = (0..3)
            .map(|r| si_snr_improvement(&ests[r], &refs[r], &mix).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!(report.mean_si_snri() >= identity);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn si_snr_ignores_scale(seed in 0u64..1000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = s.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let base = si_snr_samples(&e, &s).unwrap();
            let es: Vec<f64> = e.iter().map(|v| v * a).collect();
            let ss: Vec<f64> = s.iter().map(|v| v * b).collect();
            proptest::prop_assert!((si_snr_samples(&es, &ss).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn best_permutation_survives_reordering(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs: Vec<Waveform> = (0..3)
                .map(|_| wav((0..300).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let mix = wav((0..300).map(|i| refs.iter().map(|r| r.samples()[i]).sum()).collect());
            let ests = vec![refs[2].clone(), refs[0].clone(), refs[1].clone()];
            let r = score_with_permutation(&ests, &refs, &mix).unwrap();
            proptest::prop_assert_eq!(r.permutation, vec![1, 2, 0]);
        }
    }
}
