//! From aggregated attention and alignment scores to calibrated heatmaps,
//! per-pixel class posteriors and label masks.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{ExponentReading, RunConfig};
use crate::elbo::{self, AlignmentScores, ElboEstimate, Parameterized};
use crate::objectives::ObjectiveKind;
use crate::toyscene::{collect_attention, Caption, ClassVocabulary, Scene, ToyDenoiser};
use crate::{resize, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHeatmap {
    pub class_id: usize,
    pub map: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorField {
    /// `(H, W, N)`, summing to one over the class axis.
    pub probs: Array3<f64>,
    /// 0 is background, `i + 1` the i-th class.
    pub label_mask: Array2<usize>,
    pub threshold: f64,
}

/// Mean of the attention columns in `span`, reshaped to `grid`.
pub fn extract_class_map(cross: &Array2<f64>, grid: (usize, usize), span: &[usize]) -> Result<Array2<f64>> {
    if span.is_empty() {
        return Err(Error::Config("class token span is empty".into()));
    }
    if let Some(&bad) = span.iter().find(|&&l| l >= cross.ncols()) {
        return Err(Error::Config(format!("token {bad} outside a {}-token caption", cross.ncols())));
    }
    if cross.nrows() != grid.0 * grid.1 {
        return Err(Error::shape(&[grid.0 * grid.1], &[cross.nrows()]));
    }
    let mean = cross.select(Axis(1), span).mean_axis(Axis(1)).expect("non-empty span");
    Ok(mean.into_shape_with_order(grid).expect("row count checked"))
}

/// `(v − min)/(max − min)`; a constant map becomes all zeros.
pub fn minmax_normalize(map: &Array2<f64>) -> Array2<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span > 0.0 {
        map.mapv(|v| (v - min) / span)
    } else {
        Array2::zeros(map.dim())
    }
}

/// Raises a normalized map to the calibration exponent of score `s`.
pub fn apply_calibration(map: &Array2<f64>, s: f64, reading: ExponentReading) -> Result<Array2<f64>> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Config(format!("alignment score must lie in (0, 1], got {s}")));
    }
    if s == 1.0 {
        return Ok(map.clone());
    }
    let exponent = match reading {
        ExponentReading::Root => 1.0 / s,
        ExponentReading::Power => s,
    };
    Ok(map.mapv(|v| v.powf(exponent)))
}

/// `h ← A·vec(h)` repeated `iterations` times, then min-max normalized.
pub fn enhance_with_self_attention(heatmap: &Array2<f64>, self_attn: &Array2<f64>, iterations: usize) -> Result<Array2<f64>> {
    let (h, w) = heatmap.dim();
    let n = h * w;
    if self_attn.dim() != (n, n) {
        return Err(Error::shape(&[n, n], &[self_attn.nrows(), self_attn.ncols()]));
    }
    for (i, row) in self_attn.rows().into_iter().enumerate() {
        let total = row.sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Numerical(format!("self-attention row {i} is not stochastic (sum {total})")));
        }
    }
    let mut v = heatmap.to_shape(n).expect("standard layout").to_owned();
    for _ in 0..iterations {
        v = self_attn.dot(&v);
    }
    Ok(minmax_normalize(&v.into_shape_with_order((h, w)).expect("n = h·w")))
}

/// Per-pixel softmax over the class maps, then thresholding into labels.
pub fn build_posterior(heatmaps: &[Array2<f64>], threshold: f64, softmax_temp: f64) -> Result<PosteriorField> {
    let first = heatmaps
        .first()
        .ok_or_else(|| Error::Config("posterior needs at least one heatmap".into()))?;
    let (h, w) = first.dim();
    if let Some(m) = heatmaps.iter().find(|m| m.dim() != (h, w)) {
        return Err(Error::shape(&[h, w], &[m.nrows(), m.ncols()]));
    }
    let n = heatmaps.len();
    let mut probs = Array3::zeros((h, w, n));
    let mut label_mask = Array2::zeros((h, w));
    let mut logits = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            for (c, m) in heatmaps.iter().enumerate() {
                logits[c] = m[(i, j)] / softmax_temp;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let mut best = (0, f64::NEG_INFINITY);
            for (c, l) in logits.iter().enumerate() {
                let p = (l - max).exp() / total;
                probs[(i, j, c)] = p;
                if p > best.1 {
                    best = (c, p);
                }
            }
            label_mask[(i, j)] = if best.1 < threshold { 0 } else { best.0 + 1 };
        }
    }
    Ok(PosteriorField {
        probs,
        label_mask,
        threshold,
    })
}

/// Token weights for generation: `w_i = 1 + β·(1 − S_i)`.
pub fn prompt_weights(scores: &AlignmentScores, beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("reweighting strength must be non-negative, got {beta}")));
    }
    Ok(scores.scores.iter().map(|s| 1.0 + beta * (1.0 - s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutput {
    pub posterior: PosteriorField,
    pub scores: AlignmentScores,
    pub estimates: Vec<ElboEstimate>,
    /// Final per-class maps fed to the posterior.
    pub heatmaps: Vec<ClassHeatmap>,
}

/// ELBO estimate of every candidate class, each conditioned on its own
/// single-class caption and sharing one noise stream.
pub fn class_elbos(scene: &Scene, vocab: &ClassVocabulary, cfg: &RunConfig) -> Result<Vec<ElboEstimate>> {
    let denoiser = ToyDenoiser::new(vocab, cfg.schedule, cfg.toy_params());
    let strategy = cfg.elbo.sampling();
    let noise_seed = cfg.elbo_noise_seed(scene.spec.seed);
    scene
        .classes
        .iter()
        .map(|&c| {
            let caption = Caption::for_classes(vocab, &[c])?;
            if cfg.objective == ObjectiveKind::Epsilon {
                elbo::estimate_elbo_with(&denoiser, &scene.latent, &caption, c, &strategy, &cfg.schedule, cfg.objective, noise_seed, cfg.elbo.antithetic)
            } else {
                let wrapped = Parameterized {
                    inner: &denoiser,
                    kind: cfg.objective,
                    schedule: cfg.schedule,
                };
                elbo::estimate_elbo_with(&wrapped, &scene.latent, &caption, c, &strategy, &cfg.schedule, cfg.objective, noise_seed, cfg.elbo.antithetic)
            }
        })
        .collect()
}

pub fn segment(scene: &Scene, vocab: &ClassVocabulary, cfg: &RunConfig) -> Result<SegmentOutput> {
    cfg.validate()?;
    let n = scene.num_classes();
    let grid = scene.grid();
    let denoiser = ToyDenoiser::new(vocab, cfg.schedule, cfg.toy_params());
    let timesteps = elbo::sample_timesteps(&cfg.attention.sampling())?;
    let attention = collect_attention(&denoiser, scene, &timesteps, cfg.attention_noise_seed(scene.spec.seed))?;

    let (estimates, scores) = if !cfg.calibration.enabled {
        (Vec::new(), AlignmentScores::identity(n))
    } else {
        let estimates = class_elbos(scene, vocab, cfg)?;
        let scores = match cfg.calibration.fixed_s {
            Some(s) => AlignmentScores::fixed(n, s, estimates.iter().map(|e| e.value).collect())?,
            None => elbo::alignment_scores(&estimates, cfg.elbo.gamma)?,
        };
        (estimates, scores)
    };

    let mut maps = Vec::with_capacity(n);
    for (i, span) in scene.caption.spans.iter().enumerate() {
        let a = minmax_normalize(&extract_class_map(&attention.cross, grid, span)?);
        let a = if cfg.calibration.enabled {
            apply_calibration(&a, scores.scores[i], cfg.calibration.reading)?
        } else {
            a
        };
        // image resolution equals the latent grid here, so this is the identity
        let a = resize::bilinear(a.view(), grid.0, grid.1);
        maps.push(enhance_with_self_attention(&a, &attention.self_attn, cfg.self_attention_iterations)?);
    }
    let posterior = build_posterior(&maps, cfg.threshold_for(n), cfg.softmax_temp)?;
    Ok(SegmentOutput {
        posterior,
        scores,
        estimates,
        heatmaps: scene.classes.iter().zip(maps).map(|(&class_id, map)| ClassHeatmap { class_id, map }).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn extract_examples() {
        let cross = Array2::from_shape_fn((4, 5), |(p, l)| (p * 5 + l) as f64);
        let single = extract_class_map(&cross, (2, 2), &[3]).unwrap();
        assert_eq!(single, array![[3.0, 8.0], [13.0, 18.0]]);
        let phrase = extract_class_map(&cross, (2, 2), &[1, 2, 4]).unwrap();
        for p in 0..4 {
            let brute = (cross[(p, 1)] + cross[(p, 2)] + cross[(p, 4)]) / 3.0;
            assert_relative_eq!(phrase[(p / 2, p % 2)], brute, max_relative = 1e-15);
        }
        let mut twin = cross.clone();
        let c0 = twin.column(0).to_owned();
        twin.column_mut(1).assign(&c0);
        assert_eq!(extract_class_map(&twin, (2, 2), &[0, 1]).unwrap(), extract_class_map(&twin, (2, 2), &[0]).unwrap());
        assert!(extract_class_map(&cross, (2, 2), &[]).is_err());
        assert!(extract_class_map(&cross, (2, 2), &[5]).is_err());
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&array![[0.0, 2.0, 4.0]]), array![[0.0, 0.5, 1.0]]);
        assert_eq!(minmax_normalize(&array![[3.0, 3.0], [3.0, 3.0]]), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn calibration_examples() {
        let m = array![[0.5, 0.25], [1.0, 0.0]];
        assert_eq!(apply_calibration(&m, 1.0, ExponentReading::Root).unwrap(), m);
        let c = apply_calibration(&m, 1.0 / 3.0, ExponentReading::Root).unwrap();
        assert_relative_eq!(c[(0, 0)], 0.125, max_relative = 1e-14);
        let p = apply_calibration(&m, 0.5, ExponentReading::Power).unwrap();
        assert_relative_eq!(p[(0, 1)], 0.5, max_relative = 1e-14);
        assert!(apply_calibration(&m, 0.0, ExponentReading::Root).is_err());
        assert!(apply_calibration(&m, -1.0, ExponentReading::Root).is_err());
    }

    #[test]
    fn enhancement_examples() {
        let h = array![[0.0, 0.3], [0.6, 1.0]];
        let id = Array2::eye(4);
        assert_eq!(enhance_with_self_attention(&h, &id, 1).unwrap(), minmax_normalize(&h));
        let uniform = Array2::from_elem((4, 4), 0.25);
        assert_eq!(enhance_with_self_attention(&h, &uniform, 1).unwrap(), Array2::<f64>::zeros((2, 2)));
        let bad = Array2::from_elem((4, 4), 0.3);
        assert!(matches!(enhance_with_self_attention(&h, &bad, 1), Err(Error::Numerical(_))));
        assert!(enhance_with_self_attention(&h, &Array2::eye(3), 1).is_err());
    }

    #[test]
    fn block_diagonal_attention_does_not_leak() {
        // pixels {0, 1} and {2, 3} form two blocks; mass in one stays there
        let a = array![
            [0.7, 0.3, 0.0, 0.0],
            [0.4, 0.6, 0.0, 0.0],
            [0.0, 0.0, 0.5, 0.5],
            [0.0, 0.0, 0.2, 0.8]
        ];
        let h = array![[1.0, 0.5], [0.0, 0.0]];
        let out = enhance_with_self_attention(&h, &a, 1).unwrap();
        assert_eq!(out[(1, 0)], 0.0);
        assert_eq!(out[(1, 1)], 0.0);
        // brute-force product on the first block: [0.85, 0.7] → normalized [1, 0.7/0.85]
        assert_relative_eq!(out[(0, 0)], 1.0);
        assert_relative_eq!(out[(0, 1)], 0.7 / 0.85, max_relative = 1e-14);
    }

    #[test]
    fn posterior_examples() {
        let one = build_posterior(&[array![[0.2, 0.9]]], 0.5, 1.0).unwrap();
        assert!(one.probs.iter().all(|&p| p == 1.0));
        assert_eq!(one.label_mask, array![[1, 1]]);

        let m = array![[0.1, 0.4], [0.9, 0.0]];
        let eq = build_posterior(&[m.clone(), m.clone()], 0.6, 1.0).unwrap();
        assert!(eq.probs.iter().all(|&p| p == 0.5));
        assert!(eq.label_mask.iter().all(|&l| l == 0));

        // hand softmax: pixel (0,0) values (1, 0) → e/(e+1) = 0.7310585786300049
        let a = array![[1.0, 0.0], [0.5, 0.25]];
        let b = array![[0.0, 1.0], [0.5, 0.75]];
        let p = build_posterior(&[a, b], 0.6, 1.0).unwrap();
        assert_relative_eq!(p.probs[(0, 0, 0)], 0.731_058_578_630_004_9, max_relative = 1e-14);
        assert_relative_eq!(p.probs[(0, 1, 1)], 0.731_058_578_630_004_9, max_relative = 1e-14);
        // (1,1): values (0.25, 0.75) → 1/(1+e^0.5) = 0.3775406687981454
        assert_relative_eq!(p.probs[(1, 1, 0)], 0.377_540_668_798_145_4, max_relative = 1e-14);
        assert_eq!(p.label_mask, array![[1, 2], [0, 2]]);
        assert!(build_posterior(&[], 0.5, 1.0).is_err());
    }

    #[test]
    fn prompt_weight_examples() {
        let s = AlignmentScores {
            gamma: 1.0 / 3.0,
            scores: vec![1.0, 1.0 / 3.0],
            raw: vec![],
        };
        assert_eq!(prompt_weights(&s, 0.0).unwrap(), vec![1.0, 1.0]);
        let w = prompt_weights(&s, 1.0).unwrap();
        assert_eq!(w[0], 1.0);
        assert_relative_eq!(w[1], 5.0 / 3.0, max_relative = 1e-15);
        assert!(prompt_weights(&s, -1.0).is_err());
    }

    fn arb_maps(n: usize) -> impl Strategy<Value = Vec<Array2<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0..1.0f64, 9), n)
            .prop_map(|v| v.into_iter().map(|d| Array2::from_shape_vec((3, 3), d).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn calibration_preserves_order(map in prop::collection::vec(0.0..=1.0f64, 16), s in 0.05..=1.0f64) {
            let m = Array2::from_shape_vec((4, 4), map).unwrap();
            for reading in [ExponentReading::Root, ExponentReading::Power] {
                let c = apply_calibration(&m, s, reading).unwrap();
                for (a, ca) in m.iter().zip(c.iter()) {
                    for (b, cb) in m.iter().zip(c.iter()) {
                        if a < b {
                            prop_assert!(ca <= cb);
                        }
                    }
                }
            }
        }

        #[test]
        fn posterior_rows_sum_to_one(maps in arb_maps(4), temp in 0.1..3.0f64) {
            let p = build_posterior(&maps, 0.3, temp).unwrap();
            for row in p.probs.lanes(Axis(2)) {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_threshold_grows_background(maps in arb_maps(3), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = build_posterior(&maps, lo, 1.0).unwrap();
            let b = build_posterior(&maps, hi, 1.0).unwrap();
            for (la, lb) in a.label_mask.iter().zip(b.label_mask.iter()) {
                if *la == 0 {
                    prop_assert_eq!(*lb, 0);
                }
            }
        }

        #[test]
        fn permuting_classes_permutes_posterior(maps in arb_maps(3)) {
            let perm = [2usize, 0, 1];
            let permuted: Vec<_> = perm.iter().map(|&i| maps[i].clone()).collect();
            let a = build_posterior(&maps, 0.4, 1.0).unwrap();
            let b = build_posterior(&permuted, 0.4, 1.0).unwrap();
            for ((i, j), &la) in a.label_mask.indexed_iter() {
                for (k, &src) in perm.iter().enumerate() {
                    prop_assert!((b.probs[(i, j, k)] - a.probs[(i, j, src)]).abs() < 1e-15);
                }
                let lb = b.label_mask[(i, j)];
                if la == 0 {
                    prop_assert_eq!(lb, 0);
                } else {
                    prop_assert_eq!(perm[lb - 1], la - 1);
                }
            }
        }

        #[test]
        fn weaker_class_loses_ground_at_ties(v in 0.01..0.99f64, s2 in 0.05..0.99f64) {
            let m1 = Array2::from_elem((1, 1), v);
            let plain = build_posterior(&[m1.clone(), m1.clone()], 0.0, 1.0).unwrap();
            let m2 = apply_calibration(&m1, s2, ExponentReading::Root).unwrap();
            let cal = build_posterior(&[m1, m2], 0.0, 1.0).unwrap();
            prop_assert!(cal.probs[(0, 0, 0)] > plain.probs[(0, 0, 0)]);
        }
    }
}
