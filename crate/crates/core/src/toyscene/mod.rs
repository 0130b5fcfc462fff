//! Synthetic grid scenes and a constructed conditional denoiser with
//! cross- and self-attention.
//!
//! Pixel features are orthonormal class embeddings plus small texture noise.
//! The denoiser's keys are class embeddings scaled by the class rarity, so
//! rare classes attract flatter attention and explain their pixels worse.

mod denoiser;
mod scene;
mod vocabulary;

pub use denoiser::{collect_attention, mean_mass_over_mask, AggregatedAttention, CrossAttentionStack, ToyDenoiser, ToyParams};
pub use scene::{
    base_scene_spec, bias_variants, biased_placements, generate_scene, BiasMode, BiasSpec, Caption, CaptionToken, Paint,
    Placement, Rect, Scene, SceneSpec, TokenKind, DEFAULT_GRID, DEFAULT_TEXTURE_STD,
};
pub use vocabulary::{ClassVocabulary, VocabEntry, COMMON_CLASSES, DEFAULT_DIM, DEFAULT_RARITY, RARE_CLASSES};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elbo::{estimate_elbo, sample_timesteps, SamplingStrategy, StrategyKind};
    use crate::objectives::ObjectiveKind;
    use crate::schedule::{Schedule, T_MIN};
    use ndarray::Array2;

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::standard(DEFAULT_DIM, DEFAULT_RARITY, 0).unwrap()
    }

    fn two_boxes(a: usize, b: usize) -> SceneSpec {
        SceneSpec {
            name: "pair".into(),
            grid: (16, 16),
            placements: vec![
                Placement {
                    paint: Paint::Class(a),
                    rect: Rect::new(4, 1, 8, 6),
                },
                Placement {
                    paint: Paint::Class(b),
                    rect: Rect::new(4, 9, 8, 6),
                },
            ],
            bias: BiasSpec::NONE,
            seed: 13,
            texture_std: DEFAULT_TEXTURE_STD,
        }
    }

    fn check_stochastic(m: &Array2<f64>) {
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let v = vocab();
        let scene = generate_scene(&base_scene_spec(&v, 0, 0).unwrap(), &v).unwrap();
        let d = ToyDenoiser::new(&v, Schedule::default(), ToyParams::default());
        for &t in &[T_MIN, 0.1, 0.5, 0.95] {
            let zt = d.schedule.add_noise(&scene.latent, t, &crate::elbo::NoiseStream::new(1).sample(0, scene.latent.dim())).unwrap().zt;
            let (_, stack) = d.forward(&zt, t, &scene.caption).unwrap();
            assert_eq!(stack.layer_resolutions, vec![(16, 16), (8, 8)]);
            stack.cross.iter().chain(&stack.self_attn).for_each(check_stochastic);
        }
        let ts = sample_timesteps(&SamplingStrategy::new(StrategyKind::Small, 10, 0)).unwrap();
        let agg = collect_attention(&d, &scene, &ts, 4).unwrap();
        check_stochastic(&agg.cross);
        check_stochastic(&agg.self_attn);
    }

    #[test]
    fn full_grid_class_wins_every_pixel() {
        let v = vocab();
        let spec = SceneSpec {
            placements: vec![Placement {
                paint: Paint::Class(2),
                rect: Rect::new(0, 0, 16, 16),
            }],
            ..two_boxes(0, 1)
        };
        let scene = generate_scene(&spec, &v).unwrap();
        let d = ToyDenoiser::new(&v, Schedule::default(), ToyParams::default());
        let agg = collect_attention(&d, &scene, &[T_MIN], 0).unwrap();
        let class_col = scene.caption.spans[0][0];
        for row in agg.cross.rows() {
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, class_col);
        }
    }

    #[test]
    fn one_layer_one_step_aggregation_is_identity() {
        let v = vocab();
        let scene = generate_scene(&two_boxes(0, 1), &v).unwrap();
        let d = ToyDenoiser::new(&v, Schedule::default(), ToyParams::default());
        let zt = d.schedule.add_noise(&scene.latent, 0.05, &crate::elbo::NoiseStream::new(0).sample(0, scene.latent.dim())).unwrap().zt;
        let (_, mut stack) = d.forward(&zt, 0.05, &scene.caption).unwrap();
        stack.cross.truncate(1);
        stack.layer_resolutions.truncate(1);
        let agg = stack.aggregate((16, 16));
        assert_eq!(agg.cross, stack.cross[0]);
        // two identical layers average to either
        stack.cross.push(stack.cross[0].clone());
        stack.layer_resolutions.push((16, 16));
        let agg2 = stack.aggregate((16, 16));
        assert!(agg2.cross.iter().zip(stack.cross[0].iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn swapping_equal_classes_is_symmetric() {
        // same geometry with the two class colors exchanged; orthonormal
        // embeddings make the relabeled attention maps coincide
        let v = vocab();
        let d = ToyDenoiser::new(&v, Schedule::default(), ToyParams::default());
        let mut spec = two_boxes(0, 1);
        spec.texture_std = 0.0;
        let s1 = generate_scene(&spec, &v).unwrap();
        for p in spec.placements.iter_mut() {
            p.paint = match p.paint {
                Paint::Class(0) => Paint::Class(1),
                _ => Paint::Class(0),
            };
        }
        let s2 = generate_scene(&spec, &v).unwrap();
        assert_eq!(s2.classes, vec![1, 0]);
        for t in [T_MIN, 0.05, 0.3] {
            let a1 = d.forward(&s1.latent, t, &s1.caption).unwrap().1.aggregate((16, 16));
            let a2 = d.forward(&s2.latent, t, &s2.caption).unwrap().1.aggregate((16, 16));
            let worst = a1.cross.iter().zip(a2.cross.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-6, "t={t}: {worst}");
        }
    }

    #[test]
    fn rare_class_costs_more_elbo() {
        let v = vocab();
        let rare = v.rare_ids()[0];
        let scene = generate_scene(&two_boxes(rare, 0), &v).unwrap();
        let schedule = Schedule::default();
        let d = ToyDenoiser::new(&v, schedule, ToyParams::default());
        let strategy = SamplingStrategy::default();
        let elb = |c: usize| {
            let caption = Caption::for_classes(&v, &[c]).unwrap();
            estimate_elbo(&d, &scene.latent, &caption, c, &strategy, &schedule, ObjectiveKind::Epsilon, 7)
                .unwrap()
                .value
        };
        assert!(elb(rare) > elb(0));
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let v = vocab();
        let scene = generate_scene(&two_boxes(0, 1), &v).unwrap();
        let d = ToyDenoiser::new(&v, Schedule::default(), ToyParams::default());
        let mut caption = scene.caption.clone();
        caption.tokens[0].text = "the".into();
        assert!(matches!(d.forward(&scene.latent, 0.1, &caption), Err(crate::Error::Vocabulary(_))));
        let mut caption = scene.caption.clone();
        caption.tokens[3].kind = TokenKind::Class(99);
        assert!(matches!(d.forward(&scene.latent, 0.1, &caption), Err(crate::Error::Vocabulary(_))));
    }

    #[test]
    fn shrinking_never_raises_target_mass() {
        let v = vocab();
        let d = ToyDenoiser::new(&v, Schedule::default(), ToyParams::default());
        let ts = sample_timesteps(&SamplingStrategy::new(StrategyKind::Small, 10, 0)).unwrap();
        for base_index in 0..4 {
            let base = base_scene_spec(&v, base_index, 21).unwrap();
            // measured over the unbiased footprint: a mean over the shrinking
            // mask itself is a subset mean and moves with per-pixel noise
            let footprint = generate_scene(&base, &v).unwrap().gt_masks[0].clone();
            let mut last = f64::INFINITY;
            for step in 0..8 {
                let m = step as f64 * 0.1;
                let spec = SceneSpec {
                    bias: BiasSpec::new(BiasMode::SmallSize, m),
                    ..base.clone()
                };
                let s = generate_scene(&spec, &v).unwrap();
                let agg = collect_attention(&d, &s, &ts, 2).unwrap();
                let mass = mean_mass_over_mask(&agg.cross, &s.caption.spans[0], &footprint);
                assert!(mass <= last + 1e-9, "scene {base_index}, m={m}: {mass} > {last}");
                last = mass;
            }
        }
    }
}
