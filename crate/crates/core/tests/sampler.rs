mod common;

use common::{jittered_dit, random_mel, small_phoneme_classifier};
use inpaint_core::diffusion::ScheduleConfig;
use inpaint_core::guidance::{GuidanceConfig, GuidanceMode, TokenSequence};
use inpaint_core::mask::FrameMask;
use inpaint_core::models::ConditionInput;
use inpaint_core::sampler::{inpaint, CfgMode, Guide, SamplerOptions};
use inpaint_core::Real;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample<T: Real>(
    seed: u64,
    frames: usize,
    mask: &FrameMask,
    gcfg: &GuidanceConfig,
    mode: CfgMode,
    guided: bool,
) -> (inpaint_core::audio::MelSpectrogram<T>, inpaint_core::sampler::SampleTrace) {
    let dit = jittered_dit::<T>(1);
    let clf = small_phoneme_classifier::<T>(2);
    let tokens = TokenSequence::new(vec![1, 3, 2], 4).unwrap();
    let sch = ScheduleConfig::rescaled(8).build::<T>().unwrap();
    let x0 = random_mel::<T>(frames, seed);
    let cond = ConditionInput::observed(&x0, mask, None).unwrap();
    let guide = guided.then_some(Guide {
        classifier: &clf,
        tokens: &tokens,
    });
    let opts = SamplerOptions {
        cfg_mode: mode,
        trace: true,
        clamp: true,
    };
    inpaint(&dit, &cond, mask, guide, gcfg, &sch, &opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn mask_strategy() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (4usize..14).prop_flat_map(|n| (Just(n), prop::collection::vec(any::<bool>(), n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn observed_frames_are_copied_exactly((frames, flags) in mask_strategy(), seed in any::<u64>(), w1 in -1.0f64..2.0) {
        let m = FrameMask::from_flags(flags);
        let gcfg = GuidanceConfig::guided(w1, 1.0, GuidanceMode::Phoneme);
        let (out, trace) = sample::<f32>(seed, frames, &m, &gcfg, CfgMode::Combined, true);
        let x0 = random_mel::<f32>(frames, seed);
        for r in 0..80 {
            for c in 0..frames {
                if m.is_observed(c) {
                    prop_assert_eq!(out.values().at(r, c).to_bits(), x0.at(r, c).to_bits());
                } else {
                    prop_assert!(out.values().at(r, c).abs() <= 1.0);
                }
            }
        }
        let ts: Vec<usize> = trace.records.iter().map(|r| r.t).collect();
        prop_assert_eq!(ts, (0..8).rev().collect::<Vec<_>>());
    }

    #[test]
    fn cfg_endpoints_reduce_to_single_passes(seed in any::<u64>()) {
        let m = FrameMask::from_ranges(10, &[3..7]).unwrap();
        let (c0, _) = sample::<f32>(seed, 10, &m, &GuidanceConfig::unguided(0.0), CfgMode::Combined, false);
        let (c1, _) = sample::<f32>(seed, 10, &m, &GuidanceConfig::unguided(0.0), CfgMode::ConditionalOnly, false);
        prop_assert_eq!(c0, c1);
        let (u0, _) = sample::<f32>(seed, 10, &m, &GuidanceConfig::unguided(-1.0), CfgMode::Combined, false);
        let (u1, _) = sample::<f32>(seed, 10, &m, &GuidanceConfig::unguided(-1.0), CfgMode::UnconditionalOnly, false);
        prop_assert_eq!(u0, u1);
    }
}

#[test]
fn guided_steps_shift_by_the_fixed_magnitude() {
    let m = FrameMask::from_ranges(12, &[4..9]).unwrap();
    let w2 = 0.7;
    let gcfg = GuidanceConfig {
        w1: 0.5,
        w2,
        t_asr_start: Some(5),
        mode: GuidanceMode::Phoneme,
    };
    let (_, trace) = sample::<f64>(3, 12, &m, &gcfg, CfgMode::Combined, true);
    assert_eq!(trace.classifier_calls, 6);
    let mut guided = 0;
    for r in &trace.records {
        match r.guidance_norm {
            Some(g) => {
                let expect = w2 * r.eps_cfg_norm.sqrt();
                assert!((g - expect).abs() <= 1e-6 * expect, "t={}: {g} vs {expect}", r.t);
                assert!(r.t <= 5);
                guided += 1;
            }
            None => assert!(r.t > 5),
        }
    }
    assert_eq!(guided, 6);
}

#[test]
fn guided_mode_without_classifier_is_rejected() {
    let dit = jittered_dit::<f32>(1);
    let sch = ScheduleConfig::rescaled(4).build::<f32>().unwrap();
    let m = FrameMask::from_ranges(6, &[2..4]).unwrap();
    let cond = ConditionInput::observed(&random_mel::<f32>(6, 0), &m, None).unwrap();
    let gcfg = GuidanceConfig::guided(0.0, 1.0, GuidanceMode::Asr);
    let err = inpaint(&dit, &cond, &m, None, &gcfg, &sch, &SamplerOptions::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(inpaint_core::Error::Config(_))));
}

#[test]
fn too_long_target_samples_unguided() {
    let m = FrameMask::from_ranges(4, &[1..3]).unwrap();
    let dit = jittered_dit::<f32>(1);
    let clf = small_phoneme_classifier::<f32>(2);
    let tokens = TokenSequence::new(vec![1, 1, 1], 4).unwrap();
    let sch = ScheduleConfig::rescaled(6).build::<f32>().unwrap();
    let cond = ConditionInput::observed(&random_mel::<f32>(4, 1), &m, None).unwrap();
    let gcfg = GuidanceConfig::guided(0.0, 1.0, GuidanceMode::Phoneme);
    let opts = SamplerOptions {
        trace: true,
        ..SamplerOptions::default()
    };
    let guide = Guide {
        classifier: &clf,
        tokens: &tokens,
    };
    let (guided, trace) = inpaint(&dit, &cond, &m, Some(guide), &gcfg, &sch, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(trace.classifier_calls, 0);
    let (plain, _) = inpaint(&dit, &cond, &m, None, &GuidanceConfig::unguided(0.0), &sch, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(guided, plain);
}
