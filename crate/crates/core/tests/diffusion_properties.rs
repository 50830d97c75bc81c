mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcdm::diffusion::{ddim_step, ddpm_step, gaussian, DiffusionSample};
use rcdm::{forward_sample, NoiseSchedule, ScheduleKind, Tensor3};

proptest! {
    #[test]
    fn schedules_are_well_formed(
        t in 1usize..400,
        lo in 1e-5f64..0.01,
        span in 0.0f64..0.3,
        cosine in any::<bool>(),
    ) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = NoiseSchedule::new(kind, t, lo, lo + span).unwrap();
        prop_assert_eq!(s.len(), t);
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        let mut prev = 1.0;
        for k in 1..=t {
            let (b, ab) = (s.beta(k), s.alpha_bar(k));
            prop_assert!(b > 0.0 && b < 1.0);
            prop_assert!((s.alpha(k) - (1.0 - b)).abs() == 0.0);
            prop_assert!(ab > 0.0 && ab <= prev);
            prop_assert!((ab - prev * s.alpha(k)).abs() <= 1e-15);
            prev = ab;
        }
        let seq = s.timestep_sequence(t.min(37)).unwrap();
        prop_assert_eq!(*seq.last().unwrap(), t);
        prop_assert!(seq.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn forward_at_zero_is_identity_and_ddim_inverts_it(seed in any::<u64>(), t in 1usize..=50) {
        let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = DiffusionSample::clean(gaussian([1, 3, 3], &mut rng));
        let eps = gaussian([1, 3, 3], &mut rng);
        prop_assert_eq!(&forward_sample(&x0, 0, &s, &eps).unwrap().data, &x0.data);
        let xt = forward_sample(&x0, t, &s, &eps).unwrap();
        let back = ddim_step(&xt, &eps, &s, 0).unwrap();
        for (a, b) in back.data.data().iter().zip(x0.data.data()) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()) / s.alpha_bar(t).sqrt());
        }
    }
}

#[test]
fn ddpm_step_is_reproducible_with_the_same_noise() {
    let s = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
    let x = DiffusionSample { data: Tensor3::filled([1, 2, 2], 0.3), t: 5 };
    let eps = Tensor3::filled([1, 2, 2], -0.2);
    let z = Tensor3::filled([1, 2, 2], 0.7);
    assert_eq!(ddpm_step(&x, &eps, &s, &z).unwrap(), ddpm_step(&x, &eps, &s, &z).unwrap());
}

#[test]
fn long_schedule_matches_high_precision_product() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    assert!(rel(s.alpha_bar(1000), common::ALPHA_BAR_1000_LINEAR) <= 1e-9);
    assert!(rel(s.alpha_bar(500), common::ALPHA_BAR_500_LINEAR) <= 1e-9);
}
