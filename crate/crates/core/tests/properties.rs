use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use permview_core::denoiser::{rope_rotate, RopeConfig, TemporalRope};
use permview_core::diffusion::noise_sample;
use permview_core::eval::{psnr, ssim, MetricReport, SceneMetrics};
use permview_core::geometry::{normalize_to_query, pixel_shuffle, pixel_unshuffle, plucker_ray_map, Frame, Intrinsics, Pose};
use permview_core::image::Image;
use permview_core::numerics::{conv3d, Conv3dSpec, Tensor};
use permview_core::scenegen::sample_training_views;
use permview_core::vae::{Vae, VaeConfig};

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-4.0..4.0f64)).prop_map(|(axis, t)| {
        let r = UnitQuaternion::from_scaled_axis(Vector3::from(axis)).to_rotation_matrix().into_inner();
        Pose::new(r, Vector3::from(t)).expect("rotation from a quaternion")
    })
}

fn intrinsics_strategy() -> impl Strategy<Value = Intrinsics> {
    (1usize..20, 1usize..20, 1.0..100.0f64, 1.0..100.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(w, h, fx, fy, a, b)| {
        Intrinsics::new(fx, fy, a * w as f64, b * h as f64, w, h).expect("valid intrinsics")
    })
}

fn image(h: usize, w: usize, seed: u64) -> Image {
    let t: Tensor<f32> = Tensor::uniform(&[h * w * 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    Image::new(h, w, t.into_data()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ray_directions_are_unit_and_orthogonal_to_moments(k in intrinsics_strategy(), pose in pose_strategy()) {
        let map = plucker_ray_map(&k, &pose, Frame::World).unwrap();
        for v in 0..k.height {
            for u in 0..k.width {
                let r = map.at(v, u);
                let d = Vector3::new(r[0], r[1], r[2]);
                let m = Vector3::new(r[3], r[4], r[5]);
                prop_assert!((d.norm() - 1.0).abs() < 1e-9);
                prop_assert!(d.dot(&m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_intrinsics_are_rejected(fx in -10.0..0.0f64, cx in 0.0..8.0f64) {
        prop_assert!(Intrinsics::new(fx, 10.0, cx, 4.0, 8, 8).is_err());
        prop_assert!(Intrinsics::new(10.0, fx, cx, 4.0, 8, 8).is_err());
        prop_assert!(Intrinsics::new(10.0, 10.0, 8.5 - fx, 4.0, 8, 8).is_err());
    }

    #[test]
    fn scaled_rotations_are_rejected(pose in pose_strategy(), s in 1.001..2.0f64) {
        prop_assert!(Pose::new(pose.rotation() * s, *pose.translation()).is_err());
    }

    #[test]
    fn query_normalization_is_permutation_equivariant(
        poses in prop::collection::vec(pose_strategy(), 2..9),
        seed in any::<u64>(),
    ) {
        let (query, inputs) = poses.split_first().unwrap();
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Pose> = order.iter().map(|&i| inputs[i]).collect();
        let a = normalize_to_query(inputs, query).unwrap();
        let b = normalize_to_query(&permuted, query).unwrap();
        prop_assert_eq!(a.scale.to_bits(), b.scale.to_bits());
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(b.inputs[j], a.inputs[i]);
        }
    }

    #[test]
    fn query_normalization_is_idempotent(poses in prop::collection::vec(pose_strategy(), 2..9)) {
        let (query, inputs) = poses.split_first().unwrap();
        let once = normalize_to_query(inputs, query).unwrap();
        let twice = normalize_to_query(&once.inputs, &once.query).unwrap();
        prop_assert!((twice.scale - 1.0).abs() < 1e-12);
        for (a, b) in once.inputs.iter().zip(&twice.inputs) {
            prop_assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn unshuffle_round_trip_is_exact(c in 1usize..4, ho in 1usize..6, wo in 1usize..6, f in 1usize..5, seed in any::<u64>()) {
        let x: Tensor<f64> = Tensor::randn(&[c, ho * f, wo * f], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = pixel_unshuffle(&x, f).unwrap();
        prop_assert_eq!(y.shape(), &[c * f * f, ho, wo][..]);
        prop_assert_eq!(pixel_shuffle(&y, f).unwrap(), x);
    }

    #[test]
    fn interpolant_identity(t in 0.0..=1.0f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0: Tensor<f64> = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let eps: Tensor<f64> = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let s = noise_sample(&z0, t, &eps).unwrap();
        for i in 0..z0.numel() {
            let (x, e) = (z0.data()[i], eps.data()[i]);
            prop_assert!((s.z_t.data()[i] - ((1.0 - t) * x + t * e)).abs() <= 4.0 * f64::EPSILON * (x.abs() + e.abs()));
            prop_assert_eq!(s.velocity_target.data()[i], e - x);
        }
    }

    #[test]
    fn rope_scores_depend_on_relative_offsets(
        p1 in prop::array::uniform3(0usize..8),
        p2 in prop::array::uniform3(0usize..8),
        shift in prop::array::uniform3(0usize..8),
        seed in any::<u64>(),
    ) {
        let cfg = RopeConfig { split: [4, 6, 6], temporal: TemporalRope::Standard, base: 100.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Tensor<f64> = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let k: Tensor<f64> = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let dot = |a: [usize; 3], b: [usize; 3]| {
            let qa = rope_rotate(&q, &[a], &cfg).unwrap();
            let kb = rope_rotate(&k, &[b], &cfg).unwrap();
            qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let add = |p: [usize; 3]| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
        prop_assert!((dot(p1, p2) - dot(add(p1), add(p2))).abs() < 1e-6);
    }

    #[test]
    fn causal_conv_ignores_later_frames(
        t in 2usize..7,
        kt in 1usize..4,
        tau in 0usize..6,
        seed in any::<u64>(),
    ) {
        let tau = tau % t;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = Tensor::randn(&[2, t, 3, 3], 1.0, &mut rng);
        let w: Tensor<f64> = Tensor::randn(&[2, 2, kt, 3, 3], 1.0, &mut rng);
        let spec = Conv3dSpec::causal([1, 1, 1], 1);
        let (y, _) = conv3d(&x, &w, None, &spec).unwrap();
        let mut x2 = x.clone();
        for c in 0..2 {
            for f in tau + 1..t {
                for i in 0..9 {
                    x2.data_mut()[(c * t + f) * 9 + i] = rng.random_range(-5.0..5.0);
                }
            }
        }
        let (y2, _) = conv3d(&x2, &w, None, &spec).unwrap();
        prop_assert_eq!(y.narrow(1, 0, tau + 1).unwrap(), y2.narrow(1, 0, tau + 1).unwrap());
    }

    #[test]
    fn view_sampler_draws_distinct_frames(n in 2usize..30, k in 1usize..8, m in 1usize..4, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = sample_training_views(n, k, m, w, &mut rng);
        if n < k + m {
            prop_assert!(r.is_err());
        } else {
            let s = r.unwrap();
            prop_assert_eq!((s.inputs.len(), s.targets.len()), (k, m));
            let mut all: Vec<usize> = s.inputs.iter().chain(&s.targets).copied().collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), k + m);
            prop_assert!(all.iter().all(|&i| i < n));
        }
    }

    #[test]
    fn metrics_are_symmetric(h in 1usize..14, w in 1usize..14, seed in any::<u64>()) {
        let (a, b) = (image(h, w, seed), image(h, w, seed ^ 1));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn report_aggregates_are_scene_means(rows in prop::collection::vec((0.0..40.0f64, 0.0..1.0f64, 0.0..3.0f64), 1..8)) {
        let per_scene: Vec<SceneMetrics> = rows
            .iter()
            .enumerate()
            .map(|(i, &(p, s, sd))| SceneMetrics { scene: i, psnr: p, ssim: s, psnr_std: sd, ssim_std: sd / 10.0 })
            .collect();
        let r = MetricReport::from_scenes("x", "f", per_scene);
        let n = rows.len() as f64;
        prop_assert!((r.psnr - rows.iter().map(|x| x.0).sum::<f64>() / n).abs() < 1e-12);
        prop_assert!((r.ssim - rows.iter().map(|x| x.1).sum::<f64>() / n).abs() < 1e-12);
        prop_assert!(r.psnr_std >= 0.0 && r.ssim_std >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn per_view_encoding_is_permutation_equivariant(n in 1usize..6, seed in any::<u64>()) {
        let cfg = VaeConfig { latent_dim: 3, enc_channels: [3, 4, 4], dec_channels: [4, 4, 3] };
        let vae = Vae::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let images: Vec<Image> = (0..n).map(|i| image(8, 12, seed.wrapping_add(i as u64))).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 7));
        let views: Vec<&Image> = images.iter().collect();
        let permuted: Vec<&Image> = order.iter().map(|&i| &images[i]).collect();
        let a = vae.encode_per_view(&views).unwrap();
        let b = vae.encode_per_view(&permuted).unwrap();
        prop_assert_eq!(a.frames(), n);
        prop_assert_eq!(b.data, a.data.gather(1, &order).unwrap());
    }
}
