use pnunet_core::ssim::{ssim_loss, ssim_loss_grad, ssim_map, SsimConfig};
use pnunet_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
}

/// Direct sliding-window SSIM: for every pixel, walk the full 2-D window
/// with mirrored borders and accumulate weighted moments.
fn naive_ssim_map(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Vec<f64> {
    let (h, w, ch) = a.shape();
    let r = (cfg.window_size / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * cfg.sigma * cfg.sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let m = if i < 0 {
            -i - 1
        } else if i >= n {
            2 * n - i - 1
        } else {
            i
        };
        m as usize
    };
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for c in 0..ch {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                        let yy = mirror(y as isize + dy, h);
                        let xx = mirror(x as isize + dx, w);
                        let (va, vb) = (a.get(yy, xx, c), b.get(yy, xx, c));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            out[y * w + x] = acc / ch as f64;
        }
    }
    out
}

#[test]
fn matches_naive_window_reference() {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..20 {
        let c = if i % 4 == 0 { 3 } else { 1 };
        let a = random_image(&mut rng, 16, 16, c);
        let b = random_image(&mut rng, 16, 16, c);
        let fast = ssim_map(&a, &b, &cfg).unwrap();
        let slow = naive_ssim_map(&a, &b, &cfg);
        let worst = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "pair {i}: {worst}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let cfg = SsimConfig {
        window_size: 7,
        ..SsimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for c in [1, 3] {
        let a = random_image(&mut rng, 8, 8, c);
        let b = random_image(&mut rng, 8, 8, c);
        let (_, g) = ssim_loss_grad(&a, &b, &cfg).unwrap();
        let h = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..b.len() {
            let mut plus = b.clone();
            plus.data_mut()[i] += h;
            let mut minus = b.clone();
            minus.data_mut()[i] -= h;
            let fd = (ssim_loss(&a, &plus, &cfg).unwrap() - ssim_loss(&a, &minus, &cfg).unwrap()) / (2.0 * h);
            num += (g.data()[i] - fd).powi(2);
            den += fd * fd;
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 1e-4, "channels {c}: relative error {rel}");
    }
}

#[test]
fn loss_falls_along_path_to_target() {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_image(&mut rng, 16, 16, 1);
    let start = random_image(&mut rng, 16, 16, 1);
    let losses: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&t| {
            let b = Tensor::from_fn(16, 16, 1, |y, x, c| (1.0 - t) * start.get(y, x, c) + t * a.get(y, x, c));
            ssim_loss(&a, &b, &cfg).unwrap()
        })
        .collect();
    assert!(losses.windows(2).all(|p| p[1] < p[0]), "{losses:?}");
    assert!(losses[4].abs() < 1e-12);
}

fn pair(side: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    let n = side * side;
    (
        proptest::collection::vec(0.0..=1.0f64, n),
        proptest::collection::vec(0.0..=1.0f64, n),
    )
        .prop_map(move |(a, b)| {
            (
                Tensor::from_vec(side, side, 1, a).unwrap(),
                Tensor::from_vec(side, side, 1, b).unwrap(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_symmetric((a, b) in pair(12)) {
        let cfg = SsimConfig::default();
        let ab = ssim_loss(&a, &b, &cfg).unwrap();
        let ba = ssim_loss(&b, &a, &cfg).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn map_is_bounded_and_self_similarity_is_one((a, b) in pair(11)) {
        let cfg = SsimConfig::default();
        let m = ssim_map(&a, &b, &cfg).unwrap();
        prop_assert!(m.data().iter().all(|v| v.is_finite() && *v <= 1.0 + 1e-12 && *v >= -1.0 - 1e-12));
        prop_assert!(ssim_loss(&a, &a, &cfg).unwrap().abs() <= 1e-12);
    }
}
