//! Library results checked against independent brute-force computations.

use maskvae_core::losses::GaussianPosterior;
use maskvae_core::metrics::ssim_index;
use maskvae_core::vae::{decode_image, decode_mask, encode, reparameterize, standard_normal, ArchConfig, VaeParams};
use maskvae_core::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor<f64> {
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.gen::<f64>())
}

/// Mean SSIM written out per window: an 11x11 Gaussian (sigma 1.5) built
/// from the 2-D formula, sums taken directly over each valid window.
fn ssim_brute_force(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> f64 {
    const K: usize = 11;
    let sigma = 1.5;
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let r = (K / 2) as f64;
    let mut win = [[0.0; K]; K];
    let mut total = 0.0;
    for (y, row) in win.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - r, x as f64 - r);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (h, w, ch) = a.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for oy in 0..=h - K {
            for ox in 0..=w - K {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (y, row) in win.iter().enumerate() {
                    for (x, &g) in row.iter().enumerate() {
                        let g = g / total;
                        let (pa, pb) = (a.get(oy + y, ox + x, c), b.get(oy + y, ox + x, c));
                        ma += g * pa;
                        mb += g * pb;
                        saa += g * pa * pa;
                        sbb += g * pb * pb;
                        sab += g * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let a = random_image(&mut rng, 32, 32, 3);
        // Mix of unrelated and correlated pairs so the index spans its range.
        let t = i as f64 / 99.0;
        let noise = random_image(&mut rng, 32, 32, 3);
        let b = ImageTensor::from_fn(32, 32, 3, |y, x, c| t * a.get(y, x, c) + (1.0 - t) * noise.get(y, x, c));
        worst = worst.max((ssim_index(&a, &b).unwrap() - ssim_brute_force(&a, &b)).abs());
    }
    assert!(worst <= 1e-8, "worst |diff| {worst:e}");
}

/// Parameter count from a hand walk over the layer shapes.
fn count_by_walk(arch: &ArchConfig) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let dense = |nin: usize, nout: usize| nin * nout + nout;
    let e = arch.enc_channels;
    let b = arch.resolution / 8;
    let mut n = conv(3, e[0]) + conv(e[0], e[1]) + conv(e[1], e[2]);
    n += 2 * dense(b * b * e[2], arch.latent_dim);
    for (c, out) in [(arch.dec_channels, 3), (arch.mask_channels, 1)] {
        n += dense(arch.latent_dim, b * b * c[0]);
        n += conv(c[0], c[1]) + conv(c[1], c[2]) + conv(c[2], c[3]) + conv(c[3], out);
    }
    n
}

#[test]
fn parameter_count_matches_shape_walk() {
    for arch in [ArchConfig::default(), ArchConfig { resolution: 16, latent_dim: 4, ..ArchConfig::default() }] {
        let params = VaeParams::<f64>::init(arch, 0).unwrap();
        assert_eq!(params.param_count(), count_by_walk(&arch));
        let stored: usize = params.values().iter().map(Vec::len).sum();
        assert_eq!(stored, count_by_walk(&arch));
    }
}

/// Direct 3x3 convolution, zero padding 1, NHWC, kernel `(ky, kx, cin, cout)`.
fn conv_direct(x: &[f64], side: usize, cin: usize, w: &[f64], bias: &[f64], stride: usize) -> (Vec<f64>, usize) {
    let cout = bias.len();
    let out_side = side.div_ceil(stride);
    let mut y = vec![0.0; out_side * out_side * cout];
    for oy in 0..out_side {
        for ox in 0..out_side {
            for co in 0..cout {
                let mut acc = bias[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[(iy as usize * side + ix as usize) * cin + ci]
                                * w[((ky * 3 + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                y[(oy * out_side + ox) * cout + co] = acc;
            }
        }
    }
    (y, out_side)
}

fn upsample_nearest(x: &[f64], side: usize, c: usize) -> Vec<f64> {
    let s2 = side * 2;
    let mut y = vec![0.0; s2 * s2 * c];
    for r in 0..s2 {
        for col in 0..s2 {
            for k in 0..c {
                y[(r * s2 + col) * c + k] = x[((r / 2) * side + col / 2) * c + k];
            }
        }
    }
    y
}

fn dense_direct(x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let nout = bias.len();
    (0..nout).map(|o| bias[o] + x.iter().enumerate().map(|(i, v)| v * w[i * nout + o]).sum::<f64>()).collect()
}

fn elu(v: &mut [f64]) {
    v.iter_mut().filter(|x| **x <= 0.0).for_each(|x| *x = x.exp_m1());
}

fn random_params(arch: ArchConfig, seed: u64) -> VaeParams<f64> {
    let mut params = VaeParams::<f64>::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for t in params.values_mut() {
        t.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    params
}

struct Named<'a>(&'a VaeParams<f64>);

impl Named<'_> {
    fn get(&self, name: &str) -> &[f64] {
        let i = self.0.specs().iter().position(|s| s.name == name).unwrap_or_else(|| panic!("no tensor {name}"));
        &self.0.values()[i]
    }
}

#[test]
fn encoder_and_decoders_match_direct_loops() {
    let arch = ArchConfig {
        resolution: 16,
        latent_dim: 5,
        enc_channels: [3, 4, 5],
        dec_channels: [4, 3, 2, 2],
        mask_channels: [3, 2, 2, 1],
    };
    let params = random_params(arch, 3);
    let p = Named(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<_> = (0..2).map(|_| random_image(&mut rng, 16, 16, 3)).collect();
    let posts = encode(&params, &images).unwrap();
    let z: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let decoded = decode_image(&params, &z).unwrap();
    let masks = decode_mask(&params, &z).unwrap();
    for n in 0..2 {
        let (mut x, mut side, mut cin) = (images[n].data().to_vec(), 16, 3);
        for (i, &cout) in arch.enc_channels.iter().enumerate() {
            let name = format!("enc.conv{}", i + 1);
            let (mut y, s) =
                conv_direct(&x, side, cin, p.get(&format!("{name}.weight")), p.get(&format!("{name}.bias")), 2);
            elu(&mut y);
            (x, side, cin) = (y, s, cout);
        }
        let mu = dense_direct(&x, p.get("enc.mu.weight"), p.get("enc.mu.bias"));
        let logvar = dense_direct(&x, p.get("enc.logvar.weight"), p.get("enc.logvar.bias"));
        for (a, b) in posts[n].mu.iter().zip(&mu).chain(posts[n].logvar.iter().zip(&logvar)) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        for (head, channels, out_c, got) in
            [("img", arch.dec_channels, 3, &decoded[n]), ("mask", arch.mask_channels, 1, &masks[n])]
        {
            let mut h =
                dense_direct(&z[n], p.get(&format!("{head}.dense.weight")), p.get(&format!("{head}.dense.bias")));
            elu(&mut h);
            let (mut side, mut cin) = (2, channels[0]);
            for (i, &cout) in channels[1..].iter().enumerate() {
                let name = format!("{head}.conv{}", i + 1);
                let up = upsample_nearest(&h, side, cin);
                let (mut y, s) = conv_direct(
                    &up,
                    side * 2,
                    cin,
                    p.get(&format!("{name}.weight")),
                    p.get(&format!("{name}.bias")),
                    1,
                );
                elu(&mut y);
                (h, side, cin) = (y, s, cout);
            }
            let (y, _) =
                conv_direct(&h, side, cin, p.get(&format!("{head}.out.weight")), p.get(&format!("{head}.out.bias")), 1);
            assert_eq!(got.shape(), (16, 16, out_c));
            for (a, v) in got.data().iter().zip(&y) {
                let b = 1.0 / (1.0 + (-v).exp());
                assert!((a - b).abs() <= 1e-12, "{head}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn reparameterized_samples_have_the_posterior_moments() {
    const N: usize = 100_000;
    let (mu, logvar) = (0.3, -1.0);
    let post = GaussianPosterior::new(vec![mu; N], vec![logvar; N]).unwrap();
    let noise = standard_normal::<f64, _>(&mut ChaCha8Rng::seed_from_u64(2024), N);
    let z = reparameterize(&post, &noise).unwrap().z;
    let n = N as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let target_var = (-1.0f64).exp();
    let se_mean = (target_var / n).sqrt();
    let se_var = target_var * (2.0 / (n - 1.0)).sqrt();
    assert!((mean - mu).abs() <= 3.0 * se_mean, "mean {mean}");
    assert!((var - target_var).abs() <= 3.0 * se_var, "variance {var}");
}
