//! Transform oracles: independent matrix composition, direct evaluation of
//! the bilinear kernel's defining double sum, and the warp round-trip
//! property on smooth images.

mod support;

use rand::Rng;
use support::{assert_close, rng_for};
use xform_core::autodiff::Graph;
use xform_core::transforms::{
    affine_matrix_from_params, affine_matrix_from_physical, sampling_grid_values,
    warp_affine_values, ParamKind, TransformKind, TransformParams,
};

/// Homogeneous 3x3 product, written from scratch: the oracle composes
/// translation, rotation, shear and scale factors independently of the
/// library's closed-form entries.
fn mat3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn compose_oracle(phys: &[f64]) -> [f64; 6] {
    let (sigma, theta, tx, ty, hx, hy) = (phys[0], phys[1], phys[2], phys[3], phys[4], phys[5]);
    let t = [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]];
    let r = [
        [theta.cos(), -theta.sin(), 0.0],
        [theta.sin(), theta.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    let sh = [[1.0, hx, 0.0], [hy, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let s = [[sigma, 0.0, 0.0], [0.0, sigma, 0.0], [0.0, 0.0, 1.0]];
    let m = mat3(&t, &mat3(&r, &mat3(&sh, &s)));
    [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
}

#[test]
fn matrix_entries_match_independent_factor_composition() {
    let mut r = rng_for(21);
    for _ in 0..50 {
        let norm: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let p = TransformParams::new(TransformKind::Affine, norm).unwrap();
        let phys = p.physical();
        let expect = compose_oracle(&phys);

        let direct = affine_matrix_from_physical(&phys);
        assert_close(&direct, &expect, 1e-12, "value-level composition");

        let mut g = Graph::new();
        let nodes = affine_matrix_from_params(&mut g, &p).unwrap();
        let got: Vec<f64> = nodes.iter().map(|id| g.values(*id)[0]).collect();
        assert_close(&got, &expect, 1e-12, "graph-level composition");
    }
}

/// The defining double sum of the bilinear kernel, evaluated over every
/// source pixel.
fn bilinear_oracle(img: &[f64], c: usize, h: usize, w: usize, u: &[f64], v: &[f64]) -> Vec<f64> {
    let npix = u.len();
    let mut out = vec![0.0; c * npix];
    for i in 0..npix {
        for n in 0..h {
            for m in 0..w {
                let wx = (1.0 - (u[i] - m as f64).abs()).max(0.0);
                let wy = (1.0 - (v[i] - n as f64).abs()).max(0.0);
                if wx == 0.0 || wy == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[ch * npix + i] += img[(ch * h + n) * w + m] * wx * wy;
                }
            }
        }
    }
    out
}

#[test]
fn bilinear_matches_defining_double_sum() {
    let mut r = rng_for(22);
    for case in 0..20 {
        let img: Vec<f64> = (0..16).map(|_| r.gen_range(0.0..1.0)).collect();
        // Mix of in-range, boundary and out-of-range coordinates.
        let u: Vec<f64> = (0..9).map(|_| r.gen_range(-1.5..4.5)).collect();
        let v: Vec<f64> = (0..9).map(|_| r.gen_range(-1.5..4.5)).collect();
        let mut g = Graph::new();
        let image = g.constant(vec![1, 4, 4], img.clone());
        let un = g.constant(vec![9], u.clone());
        let vn = g.constant(vec![9], v.clone());
        let out = g.bilinear_sample(image, un, vn, 3, 3).unwrap();
        let expect = bilinear_oracle(&img, 1, 4, 4, &u, &v);
        assert_close(g.values(out), &expect, 1e-10, &format!("case {case}"));
    }
}

fn gaussian_blur(img: &[f64], n: usize) -> Vec<f64> {
    // Separable 5-tap binomial kernel.
    let k = [1.0, 4.0, 6.0, 4.0, 1.0];
    let ksum: f64 = 16.0;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = (x as isize + t as isize - 2).clamp(0, n as isize - 1) as usize;
                acc += kv * img[y * n + xx];
            }
            tmp[y * n + x] = acc / ksum;
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = (y as isize + t as isize - 2).clamp(0, n as isize - 1) as usize;
                acc += kv * tmp[yy * n + x];
            }
            out[y * n + x] = acc / ksum;
        }
    }
    out
}

fn invert_affine(m: &[f64; 6]) -> [f64; 6] {
    let det = m[0] * m[4] - m[1] * m[3];
    let inv = [m[4] / det, -m[1] / det, -m[3] / det, m[0] / det];
    let tx = -(inv[0] * m[2] + inv[1] * m[5]);
    let ty = -(inv[2] * m[2] + inv[3] * m[5]);
    [inv[0], inv[1], tx, inv[2], inv[3], ty]
}

#[test]
fn warp_roundtrip_reconstructs_the_interior() {
    // Warp by m, then by its inverse, and compare the central interior on a
    // smooth (blurred-noise) image: max abs error below the interpolation
    // bound 0.02.
    let n = 32;
    let mut r = rng_for(23);
    for case in 0..5 {
        let noise: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.0..1.0)).collect();
        let img = gaussian_blur(&gaussian_blur(&noise, n), n);
        let norm = vec![
            r.gen_range(-0.2..0.2),
            r.gen_range(-0.15..0.15),
            r.gen_range(-0.1..0.1),
            r.gen_range(-0.1..0.1),
            r.gen_range(-0.1..0.1),
            r.gen_range(-0.1..0.1),
        ];
        let p = TransformParams::new(TransformKind::Affine, norm).unwrap();
        let phys: [f64; 6] = p.physical().try_into().unwrap();
        let m = xform_core::transforms::affine_matrix_from_physical(&phys);
        let m_inv = invert_affine(&m);

        let once = warp_affine_values(&img, 1, n, n, &phys, n, n);
        // Apply the inverse matrix directly via the grid path.
        let (u, v) = sampling_grid_values(&m_inv, n, n, n, n);
        let mut back = vec![0.0; n * n];
        xform_core::autodiff::kernels::bilinear_sample(&once, 1, n, n, &u, &v, &mut back);

        let band = 10;
        let mut worst = 0.0f64;
        for y in band..n - band {
            for x in band..n - band {
                worst = worst.max((back[y * n + x] - img[y * n + x]).abs());
            }
        }
        assert!(worst < 0.02, "case {case}: interior error {worst}");
    }
}

#[test]
fn normalize_denormalize_roundtrip_over_random_values() {
    let mut r = rng_for(24);
    let kinds = [
        ParamKind::Scale,
        ParamKind::Rotation,
        ParamKind::Tx,
        ParamKind::Ty,
        ParamKind::ShearX,
        ParamKind::ShearY,
        ParamKind::Brightness,
        ParamKind::Saturation,
        ParamKind::Contrast,
        ParamKind::Hue,
    ];
    for _ in 0..1000 {
        for kind in kinds {
            let n = r.gen_range(-1.0..1.0);
            let phys = kind.denormalize(n);
            let back = kind.normalize(phys).unwrap();
            assert!(
                (back - n).abs() < 1e-12,
                "{}: {n} -> {phys} -> {back}",
                kind.name()
            );
        }
    }
}

#[test]
fn saturation_of_gray_images_is_identity_for_any_alpha() {
    let mut r = rng_for(25);
    for _ in 0..20 {
        let gray_val = r.gen_range(0.05..0.95);
        let img = vec![gray_val; 3 * 4];
        let alpha_sat = r.gen_range(0.0..1.0);
        let mut g = Graph::new();
        let image = g.constant(vec![3, 2, 2], img.clone());
        let brt = g.scalar(1.0);
        let sat = g.scalar(alpha_sat);
        let con = g.scalar(1.0);
        let out = xform_core::transforms::color_stages(&mut g, image, brt, sat, con, true).unwrap();
        for (a, b) in g.values(out).iter().zip(&img) {
            assert!((a - b).abs() < 1e-12, "alpha {alpha_sat}: {a} vs {b}");
        }
    }
}
