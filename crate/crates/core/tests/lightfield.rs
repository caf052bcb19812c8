use std::f64::consts::PI;

use ndarray::Array2;
use probefield::geom::Vec3;
use probefield::lightfield::{softplus, DomainBox, LightField, PositionalEncoding};
use probefield::rng::SeedTree;
use rand::Rng;

fn domain() -> DomainBox {
    DomainBox::new(Vec3::new(-2.0, -1.5, 0.5), Vec3::new(2.0, 1.5, 6.0), 20).unwrap()
}

fn random_field(seed: u64) -> LightField {
    let mut rng = SeedTree::new(seed).stream("init");
    let mut f = LightField::init(PositionalEncoding::default(), domain(), &mut rng);
    // give the output layer and biases some weight so every path is exercised
    let n = f.num_params();
    for (i, p) in f.params_mut().iter_mut().enumerate() {
        let j = (i as f64 * 0.618).fract();
        if i >= n - 3 * 256 - 3 {
            *p *= 10.0;
        }
        *p += 0.01 * (j - 0.5);
    }
    f
}

fn random_queries(rng: &mut impl Rng, n: usize) -> Vec<(Vec3, f64, Vec3)> {
    (0..n)
        .map(|_| {
            let x = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(0.5..6.0));
            let t = rng.random_range(1.0..20.0);
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalized();
            (x, t, d)
        })
        .collect()
}

/// Plain-loop forward pass written from the architecture description.
fn reference_eval(f: &LightField, x: Vec3, t: f64, d: Vec3) -> [f64; 3] {
    reference_forward(f, x, t, d).0
}

/// Output plus the on/off pattern of every hidden unit.
fn reference_forward(f: &LightField, x: Vec3, t: f64, d: Vec3) -> ([f64; 3], Vec<bool>) {
    let b = &f.domain;
    let norm = |v: f64, lo: f64, hi: f64| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
    let mut enc = Vec::new();
    let mut push = |p: f64, freqs: usize| {
        for k in 0..freqs {
            let a = 2f64.powi(k as i32) * PI * p;
            enc.push(a.sin());
            enc.push(a.cos());
        }
    };
    push(norm(x.x, b.x_min.x, b.x_max.x), 6);
    push(norm(x.y, b.x_min.y, b.x_max.y), 6);
    push(norm(x.z, b.x_min.z, b.x_max.z), 6);
    push(norm(t, 1.0, b.frames as f64), 4);
    push(d.x, 4);
    push(d.y, 4);
    push(d.z, 4);
    assert_eq!(enc.len(), 68);

    let p = f.params();
    let mut off = 0;
    let mut pattern = Vec::new();
    let mut dense = |input: &[f64], out: usize, relu: bool| -> Vec<f64> {
        let n_in = input.len();
        let w = &p[off..off + out * n_in];
        let bias = &p[off + out * n_in..off + out * n_in + out];
        off += out * n_in + out;
        (0..out)
            .map(|o| {
                let mut s = bias[o];
                for i in 0..n_in {
                    s += w[o * n_in + i] * input[i];
                }
                if relu {
                    pattern.push(s > 0.0);
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    };
    let h1 = dense(&enc, 256, true);
    let h2 = dense(&h1, 256, true);
    let skip: Vec<f64> = h2.iter().chain(enc.iter()).cloned().collect();
    let h3 = dense(&skip, 256, true);
    let h4 = dense(&h3, 256, true);
    let h5 = dense(&h4, 256, true);
    let h6 = dense(&h5, 256, true);
    let o = dense(&h6, 3, false);
    assert_eq!(off, p.len());
    ([softplus(o[0]), softplus(o[1]), softplus(o[2])], pattern)
}

#[test]
fn matches_straight_line_reimplementation() {
    for seed in [1, 2, 3] {
        let f = random_field(seed);
        let mut rng = SeedTree::new(seed).stream("queries");
        for (x, t, d) in random_queries(&mut rng, 20) {
            let got = f.eval(x, t, d).unwrap();
            let want = reference_eval(&f, x, t, d);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() <= 1e-6 * want[c].abs().max(1.0), "{got:?} vs {want:?}");
            }
        }
    }
}

fn weighted_output(f: &LightField, queries: &[(Vec3, f64, Vec3)], upstream: &Array2<f64>) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for (r, &(x, t, d)) in queries.iter().enumerate() {
        let (o, p) = reference_forward(f, x, t, d);
        total += (0..3).map(|c| upstream[(r, c)] * o[c]).sum::<f64>();
        pattern.extend(p);
    }
    (total, pattern)
}

#[test]
fn backward_matches_central_differences() {
    let h = 1e-4;
    for seed in [11, 12, 13] {
        let mut f = random_field(seed);
        let mut rng = SeedTree::new(seed).stream("fd");
        let queries = random_queries(&mut rng, 6);
        let upstream = Array2::from_shape_fn((queries.len(), 3), |_| rng.random_range(-1.0..1.0));
        let mut enc = Array2::<f64>::zeros((0, f.encoding.dim()));
        for &(x, t, d) in &queries {
            enc.push_row(f.encode_batch::<f64>(x, t, &[d]).row(0)).unwrap();
        }
        let (_, cache) = f.forward(enc).unwrap();
        let grad = f.backward(&cache, upstream.view()).unwrap();
        let mut nonzero = 0;
        let (mut checked, mut straddled) = (0, 0);
        while checked < 200 {
            let i = rng.random_range(0..f.num_params());
            let orig = f.params()[i];
            f.params_mut()[i] = orig + h;
            let (up, p_up) = weighted_output(&f, &queries, &upstream);
            f.params_mut()[i] = orig - h;
            let (down, p_down) = weighted_output(&f, &queries, &upstream);
            f.params_mut()[i] = orig;
            if p_up != p_down {
                // a ReLU flips inside the stencil; the quotient is not a derivative there
                straddled += 1;
                continue;
            }
            checked += 1;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs();
            // below 1e-10 the difference quotient is rounding noise
            assert!(
                err <= 1e-4 * fd.abs().max(grad[i].abs()) || err < 1e-10,
                "seed {seed} param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
            if grad[i] != 0.0 {
                nonzero += 1;
            }
        }
        assert!(nonzero > 50, "only {nonzero} nonzero coordinates checked");
        assert!(straddled < 20, "{straddled} stencils straddled a kink");
    }
}

#[test]
fn init_output_is_bounded() {
    let mut rng = SeedTree::new(4).stream("init");
    let f = LightField::init(PositionalEncoding::default(), domain(), &mut rng);
    let mut q = SeedTree::new(4).stream("samples");
    let (lo, hi) = (softplus(-3.0), softplus(3.0));
    let queries = random_queries(&mut q, 10_000);
    let mut enc = Array2::<f32>::zeros((0, f.encoding.dim()));
    for &(x, t, d) in &queries {
        enc.push_row(f.encode_batch::<f32>(x, t, &[d]).row(0)).unwrap();
    }
    let (out, _) = f.forward(enc).unwrap();
    for v in out.iter() {
        let v = *v as f64;
        assert!(v >= lo && v <= hi, "init output {v} outside [{lo}, {hi}]");
    }
}

#[test]
fn single_frame_mode_ignores_time() {
    let mut rng = SeedTree::new(6).stream("init");
    let f = LightField::init(PositionalEncoding::single_frame(), domain(), &mut rng);
    assert_eq!(f.encoding.dim(), 60);
    let x = Vec3::new(0.3, 0.2, 2.0);
    let d = Vec3::new(0.0, 1.0, 0.0);
    assert_eq!(f.eval(x, 1.0, d).unwrap(), f.eval(x, 17.5, d).unwrap());
}
