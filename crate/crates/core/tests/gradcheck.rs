//! Analytic gradients of softplus(-D(G(z, c), c, s)) against central
//! differences on a tiny model.

use foodgan_core::autograd::Graph;
use foodgan_core::data::PatchSpec;
use foodgan_core::model::{scale_batch, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use foodgan_core::params::ParamSet;
use foodgan_core::tensor::{one_hot, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Setup {
    gen: Generator,
    disc: Discriminator,
    z: Tensor,
    labels: Vec<usize>,
    specs: Vec<PatchSpec>,
}

fn setup() -> Setup {
    let gen = Generator::new(GeneratorConfig {
        z_dim: 4,
        w_dim: 8,
        num_classes: 2,
        embed_dim: 4,
        channels: 4,
        blocks: 2,
        fourier_features: 8,
        fourier_max_freq: 8.0,
        out_size: 16,
        mapping_lr_mult: 1.0,
        seed: 11,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let disc = Discriminator::new(DiscriminatorConfig {
        num_classes: 2,
        channels: 4,
        feature_dim: 8,
        in_size: 16,
        seed: 12,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let specs = vec![
        PatchSpec::full_frame(16, 16, 16),
        PatchSpec::from_pixels(64, 64, 8, 20, 24, 16),
    ];
    Setup {
        gen,
        disc,
        z,
        labels: vec![0, 1],
        specs,
    }
}

/// Loss and, when `grads` is set, gradients for (G params, D params, z).
fn evaluate(s: &Setup, gp: &ParamSet, dp: &ParamSet, z: &Tensor, grads: bool) -> (f64, Option<(Vec<Tensor>, Vec<Tensor>, Tensor)>) {
    let mut g = Graph::new();
    let gv = gp.bind(&mut g, grads);
    let dv = dp.bind(&mut g, grads);
    let zv = if grads { g.input(z.clone()) } else { g.constant(z.clone()) };
    let c = g.constant(one_hot(&s.labels, 2));
    let w = s.gen.map_forward(&mut g, &gv, zv, c);
    let img = s.gen.synth_forward(&mut g, &gv, w, &s.specs);
    let c2 = g.constant(one_hot(&s.labels, 2));
    let sc = g.constant(scale_batch(&s.specs));
    let logits = s.disc.forward(&mut g, &dv, img, c2, sc);
    let neg = g.scale(logits, -1.0);
    let sp = g.softplus(neg);
    let loss = g.sum(sp);
    let value = g.value(loss).item();
    if !grads {
        return (value, None);
    }
    let b = g.backward(loss);
    let zg = b.get_or_zeros(zv, z);
    (value, Some((gp.collect_grads(&b, &gv), dp.collect_grads(&b, &dv), zg)))
}

#[test]
fn generator_discriminator_chain_matches_central_differences() {
    let s = setup();
    let (gp, dp) = (s.gen.params.clone(), s.disc.params.clone());
    let (_, analytic) = evaluate(&s, &gp, &dp, &s.z, true);
    let (ga, da, za) = analytic.unwrap();
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut checked = 0;

    let mut check = |a: f64, n: f64, what: String| {
        let denom = a.abs().max(n.abs());
        if denom < 1e-7 {
            assert!((a - n).abs() < 1e-9, "{what}: {a} vs {n}");
            return;
        }
        let rel = (a - n).abs() / denom;
        worst = worst.max(rel);
        checked += 1;
        assert!(rel < 1e-4, "{what}: analytic {a} numeric {n} rel {rel}");
    };

    for which in 0..2 {
        let base = if which == 0 { &gp } else { &dp };
        let analytic = if which == 0 { &ga } else { &da };
        for t in 0..base.len() {
            let numel = base.tensor(t).numel();
            for _ in 0..3.min(numel) {
                let k = rng.random_range(0..numel);
                let mut plus = base.clone();
                plus.tensor_mut(t).data_mut()[k] += eps;
                let mut minus = base.clone();
                minus.tensor_mut(t).data_mut()[k] -= eps;
                let (fp, fm) = if which == 0 {
                    (evaluate(&s, &plus, &dp, &s.z, false).0, evaluate(&s, &minus, &dp, &s.z, false).0)
                } else {
                    (evaluate(&s, &gp, &plus, &s.z, false).0, evaluate(&s, &gp, &minus, &s.z, false).0)
                };
                let numeric = (fp - fm) / (2.0 * eps);
                check(analytic[t].data()[k], numeric, format!("{}[{k}]", base.names()[t]));
            }
        }
    }
    for k in 0..s.z.numel() {
        let mut zp = s.z.clone();
        zp.data_mut()[k] += eps;
        let mut zm = s.z.clone();
        zm.data_mut()[k] -= eps;
        let numeric = (evaluate(&s, &gp, &dp, &zp, false).0 - evaluate(&s, &gp, &dp, &zm, false).0) / (2.0 * eps);
        check(za.data()[k], numeric, format!("z[{k}]"));
    }
    assert!(checked > 40, "only {checked} coordinates checked");
    println!("worst relative error {worst:.2e} over {checked} coordinates");
}
