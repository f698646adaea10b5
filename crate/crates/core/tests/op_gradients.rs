use ovseg_core::gradcheck::{grad_check, GradCheckConfig};
use ovseg_core::graph::{Graph, Var};
use ovseg_core::params::{Init, ParamStore};
use ovseg_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

/// Random trainable tensors named in order `p0, p1, ...` plus fixed weights
/// that turn the op output into a scalar without symmetric cancellation.
struct Case {
    store: ParamStore,
    weights: Vec<f64>,
}

fn case(seed: u64, shapes: &[&[usize]]) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    {
        let mut init = Init { rng: &mut rng };
        for (i, s) in shapes.iter().enumerate() {
            store.insert(format!("p{i}"), init.normal(s, 1.0));
        }
    }
    let weights = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    Case { store, weights }
}

fn reduce(g: &mut Graph<f64>, y: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = shape.iter().product::<usize>();
    let w = g.constant_values(&shape, weights[..n].to_vec())?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check<F>(op: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let c = case(seed, shapes);
        let cfg = GradCheckConfig {
            seed,
            ..Default::default()
        };
        let report = grad_check(&c.store, &cfg, |g, ps| {
            let vars: Vec<Var> = (0..shapes.len())
                .map(|i| g.param(ps, &format!("p{i}")))
                .collect::<Result<_>>()?;
            let y = f(g, &vars)?;
            reduce(g, y, &c.weights)
        })
        .unwrap();
        assert_eq!(
            report.params.len(),
            shapes.len(),
            "{op}: every input checked"
        );
        assert!(
            report.pass,
            "{op} seed {seed}: max rel err {} ({:?})",
            report.max_rel_err,
            report.worst()
        );
    }
}

#[test]
fn elementwise_and_broadcast() {
    check("add", &[&[2, 3], &[3]], |g, v| g.add(v[0], v[1]));
    check("mul", &[&[2, 1, 3], &[4, 1]], |g, v| g.mul(v[0], v[1]));
    check("broadcast_to", &[&[3, 1]], |g, v| {
        g.broadcast_to(v[0], &[2, 3, 4])
    });
    check("scale", &[&[5]], |g, v| g.scale(v[0], -2.5));
    check("gelu", &[&[3, 4]], |g, v| g.gelu(v[0]));
    check("tanh", &[&[3, 4]], |g, v| g.tanh(v[0]));
}

#[test]
fn layout_ops() {
    check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check("transpose", &[&[2, 3, 4]], |g, v| g.transpose(v[0]));
    check("concat", &[&[2, 3], &[2, 2]], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check("slice", &[&[4, 5]], |g, v| g.slice(v[0], 1, 1, 3));
    check("pad", &[&[3, 2]], |g, v| g.pad(v[0], 0, 1, 2));
}

#[test]
fn reductions() {
    check("sum_all", &[&[3, 4]], |g, v| g.sum_all(v[0]));
    check("mean_all", &[&[3, 4]], |g, v| g.mean_all(v[0]));
    check("sum_axis", &[&[2, 3, 4]], |g, v| g.sum_axis(v[0], 1));
}

#[test]
fn matrix_products() {
    check("matmul", &[&[2, 3, 4], &[4, 2]], |g, v| {
        g.matmul(v[0], v[1])
    });
    check(
        "matmul batch broadcast",
        &[&[2, 1, 3, 4], &[3, 4, 2]],
        |g, v| g.matmul(v[0], v[1]),
    );
    check("linear", &[&[2, 3, 4], &[4, 5], &[5]], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn normalization_and_losses() {
    check("softmax", &[&[2, 4, 3]], |g, v| g.softmax(v[0], 1));
    check("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    check("l2_normalize", &[&[3, 4]], |g, v| g.l2_normalize(v[0]));
    check("cosine_similarity", &[&[3, 4], &[3, 4]], |g, v| {
        g.cosine_similarity(v[0], v[1])
    });
    check("cross_entropy", &[&[2, 3, 2, 2]], |g, v| {
        g.cross_entropy(v[0], &[0, 2, 1, 1, 2, 0, 0, 1])
    });
    check("mse", &[&[2, 3]], |g, v| {
        g.mse(v[0], &[0.5, -1.0, 0.0, 1.0, 2.0, -0.25])
    });
}

#[test]
fn convolutions() {
    check(
        "dyn_conv2d",
        &[&[2, 3, 4, 5], &[2, 2, 3, 3, 3], &[2, 2]],
        |g, v| g.dyn_conv2d(v[0], v[1], v[2]),
    );
    check(
        "depthwise_conv2d",
        &[&[1, 2, 5, 4], &[1, 3, 2, 3, 3], &[1, 3]],
        |g, v| g.depthwise_conv2d(v[0], v[1], v[2]),
    );
    check("conv2d", &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], |g, v| {
        g.conv2d(v[0], v[1], v[2])
    });
    check(
        "conv2d 1x1",
        &[&[1, 3, 3, 2], &[2, 3, 1, 1], &[2]],
        |g, v| g.conv2d(v[0], v[1], v[2]),
    );
}

#[test]
fn resampling() {
    check("bilinear up", &[&[1, 2, 3, 3]], |g, v| {
        g.bilinear_resize(v[0], 5, 7)
    });
    check("bilinear down", &[&[2, 6, 6]], |g, v| {
        g.bilinear_resize(v[0], 4, 3)
    });
    check("pixel_shuffle", &[&[1, 8, 2, 3]], |g, v| {
        g.pixel_shuffle(v[0], 2)
    });
    check("pixel_unshuffle", &[&[1, 2, 4, 2]], |g, v| {
        g.pixel_unshuffle(v[0], 2)
    });
}
