use fsl_core::graph::{Graph, Padding, Targets};
use fsl_core::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = 128usize; // 32 images x 4 rotations
    let x = Tensor::randn(&[batch, 1, 32, 32], 0.5, &mut rng);
    let k1 = Tensor::randn(&[16, 1, 3, 3], 0.3, &mut rng);
    let k2 = Tensor::randn(&[32, 16, 3, 3], 0.2, &mut rng);
    let k3 = Tensor::randn(&[64, 32, 3, 3], 0.1, &mut rng);
    let k4 = Tensor::randn(&[64, 64, 3, 3], 0.1, &mut rng);
    let w = Tensor::randn(&[10, 64], 0.1, &mut rng);
    let targets: Vec<usize> = (0..batch).map(|i| i % 10).collect();

    let t0 = Instant::now();
    let iters = 5;
    for _ in 0..iters {
        let mut g = Graph::new();
        let xb = g.leaf_of(&x);
        let a = g.leaf_of(&k1);
        let b = g.leaf_of(&k2);
        let c = g.leaf_of(&k3);
        let d = g.leaf_of(&k4);
        let wn = g.leaf_of(&w);
        let h1 = g.conv2d(xb, a, 1, Padding::Same).unwrap();
        let h1 = g.relu(h1);
        let h2 = g.conv2d(h1, b, 2, Padding::Same).unwrap();
        let h2 = g.relu(h2);
        let h3 = g.conv2d(h2, c, 1, Padding::Same).unwrap();
        let h3 = g.relu(h3);
        let h4 = g.conv2d(h3, d, 2, Padding::Same).unwrap();
        let h4 = g.relu(h4);
        let f = g.global_avg_pool(h4).unwrap();
        let zn = g.l2_normalize_rows(f).unwrap();
        let wnn = g.l2_normalize_rows(wn).unwrap();
        let wt = g.transpose(wnn).unwrap();
        let sim = g.matmul(zn, wt).unwrap();
        let logits = g.scale(sim, 10.0);
        let loss = g.softmax_cross_entropy(logits, &Targets::Hard(targets.clone())).unwrap();
        g.backward(loss).unwrap();
        std::hint::black_box(g.grad(a)[0]);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("fwd+bwd step, batch {batch}: {:.3} s", dt);
    println!("per-epoch (600 imgs, rot variant = 19 steps): {:.1} s", dt * 19.0);
}
