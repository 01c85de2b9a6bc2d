//! Manual micro-timing of training-step components. Ignored by default.

use std::time::Instant;

use gis_forge::discriminator::{d_regularizer, Discriminator, DiscriminatorConfig};
use gis_forge::tensor::Tape;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

fn rand4(rng: &mut ChaCha20Rng, s: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(s), |_| rng.random::<f64>())
}

#[test]
#[ignore]
fn time_parts() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let disc = Discriminator::build(DiscriminatorConfig::default_patch(3)).unwrap();

    // Plain forward, batch 16 (the regularizer's replicated batch).
    let x16 = rand4(&mut rng, &[16, 3, 64, 64]);
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let tape = Tape::new();
        let b = disc.bind(&tape, false);
        let _ = b.forward(&tape.leaf(x16.clone())).unwrap().value();
    }
    println!("D fwd [16,3,64,64]: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // Forward + backward wrt input.
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let b = disc.bind(&tape, false);
        let x = tape.param(x16.clone());
        let y = b.forward(&x).unwrap().sum();
        let _ = y.backward_wrt(&[&x]).get(&x).unwrap().value();
    }
    println!("D fwd+bwd_input [16]: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // Full regularizer, real+fake batch of 1.
    let real = rand4(&mut rng, &[1, 3, 64, 64]);
    let fake = rand4(&mut rng, &[1, 3, 64, 64]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let b = disc.bind(&tape, true);
        let r = d_regularizer(&tape, &b, &real, &fake, 2.0).unwrap();
        let _ = r.backward();
    }
    println!("d_regularizer fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // D update remainder: bce on batch 1 + backward.
    let x1 = rand4(&mut rng, &[1, 3, 64, 64]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let b = disc.bind(&tape, true);
        let y = b.forward(&tape.leaf(x1.clone())).unwrap().softplus().sum();
        let _ = y.backward();
    }
    println!("D fwd+full bwd [1]: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

#[test]
#[ignore]
fn time_reg_phases() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let disc = Discriminator::build(DiscriminatorConfig::default_patch(3)).unwrap();
    let real = rand4(&mut rng, &[1, 3, 64, 64]);
    let fake = rand4(&mut rng, &[1, 3, 64, 64]);
    let reps = 10;

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let b = disc.bind(&tape, true);
        let r = d_regularizer(&tape, &b, &real, &fake, 2.0).unwrap();
        std::hint::black_box(r.scalar());
    }
    println!("reg value only: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let b = disc.bind(&tape, true);
        let r = d_regularizer(&tape, &b, &real, &fake, 2.0).unwrap();
        let g = r.backward();
        std::hint::black_box(g.get(&b.param_vars()[0]).map(|t| t.value()[[0,0,0,0]]));
    }
    println!("reg + backward: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

#[test]
#[ignore]
fn time_small_convs() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let disc = Discriminator::build(DiscriminatorConfig::default_patch(3)).unwrap();
    let x1 = rand4(&mut rng, &[1, 3, 64, 64]);
    let reps = 50;
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let b = disc.bind(&tape, false);
        std::hint::black_box(b.forward(&tape.leaf(x1.clone())).unwrap().value());
    }
    println!("D fwd [1,3,64,64]: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // Isolated GEMM of the first layer's size via public conv2d.
    let w1 = rand4(&mut rng, &[32, 3, 4, 4]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let x = tape.leaf(x1.clone());
        let w = tape.leaf(w1.clone());
        std::hint::black_box(x.conv2d(&w, 2, gis_forge::tensor::Pad4::same(1)).value());
    }
    println!("conv L1 alone: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
