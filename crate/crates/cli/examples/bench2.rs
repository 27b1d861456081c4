use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use yolos_core::autodiff::Tape;
use yolos_core::tensor::Tensor;

fn time_op(name: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    println!("{name}: {:.3} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[80, 256], -2.0, 2.0, &mut rng);
    let s = Tensor::uniform(&[80, 80], -2.0, 2.0, &mut rng);
    let d = Tensor::uniform(&[80, 64], -2.0, 2.0, &mut rng);
    time_op("gelu 80x256", 500, || {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        std::hint::black_box(v.gelu().value());
    });
    time_op("softmax 80x80", 500, || {
        let tape = Tape::new();
        let v = tape.constant(s.clone());
        std::hint::black_box(v.softmax().unwrap().value());
    });
    time_op("layernorm 80x64", 500, || {
        let tape = Tape::new();
        let v = tape.constant(d.clone());
        std::hint::black_box(v.layernorm(1e-6).unwrap().value());
    });
    time_op("sigmoid 80x64", 500, || {
        let tape = Tape::new();
        let v = tape.constant(d.clone());
        std::hint::black_box(v.sigmoid().value());
    });
    time_op("add 80x64", 2000, || {
        let tape = Tape::new();
        let v = tape.constant(d.clone());
        let w = tape.constant(d.clone());
        std::hint::black_box(v.add(w).unwrap().value());
    });
    // erf/exp primitive costs
    let vals: Vec<f64> = (0..20480).map(|i| (i as f64) * 1e-4 - 1.0).collect();
    time_op("libm::erf x20480", 500, || {
        std::hint::black_box(vals.iter().map(|&v| libm::erf(v)).sum::<f64>());
    });
    time_op("f64::exp x20480", 500, || {
        std::hint::black_box(vals.iter().map(|&v| v.exp()).sum::<f64>());
    });
}
