use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use yolos_cli::config::RunConfig;
use yolos_core::autodiff::Tape;
use yolos_core::loss::{assign, set_loss};
use yolos_core::model::Model;

fn main() {
    let cfg = RunConfig::default();
    let data = yolos_cli::train::build_train_dataset(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::init(cfg.model.clone(), &mut rng).unwrap();
    let img = data[0].image.to_tensor();

    let n = 30;
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        let _fg = model.forward_graph(&tape, &img, false).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        let fg = model.forward_graph(&tape, &img, false).unwrap();
        let m = assign(&fg.class_logits.value(), &fg.boxes.value(), &data[0].objects, &cfg.loss).unwrap();
        let (total, _) = set_loss(fg.class_logits, fg.boxes, &data[0].objects, &m, &cfg.loss, 0.1).unwrap();
        let grads = tape.backward(total).unwrap();
        std::hint::black_box(grads.get(fg.leaves[0].1));
    }
    let full = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward:      {:.2} ms", fwd * 1e3);
    println!("full step:    {:.2} ms (backward+loss = {:.2} ms)", full * 1e3, (full - fwd) * 1e3);

    // Raw matmul throughput at model-typical shapes.
    let a = yolos_core::tensor::Tensor::uniform(&[80, 64], -1.0, 1.0, &mut rng);
    let b = yolos_core::tensor::Tensor::uniform(&[64, 256], -1.0, 1.0, &mut rng);
    let t0 = Instant::now();
    let reps = 2000;
    for _ in 0..reps {
        let tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        std::hint::black_box(va.matmul(vb).unwrap().value());
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = (80 * 64 * 256) as f64;
    println!("matmul 80x64x256: {:.3} ms -> {:.2} GFLOP/s", per * 1e3, flops / per / 1e9);
}
