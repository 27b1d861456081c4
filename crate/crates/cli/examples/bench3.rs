use std::time::Instant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use yolos_cli::config::RunConfig;
use yolos_core::autodiff::Tape;
use yolos_core::model::Model;

fn time_fwd(label: &str, cfg: &yolos_core::model::ModelConfig, img: &yolos_core::tensor::Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::init(cfg.clone(), &mut rng).unwrap();
    let n = 40;
    // warmup
    for _ in 0..5 { let tape = Tape::new(); std::hint::black_box(model.forward_graph(&tape, img, false).unwrap()); }
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        std::hint::black_box(model.forward_graph(&tape, img, false).unwrap());
    }
    println!("{label}: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
}

fn main() {
    let cfg = RunConfig::default();
    let data = yolos_cli::train::build_train_dataset(&cfg).unwrap();
    let img = data[0].image.to_tensor();
    let base = cfg.model.clone();
    time_fwd("depth4 heads4 ratio4", &base, &img);
    let mut c = base.clone(); c.depth = 1;
    time_fwd("depth1 heads4 ratio4", &c, &img);
    let mut c = base.clone(); c.heads = 1;
    time_fwd("depth4 heads1 ratio4", &c, &img);
    let mut c = base.clone(); c.mlp_ratio = 1.0;
    time_fwd("depth4 heads4 ratio1", &c, &img);
}
