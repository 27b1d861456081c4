use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use yolos_cli::{checkpoint, config::RunConfig, train};
use yolos_core::model::Model;

fn sensitivity(model: &Model, data: &[yolos_core::dataset::LabeledImage]) -> (f64, f64) {
    // Relative spread of det embeddings / boxes across images.
    let outs: Vec<_> = data.iter().take(8).map(|i| model.forward(&i.image.to_tensor(), false).unwrap()).collect();
    let t = model.config.det_tokens;
    let mut emb_spread = 0.0; let mut box_spread = 0.0; let mut emb_norm = 0.0;
    for tok in 0..t {
        // mean embedding over images
        let d = outs[0].det_embeddings.shape()[1];
        let mut mean = vec![0.0; d];
        for o in &outs { for (m, v) in mean.iter_mut().zip(o.det_embeddings.row(tok)) { *m += v / outs.len() as f64; } }
        for o in &outs {
            let diff: f64 = o.det_embeddings.row(tok).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            emb_spread += diff.sqrt() / outs.len() as f64;
            let n: f64 = o.det_embeddings.row(tok).iter().map(|x| x * x).sum::<f64>().sqrt();
            emb_norm += n / outs.len() as f64;
            let bdiff: f64 = (0..4).map(|c| (o.boxes.at2(tok, c) - outs[0].boxes.at2(tok, c)).abs()).sum();
            box_spread += bdiff / outs.len() as f64;
        }
    }
    (emb_spread / emb_norm, box_spread / t as f64)
}

fn main() {
    let cfg = RunConfig::default();
    let data = train::build_eval_dataset(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let init = Model::init(cfg.model.clone(), &mut rng).unwrap();
    let (e, b) = sensitivity(&init, &data);
    println!("init:    emb spread/norm {e:.4}  box spread {b:.4}");
    for path in ["/tmp/run_lr3/model.ckpt", "/tmp/run_default/model.ckpt"] {
        if let Ok((mc, p)) = checkpoint::load(std::path::Path::new(path)) {
            let m = Model::new(mc, p).unwrap();
            let (e, b) = sensitivity(&m, &data);
            println!("{path}: emb spread/norm {e:.4}  box spread {b:.4}");
        }
    }
}
