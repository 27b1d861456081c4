use yolos_cli::{checkpoint, config::RunConfig, train};
use yolos_core::model::Model;
fn main() {
    let cfg = RunConfig::default();
    let data = train::build_eval_dataset(&cfg).unwrap();
    for path in ["/tmp/run_default/model.ckpt", "/tmp/run_lr10/model.ckpt"] {
        let (mc, p) = checkpoint::load(std::path::Path::new(path)).unwrap();
        let m = Model::new(mc, p).unwrap();
        let out = m.forward(&data[0].image.to_tensor(), true).unwrap();
        let attn = out.attention.unwrap();
        println!("{path}");
        for (l, layer) in attn.iter().enumerate() {
            let mut ent = 0.0; let mut n = 0;
            let mut det_ent = 0.0; let mut dn = 0;
            for head in layer {
                let s = head.shape()[0];
                for r in 0..s {
                    let e: f64 = head.row(r).iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
                    ent += e; n += 1;
                    if r >= s - 16 { det_ent += e; dn += 1; }
                }
            }
            let max_ent = (80f64).ln();
            println!("  layer {l}: mean entropy {:.3} (max {:.3}), det rows {:.3}", ent / n as f64, max_ent, det_ent / dn as f64);
        }
    }
}
