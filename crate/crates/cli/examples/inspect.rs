use yolos_cli::{checkpoint, config::RunConfig, train};
use yolos_core::model::Model;
fn main() {
    let cfg = RunConfig::default();
    let (mc, params) = checkpoint::load(std::path::Path::new("/tmp/run_lr3/model.ckpt")).unwrap();
    let model = Model::new(mc, params).unwrap();
    let data = train::build_eval_dataset(&cfg).unwrap();
    for img in data.iter().take(2) {
        println!("image {} gt:", img.id);
        for o in &img.objects { println!("   class {} box ({:.3},{:.3},{:.3},{:.3})", o.class_id, o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h); }
        let out = model.forward(&img.image.to_tensor(), false).unwrap();
        for t in 0..16 {
            let row = out.class_logits.row(t);
            let am = row.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p: f64 = (row[am]-max).exp() / row.iter().map(|&x| (x-max).exp()).sum::<f64>();
            println!("   tok {t:2} argmax {am} p {:.2} box ({:.3},{:.3},{:.3},{:.3})", p,
                out.boxes.at2(t,0), out.boxes.at2(t,1), out.boxes.at2(t,2), out.boxes.at2(t,3));
        }
    }
}
