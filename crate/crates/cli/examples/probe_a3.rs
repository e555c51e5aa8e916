use semfuse_core::checkpoint::load_cgfe;
use semfuse_core::datamodel::*;
use semfuse_core::metrics::MiouAccumulator;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = std::path::Path::new(&args[1]);
    let root = std::path::Path::new(&args[2]);
    let (model, _, _) = load_cgfe(ckpt).unwrap();
    let palette = model.palette.clone();
    let split = DatasetSplit::discover(root, SplitRole::Train).unwrap();
    let mut acc = MiouAccumulator::new(palette.n());
    let n = palette.n();
    let mut conf = vec![0u64; n * n];
    let mut cyc = 0.0f64;
    for id in &split.ids {
        let pair = load_pair(&split, id, &palette).unwrap();
        let img01 = model.input_from_pair(&pair);
        let signed = to_signed(&img01).unwrap();
        let seg = model.segment(&signed).unwrap();
        let pred = argmax_decode(&seg);
        let truth = pair.label.as_ref().unwrap();
        for (p, t) in pred.data.iter().zip(&truth.data) {
            conf[*t as usize * n + *p as usize] += 1;
        }
        acc.add(&pred, truth).unwrap();
        let (_, recon, _) = model.extract(&signed).unwrap();
        let recon01 = from_signed(&recon).unwrap();
        let l1: f32 = recon01.data().iter().zip(img01.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / recon01.numel() as f32;
        cyc += l1 as f64;
    }
    let (per_class, m) = acc.finish();
    println!("modality={} mIoU={m:.4} cycleL1={:.4}", model.modality.tag(), cyc / split.ids.len() as f64);
    for (c, iou) in per_class.iter().enumerate() {
        if let Some(v) = iou {
            let truth_total: u64 = (0..n).map(|p| conf[c * n + p]).sum();
            print!("  class {c:2} iou {v:.3} truth_px {truth_total:7} -> pred as: ");
            let mut row: Vec<(usize, u64)> = (0..n).map(|p| (p, conf[c * n + p])).filter(|x| x.1 > 0).collect();
            row.sort_by_key(|x| std::cmp::Reverse(x.1));
            for (p, cnt) in row.iter().take(4) { print!("{p}:{cnt} "); }
            println!();
        }
    }
}
