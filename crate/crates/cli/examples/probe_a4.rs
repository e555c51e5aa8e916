use semfuse_core::checkpoint::{load_cgfe, load_fusion};
use semfuse_core::datamodel::*;
use semfuse_core::metrics::ssimx;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = std::path::Path::new(&args[1]);
    let root = std::path::Path::new(&args[2]);
    let (cgfe_ir, _, _) = load_cgfe(&out.join("cgfe_ir.ckpt")).unwrap();
    let (cgfe_vi, _, _) = load_cgfe(&out.join("cgfe_vis.ckpt")).unwrap();
    let (fm, _, palette, _) = load_fusion(&out.join("fusion.ckpt")).unwrap();
    let split = DatasetSplit::discover(root, SplitRole::Train).unwrap();
    let (mut ti, mut tv, mut tn) = (0.0f64, 0.0f64, 0usize);
    let (mut bi, mut bv, mut bn) = (0.0f64, 0.0f64, 0usize);
    let mut sx_sum = 0.0;
    let mut sx_min = f64::INFINITY;
    for id in &split.ids {
        let pair = load_pair(&split, id, &palette).unwrap();
        let (fy, mask) = fm.fuse_luminance(&cgfe_ir, &cgfe_vi, &pair).unwrap();
        let vy = luminance(&pair.vis);
        for p in 0..fy.numel() {
            let (f, i, v) = (fy.data()[p] as f64, pair.ir.data()[p] as f64, vy.data()[p] as f64);
            if mask.is_thermal(p) { ti += (f-i).abs(); tv += (f-v).abs(); tn += 1; }
            else { bi += (f-i).abs(); bv += (f-v).abs(); bn += 1; }
        }
        let sx = ssimx(&fy, &pair.ir, &vy).unwrap();
        sx_sum += sx; sx_min = sx_min.min(sx);
    }
    println!("thermal px {tn}: |f-ir| {:.4} vs |f-vis| {:.4}  ({})", ti/tn as f64, tv/tn as f64, if ti/tn as f64 > tv/tn as f64 {"FAIL"} else {"ok"});
    println!("backgnd px {bn}: |f-vis| {:.4} vs |f-ir| {:.4}  ({})", bv/bn as f64, bi/bn as f64, if bv/bn as f64 > bi/bn as f64 {"FAIL"} else {"ok"});
    println!("ssimx mean {:.4} min {:.4}  ({})", sx_sum/split.ids.len() as f64, sx_min, if sx_sum/split.ids.len() as f64 >= 1.2 {"ok"} else {"FAIL"});
    println!("sigma_omega {:.4} sigma_gamma {:.4}", 1.0/(1.0+(-fm.omega() as f64).exp()), 1.0/(1.0+(-fm.gamma() as f64).exp()));
}
