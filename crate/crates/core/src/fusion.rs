//! The fusion stage: with both extractors frozen, collect the five
//! reconstruction taps per modality, upsample and concatenate them, refine
//! through a channel-reducing residual block plus a projection conv to a
//! single luminance plane, and blend the two planes with trainable
//! per-region weights gated by the thermal mask derived from the infrared
//! segmentation. Training minimizes a purely geometric objective (SSIM
//! against the visible luminance plus MSE against both sources).

use crate::cgfe::{CgfeModel, Modality, NetConfig};
use crate::datamodel::{argmax_decode, attach_chroma, luminance, ImagePair, LabelPalette, SegMap};
use crate::error::{Error, Result};
use crate::lossops::ssim_mean_on_tape;
use crate::netblocks::{
    build_frb, ActKind, ConvSpec, Layer, LayerBody, LayerGraph, LayerInput, NormKind, ParamSet,
    TapOutput,
};
use crate::optim::{Adam, AdamConfig};
use crate::par::run_indexed;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Binary thermal/background mask over `{0, 255}`; 0 marks thermal
/// foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThermalMask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl ThermalMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Contract(format!(
                "mask buffer {} does not match {h}x{w}",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::Contract(format!(
                "mask values must be 0 or 255, found {bad}"
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_thermal(&self, p: usize) -> bool {
        self.data[p] == 0
    }

    pub fn thermal_pixel_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }
}

/// Stage-two hyperparameters (geometric loss weights).
#[derive(Clone, Copy, Debug)]
pub struct FusionHyper {
    pub mu: f64,
    pub rho: f64,
    pub eta: f64,
    pub adam: AdamConfig,
}

impl Default for FusionHyper {
    fn default() -> Self {
        Self {
            mu: 100.0,
            rho: 50.0,
            eta: 40.0,
            adam: AdamConfig::default(),
        }
    }
}

/// Itemized stage-two losses (batch means).
#[derive(Clone, Copy, Debug, Default)]
pub struct GeoLossRecord {
    pub ssim_term: f64,
    pub mse_vis_term: f64,
    pub mse_ir_term: f64,
    pub total: f64,
    pub mu: f64,
    pub rho: f64,
    pub eta: f64,
}

impl GeoLossRecord {
    pub fn check_recomposition(&self) {
        let parts =
            self.mu * self.ssim_term + self.rho * self.mse_vis_term + self.eta * self.mse_ir_term;
        assert!(
            (self.total - parts).abs() <= 1e-5 * self.total.abs().max(1.0),
            "geometric loss does not recompose: total={} parts={}",
            self.total,
            parts
        );
    }
}

/// The fusion head: per-modality refinement (FRB + projection) and the two
/// trainable region gates.
pub struct FusionModel<S> {
    pub cfg: NetConfig,
    pub frb_ir: LayerGraph,
    pub frb_vi: LayerGraph,
    pub proj_ir: LayerGraph,
    pub proj_vi: LayerGraph,
    pub params_frb_ir: ParamSet<S>,
    pub params_frb_vi: ParamSet<S>,
    pub params_proj_ir: ParamSet<S>,
    pub params_proj_vi: ParamSet<S>,
    /// Two scalars: `omega` (thermal-region infrared gate) and `gamma`
    /// (background visible gate), stored pre-sigmoid.
    pub gates: ParamSet<S>,
}

pub struct FusionOptim<S> {
    pub frb_ir: Adam<S>,
    pub frb_vi: Adam<S>,
    pub proj_ir: Adam<S>,
    pub proj_vi: Adam<S>,
    pub gates: Adam<S>,
}

impl<S: Scalar> FusionOptim<S> {
    pub fn new(cfg: AdamConfig, model: &FusionModel<S>) -> Self {
        Self {
            frb_ir: Adam::new(cfg, &model.params_frb_ir),
            frb_vi: Adam::new(cfg, &model.params_frb_vi),
            proj_ir: Adam::new(cfg, &model.params_proj_ir),
            proj_vi: Adam::new(cfg, &model.params_proj_vi),
            gates: Adam::new(cfg, &model.gates),
        }
    }
}

fn build_projection(name: &str, in_ch: usize) -> LayerGraph {
    LayerGraph {
        name: name.into(),
        in_ch,
        layers: vec![Layer {
            input: LayerInput::External,
            body: LayerBody::Conv(ConvSpec {
                in_ch,
                out_ch: 1,
                k: 3,
                stride: 1,
                pad: 1,
                out_pad: 0,
                transposed: false,
            }),
            norm: NormKind::None,
            act: ActKind::Sigmoid,
            tap: None,
        }],
    }
}

struct FusionItemOut<S> {
    grads: [Vec<Tensor<S>>; 5],
    record: GeoLossRecord,
}

/// Frozen-backbone outputs for one pair. The extractors never change
/// during stage two, so these are reusable across epochs; the thermal mask
/// is still derived from the stored live segmentation at every use.
pub struct BackboneFeatures<S> {
    pub id: String,
    pub size: (usize, usize),
    pub seg_ir: SegMap<S>,
    pub taps_ir: Vec<TapOutput<S>>,
    pub taps_vi: Vec<TapOutput<S>>,
    pub vis_y: Tensor<S>,
    pub ir01: Tensor<S>,
    pub palette: LabelPalette,
}

impl<S: Scalar> BackboneFeatures<S> {
    pub fn approx_bytes(&self) -> usize {
        let taps: usize = self
            .taps_ir
            .iter()
            .chain(&self.taps_vi)
            .map(|t| t.value.numel())
            .sum();
        (taps + self.seg_ir.scores.numel() + self.vis_y.numel() + self.ir01.numel())
            * std::mem::size_of::<S>()
    }
}

/// Run both frozen extractors on one pair and keep everything the fusion
/// head needs.
pub fn extract_backbone<S: Scalar>(
    cgfe_ir: &CgfeModel<S>,
    cgfe_vi: &CgfeModel<S>,
    pair: &ImagePair,
) -> Result<BackboneFeatures<S>> {
    if cgfe_ir.modality != Modality::Ir || cgfe_vi.modality != Modality::Vis {
        return Err(Error::Config(
            "extractors must be the infrared and visible branches".into(),
        ));
    }
    let ir_signed = crate::datamodel::to_signed(&pair.ir.cast::<S>())?;
    let vis_signed = crate::datamodel::to_signed(&pair.vis.cast::<S>())?;
    let (seg_ir, _, taps_ir) = cgfe_ir.extract(&ir_signed)?;
    let (_, _, taps_vi) = cgfe_vi.extract(&vis_signed)?;
    Ok(BackboneFeatures {
        id: pair.id.clone(),
        size: pair.size(),
        seg_ir,
        taps_ir,
        taps_vi,
        vis_y: luminance(&pair.vis).cast(),
        ir01: pair.ir.cast(),
        palette: cgfe_ir.palette.clone(),
    })
}

impl<S: Scalar> FusionModel<S> {
    /// Gates start at 0.5 pre-sigmoid, so the thermal region initially
    /// leans infrared and the background leans visible.
    pub const GATE_INIT: f64 = 0.5;

    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let c = cfg.tap_channels();
        let frb_ir = build_frb(c, cfg.frb_reduction)?;
        let frb_vi = build_frb(c, cfg.frb_reduction)?;
        let width = c / cfg.frb_reduction;
        let proj_ir = build_projection("proj_ir", width);
        let proj_vi = build_projection("proj_vi", width);
        let params_frb_ir = frb_ir.init_params(&mut SeededRng::stream(seed, 0x31));
        let params_frb_vi = frb_vi.init_params(&mut SeededRng::stream(seed, 0x32));
        let params_proj_ir = proj_ir.init_params(&mut SeededRng::stream(seed, 0x33));
        let params_proj_vi = proj_vi.init_params(&mut SeededRng::stream(seed, 0x34));
        let gates = ParamSet {
            entries: vec![
                ("omega".into(), Tensor::scalar(S::from_f64(Self::GATE_INIT))),
                ("gamma".into(), Tensor::scalar(S::from_f64(Self::GATE_INIT))),
            ],
        };
        Ok(Self {
            cfg,
            frb_ir,
            frb_vi,
            proj_ir,
            proj_vi,
            params_frb_ir,
            params_frb_vi,
            params_proj_ir,
            params_proj_vi,
            gates,
        })
    }

    pub fn omega(&self) -> S {
        self.gates.entries[0].1.item()
    }

    pub fn gamma(&self) -> S {
        self.gates.entries[1].1.item()
    }

    /// FRB + projection of one modality on plain tensors.
    pub fn refine(&self, f_rec: &Tensor<S>, modality: Modality) -> Result<Tensor<S>> {
        let (frb, proj, p_frb, p_proj) = match modality {
            Modality::Ir => (&self.frb_ir, &self.proj_ir, &self.params_frb_ir, &self.params_proj_ir),
            Modality::Vis => (&self.frb_vi, &self.proj_vi, &self.params_frb_vi, &self.params_proj_vi),
        };
        let (mid, _) = frb.infer(f_rec, p_frb, false)?;
        let (out, _) = proj.infer(&mid, p_proj, false)?;
        Ok(out)
    }

    fn refine_on_tape(
        &self,
        tape: &Tape<S>,
        f_rec: Value,
        modality: Modality,
        p_frb: &[Value],
        p_proj: &[Value],
    ) -> Result<Value> {
        let (frb, proj) = match modality {
            Modality::Ir => (&self.frb_ir, &self.proj_ir),
            Modality::Vis => (&self.frb_vi, &self.proj_vi),
        };
        let (mid, _) = frb.forward(tape, f_rec, p_frb, false)?;
        let (out, _) = proj.forward(tape, mid, p_proj, false)?;
        Ok(out)
    }

    /// One training step on a batch with both extractors frozen. Updates
    /// the refinement blocks, the projections and the two gates only.
    pub fn train_step(
        &mut self,
        cgfe_ir: &CgfeModel<S>,
        cgfe_vi: &CgfeModel<S>,
        batch: &[&ImagePair],
        hyper: &FusionHyper,
        opt: &mut FusionOptim<S>,
    ) -> Result<GeoLossRecord> {
        if cgfe_ir.cfg != self.cfg || cgfe_vi.cfg != self.cfg {
            return Err(Error::Config(
                "extractor scale does not match the fusion head".into(),
            ));
        }
        let feats: Vec<Result<BackboneFeatures<S>>> =
            run_indexed(batch.len(), |i| extract_backbone(cgfe_ir, cgfe_vi, batch[i]));
        let mut owned = Vec::with_capacity(feats.len());
        for f in feats {
            owned.push(f?);
        }
        let refs: Vec<&BackboneFeatures<S>> = owned.iter().collect();
        self.train_step_cached(&refs, hyper, opt)
    }

    /// As [`FusionModel::train_step`], but on precomputed backbone features
    /// (exactly equivalent; the extractors are frozen).
    pub fn train_step_cached(
        &mut self,
        batch: &[&BackboneFeatures<S>],
        hyper: &FusionHyper,
        opt: &mut FusionOptim<S>,
    ) -> Result<GeoLossRecord> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let items: Vec<Result<FusionItemOut<S>>> =
            run_indexed(batch.len(), |i| self.item_pass(batch[i], hyper));
        let mut outs = Vec::with_capacity(items.len());
        for item in items {
            outs.push(item?);
        }
        let scale = S::from_f64(1.0 / outs.len() as f64);
        let mean_grads = |k: usize| -> Vec<Tensor<S>> {
            let mut acc = outs[0].grads[k].clone();
            for item in &outs[1..] {
                for (a, g) in acc.iter_mut().zip(&item.grads[k]) {
                    for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
            }
            for a in &mut acc {
                for v in a.data_mut() {
                    *v *= scale;
                }
            }
            acc
        };
        let g0 = mean_grads(0);
        let g1 = mean_grads(1);
        let g2 = mean_grads(2);
        let g3 = mean_grads(3);
        let g4 = mean_grads(4);
        opt.frb_ir.apply(&mut self.params_frb_ir, &g0);
        opt.frb_vi.apply(&mut self.params_frb_vi, &g1);
        opt.proj_ir.apply(&mut self.params_proj_ir, &g2);
        opt.proj_vi.apply(&mut self.params_proj_vi, &g3);
        opt.gates.apply(&mut self.gates, &g4);

        let n = outs.len() as f64;
        let mut rec = GeoLossRecord {
            mu: hyper.mu,
            rho: hyper.rho,
            eta: hyper.eta,
            ..Default::default()
        };
        for o in &outs {
            rec.ssim_term += o.record.ssim_term / n;
            rec.mse_vis_term += o.record.mse_vis_term / n;
            rec.mse_ir_term += o.record.mse_ir_term / n;
            rec.total += o.record.total / n;
        }
        rec.check_recomposition();
        Ok(rec)
    }

    /// Assemble the full stage-two objective for one pair's precomputed
    /// features on a caller's tape.
    pub fn stage_loss_graph(
        &self,
        tape: &Tape<S>,
        feats: &BackboneFeatures<S>,
        hyper: &FusionHyper,
        trainable: bool,
    ) -> Result<FusionLossGraph> {
        let (i_f, _mask, reg) = self.head_on_tape(tape, feats, trainable)?;
        let vis_y = tape.constant(feats.vis_y.clone());
        let ir01 = tape.constant(feats.ir01.clone());
        let parts = geo_on_tape(tape, i_f, vis_y, ir01, hyper)?;
        let reg = reg.unwrap_or_else(|| HeadRegistration {
            frb_ir: Vec::new(),
            frb_vi: Vec::new(),
            proj_ir: Vec::new(),
            proj_vi: Vec::new(),
            gates: Vec::new(),
        });
        Ok(FusionLossGraph {
            params_frb_ir: reg.frb_ir,
            params_frb_vi: reg.frb_vi,
            params_proj_ir: reg.proj_ir,
            params_proj_vi: reg.proj_vi,
            gates: reg.gates,
            fused: i_f,
            ssim_term: parts.ssim,
            mse_vis_term: parts.mse_vis,
            mse_ir_term: parts.mse_ir,
            total: parts.total,
        })
    }

    fn item_pass(
        &self,
        feats: &BackboneFeatures<S>,
        hyper: &FusionHyper,
    ) -> Result<FusionItemOut<S>> {
        let tape = Tape::new();
        let graph = self.stage_loss_graph(&tape, feats, hyper, true)?;
        let mut grads = tape.backward(graph.total);

        let collect = |grads: &mut crate::tape::Gradients<S>,
                       vals: &[Value],
                       set: &ParamSet<S>|
         -> Vec<Tensor<S>> {
            vals.iter()
                .zip(&set.entries)
                .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        };
        let record = GeoLossRecord {
            ssim_term: tape.item(graph.ssim_term).to_f64(),
            mse_vis_term: tape.item(graph.mse_vis_term).to_f64(),
            mse_ir_term: tape.item(graph.mse_ir_term).to_f64(),
            total: tape.item(graph.total).to_f64(),
            mu: hyper.mu,
            rho: hyper.rho,
            eta: hyper.eta,
        };
        Ok(FusionItemOut {
            grads: [
                collect(&mut grads, &graph.params_frb_ir, &self.params_frb_ir),
                collect(&mut grads, &graph.params_frb_vi, &self.params_frb_vi),
                collect(&mut grads, &graph.params_proj_ir, &self.params_proj_ir),
                collect(&mut grads, &graph.params_proj_vi, &self.params_proj_vi),
                collect(&mut grads, &graph.gates, &self.gates),
            ],
            record,
        })
    }

    /// The fusion-head path on a tape, from precomputed backbone features.
    /// With `trainable` the head parameters are registered live (and
    /// returned); the taps enter as constants either way. The thermal mask
    /// is derived from the stored infrared segmentation at every call.
    fn head_on_tape(
        &self,
        tape: &Tape<S>,
        feats: &BackboneFeatures<S>,
        trainable: bool,
    ) -> Result<(Value, ThermalMask, Option<HeadRegistration>)> {
        let (h, w) = feats.size;
        let mask = isdm_mask(&feats.seg_ir, &feats.palette);
        let as_values = |taps: &[TapOutput<S>]| -> Vec<(String, Value)> {
            taps.iter()
                .map(|t| (t.name.clone(), tape.constant(t.value.clone())))
                .collect()
        };
        let f_rec_ir = collect_on_tape(tape, &as_values(&feats.taps_ir), (h, w))?;
        let f_rec_vi = collect_on_tape(tape, &as_values(&feats.taps_vi), (h, w))?;

        let p_frb_ir = self.params_frb_ir.register(tape, trainable);
        let p_frb_vi = self.params_frb_vi.register(tape, trainable);
        let p_proj_ir = self.params_proj_ir.register(tape, trainable);
        let p_proj_vi = self.params_proj_vi.register(tape, trainable);
        let p_gates = self.gates.register(tape, trainable);

        let f_ref_ir = self.refine_on_tape(tape, f_rec_ir, Modality::Ir, &p_frb_ir, &p_proj_ir)?;
        let f_ref_vi = self.refine_on_tape(tape, f_rec_vi, Modality::Vis, &p_frb_vi, &p_proj_vi)?;
        let i_f = adaptive_fuse_on_tape(tape, f_ref_ir, f_ref_vi, &mask, p_gates[0], p_gates[1])?;
        let reg = trainable.then_some(HeadRegistration {
            frb_ir: p_frb_ir,
            frb_vi: p_frb_vi,
            proj_ir: p_proj_ir,
            proj_vi: p_proj_vi,
            gates: p_gates,
        });
        Ok((i_f, mask, reg))
    }

    /// Fused luminance plane (in `[0,1]`) plus the mask used.
    pub fn fuse_luminance(
        &self,
        cgfe_ir: &CgfeModel<S>,
        cgfe_vi: &CgfeModel<S>,
        pair: &ImagePair,
    ) -> Result<(Tensor<S>, ThermalMask)> {
        if cgfe_ir.cfg != self.cfg || cgfe_vi.cfg != self.cfg {
            return Err(Error::Config(
                "extractor scale does not match the fusion head".into(),
            ));
        }
        let feats = extract_backbone(cgfe_ir, cgfe_vi, pair)?;
        self.fuse_luminance_cached(&feats)
    }

    /// As [`FusionModel::fuse_luminance`] on precomputed features.
    pub fn fuse_luminance_cached(
        &self,
        feats: &BackboneFeatures<S>,
    ) -> Result<(Tensor<S>, ThermalMask)> {
        let tape = Tape::new();
        let (i_f, mask, _) = self.head_on_tape(&tape, feats, false)?;
        Ok((tape.get(i_f), mask))
    }

    /// Full inference: fused luminance re-attached to the visible
    /// chrominance planes, clamped to `[0,1]`.
    pub fn fuse_pair(
        &self,
        cgfe_ir: &CgfeModel<S>,
        cgfe_vi: &CgfeModel<S>,
        pair: &ImagePair,
    ) -> Result<(Tensor<f32>, ThermalMask)> {
        let (y, mask) = self.fuse_luminance(cgfe_ir, cgfe_vi, pair)?;
        let y32: Tensor<f32> = y.cast();
        Ok((attach_chroma(&y32, &pair.vis), mask))
    }
}

struct HeadRegistration {
    frb_ir: Vec<Value>,
    frb_vi: Vec<Value>,
    proj_ir: Vec<Value>,
    proj_vi: Vec<Value>,
    gates: Vec<Value>,
}

/// The complete stage-two objective of one pair, assembled on a caller's
/// tape with live head-parameter leaves (extractors stay frozen
/// constants). Lets external code gradient-check the geometric loss.
pub struct FusionLossGraph {
    pub params_frb_ir: Vec<Value>,
    pub params_frb_vi: Vec<Value>,
    pub params_proj_ir: Vec<Value>,
    pub params_proj_vi: Vec<Value>,
    pub gates: Vec<Value>,
    pub fused: Value,
    pub ssim_term: Value,
    pub mse_vis_term: Value,
    pub mse_ir_term: Value,
    pub total: Value,
}

struct GeoParts {
    ssim: Value,
    mse_vis: Value,
    mse_ir: Value,
    total: Value,
}

fn geo_on_tape<S: Scalar>(
    tape: &Tape<S>,
    i_f: Value,
    vis_y: Value,
    ir: Value,
    hyper: &FusionHyper,
) -> Result<GeoParts> {
    let ssim_v = ssim_mean_on_tape(tape, i_f, vis_y)?;
    let ssim = tape.add_scalar(tape.neg(ssim_v), 1.0);
    let mse_vis = tape.mse(i_f, vis_y);
    let mse_ir = tape.mse(i_f, ir);
    let total = tape.add(
        tape.add(
            tape.mul_scalar(ssim, hyper.mu),
            tape.mul_scalar(mse_vis, hyper.rho),
        ),
        tape.mul_scalar(mse_ir, hyper.eta),
    );
    Ok(GeoParts {
        ssim,
        mse_vis,
        mse_ir,
        total,
    })
}

/// Upsample five reconstruction taps to `target` (bilinear) and concatenate
/// along channels in tap order.
pub fn collect_features<S: Scalar>(
    taps: &[TapOutput<S>],
    target: (usize, usize),
) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let vals: Vec<(String, Value)> = taps
        .iter()
        .map(|t| (t.name.clone(), tape.constant(t.value.clone())))
        .collect();
    let out = collect_on_tape(&tape, &vals, target)?;
    Ok(tape.get(out))
}

fn collect_on_tape<S: Scalar>(
    tape: &Tape<S>,
    taps: &[(String, Value)],
    target: (usize, usize),
) -> Result<Value> {
    if taps.len() != 5 {
        return Err(Error::Contract(format!(
            "feature collection expects exactly 5 taps, got {}",
            taps.len()
        )));
    }
    let (h, w) = target;
    let ups: Vec<Value> = taps
        .iter()
        .map(|(_, v)| {
            let s = tape.shape(*v);
            if (s[1], s[2]) == (h, w) {
                *v
            } else {
                tape.up_bilinear(*v, h, w)
            }
        })
        .collect();
    Ok(tape.concat_chan(&ups))
}

/// Thermal mask from the infrared segmentation: 0 where the decoded class
/// is thermal, 255 otherwise.
pub fn isdm_mask<S: Scalar>(seg_ir: &SegMap<S>, palette: &LabelPalette) -> ThermalMask {
    let decoded = argmax_decode(seg_ir);
    let data = decoded
        .data
        .iter()
        .map(|&c| if palette.is_thermal(c) { 0u8 } else { 255u8 })
        .collect();
    ThermalMask {
        h: decoded.h,
        w: decoded.w,
        data,
    }
}

fn adaptive_fuse_on_tape<S: Scalar>(
    tape: &Tape<S>,
    f_ir: Value,
    f_vi: Value,
    mask: &ThermalMask,
    omega: Value,
    gamma: Value,
) -> Result<Value> {
    let s_ir = tape.shape(f_ir);
    let s_vi = tape.shape(f_vi);
    if s_ir != s_vi {
        return Err(Error::Size(format!(
            "adaptive fuse operands differ: {s_ir:?} vs {s_vi:?}"
        )));
    }
    if (s_ir[1], s_ir[2]) != (mask.h, mask.w) {
        return Err(Error::Size(format!(
            "mask {}x{} does not match features {}x{}",
            mask.h, mask.w, s_ir[1], s_ir[2]
        )));
    }
    let c = s_ir[0];
    let hw = mask.h * mask.w;
    let mut thermal = Tensor::<S>::zeros(&[c, mask.h, mask.w]);
    for ci in 0..c {
        for p in 0..hw {
            if mask.is_thermal(p) {
                thermal.data_mut()[ci * hw + p] = S::ONE;
            }
        }
    }
    let m_thermal = tape.constant(thermal.clone());
    let m_background = tape.constant(thermal.map(|v| S::ONE - v));

    let sw = tape.sigmoid(omega);
    let sg = tape.sigmoid(gamma);
    let one_minus_sw = tape.add_scalar(tape.neg(sw), 1.0);
    let one_minus_sg = tape.add_scalar(tape.neg(sg), 1.0);

    // Per-pixel blend weights: thermal uses sigma(omega) on infrared,
    // background uses sigma(gamma) on visible.
    let w_ir = tape.add(
        tape.mul_scalar_value(m_thermal, sw),
        tape.mul_scalar_value(m_background, one_minus_sg),
    );
    let w_vi = tape.add(
        tape.mul_scalar_value(m_thermal, one_minus_sw),
        tape.mul_scalar_value(m_background, sg),
    );
    Ok(tape.add(tape.mul(f_ir, w_ir), tape.mul(f_vi, w_vi)))
}

/// Region-gated convex blend of the two refined planes (Eq. form:
/// thermal pixels get `sigma(omega)*f_ir + (1-sigma(omega))*f_vi`,
/// background pixels get `(1-sigma(gamma))*f_ir + sigma(gamma)*f_vi`).
pub fn adaptive_fuse<S: Scalar>(
    f_ir: &Tensor<S>,
    f_vi: &Tensor<S>,
    mask: &ThermalMask,
    omega: S,
    gamma: S,
) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let a = tape.constant(f_ir.clone());
    let b = tape.constant(f_vi.clone());
    let o = tape.constant(Tensor::scalar(omega));
    let g = tape.constant(Tensor::scalar(gamma));
    let out = adaptive_fuse_on_tape(&tape, a, b, mask, o, g)?;
    Ok(tape.get(out))
}

/// Geometric loss on plain tensors:
/// `mu*(1 - SSIM(i_f, vis_y)) + rho*MSE(i_f, vis_y) + eta*MSE(i_f, ir)`.
pub fn loss_geo<S: Scalar>(
    i_f: &Tensor<S>,
    vis_y: &Tensor<S>,
    ir: &Tensor<S>,
    mu: f64,
    rho: f64,
    eta: f64,
) -> Result<GeoLossRecord> {
    if i_f.shape() != vis_y.shape() || i_f.shape() != ir.shape() {
        return Err(Error::Size(format!(
            "geometric loss operands differ: {:?} vs {:?} vs {:?}",
            i_f.shape(),
            vis_y.shape(),
            ir.shape()
        )));
    }
    let tape = Tape::new();
    let f = tape.constant(i_f.clone());
    let v = tape.constant(vis_y.clone());
    let r = tape.constant(ir.clone());
    let hyper = FusionHyper {
        mu,
        rho,
        eta,
        adam: AdamConfig::default(),
    };
    let parts = geo_on_tape(&tape, f, v, r, &hyper)?;
    let rec = GeoLossRecord {
        ssim_term: tape.item(parts.ssim).to_f64(),
        mse_vis_term: tape.item(parts.mse_vis).to_f64(),
        mse_ir_term: tape.item(parts.mse_ir).to_f64(),
        total: tape.item(parts.total).to_f64(),
        mu,
        rho,
        eta,
    };
    rec.check_recomposition();
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgfe::CgfeOptim;
    use crate::cgfe::TrainHyper;
    use crate::datamodel::{onehot, synth_scene};

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            n_classes: 14,
            base_ch: 4,
            unet_depth: 2,
            resnet_blocks: 2,
            disc_layers: 1,
            frb_reduction: 4,
        }
    }

    fn tiny_pair(seed: u64) -> ImagePair {
        synth_scene(seed, (32, 32), &LabelPalette::fmb(), 4).unwrap()
    }

    fn fake_taps(base: usize, h: usize, w: usize, seed: u64) -> Vec<TapOutput<f64>> {
        let mut rng = SeededRng::new(seed);
        let spec = [
            ("tap1", 2 * base, h / 2, w / 2),
            ("tap2", 4 * base, h / 4, w / 4),
            ("tap3", 4 * base, h / 4, w / 4),
            ("tap4", 2 * base, h / 2, w / 2),
            ("tap5", base, h, w),
        ];
        spec.iter()
            .map(|&(name, c, th, tw)| TapOutput {
                name: name.into(),
                value: Tensor::new(
                    vec![c, th, tw],
                    (0..c * th * tw).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                ),
            })
            .collect()
    }

    #[test]
    fn collect_features_channel_arithmetic() {
        // base 64: tap channels 128+256+256+128+64 = 832
        let taps = fake_taps(64, 16, 16, 1);
        let f = collect_features(&taps, (16, 16)).unwrap();
        assert_eq!(f.shape(), &[832, 16, 16]);

        // taps already at target size pass through unchanged
        let same: Vec<TapOutput<f64>> = taps
            .iter()
            .map(|t| TapOutput {
                name: t.name.clone(),
                value: {
                    let (c, ..) = t.value.chw();
                    Tensor::new(vec![c, 4, 4], t.value.data()[..c * 16].to_vec())
                },
            })
            .collect();
        let g = collect_features(&same, (4, 4)).unwrap();
        let mut offset = 0;
        for t in &same {
            let n = t.value.numel();
            assert_eq!(&g.data()[offset..offset + n], t.value.data());
            offset += n;
        }

        assert!(matches!(
            collect_features(&taps[..4], (16, 16)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn isdm_matches_thermal_membership() {
        let palette = LabelPalette::fmb();
        // single-class maps, exhaustive over all 14 classes
        for c in 0..14u8 {
            let label = crate::datamodel::LabelMap::new(4, 4, vec![c; 16]);
            let seg = onehot::<f64>(&label, 14).unwrap();
            let mask = isdm_mask(&seg, &palette);
            let expect = if palette.is_thermal(c) { 0 } else { 255 };
            assert!(mask.data().iter().all(|&v| v == expect), "class {c}");
        }
    }

    #[test]
    fn adaptive_fuse_identity_midpoint_saturation() {
        let mut rng = SeededRng::new(5);
        let f: Tensor<f64> = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.next_f64()).collect());
        let mask = ThermalMask::new(
            8,
            8,
            (0..64).map(|p| if p % 3 == 0 { 0 } else { 255 }).collect(),
        )
        .unwrap();

        // equal inputs: any gates give the input back
        let out = adaptive_fuse(&f, &f, &mask, 1.3, -2.1).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // omega = 0: thermal pixels are the exact mean
        let g: Tensor<f64> = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.next_f64()).collect());
        let out = adaptive_fuse(&f, &g, &mask, 0.0, 0.7).unwrap();
        for p in 0..64 {
            if mask.is_thermal(p) {
                let mid = 0.5 * (f.data()[p] + g.data()[p]);
                assert!((out.data()[p] - mid).abs() < 1e-12);
            }
        }

        // omega = 20 saturates to the infrared plane on an all-thermal mask
        let all_thermal = ThermalMask::new(8, 8, vec![0; 64]).unwrap();
        let out = adaptive_fuse(&f, &g, &all_thermal, 20.0, 0.0).unwrap();
        for p in 0..64 {
            assert!((out.data()[p] - f.data()[p]).abs() < 1e-8);
        }
    }

    #[test]
    fn adaptive_fuse_is_a_convex_combination() {
        let mut rng = SeededRng::new(6);
        for _ in 0..50 {
            let f: Tensor<f64> =
                Tensor::new(vec![1, 6, 6], (0..36).map(|_| rng.uniform(-2.0, 2.0)).collect());
            let g: Tensor<f64> =
                Tensor::new(vec![1, 6, 6], (0..36).map(|_| rng.uniform(-2.0, 2.0)).collect());
            let mask = ThermalMask::new(
                6,
                6,
                (0..36)
                    .map(|_| if rng.below(2) == 0 { 0 } else { 255 })
                    .collect(),
            )
            .unwrap();
            let omega = rng.uniform(-6.0, 6.0);
            let gamma = rng.uniform(-6.0, 6.0);
            let out = adaptive_fuse(&f, &g, &mask, omega, gamma).unwrap();
            for p in 0..36 {
                let (lo, hi) = (
                    f.data()[p].min(g.data()[p]),
                    f.data()[p].max(g.data()[p]),
                );
                assert!(out.data()[p] >= lo - 1e-9 && out.data()[p] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn geo_loss_identity_isolation_and_oracle() {
        let mut rng = SeededRng::new(7);
        let x: Tensor<f64> =
            Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.next_f64()).collect());
        let rec = loss_geo(&x, &x, &x, 100.0, 50.0, 40.0).unwrap();
        assert!(rec.total.abs() < 1e-9);

        // mu = rho = 0 isolates the infrared MSE term
        let y: Tensor<f64> =
            Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.next_f64()).collect());
        let rec = loss_geo(&x, &y, &y, 0.0, 0.0, 40.0).unwrap();
        let mse: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 256.0;
        assert!((rec.total - 40.0 * mse).abs() < 1e-9);

        // straight-line oracle on random triples
        for seed in 0..5 {
            let mut rng = SeededRng::new(700 + seed);
            let mk = |rng: &mut SeededRng| -> Tensor<f64> {
                Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.next_f64()).collect())
            };
            let (f, v, r) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let rec = loss_geo(&f, &v, &r, 100.0, 50.0, 40.0).unwrap();
            let f32s = |t: &Tensor<f64>| t.cast::<f32>();
            let ssim_ref = crate::metrics::ssim(&f32s(&f), &f32s(&v)).unwrap();
            let mse = |a: &Tensor<f64>, b: &Tensor<f64>| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / 256.0
            };
            let oracle = 100.0 * (1.0 - ssim_ref) + 50.0 * mse(&f, &v) + 40.0 * mse(&f, &r);
            // f32 casting in the reference ssim costs a few ulp
            assert!((rec.total - oracle).abs() < 1e-3);
            let exact =
                100.0 * rec.ssim_term + 50.0 * rec.mse_vis_term + 40.0 * rec.mse_ir_term;
            assert!((rec.total - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_training_freezes_extractors_and_descends() {
        let palette = LabelPalette::fmb();
        let cfg = tiny_cfg();
        // briefly pretrain the extractors so taps carry signal
        let mut cgfe_ir: CgfeModel<f32> =
            CgfeModel::new(Modality::Ir, cfg, palette.clone(), 31).unwrap();
        let mut cgfe_vi: CgfeModel<f32> =
            CgfeModel::new(Modality::Vis, cfg, palette.clone(), 32).unwrap();
        let pairs: Vec<ImagePair> = (0..2).map(|s| tiny_pair(90 + s)).collect();
        let batch: Vec<&ImagePair> = pairs.iter().collect();
        let hyper1 = TrainHyper::default();
        let mut opt_ir = CgfeOptim::new(hyper1.adam, &cgfe_ir);
        let mut opt_vi = CgfeOptim::new(hyper1.adam, &cgfe_vi);
        for _ in 0..3 {
            cgfe_ir.train_step(&batch, &hyper1, &mut opt_ir).unwrap();
            cgfe_vi.train_step(&batch, &hyper1, &mut opt_vi).unwrap();
        }
        let hash_before = (
            cgfe_ir.params_g.hash64(),
            cgfe_ir.params_f.hash64(),
            cgfe_vi.params_g.hash64(),
            cgfe_vi.params_f.hash64(),
        );

        let mut fm: FusionModel<f32> = FusionModel::new(cfg, 33).unwrap();
        let hyper = FusionHyper::default();
        let mut opt = FusionOptim::new(hyper.adam, &fm);
        let mut first = Vec::new();
        let mut last = Vec::new();
        for step in 0..12 {
            let rec = fm
                .train_step(&cgfe_ir, &cgfe_vi, &batch, &hyper, &mut opt)
                .unwrap();
            assert_eq!(rec.mu, 100.0);
            assert_eq!(rec.rho, 50.0);
            assert_eq!(rec.eta, 40.0);
            if step < 3 {
                first.push(rec.total);
            }
            if step >= 9 {
                last.push(rec.total);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&last) < mean(&first));

        let hash_after = (
            cgfe_ir.params_g.hash64(),
            cgfe_ir.params_f.hash64(),
            cgfe_vi.params_g.hash64(),
            cgfe_vi.params_f.hash64(),
        );
        assert_eq!(hash_before, hash_after, "extractors must stay frozen");

        // inference path: shape, range, determinism
        let (rgb, mask) = fm.fuse_pair(&cgfe_ir, &cgfe_vi, &pairs[0]).unwrap();
        assert_eq!(rgb.shape(), &[3, 32, 32]);
        assert!(rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(mask.h * mask.w, 32 * 32);
        let (rgb2, _) = fm.fuse_pair(&cgfe_ir, &cgfe_vi, &pairs[0]).unwrap();
        assert_eq!(rgb, rgb2);
    }

    #[test]
    fn refine_projects_to_one_plane() {
        let cfg = tiny_cfg(); // tap channels 52, reduction 4 -> width 13
        let fm: FusionModel<f64> = FusionModel::new(cfg, 41).unwrap();
        let taps = fake_taps(cfg.base_ch, 16, 16, 42);
        let f_rec = collect_features(&taps, (16, 16)).unwrap();
        assert_eq!(f_rec.shape(), &[52, 16, 16]);
        let out = fm.refine(&f_rec, Modality::Ir).unwrap();
        assert_eq!(out.shape(), &[1, 16, 16]);
        // deterministic
        assert_eq!(fm.refine(&f_rec, Modality::Ir).unwrap(), out);

        let bad_cfg = NetConfig {
            frb_reduction: 5,
            ..cfg
        };
        assert!(matches!(
            FusionModel::<f64>::new(bad_cfg, 1),
            Err(Error::Config(_))
        ));
    }
}
