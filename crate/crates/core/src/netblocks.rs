//! Network architectures as data: each builder returns a `LayerGraph`, an
//! ordered list of conv/norm/activation stages with optional skip links and
//! named tap points. `LayerGraph::forward` executes the graph on a `Tape`,
//! so the same description serves shape tracing, parameter initialization,
//! training and inference.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{conv_out_len, conv_t_out_len, Tape, Value};
use crate::tensor::Tensor;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Std-dev of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    None,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

/// Where a layer draws its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerInput {
    /// The graph input.
    External,
    /// Output of the preceding layer.
    Prev,
    /// Channel concatenation of the preceding layer with an earlier one.
    ConcatPrevWith(usize),
    /// Elementwise sum of the preceding layer with an earlier one.
    AddPrevTo(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub transposed: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum LayerBody {
    Conv(ConvSpec),
    /// Pass-through (used for residual-sum layers).
    None,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub input: LayerInput,
    pub body: LayerBody,
    pub norm: NormKind,
    pub act: ActKind,
    pub tap: Option<String>,
}

/// A network architecture with declared tap points.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    pub name: String,
    pub in_ch: usize,
    pub layers: Vec<Layer>,
}

/// An intermediate feature captured during a forward pass.
#[derive(Clone, Debug)]
pub struct TapOutput<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Named parameter tensors, ordered to match their `LayerGraph`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    pub entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every tensor as a tape leaf, in order.
    pub fn register(&self, tape: &Tape<S>, needs_grad: bool) -> Vec<Value> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), needs_grad))
            .collect()
    }

    /// FNV-1a over the exact bit patterns; used to verify freezing.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                feed(*b);
            }
            for v in t.data() {
                for b in v.to_f64().to_le_bytes() {
                    feed(b);
                }
            }
        }
        h
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

impl LayerGraph {
    fn layer(
        body: LayerBody,
        input: LayerInput,
        norm: NormKind,
        act: ActKind,
        tap: Option<&str>,
    ) -> Layer {
        Layer {
            input,
            body,
            norm,
            act,
            tap: tap.map(str::to_owned),
        }
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| l.tap.as_deref())
            .collect()
    }

    /// Declared parameter shapes, in forward order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerBody::Conv(c) = layer.body {
                let w_shape = if c.transposed {
                    vec![c.in_ch, c.out_ch, c.k, c.k]
                } else {
                    vec![c.out_ch, c.in_ch, c.k, c.k]
                };
                specs.push((format!("{}.{}.weight", self.name, i), w_shape));
                specs.push((format!("{}.{}.bias", self.name, i), vec![c.out_ch]));
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Weights ~ N(0, `INIT_STD`), biases zero.
    pub fn init_params<S: Scalar>(&self, rng: &mut SeededRng) -> ParamSet<S> {
        let entries = self
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| S::from_f64(rng.normal() * INIT_STD))
                        .collect();
                    Tensor::new(shape, data)
                };
                (name, t)
            })
            .collect();
        ParamSet { entries }
    }

    /// Per-layer output shapes for an input of spatial size `(h, w)`.
    /// Catches every size incompatibility (conv collapse, skip mismatch)
    /// before any compute happens.
    pub fn trace(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = || -> (usize, usize, usize) {
                if i == 0 {
                    (self.in_ch, h, w)
                } else {
                    shapes[i - 1]
                }
            };
            let (ic, ih, iw) = match layer.input {
                LayerInput::External => (self.in_ch, h, w),
                LayerInput::Prev => prev(),
                LayerInput::ConcatPrevWith(j) => {
                    let (pc, ph, pw) = prev();
                    let (jc, jh, jw) = shapes[j];
                    if (ph, pw) != (jh, jw) {
                        return Err(Error::Size(format!(
                            "{}: skip concat at layer {i} joins {ph}x{pw} with {jh}x{jw} \
                             (input {h}x{w} is not compatible with this graph)",
                            self.name
                        )));
                    }
                    (pc + jc, ph, pw)
                }
                LayerInput::AddPrevTo(j) => {
                    let (pc, ph, pw) = prev();
                    let (jc, jh, jw) = shapes[j];
                    if (pc, ph, pw) != (jc, jh, jw) {
                        return Err(Error::Size(format!(
                            "{}: residual sum at layer {i} joins {pc}x{ph}x{pw} with {jc}x{jh}x{jw}",
                            self.name
                        )));
                    }
                    (pc, ph, pw)
                }
            };
            let out = match layer.body {
                LayerBody::Conv(c) => {
                    assert_eq!(c.in_ch, ic, "{}: channel bookkeeping at layer {i}", self.name);
                    if c.transposed {
                        (
                            c.out_ch,
                            conv_t_out_len(ih, c.k, c.stride, c.pad, c.out_pad),
                            conv_t_out_len(iw, c.k, c.stride, c.pad, c.out_pad),
                        )
                    } else {
                        let oh = conv_out_len(ih, c.k, c.stride, c.pad);
                        let ow = conv_out_len(iw, c.k, c.stride, c.pad);
                        match (oh, ow) {
                            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (c.out_ch, oh, ow),
                            _ => {
                                return Err(Error::Size(format!(
                                    "{}: layer {i} collapses a {ih}x{iw} input below 1x1",
                                    self.name
                                )))
                            }
                        }
                    }
                }
                LayerBody::None => (ic, ih, iw),
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Output shape for a given input size.
    pub fn out_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        Ok(*self.trace(h, w)?.last().expect("non-empty graph"))
    }

    /// Execute the graph. `params` must come from [`ParamSet::register`] on
    /// the same tape, in declaration order. Returns the output value and, if
    /// requested, the declared taps in declaration order.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        x: Value,
        params: &[Value],
        want_taps: bool,
    ) -> Result<(Value, Vec<(String, Value)>)> {
        let xs = tape.shape(x);
        if xs.len() != 3 || xs[0] != self.in_ch {
            return Err(Error::Size(format!(
                "{}: expected input [{}, H, W], got {:?}",
                self.name, self.in_ch, xs
            )));
        }
        self.trace(xs[1], xs[2])?;

        let mut outs: Vec<Value> = Vec::with_capacity(self.layers.len());
        let mut taps = Vec::new();
        let mut pi = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { x } else { outs[i - 1] };
            let input = match layer.input {
                LayerInput::External => x,
                LayerInput::Prev => prev,
                LayerInput::ConcatPrevWith(j) => tape.concat_chan(&[prev, outs[j]]),
                LayerInput::AddPrevTo(j) => tape.add(prev, outs[j]),
            };
            let mut v = match layer.body {
                LayerBody::Conv(c) => {
                    let w = params[pi];
                    let b = params[pi + 1];
                    pi += 2;
                    if c.transposed {
                        tape.conv_t2d(input, w, Some(b), c.stride, c.pad, c.out_pad)
                    } else {
                        tape.conv2d(input, w, Some(b), c.stride, c.pad)
                    }
                }
                LayerBody::None => input,
            };
            if layer.norm == NormKind::Instance {
                v = tape.instance_norm(v, INSTANCE_NORM_EPS);
            }
            v = match layer.act {
                ActKind::None => v,
                ActKind::Relu => tape.relu(v),
                ActKind::LeakyRelu => tape.leaky_relu(v, LEAKY_SLOPE),
                ActKind::Tanh => tape.tanh(v),
                ActKind::Sigmoid => tape.sigmoid(v),
            };
            if want_taps {
                if let Some(name) = &layer.tap {
                    taps.push((name.clone(), v));
                }
            }
            outs.push(v);
        }
        assert_eq!(pi, params.len(), "{}: parameter count mismatch", self.name);
        Ok((*outs.last().expect("non-empty graph"), taps))
    }

    /// Convenience: run on plain tensors (no gradients).
    pub fn infer<S: Scalar>(
        &self,
        x: &Tensor<S>,
        params: &ParamSet<S>,
        want_taps: bool,
    ) -> Result<(Tensor<S>, Vec<TapOutput<S>>)> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = params.register(&tape, false);
        let (out, taps) = self.forward(&tape, xv, &pv, want_taps)?;
        let taps = taps
            .into_iter()
            .map(|(name, v)| TapOutput {
                name,
                value: tape.get(v),
            })
            .collect();
        Ok((tape.get(out), taps))
    }
}

fn conv(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> LayerBody {
    LayerBody::Conv(ConvSpec {
        in_ch,
        out_ch,
        k,
        stride,
        pad,
        out_pad: 0,
        transposed: false,
    })
}

fn conv_t(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> LayerBody {
    LayerBody::Conv(ConvSpec {
        in_ch,
        out_ch,
        k,
        stride,
        pad,
        out_pad,
        transposed: true,
    })
}

/// U-net segmentation generator: `depth` stride-2 encoder stages with
/// channels doubling from `base_ch` (capped at `8*base_ch`), a mirrored
/// stride-2 transposed-conv decoder, skip concatenation between mirrored
/// stages, tanh output. The innermost encoder stage carries no norm (its
/// spatial extent may be 1x1).
pub fn build_unet_g(in_ch: usize, out_ch: usize, depth: usize, base_ch: usize) -> Result<LayerGraph> {
    if depth < 1 || base_ch < 1 {
        return Err(Error::Config(format!(
            "unet requires depth >= 1 and base_ch >= 1, got depth={depth}, base_ch={base_ch}"
        )));
    }
    let cap = 8 * base_ch;
    let ch = |k: usize| -> usize { (base_ch << (k - 1)).min(cap) };

    let mut layers = Vec::new();
    for k in 1..=depth {
        let ic = if k == 1 { in_ch } else { ch(k - 1) };
        let norm = if k == 1 || k == depth {
            NormKind::None
        } else {
            NormKind::Instance
        };
        layers.push(LayerGraph::layer(
            conv(ic, ch(k), 4, 2, 1),
            if k == 1 { LayerInput::External } else { LayerInput::Prev },
            norm,
            ActKind::LeakyRelu,
            None,
        ));
    }
    for t in 1..=depth {
        let input = if t == 1 {
            LayerInput::Prev
        } else {
            LayerInput::ConcatPrevWith(depth - t)
        };
        let ic = if t == 1 { ch(depth) } else { 2 * ch(depth - t + 1) };
        let (oc, norm, act) = if t == depth {
            (out_ch, NormKind::None, ActKind::Tanh)
        } else {
            (ch(depth - t), NormKind::Instance, ActKind::Relu)
        };
        layers.push(LayerGraph::layer(conv_t(ic, oc, 4, 2, 1, 0), input, norm, act, None));
    }
    Ok(LayerGraph {
        name: "unet_g".into(),
        in_ch,
        layers,
    })
}

/// Resnet reconstruction generator: 7x7 stem, two stride-2 downsampling
/// convs, `n_blocks` residual blocks, two stride-2 transposed convs, 7x7
/// output conv with tanh. Declares taps `tap1..tap5` at the two down
/// outputs, the residual-stack output and the two up outputs.
pub fn build_resnet_f(
    in_ch: usize,
    out_ch: usize,
    n_blocks: usize,
    base_ch: usize,
) -> Result<LayerGraph> {
    if n_blocks < 1 || base_ch < 1 {
        return Err(Error::Config(format!(
            "resnet generator requires n_blocks >= 1 and base_ch >= 1, got {n_blocks}/{base_ch}"
        )));
    }
    let b = base_ch;
    let mut layers = vec![
        LayerGraph::layer(conv(in_ch, b, 7, 1, 3), LayerInput::External, NormKind::Instance, ActKind::Relu, None),
        LayerGraph::layer(conv(b, 2 * b, 3, 2, 1), LayerInput::Prev, NormKind::Instance, ActKind::Relu, Some("tap1")),
        LayerGraph::layer(conv(2 * b, 4 * b, 3, 2, 1), LayerInput::Prev, NormKind::Instance, ActKind::Relu, Some("tap2")),
    ];
    for blk in 0..n_blocks {
        let block_in = layers.len() - 1;
        layers.push(LayerGraph::layer(
            conv(4 * b, 4 * b, 3, 1, 1),
            LayerInput::Prev,
            NormKind::Instance,
            ActKind::Relu,
            None,
        ));
        layers.push(LayerGraph::layer(
            conv(4 * b, 4 * b, 3, 1, 1),
            LayerInput::Prev,
            NormKind::Instance,
            ActKind::None,
            None,
        ));
        let tap = if blk == n_blocks - 1 { Some("tap3") } else { None };
        layers.push(LayerGraph::layer(
            LayerBody::None,
            LayerInput::AddPrevTo(block_in),
            NormKind::None,
            ActKind::None,
            tap,
        ));
    }
    layers.push(LayerGraph::layer(
        conv_t(4 * b, 2 * b, 3, 2, 1, 1),
        LayerInput::Prev,
        NormKind::Instance,
        ActKind::Relu,
        Some("tap4"),
    ));
    layers.push(LayerGraph::layer(
        conv_t(2 * b, b, 3, 2, 1, 1),
        LayerInput::Prev,
        NormKind::Instance,
        ActKind::Relu,
        Some("tap5"),
    ));
    layers.push(LayerGraph::layer(
        conv(b, out_ch, 7, 1, 3),
        LayerInput::Prev,
        NormKind::None,
        ActKind::Tanh,
        None,
    ));
    Ok(LayerGraph {
        name: "resnet_f".into(),
        in_ch,
        layers,
    })
}

/// Pixel discriminator: a stack of 1x1 convs, stride 1, no normalization.
/// Its receptive field is a single pixel, giving a full-resolution realness
/// map.
pub fn build_pixel_d(in_ch: usize, base_ch: usize) -> Result<LayerGraph> {
    if base_ch < 1 {
        return Err(Error::Config("pixel discriminator requires base_ch >= 1".into()));
    }
    let b = base_ch;
    Ok(LayerGraph {
        name: "pixel_d".into(),
        in_ch,
        layers: vec![
            LayerGraph::layer(conv(in_ch, b, 1, 1, 0), LayerInput::External, NormKind::None, ActKind::LeakyRelu, None),
            LayerGraph::layer(conv(b, 2 * b, 1, 1, 0), LayerInput::Prev, NormKind::None, ActKind::LeakyRelu, None),
            LayerGraph::layer(conv(2 * b, 1, 1, 1, 0), LayerInput::Prev, NormKind::None, ActKind::None, None),
        ],
    })
}

/// PatchGAN discriminator: `n_layers` stride-2 4x4 convs with channel
/// doubling (capped at `8*base_ch`), one stride-1 stage, and a final 4x4
/// stride-1 projection to a one-channel patch realness map.
pub fn build_nlayer_d(in_ch: usize, n_layers: usize, base_ch: usize) -> Result<LayerGraph> {
    if n_layers < 1 || base_ch < 1 {
        return Err(Error::Config(format!(
            "patch discriminator requires n_layers >= 1 and base_ch >= 1, got {n_layers}/{base_ch}"
        )));
    }
    let cap = 8 * base_ch;
    let mut layers = vec![LayerGraph::layer(
        conv(in_ch, base_ch, 4, 2, 1),
        LayerInput::External,
        NormKind::None,
        ActKind::LeakyRelu,
        None,
    )];
    let mut prev_ch = base_ch;
    for k in 1..n_layers {
        let oc = (base_ch << k).min(cap);
        layers.push(LayerGraph::layer(
            conv(prev_ch, oc, 4, 2, 1),
            LayerInput::Prev,
            NormKind::Instance,
            ActKind::LeakyRelu,
            None,
        ));
        prev_ch = oc;
    }
    let oc = (base_ch << n_layers).min(cap);
    layers.push(LayerGraph::layer(
        conv(prev_ch, oc, 4, 1, 1),
        LayerInput::Prev,
        NormKind::Instance,
        ActKind::LeakyRelu,
        None,
    ));
    layers.push(LayerGraph::layer(
        conv(oc, 1, 4, 1, 1),
        LayerInput::Prev,
        NormKind::None,
        ActKind::None,
        None,
    ));
    Ok(LayerGraph {
        name: "nlayer_d".into(),
        in_ch,
        layers,
    })
}

/// Feature refinement block: a 1x1 channel-reduction conv to
/// `in_ch / reduction`, followed by a residual block at that width. The
/// output feeds the per-modality projection conv of the fusion head.
pub fn build_frb(in_ch: usize, reduction: usize) -> Result<LayerGraph> {
    if reduction == 0 || in_ch % reduction != 0 || in_ch / reduction == 0 {
        return Err(Error::Config(format!(
            "FRB input channels {in_ch} not divisible by reduction {reduction}"
        )));
    }
    let w = in_ch / reduction;
    Ok(LayerGraph {
        name: "frb".into(),
        in_ch,
        layers: vec![
            LayerGraph::layer(conv(in_ch, w, 1, 1, 0), LayerInput::External, NormKind::Instance, ActKind::Relu, None),
            LayerGraph::layer(conv(w, w, 3, 1, 1), LayerInput::Prev, NormKind::Instance, ActKind::Relu, None),
            LayerGraph::layer(conv(w, w, 3, 1, 1), LayerInput::Prev, NormKind::Instance, ActKind::None, None),
            LayerGraph::layer(LayerBody::None, LayerInput::AddPrevTo(0), NormKind::None, ActKind::None, None),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
    }

    #[test]
    fn unet_depth7_traces_to_1x1_bottleneck() {
        let g = build_unet_g(3, 14, 7, 64).unwrap();
        let tr = g.trace(128, 128).unwrap();
        // bottleneck = last encoder stage
        assert_eq!(tr[6], (512, 1, 1));
        assert_eq!(*tr.last().unwrap(), (14, 128, 128));
        // encoder channels 64,128,256,512,512,512,512
        let enc: Vec<usize> = tr[..7].iter().map(|s| s.0).collect();
        assert_eq!(enc, vec![64, 128, 256, 512, 512, 512, 512]);
    }

    #[test]
    fn unet_depth2_toy_shape() {
        let g = build_unet_g(1, 14, 2, 64).unwrap();
        assert_eq!(g.out_shape(8, 8).unwrap(), (14, 8, 8));
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let g = build_unet_g(3, 14, 7, 64).unwrap();
        assert!(matches!(g.trace(100, 100), Err(Error::Size(_))));
        // forward reports the same error
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 100, 100]));
        let mut rng = SeededRng::new(0);
        let p = g.init_params::<f64>(&mut rng);
        let pv = p.register(&tape, false);
        assert!(matches!(
            g.forward(&tape, x, &pv, false),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn resnet_f_tap_shapes_match_contract() {
        let g = build_resnet_f(14, 3, 7, 64).unwrap();
        let mut rng = SeededRng::new(1);
        let p = g.init_params::<f64>(&mut rng);
        let x = rand_input(14, 128, 128, 2);
        let (out, taps) = g.infer(&x, &p, true).unwrap();
        assert_eq!(out.shape(), &[3, 128, 128]);
        let shapes: Vec<(String, (usize, usize, usize))> = taps
            .iter()
            .map(|t| (t.name.clone(), t.value.chw()))
            .collect();
        assert_eq!(
            shapes,
            vec![
                ("tap1".into(), (128, 64, 64)),
                ("tap2".into(), (256, 32, 32)),
                ("tap3".into(), (256, 32, 32)),
                ("tap4".into(), (128, 64, 64)),
                ("tap5".into(), (64, 128, 128)),
            ]
        );
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn resnet_zeroed_residual_branches_act_as_identity() {
        let g = build_resnet_f(4, 1, 3, 4).unwrap();
        let mut rng = SeededRng::new(3);
        let mut p = g.init_params::<f64>(&mut rng);
        // Zero the second conv of every residual block: block layers are
        // (A, B, add) triples starting after the stem and two downs.
        for (name, t) in p.entries.iter_mut() {
            // layers 4, 7, 10 are the B convs for n_blocks=3
            if name.starts_with("resnet_f.4.")
                || name.starts_with("resnet_f.7.")
                || name.starts_with("resnet_f.10.")
            {
                *t = Tensor::zeros(t.shape());
            }
        }
        let x = rand_input(4, 16, 16, 4);
        let (_, taps) = g.infer(&x, &p, true).unwrap();
        let tap2 = taps.iter().find(|t| t.name == "tap2").unwrap();
        let tap3 = taps.iter().find(|t| t.name == "tap3").unwrap();
        // With the B convs zeroed each block adds IN(relu-path)=const 0
        // shifted by bias=0, so the stack output equals its input.
        for (a, b) in tap2.value.data().iter().zip(tap3.value.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_d_is_pixelwise() {
        let g = build_pixel_d(3, 8).unwrap();
        let mut rng = SeededRng::new(5);
        let p = g.init_params::<f64>(&mut rng);
        let x = rand_input(3, 6, 6, 6);
        let (out, _) = g.infer(&x, &p, false).unwrap();
        assert_eq!(out.shape(), &[1, 6, 6]);

        // Swap two pixel columns; output must swap identically.
        let mut xs = x.clone();
        for c in 0..3 {
            for y in 0..6 {
                let a = xs.at(c, y, 1);
                let b = xs.at(c, y, 4);
                xs.set(c, y, 1, b);
                xs.set(c, y, 4, a);
            }
        }
        let (out_s, _) = g.infer(&xs, &p, false).unwrap();
        for y in 0..6 {
            assert_eq!(out.at(0, y, 1), out_s.at(0, y, 4));
            assert_eq!(out.at(0, y, 4), out_s.at(0, y, 1));
            assert_eq!(out.at(0, y, 0), out_s.at(0, y, 0));
        }

        // Constant input -> constant output map.
        let (flat, _) = g.infer(&Tensor::full(&[3, 6, 6], 0.25), &p, false).unwrap();
        let v0 = flat.data()[0];
        assert!(flat.data().iter().all(|v| (v - v0).abs() < 1e-12));
    }

    #[test]
    fn nlayer_d_patch_shapes() {
        let g = build_nlayer_d(14, 3, 64).unwrap();
        assert_eq!(g.out_shape(128, 128).unwrap(), (1, 14, 14));
        let g1 = build_nlayer_d(3, 1, 8).unwrap();
        let (c, h, w) = g1.out_shape(16, 16).unwrap();
        assert_eq!(c, 1);
        assert!(h >= 1 && w >= 1);
        let g3 = build_nlayer_d(3, 3, 8).unwrap();
        assert!(matches!(g3.trace(4, 4), Err(Error::Size(_))));
    }

    #[test]
    fn frb_width_arithmetic() {
        let g = build_frb(832, 64).unwrap();
        assert_eq!(g.out_shape(8, 8).unwrap(), (13, 8, 8));
        let g1 = build_frb(64, 64).unwrap();
        assert_eq!(g1.out_shape(8, 8).unwrap(), (1, 8, 8));
        assert!(matches!(build_frb(100, 64), Err(Error::Config(_))));
    }

    #[test]
    fn forward_is_deterministic_and_taps_optional() {
        let g = build_resnet_f(2, 1, 2, 4).unwrap();
        let mut rng = SeededRng::new(9);
        let p = g.init_params::<f64>(&mut rng);
        let x = rand_input(2, 8, 8, 10);
        let (a, taps_none) = g.infer(&x, &p, false).unwrap();
        let (b, taps_all) = g.infer(&x, &p, true).unwrap();
        assert_eq!(a, b);
        assert!(taps_none.is_empty());
        assert_eq!(taps_all.len(), 5);
    }

    #[test]
    fn trace_matches_runtime_shapes_over_random_sizes() {
        let mut rng = SeededRng::new(20);
        let builders: Vec<LayerGraph> = vec![
            build_unet_g(3, 6, 3, 4).unwrap(),
            build_resnet_f(6, 3, 2, 4).unwrap(),
            build_pixel_d(3, 4).unwrap(),
            build_nlayer_d(3, 2, 4).unwrap(),
            build_frb(8, 4).unwrap(),
        ];
        for g in &builders {
            let mut checked = 0;
            while checked < 5 {
                let h = 8 * (1 + rng.below(6));
                let w = 8 * (1 + rng.below(6));
                let Ok(trace) = g.trace(h, w) else { continue };
                let mut prng = SeededRng::new(checked as u64);
                let p = g.init_params::<f64>(&mut prng);
                let x = rand_input(g.in_ch, h, w, 100 + checked as u64);
                let (out, _) = g.infer(&x, &p, false).unwrap();
                let (c, oh, ow) = *trace.last().unwrap();
                assert_eq!(out.shape(), &[c, oh, ow], "{} at {h}x{w}", g.name);
                checked += 1;
            }
        }
    }
}
