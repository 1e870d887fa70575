//! Student forward pass: conv feature extractor, transformer stack,
//! projection + code-embedding logits head.

use crate::encoder::{EncoderConfig, EncoderParams, FrameSequence};
use crate::error::{DeluluError, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use indexmap::IndexMap;

const PAD_NEG: f64 = -1e30;

/// Graph node ids for every registered parameter, in parameter-store order.
pub struct ParamNodes {
    map: IndexMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Register all encoder parameters as graph leaves.
pub fn register_params(g: &mut Graph, params: &EncoderParams, trainable: bool) -> ParamNodes {
    let mut map = IndexMap::new();
    for (name, t) in params.iter() {
        map.insert(name.to_string(), g.input(t.clone(), trainable));
    }
    ParamNodes { map }
}

/// Conv stack: each layer is conv1d -> bias -> layer-norm (+affine) -> GELU.
/// Input is the raw waveform as an (L, 1) matrix; output is (T, channels).
pub fn conv_stack(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &EncoderConfig,
    samples: &[f64],
) -> Result<NodeId> {
    cfg.output_length(samples.len())?; // surfaces the receptive-field error early
    let mut x = g.constant(Tensor::new(vec![samples.len(), 1], samples.to_vec())?);
    for (i, (&stride, &_k)) in cfg.conv_strides.iter().zip(&cfg.conv_kernels).enumerate() {
        let w = pn.get(&format!("conv{i}.weight"));
        let b = pn.get(&format!("conv{i}.bias"));
        let gain = pn.get(&format!("conv{i}.ln_gain"));
        let lnb = pn.get(&format!("conv{i}.ln_bias"));
        x = g.conv1d(x, w, stride)?;
        x = g.add_bias(x, b)?;
        x = g.layer_norm(x, cfg.layer_norm_eps)?;
        x = g.affine_cols(x, gain, lnb)?;
        x = g.gelu(x)?;
    }
    Ok(x)
}

/// Fixed sinusoidal positional encoding, (t, d).
pub fn sinusoidal_pe(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let angle = pos as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).unwrap()
}

fn attention_pad_bias(t: usize, pad_mask: &[bool]) -> Option<Tensor> {
    if !pad_mask.iter().any(|&p| p) {
        return None;
    }
    let mut data = vec![0.0; t * t];
    for (j, &padded) in pad_mask.iter().enumerate() {
        if padded {
            for i in 0..t {
                data[i * t + j] = PAD_NEG;
            }
        }
    }
    Some(Tensor::new(vec![t, t], data).unwrap())
}

/// Pre-LN transformer stack over (T, model_dim) inputs, with attention
/// masking so padded positions cannot influence unpadded outputs.
pub fn transformer_layers(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &EncoderConfig,
    mut x: NodeId,
    pad_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let t = g.value(x).rows();
    if let Some(pm) = pad_mask {
        if pm.len() != t {
            return Err(DeluluError::Contract(format!(
                "pad mask length {} != frame count {t}",
                pm.len()
            )));
        }
    }
    let d = cfg.model_dim;
    let dh = d / cfg.n_heads;
    let pad_bias = pad_mask.and_then(|pm| attention_pad_bias(t, pm)).map(|b| g.constant(b));

    for l in 0..cfg.n_transformer_layers {
        // attention block
        let a = g.layer_norm(x, cfg.layer_norm_eps)?;
        let a = {
            let gain = pn.get(&format!("layer{l}.ln1_gain"));
            let bias = pn.get(&format!("layer{l}.ln1_bias"));
            g.affine_cols(a, gain, bias)?
        };
        let mut qkv = Vec::new();
        for w in ["wq", "wk", "wv"] {
            let wn = pn.get(&format!("layer{l}.attn.{w}"));
            let bn = pn.get(&format!("layer{l}.attn.{w}_bias"));
            let y = g.matmul(a, wn)?;
            qkv.push(g.add_bias(y, bn)?);
        }
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(qkv[0], h * dh, dh)?;
            let kh = g.slice_cols(qkv[1], h * dh, dh)?;
            let vh = g.slice_cols(qkv[2], h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(pb) = pad_bias {
                scores = g.add(scores, pb)?;
            }
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let concat = g.concat_cols(&heads)?;
        let wo = pn.get(&format!("layer{l}.attn.wo"));
        let bo = pn.get(&format!("layer{l}.attn.wo_bias"));
        let o = g.matmul(concat, wo)?;
        let o = g.add_bias(o, bo)?;
        x = g.add(x, o)?;

        // feed-forward block
        let f = g.layer_norm(x, cfg.layer_norm_eps)?;
        let f = {
            let gain = pn.get(&format!("layer{l}.ln2_gain"));
            let bias = pn.get(&format!("layer{l}.ln2_bias"));
            g.affine_cols(f, gain, bias)?
        };
        let w1 = pn.get(&format!("layer{l}.ffn.w1"));
        let b1 = pn.get(&format!("layer{l}.ffn.b1"));
        let w2 = pn.get(&format!("layer{l}.ffn.w2"));
        let b2 = pn.get(&format!("layer{l}.ffn.b2"));
        let f = g.matmul(f, w1)?;
        let f = g.add_bias(f, b1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add_bias(f, b2)?;
        x = g.add(x, f)?;
    }
    let y = g.layer_norm(x, cfg.layer_norm_eps)?;
    let gain = pn.get("final_ln_gain");
    let bias = pn.get("final_ln_bias");
    g.affine_cols(y, gain, bias)
}

/// Cosine logits against the code embeddings, scaled by 1/temperature.
pub fn code_logits(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &EncoderConfig,
    frames: NodeId,
) -> Result<NodeId> {
    let p = g.matmul(frames, pn.get("proj.weight"))?;
    let p = g.add_bias(p, pn.get("proj.bias"))?;
    let p = g.l2_normalize(p)?;
    let codes = g.l2_normalize(pn.get("codes"))?;
    let ct = g.transpose(codes)?;
    let cos = g.matmul(p, ct)?;
    g.scale(cos, 1.0 / cfg.logit_temperature)
}

pub struct StudentOutput {
    /// Final transformer frames (T, model_dim); the denoising features.
    pub frames: NodeId,
    /// Cosine code logits (T, k), present when requested.
    pub logits: Option<NodeId>,
}

/// Full student pass: conv stack, input projection, optional span masking
/// (learned mask embedding replaces masked frames), positional encoding,
/// transformer, and optionally the code-logits head.
pub fn student_forward(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &EncoderConfig,
    samples: &[f64],
    masked_frames: Option<&[usize]>,
    pad_mask: Option<&[bool]>,
    want_logits: bool,
) -> Result<StudentOutput> {
    let conv = conv_stack(g, pn, cfg, samples)?;
    let mut x = g.matmul(conv, pn.get("in_proj.weight"))?;
    x = g.add_bias(x, pn.get("in_proj.bias"))?;
    if let Some(rows) = masked_frames {
        x = g.mask_rows(x, rows, pn.get("mask_embed"))?;
    }
    if cfg.use_positional {
        let t = g.value(x).rows();
        let pe = g.constant(sinusoidal_pe(t, cfg.model_dim));
        x = g.add(x, pe)?;
    }
    let frames = transformer_layers(g, pn, cfg, x, pad_mask)?;
    let logits = if want_logits { Some(code_logits(g, pn, cfg, frames)?) } else { None };
    Ok(StudentOutput { frames, logits })
}

/// Non-graph convenience: conv features for a waveform as a FrameSequence.
pub fn conv_stack_forward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    w: &crate::audio::Waveform,
) -> Result<FrameSequence> {
    if w.sample_rate_hz != cfg.sample_rate_hz {
        return Err(DeluluError::Contract(format!(
            "sample rate {} != configured {}",
            w.sample_rate_hz, cfg.sample_rate_hz
        )));
    }
    let mut g = Graph::new();
    let pn = register_params(&mut g, params, false);
    let out = conv_stack(&mut g, &pn, cfg, &w.samples)?;
    FrameSequence::new(g.value(out).clone(), cfg.frame_period_ms())
}

/// Non-graph convenience: transformer output for pre-projected features.
pub fn transformer_forward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    f: &FrameSequence,
    pad_mask: Option<&[bool]>,
) -> Result<FrameSequence> {
    let mut g = Graph::new();
    let pn = register_params(&mut g, params, false);
    let x0 = g_input(&mut g, f);
    let mut x = g.matmul(x0, pn.get("in_proj.weight"))?;
    x = g.add_bias(x, pn.get("in_proj.bias"))?;
    if cfg.use_positional {
        let t = g.value(x).rows();
        let pe = g.constant(sinusoidal_pe(t, cfg.model_dim));
        x = g.add(x, pe)?;
    }
    let out = transformer_layers(&mut g, &pn, cfg, x, pad_mask)?;
    FrameSequence::new(g.value(out).clone(), f.frame_period_ms)
}

fn g_input(g: &mut Graph, f: &FrameSequence) -> NodeId {
    g.constant(f.values.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            conv_channels: 8,
            n_transformer_layers: 1,
            model_dim: 12,
            n_heads: 2,
            ffn_dim: 16,
            proj_dim: 6,
            n_codes: 5,
            ..EncoderConfig::default()
        }
    }

    fn rand_wave(n: usize, seed: u64) -> Waveform {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, 0);
        Waveform::new((0..n).map(|_| r.gen_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn frame_count_matches_output_length_oracle() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 1).unwrap();
        use rand::Rng;
        let mut r = crate::rng::stream(77, 0);
        for _ in 0..50 {
            let n = r.gen_range(cfg.receptive_field_min()..8000);
            let w = rand_wave(n, r.gen());
            let f = conv_stack_forward(&params, &cfg, &w).unwrap();
            assert_eq!(f.n_frames(), cfg.output_length(n).unwrap());
        }
    }

    #[test]
    fn zero_waveform_gives_time_invariant_frames() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 2).unwrap();
        let w = Waveform::new(vec![0.0; 4096], 16000).unwrap();
        let f = conv_stack_forward(&params, &cfg, &w).unwrap();
        let d = f.dim();
        let first = &f.values.data()[..d];
        for t in 1..f.n_frames() {
            assert_eq!(&f.values.data()[t * d..(t + 1) * d], first, "frame {t} differs");
        }
    }

    #[test]
    fn conv_shift_equivariance_on_interior_frames() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 3).unwrap();
        let base = rand_wave(4096 + 256, 5);
        let shifted =
            Waveform::new(base.samples[256..].to_vec(), 16000).unwrap();
        let trimmed = Waveform::new(base.samples[..4096].to_vec(), 16000).unwrap();
        let f_shift = conv_stack_forward(&params, &cfg, &shifted).unwrap();
        let f_base = conv_stack_forward(&params, &cfg, &trimmed).unwrap();
        // interior frames of the shifted signal equal base frames offset by 1
        let d = f_base.dim();
        let interior = f_shift.n_frames().min(f_base.n_frames() - 1);
        for t in 2..interior - 2 {
            let a = &f_shift.values.data()[t * d..(t + 1) * d];
            let b = &f_base.values.data()[(t + 1) * d..(t + 2) * d];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "frame {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn padding_does_not_influence_unpadded_outputs() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 4).unwrap();
        use rand::Rng;
        let mut r = crate::rng::stream(9, 0);
        let t = 6;
        let data: Vec<f64> = (0..t * cfg.conv_channels).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = FrameSequence::new(
            Tensor::new(vec![t, cfg.conv_channels], data.clone()).unwrap(),
            16.0,
        )
        .unwrap();
        let out_plain = transformer_forward(&params, &cfg, &f, None).unwrap();

        // append 3 padded frames
        let mut padded_data = data;
        padded_data.extend(std::iter::repeat(0.123).take(3 * cfg.conv_channels));
        let f_pad = FrameSequence::new(
            Tensor::new(vec![t + 3, cfg.conv_channels], padded_data).unwrap(),
            16.0,
        )
        .unwrap();
        let mut pm = vec![false; t];
        pm.extend([true, true, true]);
        let out_pad = transformer_forward(&params, &cfg, &f_pad, Some(&pm)).unwrap();

        let d = cfg.model_dim;
        assert_eq!(
            &out_plain.values.data()[..t * d],
            &out_pad.values.data()[..t * d],
            "unpadded outputs changed"
        );
    }

    #[test]
    fn pad_mask_length_mismatch_is_error() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 4).unwrap();
        let f = FrameSequence::new(Tensor::zeros(vec![4, cfg.conv_channels]), 16.0).unwrap();
        let pm = vec![false; 3];
        assert!(transformer_forward(&params, &cfg, &f, Some(&pm)).is_err());
    }

    #[test]
    fn permutation_equivariant_without_positional_encoding() {
        let cfg = EncoderConfig { use_positional: false, ..small_cfg() };
        let params = EncoderParams::init(&cfg, 6).unwrap();
        use rand::Rng;
        let mut r = crate::rng::stream(10, 0);
        let t = 5;
        let d_in = cfg.conv_channels;
        let data: Vec<f64> = (0..t * d_in).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = FrameSequence::new(Tensor::new(vec![t, d_in], data.clone()).unwrap(), 16.0).unwrap();
        let mut swapped = data.clone();
        for j in 0..d_in {
            swapped.swap(d_in + j, 3 * d_in + j); // swap frames 1 and 3
        }
        let fs = FrameSequence::new(Tensor::new(vec![t, d_in], swapped).unwrap(), 16.0).unwrap();
        let a = transformer_forward(&params, &cfg, &f, None).unwrap();
        let b = transformer_forward(&params, &cfg, &fs, None).unwrap();
        let d = cfg.model_dim;
        let row = |o: &FrameSequence, i: usize| o.values.data()[i * d..(i + 1) * d].to_vec();
        for (x, y) in row(&a, 1).iter().zip(row(&b, 3)) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in row(&a, 0).iter().zip(row(&b, 0)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn single_frame_attention_is_identity_mixing() {
        // with one frame, softmax over one key is exactly 1; just check the
        // pass runs and is deterministic
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, 7).unwrap();
        let f = FrameSequence::new(Tensor::full(vec![1, cfg.conv_channels], 0.3), 16.0).unwrap();
        let a = transformer_forward(&params, &cfg, &f, None).unwrap();
        let b = transformer_forward(&params, &cfg, &f, None).unwrap();
        assert_eq!(a.values.data(), b.values.data());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        use crate::numerics::{finite_diff_grad, max_rel_err};
        let cfg = EncoderConfig {
            conv_channels: 6,
            conv_strides: vec![2, 2],
            conv_kernels: vec![3, 2],
            n_transformer_layers: 1,
            model_dim: 4,
            n_heads: 2,
            ffn_dim: 6,
            proj_dim: 3,
            n_codes: 4,
            ..EncoderConfig::default()
        };
        let params = EncoderParams::init(&cfg, 21).unwrap();
        let wave: Vec<f64> = (0..12).map(|i| (0.37 * i as f64).sin() * 0.4).collect();
        let labels = [2usize, 0];
        let rows = [0usize, 1];

        let loss_with = |ps: &EncoderParams| -> Result<f64> {
            let mut g = Graph::new();
            let pn = register_params(&mut g, ps, true);
            let out = student_forward(&mut g, &pn, &cfg, &wave, Some(&[0]), None, true)?;
            let lp = g.log_softmax(out.logits.unwrap())?;
            let loss = g.nll_masked(lp, &labels, &rows)?;
            Ok(g.value(loss).item())
        };

        let mut g = Graph::new();
        let pn = register_params(&mut g, &params, true);
        let out = student_forward(&mut g, &pn, &cfg, &wave, Some(&[0]), None, true).unwrap();
        let lp = g.log_softmax(out.logits.unwrap()).unwrap();
        let loss = g.nll_masked(lp, &labels, &rows).unwrap();
        let grads = g.backward(loss).unwrap();

        for target in ["conv0.weight", "layer0.attn.wq", "in_proj.weight", "codes", "mask_embed"] {
            let auto = g.leaf_grad(&grads, pn.get(target));
            let fd = finite_diff_grad(
                |t: &Tensor| {
                    let mut perturbed = params.clone();
                    for (name, pt) in perturbed.iter_mut() {
                        if name == target {
                            pt.data_mut().copy_from_slice(t.data());
                        }
                    }
                    loss_with(&perturbed)
                },
                params.get(target),
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(&auto, &fd);
            assert!(err < 1e-4, "{target}: max rel err {err}");
        }
    }

    #[test]
    fn code_logits_cosine_contract() {
        let cfg = small_cfg();
        let mut params = EncoderParams::init(&cfg, 8).unwrap();
        // make projection the identity-ish map and codes known: frame
        // projected equal to code 3's embedding gives argmax at 3 with
        // logit 1/temperature
        let k = cfg.n_codes;
        let pd = cfg.proj_dim;
        use rand::Rng;
        let mut r = crate::rng::stream(11, 0);
        let codes: Vec<f64> = (0..k * pd).map(|_| r.gen_range(-1.0..1.0)).collect();
        for (name, t) in params.iter_mut() {
            if name == "codes" {
                t.data_mut().copy_from_slice(&codes);
            }
        }
        let mut g = Graph::new();
        let pn = register_params(&mut g, &params, false);
        let frames = g.constant(Tensor::full(vec![2, cfg.model_dim], 0.25));
        let logits = code_logits(&mut g, &pn, &cfg, frames).unwrap();
        let lv = g.value(logits);
        assert_eq!(lv.shape(), &[2, k]);
        // cosine in [-1,1] scaled by 1/temperature
        let bound = 1.0 / cfg.logit_temperature + 1e-9;
        assert!(lv.data().iter().all(|v| v.abs() <= bound));
        // temperature sharpening preserves argmax
        let cfg_hot = EncoderConfig { logit_temperature: 1.0, ..cfg.clone() };
        let mut g2 = Graph::new();
        let pn2 = register_params(&mut g2, &params, false);
        let frames2 = g2.constant(Tensor::full(vec![2, cfg.model_dim], 0.25));
        let logits2 = code_logits(&mut g2, &pn2, &cfg_hot, frames2).unwrap();
        let argmax = |xs: &[f64]| {
            xs.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        assert_eq!(argmax(&g.value(logits).data()[..k]), argmax(&g2.value(logits2).data()[..k]));
    }
}
