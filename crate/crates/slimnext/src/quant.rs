//! Dynamic int8 quantization.
//!
//! Weights use symmetric per-tensor scales (zero point 0, range -127..=127)
//! chosen once at quantization time. Activations are quantized on the fly
//! per tensor with an asymmetric scale and zero point over -128..=127.
//! Rounding is half away from zero throughout, and quantized values are
//! always produced by dividing by the stored f32 scale, so dequantized
//! weights sit within scale/2 of the originals.

use crate::error::{Error, Result};
use crate::ir::{Model, NodeKind, QuantizedParam};
use crate::tensor::{DType, Tensor};

/// Largest linear in_features the integer kernel accepts. Keeps the i32
/// zero-point correction and the f64 dequantization exact.
pub const MAX_QLINEAR_FIN: usize = 1 << 23;

fn round_half_away(v: f64) -> f64 {
    // f64::round ties away from zero, which is the convention here.
    v.round()
}

/// Symmetric int8 quantization of an fp32 tensor. Returns the int8 values
/// and the scale; an all-zero input gets scale 1.
pub fn quantize_weights(w: &Tensor) -> Result<(Tensor, f32)> {
    if w.dtype() != DType::F32 {
        return Err(Error::Dtype("quantize_weights expects an fp32 tensor".into()));
    }
    let data = w.f32s()?;
    let max_abs = data.iter().fold(0f32, |m, &v| m.max(v.abs()));
    if !max_abs.is_finite() {
        return Err(Error::Data("cannot quantize non-finite weights".into()));
    }
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let s = scale as f64;
    let q: Vec<i8> = data
        .iter()
        .map(|&v| round_half_away(v as f64 / s).clamp(-127.0, 127.0) as i8)
        .collect();
    Ok((Tensor::from_i8(w.shape(), q)?, scale))
}

/// Asymmetric int8 quantization of an fp32 tensor. Returns the int8 values,
/// the scale, and the zero point; a constant input gets scale 1.
pub fn quantize_activations(x: &Tensor) -> Result<(Tensor, f32, i32)> {
    if x.dtype() != DType::F32 {
        return Err(Error::Dtype("quantize_activations expects an fp32 tensor".into()));
    }
    let data = x.f32s()?;
    if data.is_empty() {
        return Err(Error::Shape("cannot quantize an empty tensor".into()));
    }
    let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in data {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::Data("cannot quantize non-finite activations".into()));
    }
    let scale = if max > min { (max - min) / 255.0 } else { 1.0 };
    let s = scale as f64;
    let zero_point = round_half_away(-128.0 - min as f64 / s).clamp(-128.0, 127.0) as i32;
    let q: Vec<i8> = data
        .iter()
        .map(|&v| {
            (round_half_away(v as f64 / s) + zero_point as f64).clamp(-128.0, 127.0) as i8
        })
        .collect();
    Ok((Tensor::from_i8(x.shape(), q)?, scale, zero_point))
}

/// Linear layer over an int8 weight: quantize the activations, accumulate
/// integer products, then dequantize and add the fp32 bias.
pub fn qlinear_forward(x: &Tensor, weight: &QuantizedParam, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.values.dtype() != DType::I8 {
        return Err(Error::Dtype("qlinear_forward expects an int8 weight".into()));
    }
    let wshape = weight.values.shape();
    if wshape.len() != 2 {
        return Err(Error::Shape(format!("quantized linear weight must be 2-d, got {wshape:?}")));
    }
    let (fout, fin) = (wshape[0], wshape[1]);
    if fin > MAX_QLINEAR_FIN {
        return Err(Error::Usage(format!(
            "linear in_features {fin} exceeds the supported bound {MAX_QLINEAR_FIN}"
        )));
    }
    let xshape = x.shape();
    if xshape.is_empty() || xshape[xshape.len() - 1] != fin {
        return Err(Error::Shape(format!(
            "input shape {xshape:?} does not end in in_features {fin}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match out_features {fout}",
                b.shape()
            )));
        }
    }

    let (xq, x_scale, x_zp) = quantize_activations(x)?;
    let xq = xq.i8s()?;
    let wq = weight.values.i8s()?;
    let row_sums: Vec<i64> = (0..fout)
        .map(|o| wq[o * fin..(o + 1) * fin].iter().map(|&v| v as i64).sum())
        .collect();

    let positions = x.numel() / fin;
    let factor = x_scale as f64 * weight.scale as f64;
    let bias_data = bias.map(|b| b.f32s()).transpose()?;
    let mut out = vec![0f32; positions * fout];
    for p in 0..positions {
        let row = &xq[p * fin..(p + 1) * fin];
        for o in 0..fout {
            let wrow = &wq[o * fin..(o + 1) * fin];
            let mut acc: i64 = 0;
            for i in 0..fin {
                acc += (row[i] as i32 * wrow[i] as i32) as i64;
            }
            let corrected = acc - x_zp as i64 * row_sums[o];
            let mut v = (corrected as f64 * factor) as f32;
            if let Some(b) = bias_data {
                v += b[o];
            }
            out[p * fout + o] = v;
        }
    }

    let mut shape = xshape.to_vec();
    *shape.last_mut().unwrap() = fout;
    Tensor::from_vec(&shape, out)
}

/// Move every linear weight into the int8 store. Biases and all other
/// parameters stay fp32. Returns how many tensors were quantized; calling
/// again is a no-op.
pub fn quantize_model(model: &mut Model) -> Result<usize> {
    let mut moved = 0;
    for node in &model.nodes {
        let NodeKind::Linear { weight, .. } = &node.kind else { continue };
        if model.quantized_params.contains_key(weight) {
            continue;
        }
        // Extraction can empty a block's hidden linears; a weight with no
        // elements has nothing to quantize and stays where it is.
        if model.params.get(weight).is_some_and(|t| t.numel() == 0) {
            continue;
        }
        let w = model.params.remove(weight).ok_or_else(|| {
            Error::internal(format!("linear weight {weight} missing from the fp32 store"))
        })?;
        let (values, scale) = quantize_weights(&w)?;
        model
            .quantized_params
            .insert(weight.clone(), QuantizedParam { values, scale, zero_point: 0 });
        moved += 1;
    }
    model.validate()?;
    Ok(moved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_convnext, ConvNeXtConfig, LayerNode, Model, ModelMeta};
    use crate::tensor::{ops, seeded_rng};
    use std::collections::BTreeMap;

    #[test]
    fn weight_scale_and_codes_for_a_known_range() {
        let w = Tensor::from_vec(&[5], vec![0.635, -1.27, 1.27, -0.635, 0.0]).unwrap();
        let (q, scale) = quantize_weights(&w).unwrap();
        assert_eq!(scale, 0.01);
        assert_eq!(q.i8s().unwrap(), &[64, -127, 127, -64, 0]);
    }

    #[test]
    fn all_zero_weights_quantize_with_unit_scale() {
        let w = Tensor::zeros(&[3, 4]);
        let (q, scale) = quantize_weights(&w).unwrap();
        assert_eq!(scale, 1.0);
        assert!(q.i8s().unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn weight_roundtrip_stays_within_half_a_scale() {
        let mut rng = seeded_rng(700);
        for trial in 0..20 {
            let w = Tensor::uniform(&[64, 17], -(1.0 + trial as f32), 1.0 + trial as f32, &mut rng);
            let (q, scale) = quantize_weights(&w).unwrap();
            let bound = scale as f64 * 0.5 * (1.0 + 1e-9);
            for (&orig, &code) in w.f32s().unwrap().iter().zip(q.i8s().unwrap()) {
                let err = (orig as f64 - code as f64 * scale as f64).abs();
                assert!(err <= bound, "trial {trial}: {orig} -> {code}, err {err} > {bound}");
            }
        }
    }

    #[test]
    fn activation_ramp_maps_onto_the_full_code_range() {
        let data: Vec<f32> = (0..=255).map(|v| v as f32).collect();
        let x = Tensor::from_vec(&[256], data).unwrap();
        let (q, scale, zp) = quantize_activations(&x).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(zp, -128);
        let codes = q.i8s().unwrap();
        assert_eq!(codes[0], -128);
        assert_eq!(codes[255], 127);
        for (i, &code) in codes.iter().enumerate() {
            let back = (code as i32 - zp) as f32 * scale;
            assert_eq!(back, i as f32);
        }
    }

    #[test]
    fn constant_activations_quantize_to_the_zero_point() {
        let x = Tensor::filled(&[4, 4], 0.25);
        let (q, scale, zp) = quantize_activations(&x).unwrap();
        assert_eq!(scale, 1.0);
        assert!(q.i8s().unwrap().iter().all(|&code| code as i32 == zp));
    }

    #[test]
    fn activation_roundtrip_stays_near_half_a_scale() {
        let mut rng = seeded_rng(701);
        for trial in 0..20 {
            let x = Tensor::uniform(&[33, 9], -3.0, 5.0 + trial as f32, &mut rng);
            let (q, scale, zp) = quantize_activations(&x).unwrap();
            let bound = scale as f64 * 0.5 * (1.0 + 1e-5) + 1e-7;
            for (&orig, &code) in x.f32s().unwrap().iter().zip(q.i8s().unwrap()) {
                let back = (code as i32 - zp) as f64 * scale as f64;
                let err = (orig as f64 - back).abs();
                assert!(err <= bound, "trial {trial}: {orig} -> {code}, err {err} > {bound}");
            }
        }
    }

    #[test]
    fn integer_valued_inputs_run_through_qlinear_exactly() {
        // The activation range pins scale 1 / zero point 0 and the weight
        // range pins scale 1, so the integer path must agree with fp32
        // arithmetic to the last bit.
        let x = Tensor::from_vec(&[2, 8], vec![
            -128.0, -1.0, 0.0, 1.0, 2.0, 64.0, 100.0, 127.0,
            -128.0, 5.0, -7.0, 3.0, 127.0, -2.0, 9.0, 11.0,
        ])
        .unwrap();
        let wdata = vec![
            127.0, -3.0, 2.0, 8.0, -1.0, 0.0, 5.0, -9.0,
            -127.0, 4.0, 6.0, -2.0, 7.0, 1.0, -5.0, 3.0,
            10.0, 20.0, -30.0, 40.0, -50.0, 60.0, -70.0, 127.0,
        ];
        let w = Tensor::from_vec(&[3, 8], wdata).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let (values, scale) = quantize_weights(&w).unwrap();
        assert_eq!(scale, 1.0);
        let qp = QuantizedParam { values, scale, zero_point: 0 };
        let got = qlinear_forward(&x, &qp, Some(&b)).unwrap();
        let want = ops::linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn qlinear_tracks_fp32_closely_on_random_data() {
        let mut rng = seeded_rng(702);
        let x = Tensor::uniform(&[6, 40], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform(&[11, 40], -0.4, 0.4, &mut rng);
        let b = Tensor::uniform(&[11], -0.1, 0.1, &mut rng);
        let (values, scale) = quantize_weights(&w).unwrap();
        let qp = QuantizedParam { values, scale, zero_point: 0 };
        let got = qlinear_forward(&x, &qp, Some(&b)).unwrap();
        let want = ops::linear(&x, &w, Some(&b)).unwrap();
        let (mut num, mut den) = (0f64, 0f64);
        for (&g, &f) in got.f32s().unwrap().iter().zip(want.f32s().unwrap()) {
            num += (g as f64 - f as f64).powi(2);
            den += (f as f64).powi(2);
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.05, "relative error {rel}");
    }

    #[test]
    fn zero_weights_pass_the_bias_through_exactly() {
        let mut rng = seeded_rng(703);
        let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let qp = QuantizedParam {
            values: Tensor::from_i8(&[4, 5], vec![0; 20]).unwrap(),
            scale: 1.0,
            zero_point: 0,
        };
        let b = Tensor::from_vec(&[4], vec![0.5, -0.25, 3.0, 0.0]).unwrap();
        let y = qlinear_forward(&x, &qp, Some(&b)).unwrap();
        for row in 0..3 {
            assert_eq!(&y.f32s().unwrap()[row * 4..(row + 1) * 4], b.f32s().unwrap());
        }
    }

    #[test]
    fn oversized_in_features_is_rejected() {
        let fin = MAX_QLINEAR_FIN + 1;
        let qp = QuantizedParam {
            values: Tensor::from_i8(&[1, fin], vec![0; fin]).unwrap(),
            scale: 1.0,
            zero_point: 0,
        };
        let x = Tensor::zeros(&[1, fin]);
        assert!(matches!(qlinear_forward(&x, &qp, None), Err(Error::Usage(_))));
    }

    #[test]
    fn quantize_model_moves_every_linear_weight_once() {
        let mut m = build_convnext(&ConvNeXtConfig::micro(10), 9).unwrap();
        let linear_count =
            m.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Linear { .. })).count();
        assert_eq!(quantize_model(&mut m).unwrap(), linear_count);
        assert_eq!(m.quantized_params.len(), linear_count);
        assert!(m.params.keys().all(|k| !k.ends_with("expand.weight")));
        assert!(m.params.contains_key("head.fc.bias"));
        assert!(m.params.contains_key("stem.conv.weight"));
        m.validate().unwrap();
        assert_eq!(quantize_model(&mut m).unwrap(), 0);
    }

    #[test]
    fn a_model_without_linear_layers_is_left_alone() {
        let mut rng = seeded_rng(704);
        let mut params = BTreeMap::new();
        params.insert("conv.weight".into(), Tensor::uniform(&[10, 3, 4, 4], -0.1, 0.1, &mut rng));
        params.insert("conv.bias".into(), Tensor::zeros(&[10]));
        let mut m = Model {
            nodes: vec![
                LayerNode {
                    id: 0,
                    kind: NodeKind::Conv2d {
                        in_channels: 3,
                        out_channels: 10,
                        kernel: 4,
                        stride: 4,
                        padding: 0,
                        groups: 1,
                        weight: "conv.weight".into(),
                        bias: Some("conv.bias".into()),
                    },
                    inputs: vec![],
                },
                LayerNode { id: 1, kind: NodeKind::GlobalAvgPool, inputs: vec![0] },
            ],
            params,
            quantized_params: BTreeMap::new(),
            metadata: ModelMeta { config: "conv-only".into(), num_classes: 10, input: (3, 32, 32) },
        };
        m.validate().unwrap();
        let before = m.params.clone();
        assert_eq!(quantize_model(&mut m).unwrap(), 0);
        assert_eq!(m.params, before);
        assert!(m.quantized_params.is_empty());
    }
}
