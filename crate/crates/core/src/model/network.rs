use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    axpy, conv_backward, conv_forward, dense_backward, dense_forward, head_activations, head_backward,
    pad_left, pad_rows, relu_pool_backward, relu_pool_forward, sigmoid,
};
use super::{lit, ModelConfig, ModelParams, Scalar};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    /// Padded block input, `c_in x (len + kernel - 1)`.
    xpad: Vec<T>,
    /// Convolution output before ReLU, `c_out x len`.
    pre: Vec<T>,
}

#[derive(Debug, Clone)]
struct SegmentTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    flat: Vec<T>,
    dense_pre: Vec<T>,
    /// Inverted-dropout multipliers (0 or 1/keep); `None` at inference.
    mask: Option<Vec<T>>,
    feature: Vec<T>,
}

#[derive(Debug, Clone)]
struct LstmStep<T> {
    input_gate: Vec<T>,
    forget_gate: Vec<T>,
    cell_candidate: Vec<T>,
    output_gate: Vec<T>,
    cell: Vec<T>,
    hidden: Vec<T>,
}

/// Activations retained by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    config: ModelConfig,
    segments: Vec<SegmentTrace<T>>,
    steps: Vec<LstmStep<T>>,
    pub outputs: Vec<T>,
}

fn check_finite<T: Scalar>(values: &[T], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in {layer}")))
    }
}

/// Inference-mode forward pass.
pub fn forward<T: Scalar>(params: &ModelParams<T>, input: &[T]) -> Result<Vec<T>> {
    forward_trace(params, input, false, 0).map(|t| t.outputs)
}

pub fn forward_trace<T: Scalar>(
    params: &ModelParams<T>,
    input: &[T],
    training: bool,
    dropout_seed: u64,
) -> Result<ForwardTrace<T>> {
    let cfg = &params.config;
    let expected = cfg.channels * cfg.input_len;
    if input.len() != expected {
        return Err(invalid!(
            "input has {} values, model expects {} x {} = {expected}",
            input.len(),
            cfg.channels,
            cfg.input_len
        ));
    }
    check_finite(input, "input")?;

    let seg_len = cfg.segment_len();
    let lens = cfg.block_lengths();
    let keep = 1.0 - cfg.dropout_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);

    let mut segments = Vec::with_capacity(cfg.segments);
    for p in 0..cfg.segments {
        let mut x = Vec::with_capacity(cfg.channels * seg_len);
        for c in 0..cfg.channels {
            let start = c * cfg.input_len + p * seg_len;
            x.extend_from_slice(&input[start..start + seg_len]);
        }
        let mut blocks = Vec::with_capacity(cfg.filters.len());
        let mut c_in = cfg.channels;
        for (b, &c_out) in cfg.filters.iter().enumerate() {
            let len = lens[b];
            let xpad = pad_rows(&x, c_in, len, cfg.kernel);
            let mut pre = vec![T::zero(); c_out * len];
            conv_forward(
                &xpad,
                c_in,
                len,
                params.tensor(&format!("conv{}.weight", b + 1)),
                params.tensor(&format!("conv{}.bias", b + 1)),
                c_out,
                cfg.kernel,
                &mut pre,
            );
            check_finite(&pre, &format!("conv{}", b + 1))?;
            x = relu_pool_forward(&pre, c_out, len, cfg.pool_width);
            blocks.push(BlockTrace { xpad, pre });
            c_in = c_out;
        }
        let flat = x;
        let dense_pre = dense_forward(params.tensor("dense.weight"), params.tensor("dense.bias"), &flat);
        check_finite(&dense_pre, "dense")?;
        let mut feature: Vec<T> = dense_pre.iter().map(|&v| v.max(T::zero())).collect();
        let mask = if training && cfg.dropout_rate > 0.0 {
            let scale = lit::<T>(1.0 / keep);
            let m: Vec<T> = (0..feature.len())
                .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
                .collect();
            for (f, &mv) in feature.iter_mut().zip(&m) {
                *f *= mv;
            }
            Some(m)
        } else {
            None
        };
        segments.push(SegmentTrace {
            blocks,
            flat,
            dense_pre,
            mask,
            feature,
        });
    }

    let h = cfg.lstm_hidden;
    let wx = params.tensor("lstm.input_weight");
    let wh = params.tensor("lstm.recurrent_weight");
    let bias = params.tensor("lstm.bias");
    let mut hidden = vec![T::zero(); h];
    let mut cell = vec![T::zero(); h];
    let mut steps = Vec::with_capacity(cfg.segments);
    for seg in &segments {
        let mut z = dense_forward(wx, bias, &seg.feature);
        let zr = dense_forward(wh, &vec![T::zero(); 4 * h], &hidden);
        for (a, b) in z.iter_mut().zip(&zr) {
            *a += *b;
        }
        let input_gate: Vec<T> = z[..h].iter().map(|&v| sigmoid(v)).collect();
        let forget_gate: Vec<T> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let cell_candidate: Vec<T> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
        let output_gate: Vec<T> = z[3 * h..].iter().map(|&v| sigmoid(v)).collect();
        cell = (0..h)
            .map(|j| forget_gate[j] * cell[j] + input_gate[j] * cell_candidate[j])
            .collect();
        hidden = (0..h).map(|j| output_gate[j] * cell[j].tanh()).collect();
        check_finite(&hidden, "lstm")?;
        steps.push(LstmStep {
            input_gate,
            forget_gate,
            cell_candidate,
            output_gate,
            cell: cell.clone(),
            hidden: hidden.clone(),
        });
    }

    let logits = dense_forward(params.tensor("head.weight"), params.tensor("head.bias"), &hidden);
    check_finite(&logits, "head")?;
    let outputs = head_activations(&logits, &cfg.assembly.layout());
    Ok(ForwardTrace {
        config: cfg.clone(),
        segments,
        steps,
        outputs,
    })
}

/// Exact gradients of a scalar loss with respect to every parameter, given
/// the loss gradient with respect to the activated outputs.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    doutputs: &[T],
) -> Result<ModelParams<T>> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, doutputs, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`], accumulating into `grads`.
pub fn backward_into<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    doutputs: &[T],
    grads: &mut ModelParams<T>,
) -> Result<()> {
    let cfg = &params.config;
    if trace.config != *cfg || grads.config != *cfg {
        return Err(invalid!("trace or gradient buffer was produced by a different model"));
    }
    if doutputs.len() != trace.outputs.len() {
        return Err(invalid!(
            "loss gradient has {} components, model emits {}",
            doutputs.len(),
            trace.outputs.len()
        ));
    }
    let layout = &params.layout;
    let range = |name: &str| layout.get(name).unwrap().range();
    let g = &mut grads.data;
    let h = cfg.lstm_hidden;

    let dlogits = head_backward(&trace.outputs, doutputs, &cfg.assembly.layout());
    let last_hidden = &trace.steps.last().expect("at least one segment").hidden;
    let (hw, hb) = (range("head.weight"), range("head.bias"));
    let (gw, gb) = split_pair(g, hw, hb);
    let mut dhidden = dense_backward(params.tensor("head.weight"), last_hidden, &dlogits, gw, gb);

    let wx = params.tensor("lstm.input_weight");
    let wh = params.tensor("lstm.recurrent_weight");
    let (rx, rh, rb) = (
        range("lstm.input_weight"),
        range("lstm.recurrent_weight"),
        range("lstm.bias"),
    );
    let mut dcell = vec![T::zero(); h];
    let mut dfeatures: Vec<Vec<T>> = vec![Vec::new(); cfg.segments];
    let zero_h = vec![T::zero(); h];
    for p in (0..cfg.segments).rev() {
        let st = &trace.steps[p];
        let (prev_cell, prev_hidden) = if p == 0 {
            (&zero_h, &zero_h)
        } else {
            (&trace.steps[p - 1].cell, &trace.steps[p - 1].hidden)
        };
        let mut dz = vec![T::zero(); 4 * h];
        for j in 0..h {
            let tc = st.cell[j].tanh();
            let d_o = dhidden[j] * tc;
            let dc = dcell[j] + dhidden[j] * st.output_gate[j] * (T::one() - tc * tc);
            let (i, f, gg, o) = (
                st.input_gate[j],
                st.forget_gate[j],
                st.cell_candidate[j],
                st.output_gate[j],
            );
            dz[j] = dc * gg * i * (T::one() - i);
            dz[h + j] = dc * prev_cell[j] * f * (T::one() - f);
            dz[2 * h + j] = dc * i * (T::one() - gg * gg);
            dz[3 * h + j] = d_o * o * (T::one() - o);
            dcell[j] = dc * f;
        }
        let feature = &trace.segments[p].feature;
        let (gx, gb) = split_pair(g, rx.clone(), rb.clone());
        dfeatures[p] = dense_backward(wx, feature, &dz, gx, gb);
        let mut scratch_bias = vec![T::zero(); 4 * h];
        dhidden = dense_backward(wh, prev_hidden, &dz, &mut g[rh.clone()], &mut scratch_bias);
    }

    let (dw_r, db_r) = (range("dense.weight"), range("dense.bias"));
    let lens = cfg.block_lengths();
    for (p, seg) in trace.segments.iter().enumerate() {
        let mut dpre = dfeatures[p].clone();
        if let Some(mask) = &seg.mask {
            for (d, &m) in dpre.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        for (d, &z) in dpre.iter_mut().zip(&seg.dense_pre) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
        let (gw, gb) = split_pair(g, dw_r.clone(), db_r.clone());
        let mut dpooled = dense_backward(params.tensor("dense.weight"), &seg.flat, &dpre, gw, gb);

        for b in (0..cfg.filters.len()).rev() {
            let c_out = cfg.filters[b];
            let c_in = if b == 0 { cfg.channels } else { cfg.filters[b - 1] };
            let len = lens[b];
            let bt = &seg.blocks[b];
            let dconv = relu_pool_backward(&bt.pre, c_out, len, cfg.pool_width, &dpooled);
            let (wr, br) = (
                range(&format!("conv{}.weight", b + 1)),
                range(&format!("conv{}.bias", b + 1)),
            );
            let weight = params.tensor(&format!("conv{}.weight", b + 1));
            let (gw, gb) = split_pair(g, wr, br);
            if b == 0 {
                conv_backward(&bt.xpad, c_in, len, weight, c_out, cfg.kernel, &dconv, gw, gb, None);
            } else {
                let plen = len + cfg.kernel - 1;
                let mut dxpad = vec![T::zero(); c_in * plen];
                conv_backward(
                    &bt.xpad,
                    c_in,
                    len,
                    weight,
                    c_out,
                    cfg.kernel,
                    &dconv,
                    gw,
                    gb,
                    Some(&mut dxpad),
                );
                let left = pad_left(cfg.kernel);
                let mut dx = vec![T::zero(); c_in * len];
                for c in 0..c_in {
                    axpy(
                        T::one(),
                        &dxpad[c * plen + left..c * plen + left + len],
                        &mut dx[c * len..(c + 1) * len],
                    );
                }
                dpooled = dx;
            }
        }
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(())
}

/// Two disjoint mutable views into the gradient buffer; `a` precedes `b`.
fn split_pair<T>(
    data: &mut [T],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = data.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Assembly;
    use crate::model::init_params;

    pub(crate) fn tiny_config(assembly: Assembly) -> ModelConfig {
        ModelConfig {
            channels: 2,
            input_len: 600,
            segments: 2,
            kernel: 100,
            filters: vec![2, 4, 8],
            pool_width: 6,
            dense_units: 8,
            dropout_rate: 0.5,
            lstm_hidden: 8,
            assembly,
            seed: 0,
        }
    }

    fn input(cfg: &ModelConfig, k: f64) -> Vec<f64> {
        (0..cfg.channels * cfg.input_len)
            .map(|i| (i as f64 * k).sin() + 0.3 * (i as f64 * 0.013).cos())
            .collect()
    }

    #[test]
    fn stage_block_is_distribution() {
        let cfg = tiny_config(Assembly::SAR);
        let p = init_params::<f64>(&cfg, 5).unwrap();
        let out = forward(&p, &input(&cfg, 0.1)).unwrap();
        assert!((out[..5].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((out[9] + out[10] - 1.0).abs() < 1e-12);
        assert!(out[5] > 0.0 && out[5] < 1.0);
    }

    #[test]
    fn inference_is_repeatable() {
        let cfg = tiny_config(Assembly::SA);
        let p = init_params::<f32>(&cfg, 9).unwrap();
        let x: Vec<f32> = input(&cfg, 0.07).iter().map(|&v| v as f32).collect();
        assert_eq!(forward(&p, &x).unwrap(), forward(&p, &x).unwrap());
        let a = forward_trace(&p, &x, true, 1).unwrap().outputs;
        let b = forward_trace(&p, &x, true, 1).unwrap().outputs;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_params_zero_input() {
        let cfg = ModelConfig::new(4, Assembly::SAR);
        let p = ModelParams::<f32>::zeros(&cfg).unwrap();
        let out = forward(&p, &vec![0.0f32; 4 * 15000]).unwrap();
        for v in &out[..5] {
            assert!((v - 0.2).abs() < 1e-6);
        }
        assert_eq!((out[5], out[8]), (0.5, 0.5));
        assert_eq!((out[6], out[7], out[11], out[12]), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let cfg = tiny_config(Assembly::S);
        let p = init_params::<f64>(&cfg, 1).unwrap();
        assert!(forward(&p, &[0.0; 10]).is_err());
        let mut x = input(&cfg, 0.2);
        x[7] = f64::INFINITY;
        assert!(matches!(forward(&p, &x), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let cfg = tiny_config(Assembly::SAR);
        let p = init_params::<f64>(&cfg, 2).unwrap();
        let t = forward_trace(&p, &input(&cfg, 0.05), true, 4).unwrap();
        let g = backward(&p, &t, &[0.0; 13]).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_coordinate_has_no_gradient() {
        // Only x_a receives loss gradient; perturbing w_a's head row cannot
        // change the loss, so its gradient must vanish.
        let cfg = tiny_config(Assembly::SA);
        let p = init_params::<f64>(&cfg, 2).unwrap();
        let t = forward_trace(&p, &input(&cfg, 0.05), false, 0).unwrap();
        let mut dy = vec![0.0; 8];
        dy[6] = 1.0;
        let g = backward(&p, &t, &dy).unwrap();
        let hw = g.tensor("head.weight");
        assert!(hw[7 * 8..8 * 8].iter().all(|&v| v == 0.0));
        assert_eq!(g.tensor("head.bias")[7], 0.0);
        assert!(hw[6 * 8..7 * 8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mismatched_trace_rejected() {
        let cfg = tiny_config(Assembly::SA);
        let p = init_params::<f64>(&cfg, 2).unwrap();
        let t = forward_trace(&p, &input(&cfg, 0.05), false, 0).unwrap();
        let other = init_params::<f64>(&tiny_config(Assembly::S), 2).unwrap();
        assert!(backward(&other, &t, &[0.0; 5]).is_err());
    }
}
