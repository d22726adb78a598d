//! Reverse pass: gradients of the sequence LM loss with respect to the
//! extension parameters (gates, side-car projections, LoRA factors).
//!
//! Activation gradients flow through the frozen backbone layers, but no
//! gradient is ever accumulated for a backbone tensor; the trainable surface
//! is exactly the set addressed by [`ParamId`]. Every formula here is held to
//! the central-finite-difference contract in `train::grad_check`.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::math;
use crate::model::{
    silu_derivative, AdapterCache, ForwardCache, HybridModel, LayerCache, ModelError, ParamId,
};

/// Per-tensor gradients, aligned with `extension_param_ids` order.
pub(crate) struct Gradients {
    ids: Vec<ParamId>,
    slots: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(model: &HybridModel) -> Self {
        let ids = model.extension_param_ids();
        let slots = ids
            .iter()
            .map(|&id| vec![0.0; model.param(id).len()])
            .collect();
        Self { ids, slots }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let idx = self.index_of(id);
        &self.slots[idx]
    }

    fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let idx = self.index_of(id);
        &mut self.slots[idx]
    }

    fn index_of(&self, id: ParamId) -> usize {
        self.ids
            .iter()
            .position(|&x| x == id)
            .expect("known parameter id")
    }
}

/// Mean per-position negative log-likelihood over a batch, forward only.
pub(crate) fn batch_loss(
    model: &HybridModel,
    seqs: &[(Vec<usize>, Vec<usize>)],
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut positions = 0usize;
    for (inputs, targets) in seqs {
        check_targets(model, inputs, targets)?;
        let cache = model.run_forward(inputs, true)?;
        for (t, &target) in targets.iter().enumerate() {
            total += nll_row(cache.logits.row(t), target);
        }
        positions += targets.len();
    }
    Ok(total / positions as f64)
}

/// Loss plus gradients for every extension parameter over a batch.
pub(crate) fn batch_loss_and_gradients(
    model: &HybridModel,
    seqs: &[(Vec<usize>, Vec<usize>)],
) -> Result<(f64, Gradients), ModelError> {
    let mut grads = Gradients::zeros(model);
    let total_positions: usize = seqs.iter().map(|(_, t)| t.len()).sum();
    let inv_positions = 1.0 / total_positions as f64;
    let mut total = 0.0;
    for (inputs, targets) in seqs {
        check_targets(model, inputs, targets)?;
        let cache = model.run_forward(inputs, true)?;
        total += backward_sequence(model, &cache, targets, inv_positions, &mut grads);
    }
    Ok((total * inv_positions, grads))
}

fn check_targets(
    model: &HybridModel,
    inputs: &[usize],
    targets: &[usize],
) -> Result<(), ModelError> {
    if inputs.len() != targets.len() {
        return Err(ModelError::LengthMismatch {
            left: inputs.len(),
            right: targets.len(),
        });
    }
    let vocab = model.config().vocab_size;
    for (index, &id) in targets.iter().enumerate() {
        if id >= vocab {
            return Err(ModelError::TokenOutOfRange { index, id, vocab });
        }
    }
    Ok(())
}

fn nll_row(logits: &[f64], target: usize) -> f64 {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| math::max(m, v));
    let lse = math::ln(logits.iter().map(|&v| math::exp(v - max)).sum::<f64>());
    lse - (logits[target] - max)
}

/// Runs the reverse pass for one sequence and accumulates gradients scaled by
/// `inv_positions`. Returns the sequence's summed NLL (unscaled).
fn backward_sequence(
    model: &HybridModel,
    cache: &ForwardCache,
    targets: &[usize],
    inv_positions: f64,
    grads: &mut Gradients,
) -> f64 {
    let cfg = model.config();
    let len = targets.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let ff = cfg.d_ff();
    let vocab = cfg.vocab_size;
    let inv_sqrt_dh = 1.0 / math::sqrt(dh as f64);
    let backbone = model.backbone_weights();

    // Softmax cross-entropy gradient at the logits.
    let mut seq_nll = 0.0;
    let mut d_logits = vec![0.0; len * vocab];
    for (t, &target) in targets.iter().enumerate() {
        let row = cache.logits.row(t);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| math::max(m, v));
        let mut denom = 0.0;
        let drow = &mut d_logits[t * vocab..(t + 1) * vocab];
        for (slot, &v) in drow.iter_mut().zip(row) {
            *slot = math::exp(v - max);
            denom += *slot;
        }
        seq_nll += math::ln(denom) - (row[target] - max);
        for slot in drow.iter_mut() {
            *slot = *slot / denom * inv_positions;
        }
        drow[target] -= inv_positions;
    }

    // Tied output head: gradient w.r.t. the final normed hidden state.
    let mut d_final_normed = vec![0.0; len * d];
    for t in 0..len {
        let drow = &d_logits[t * vocab..(t + 1) * vocab];
        let out = &mut d_final_normed[t * d..(t + 1) * d];
        for (vtok, &dv) in drow.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            let erow = backbone.embed.row(vtok);
            for (o, &ev) in out.iter_mut().zip(erow) {
                *o += dv * ev;
            }
        }
    }

    let mut d_h = vec![0.0; len * d];
    for t in 0..len {
        rmsnorm_backward(
            &d_final_normed[t * d..(t + 1) * d],
            &cache.pre_final[t * d..(t + 1) * d],
            backbone.final_norm.data(),
            cache.inv_rms_final[t],
            &mut d_h[t * d..(t + 1) * d],
        );
    }

    for (l, layer) in cache.layers.iter().enumerate().rev() {
        d_h = backward_layer(
            model,
            l,
            layer,
            &d_h,
            len,
            d,
            heads,
            dh,
            ff,
            inv_sqrt_dh,
            grads,
        );
    }
    seq_nll
}

#[allow(clippy::too_many_arguments)]
fn backward_layer(
    model: &HybridModel,
    layer_idx: usize,
    layer: &LayerCache,
    d_out: &[f64],
    len: usize,
    d: usize,
    heads: usize,
    dh: usize,
    ff: usize,
    inv_sqrt_dh: f64,
    grads: &mut Gradients,
) -> Vec<f64> {
    let backbone = model.backbone_weights();
    let weights = &backbone.layers[layer_idx];
    let mut d_h_in = vec![0.0; len * d];

    // Side-car path: h_out = h_post + gate * h_ssm(h_in).
    if let (Some(b), Some(sc)) = (layer.sidecar_idx, &layer.sidecar) {
        let block = &model.sidecars()[b];
        let gate = block.gate();
        let m = model.config().ssm_channels;
        let n = model.config().n_states;

        let mut d_gate = 0.0;
        for (dv, sv) in d_out.iter().zip(&sc.h_ssm) {
            d_gate += dv * sv;
        }
        grads.get_mut(ParamId::Gate(b))[0] += d_gate;

        // d h_ssm = gate * d_out; then back through w_out.
        let mut d_y = vec![0.0; len * m];
        {
            let w_out = block.w_out_matrix();
            let d_w_out = grads.get_mut(ParamId::SidecarWOut(b));
            for t in 0..len {
                let d_hssm_t: Vec<f64> =
                    d_out[t * d..(t + 1) * d].iter().map(|v| gate * v).collect();
                matvec_t_accum(&mut d_y[t * m..(t + 1) * m], w_out, &d_hssm_t);
                outer_accum(d_w_out, &d_hssm_t, &sc.y[t * m..(t + 1) * m]);
            }
        }

        // BPTT through each channel's shared linear recurrence:
        // ds_t = c_row * dy_t + A_bar^T ds_{t+1}, du_t = B_bar . ds_t.
        let a_bar = block.ssm().a_discrete().data();
        let b_bar = block.ssm().b_discrete().data();
        let c_out = block.c_out_matrix();
        let mut d_u = vec![0.0; len * m];
        {
            let d_c_out = grads.get_mut(ParamId::SidecarCOut(b));
            let mut ds_next = vec![0.0; n];
            let mut ds = vec![0.0; n];
            for c in 0..m {
                ds_next.iter_mut().for_each(|v| *v = 0.0);
                let c_row = c_out.row(c);
                for t in (0..len).rev() {
                    let dy = d_y[t * m + c];
                    let s_t = &sc.states[(c * len + t) * n..(c * len + t + 1) * n];
                    for i in 0..n {
                        let mut acc = c_row[i] * dy;
                        for j in 0..n {
                            acc += a_bar[j * n + i] * ds_next[j];
                        }
                        ds[i] = acc;
                        d_c_out[c * n + i] += dy * s_t[i];
                    }
                    let mut du = 0.0;
                    for i in 0..n {
                        du += b_bar[i] * ds[i];
                    }
                    d_u[t * m + c] = du;
                    core::mem::swap(&mut ds, &mut ds_next);
                }
            }
        }

        let w_in = block.w_in_matrix();
        let d_w_in = grads.get_mut(ParamId::SidecarWIn(b));
        for t in 0..len {
            let du_t = &d_u[t * m..(t + 1) * m];
            outer_accum(d_w_in, du_t, &layer.h_in[t * d..(t + 1) * d]);
            matvec_t_accum(&mut d_h_in[t * d..(t + 1) * d], w_in, du_t);
        }
    }

    // MLP: h_post = h_mid + w_down silu(w_up rmsnorm(h_mid)).
    let mut d_mid = d_out.to_vec();
    {
        let mut d_normed = vec![0.0; d];
        let mut d_act = vec![0.0; ff];
        let mut d_up = vec![0.0; ff];
        for t in 0..len {
            d_act.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_accum(&mut d_act, &weights.w_down, &d_out[t * d..(t + 1) * d]);
            for i in 0..ff {
                d_up[i] = d_act[i] * silu_derivative(layer.up[t * ff + i]);
            }
            d_normed.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_accum(&mut d_normed, &weights.w_up, &d_up);
            rmsnorm_backward_accum(
                &d_normed,
                &layer.h_mid[t * d..(t + 1) * d],
                weights.mlp_norm.data(),
                layer.inv_rms_mlp[t],
                &mut d_mid[t * d..(t + 1) * d],
            );
        }
    }

    // Attention: h_mid = h_in + (wo headcat + lora_o delta).
    for t in 0..len {
        for i in 0..d {
            d_h_in[t * d + i] += d_mid[t * d + i];
        }
    }
    let mut d_headcat = vec![0.0; len * d];
    for t in 0..len {
        matvec_t_accum(
            &mut d_headcat[t * d..(t + 1) * d],
            &weights.wo,
            &d_mid[t * d..(t + 1) * d],
        );
    }
    if let Some(lora) = &layer.lora_o {
        lora_backward(
            model,
            lora,
            &d_mid,
            &layer.headcat,
            &mut d_headcat,
            len,
            d,
            grads,
        );
    }

    // Per-head attention backward.
    let mut d_q = vec![0.0; len * d];
    let mut d_k = vec![0.0; len * d];
    let mut d_v = vec![0.0; len * d];
    let mut d_att_row = vec![0.0; len];
    let mut d_scores_row = vec![0.0; len];
    for h in 0..heads {
        for t in 0..len {
            let att_row = &layer.att[h * len * len + t * len..h * len * len + t * len + t + 1];
            let d_head = &d_headcat[t * d + h * dh..t * d + (h + 1) * dh];

            // d att and dV.
            for s in 0..=t {
                let vrow = &layer.v[s * d + h * dh..s * d + (h + 1) * dh];
                let mut dot = 0.0;
                for (dv, vv) in d_head.iter().zip(vrow) {
                    dot += dv * vv;
                }
                d_att_row[s] = dot;
                let d_vrow = &mut d_v[s * d + h * dh..s * d + (h + 1) * dh];
                let w = att_row[s];
                for (dvv, dhv) in d_vrow.iter_mut().zip(d_head) {
                    *dvv += w * dhv;
                }
            }

            // Softmax Jacobian on the causal row.
            let mut inner = 0.0;
            for s in 0..=t {
                inner += att_row[s] * d_att_row[s];
            }
            for s in 0..=t {
                d_scores_row[s] = att_row[s] * (d_att_row[s] - inner);
            }

            // dQ and dK through the scaled dot products.
            let d_qrow = &mut d_q[t * d + h * dh..t * d + (h + 1) * dh];
            for s in 0..=t {
                let ds = d_scores_row[s] * inv_sqrt_dh;
                if ds == 0.0 {
                    continue;
                }
                let krow = &layer.k[s * d + h * dh..s * d + (h + 1) * dh];
                for (dqv, kv) in d_qrow.iter_mut().zip(krow) {
                    *dqv += ds * kv;
                }
            }
            let qrow = &layer.q[t * d + h * dh..t * d + (h + 1) * dh];
            for s in 0..=t {
                let ds = d_scores_row[s] * inv_sqrt_dh;
                if ds == 0.0 {
                    continue;
                }
                let d_krow = &mut d_k[s * d + h * dh..s * d + (h + 1) * dh];
                for (dkv, qv) in d_krow.iter_mut().zip(qrow) {
                    *dkv += ds * qv;
                }
            }
        }
    }

    // Back through the q/k/v projections into the normed input.
    let mut d_normed_attn = vec![0.0; len * d];
    for t in 0..len {
        let dn = &mut d_normed_attn[t * d..(t + 1) * d];
        matvec_t_accum(dn, &weights.wq, &d_q[t * d..(t + 1) * d]);
        matvec_t_accum(dn, &weights.wk, &d_k[t * d..(t + 1) * d]);
        matvec_t_accum(dn, &weights.wv, &d_v[t * d..(t + 1) * d]);
    }
    if let Some(lora) = &layer.lora_q {
        lora_backward(
            model,
            lora,
            &d_q,
            &layer.normed_attn,
            &mut d_normed_attn,
            len,
            d,
            grads,
        );
    }
    if let Some(lora) = &layer.lora_k {
        lora_backward(
            model,
            lora,
            &d_k,
            &layer.normed_attn,
            &mut d_normed_attn,
            len,
            d,
            grads,
        );
    }
    if let Some(lora) = &layer.lora_v {
        lora_backward(
            model,
            lora,
            &d_v,
            &layer.normed_attn,
            &mut d_normed_attn,
            len,
            d,
            grads,
        );
    }

    for t in 0..len {
        rmsnorm_backward_accum(
            &d_normed_attn[t * d..(t + 1) * d],
            &layer.h_in[t * d..(t + 1) * d],
            weights.attn_norm.data(),
            layer.inv_rms_attn[t],
            &mut d_h_in[t * d..(t + 1) * d],
        );
    }

    d_h_in
}

/// Gradient of `out += scaling * B (A x)` w.r.t. A, B, and x.
#[allow(clippy::too_many_arguments)]
fn lora_backward(
    model: &HybridModel,
    cache: &AdapterCache,
    d_out: &[f64],
    input: &[f64],
    d_input: &mut [f64],
    len: usize,
    d: usize,
    grads: &mut Gradients,
) {
    let adapter = &model.adapters()[cache.adapter_idx];
    let r = adapter.rank();
    let scaling = adapter.scaling();
    let a = adapter.a_matrix();
    let b = adapter.b_matrix();

    let mut d_hidden = vec![0.0; r];
    for t in 0..len {
        let d_out_t = &d_out[t * d..(t + 1) * d];
        let hidden_t = &cache.hidden[t * r..(t + 1) * r];

        // dB += scaling * d_out_t (outer) hidden_t
        {
            let d_b = grads.get_mut(ParamId::LoraB(cache.adapter_idx));
            for (row, &dv) in d_out_t.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let scaled = scaling * dv;
                for (j, &hv) in hidden_t.iter().enumerate() {
                    d_b[row * r + j] += scaled * hv;
                }
            }
        }

        // d_hidden = scaling * B^T d_out_t
        d_hidden.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_accum(&mut d_hidden, b, d_out_t);
        for v in d_hidden.iter_mut() {
            *v *= scaling;
        }

        // dA += d_hidden (outer) input_t; d_input += A^T d_hidden
        {
            let d_a = grads.get_mut(ParamId::LoraA(cache.adapter_idx));
            outer_accum(d_a, &d_hidden, &input[t * d..(t + 1) * d]);
        }
        matvec_t_accum(&mut d_input[t * d..(t + 1) * d], a, &d_hidden);
    }
}

/// `out[j] += sum_i w[i][j] * x[i]` (transpose apply, accumulating).
fn matvec_t_accum(out: &mut [f64], w: &Matrix, x: &[f64]) {
    debug_assert_eq!(w.rows(), x.len());
    debug_assert_eq!(w.cols(), out.len());
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = w.row(i);
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
}

/// `grad[i][j] += a[i] * b[j]` over a flat row-major gradient slab.
fn outer_accum(grad: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(grad.len(), a.len() * b.len());
    for (i, &av) in a.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let row = &mut grad[i * b.len()..(i + 1) * b.len()];
        for (g, &bv) in row.iter_mut().zip(b) {
            *g += av * bv;
        }
    }
}

/// d/dx of `y = gain .* x * inv_rms(x)`, writing into a zeroed output row.
fn rmsnorm_backward(d_y: &[f64], x: &[f64], gain: &[f64], inv_rms: f64, d_x: &mut [f64]) {
    d_x.iter_mut().for_each(|v| *v = 0.0);
    rmsnorm_backward_accum(d_y, x, gain, inv_rms, d_x);
}

/// Same as [`rmsnorm_backward`] but accumulates into `d_x`.
fn rmsnorm_backward_accum(d_y: &[f64], x: &[f64], gain: &[f64], inv_rms: f64, d_x: &mut [f64]) {
    let n = x.len() as f64;
    let mut inner = 0.0;
    for i in 0..x.len() {
        inner += d_y[i] * gain[i] * x[i];
    }
    let coeff = inv_rms * inv_rms * inv_rms * inner / n;
    for i in 0..x.len() {
        d_x[i] += inv_rms * gain[i] * d_y[i] - coeff * x[i];
    }
}
