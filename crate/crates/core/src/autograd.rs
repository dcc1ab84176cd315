//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! reference counted so parameters enter the graph without copying.
//! [`Graph::backward`] walks the record in reverse and returns gradients for
//! every node that depends on a parameter.
//!
//! The op set is exactly what the step operators, the corrections and the
//! rollout loss need; every op has an analytic vector-Jacobian product that
//! is checked against central finite differences in the tests below.

use std::sync::Arc;

use crate::correction::{
    magnitude_correct, magnitude_correct_backward, shift_correct, shift_correct_backward,
    CorrectionMode, DegenerateEvent, MagnitudeState,
};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::spectral::SpectralPlan;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;
const LOSS_EPS: f64 = 1e-12;

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    Denormalize {
        y: Var,
        reference: Var,
        offset: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    ClipMin {
        x: Var,
        floor: T,
        channels: Vec<bool>,
    },
    Correct {
        pred: Var,
        reference: Var,
        modes: Vec<CorrectionMode>,
        magnitude: Vec<Option<MagnitudeState>>,
    },
    FftRetain {
        x: Var,
        plan: Arc<SpectralPlan<T>>,
    },
    IfftScatter {
        z: Var,
        plan: Arc<SpectralPlan<T>>,
    },
    ModeMix {
        z: Var,
        wre: Var,
        wim: Var,
    },
    ComplexBlockLinear {
        z: Var,
        w: Var,
        b: Var,
        groups: usize,
    },
    BlockMix {
        z: Var,
        logits: Var,
        groups: usize,
        softmax: Vec<f64>,
    },
    Patchify {
        x: Var,
        patch: usize,
    },
    Unpatchify {
        x: Var,
        patch: usize,
    },
    RelativeL2 {
        pred: Var,
        truth: Var,
        diff_norm: f64,
        truth_norm: f64,
    },
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Forward record of one computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    events: Vec<DegenerateEvent>,
    flags: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            events: Vec::new(),
            flags: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Correction fallbacks raised during the forward pass.
    pub fn events(&self) -> &[DegenerateEvent] {
        &self.events
    }

    /// Guarded-denominator warnings raised during the forward pass.
    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let out = Tensor::from_vec(va.shape(), va.data().iter().map(|x| *x * s).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU, elementwise.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|x| T::from_f64_lossy(gelu_parts(x.to_f64_lossy()).0))
            .collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Channel mixing `y[o, :] = sum_i w[o, i] x[i, :] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.shape().len() != 2 || vw.shape()[1] != vx.rows() {
            return Err(Error::Shape(format!(
                "linear: weight {:?} does not match input {:?}",
                vw.shape(),
                vx.shape()
            )));
        }
        let (cout, cin, n) = (vw.shape()[0], vw.shape()[1], vx.row_len());
        let mut data = vec![T::zero(); cout * n];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != cout {
                return Err(Error::Shape(format!("linear: bias {:?} for {cout} outputs", vb.shape())));
            }
            for (o, row) in data.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = vb.data()[o]);
            }
        }
        T::gemm(cout, cin, n, vw.data(), false, vx.data(), false, T::one(), &mut data);
        let mut shape = vx.shape().to_vec();
        shape[0] = cout;
        let out = Tensor::from_vec(&shape, data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Stacks inputs along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!("concat: {:?} vs trailing {tail:?}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.rows() || len == 0 {
            return Err(Error::Shape(format!("slice {start}+{len} of {:?}", vx.shape())));
        }
        let n = vx.row_len();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_vec(&shape, vx.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    /// Per-channel standardization over all trailing axes followed by a
    /// learned affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (c, n) = (vx.rows(), vx.row_len());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape("instance_norm: affine size != channels".into()));
        }
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let row = vx.row(ch);
            let mean = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            let (g, b) = (vg[ch].to_f64_lossy(), vb[ch].to_f64_lossy());
            for k in 0..n {
                let h = (row[k].to_f64_lossy() - mean) * is;
                xhat[ch * n + k] = T::from_f64_lossy(h);
                out[ch * n + k] = T::from_f64_lossy(g * h + b);
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let op = Op::InstanceNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// `y[c] * std(r[offset + c]) + mean(r[offset + c])`: restores the scale
    /// of the reference channels on the operator output.
    pub fn denormalize(&mut self, y: Var, reference: Var, offset: usize) -> Result<Var> {
        let (vy, vr) = (self.value(y), self.value(reference));
        let (c, n) = (vy.rows(), vy.row_len());
        if vr.row_len() != n || offset + c > vr.rows() {
            return Err(Error::Shape("denormalize: reference does not cover output".into()));
        }
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let row = vr.row(offset + ch);
            let m = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / n as f64;
            let s = (var + NORM_EPS).sqrt();
            mean[ch] = m;
            std[ch] = s;
            for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(vy.row(ch)) {
                *o = T::from_f64_lossy(v.to_f64_lossy() * s + m);
            }
        }
        let out = Tensor::from_vec(vy.shape(), out)?;
        let op = Op::Denormalize {
            y,
            reference,
            offset,
            mean,
            std,
        };
        Ok(self.push(out, op, &[y, reference]))
    }

    /// `max(x, floor)` on the flagged channels; other channels pass through.
    pub fn clip_min(&mut self, x: Var, floor: T, channels: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if channels.len() != vx.rows() {
            return Err(Error::Shape("clip_min: channel mask size".into()));
        }
        let n = vx.row_len();
        let mut data = vx.data().to_vec();
        for (ch, &on) in channels.iter().enumerate() {
            if on {
                data[ch * n..(ch + 1) * n]
                    .iter_mut()
                    .for_each(|v| *v = if *v < floor { floor } else { *v });
            }
        }
        let out = Tensor::from_vec(vx.shape(), data)?;
        let op = Op::ClipMin {
            x,
            floor,
            channels: channels.to_vec(),
        };
        Ok(self.push(out, op, &[x]))
    }

    /// Channelwise conservation correction of `pred` against `reference`.
    pub fn correct(&mut self, pred: Var, reference: Var, modes: &[CorrectionMode], eps: f64) -> Result<Var> {
        self.same_shape(pred, reference, "correct")?;
        let (vp, vr) = (self.value(pred), self.value(reference));
        if modes.len() != vp.rows() {
            return Err(Error::Shape("correct: one mode per channel required".into()));
        }
        let n = vp.row_len();
        let mut data = Vec::with_capacity(vp.len());
        let mut magnitude = Vec::with_capacity(modes.len());
        let mut events = Vec::new();
        for (ch, mode) in modes.iter().enumerate() {
            let (p, r) = (vp.row(ch), vr.row(ch));
            match mode {
                CorrectionMode::Magnitude => {
                    let (out, st) = magnitude_correct(p, r, eps);
                    if st.fallback {
                        events.push(DegenerateEvent {
                            channel: ch,
                            predicted_l1: st.pred_l1,
                        });
                    }
                    data.extend(out);
                    magnitude.push(Some(st));
                }
                CorrectionMode::Shift => {
                    data.extend(shift_correct(p, r));
                    magnitude.push(None);
                }
                CorrectionMode::None => {
                    data.extend_from_slice(p);
                    magnitude.push(None);
                }
            }
        }
        debug_assert_eq!(data.len(), vp.rows() * n);
        let out = Tensor::from_vec(vp.shape(), data)?;
        self.events.extend(events);
        let op = Op::Correct {
            pred,
            reference,
            modes: modes.to_vec(),
            magnitude,
        };
        Ok(self.push(out, op, &[pred, reference]))
    }

    /// Real `(C, nx, ny)` to packed retained spectrum `(2, C, K)`.
    pub fn fft_retain(&mut self, x: Var, plan: &Arc<SpectralPlan<T>>) -> Result<Var> {
        let vx = self.value(x);
        let (nx, ny) = plan.modes().dims();
        if vx.shape().len() != 3 || vx.shape()[1] != nx || vx.shape()[2] != ny {
            return Err(Error::Shape(format!("fft_retain: {:?} on {nx}x{ny} plan", vx.shape())));
        }
        let c = vx.rows();
        let out = Tensor::from_vec(&[2, c, plan.modes().len()], plan.forward(vx.data(), c))?;
        let op = Op::FftRetain {
            x,
            plan: Arc::clone(plan),
        };
        Ok(self.push(out, op, &[x]))
    }

    /// Packed spectrum `(2, C, K)` back to real `(C, nx, ny)`.
    pub fn ifft_scatter(&mut self, z: Var, plan: &Arc<SpectralPlan<T>>) -> Result<Var> {
        let vz = self.value(z);
        let k = plan.modes().len();
        if vz.shape().len() != 3 || vz.shape()[0] != 2 || vz.shape()[2] != k {
            return Err(Error::Shape(format!("ifft_scatter: {:?} with {k} modes", vz.shape())));
        }
        let c = vz.shape()[1];
        let (nx, ny) = plan.modes().dims();
        let out = Tensor::from_vec(&[c, nx, ny], plan.inverse(vz.data(), c))?;
        let op = Op::IfftScatter {
            z,
            plan: Arc::clone(plan),
        };
        Ok(self.push(out, op, &[z]))
    }

    /// Per-mode complex channel mixing `Y_o(k) = sum_i W_io(k) Z_i(k)`;
    /// weights are `(Cin, Cout, K)` real and imaginary parts.
    pub fn mode_mix(&mut self, z: Var, wre: Var, wim: Var) -> Result<Var> {
        let (vz, vr, vi) = (self.value(z), self.value(wre), self.value(wim));
        let (cin, k) = (vz.shape()[1], vz.shape()[2]);
        if vr.shape() != vi.shape() || vr.shape().len() != 3 || vr.shape()[0] != cin || vr.shape()[2] != k {
            return Err(Error::Shape(format!(
                "mode_mix: weights {:?} for spectrum {:?}",
                vr.shape(),
                vz.shape()
            )));
        }
        let cout = vr.shape()[1];
        let (zr, zi) = vz.data().split_at(cin * k);
        let (wr, wi) = (vr.data(), vi.data());
        let mut out = vec![T::zero(); 2 * cout * k];
        let (yr, yi) = out.split_at_mut(cout * k);
        for i in 0..cin {
            for o in 0..cout {
                let w0 = (i * cout + o) * k;
                for m in 0..k {
                    let (a, b) = (wr[w0 + m], wi[w0 + m]);
                    let (x, y) = (zr[i * k + m], zi[i * k + m]);
                    yr[o * k + m] = yr[o * k + m] + a * x - b * y;
                    yi[o * k + m] = yi[o * k + m] + a * y + b * x;
                }
            }
        }
        let out = Tensor::from_vec(&[2, cout, k], out)?;
        Ok(self.push(out, Op::ModeMix { z, wre, wim }, &[z, wre, wim]))
    }

    /// Block-diagonal complex linear map shared across modes:
    /// `Y_g(k) = W_g Z_g(k) + b_g` with `w: (2, G, B, B)` and `b: (2, G, B)`.
    pub fn complex_block_linear(&mut self, z: Var, w: Var, b: Var, groups: usize) -> Result<Var> {
        let (vz, vw, vb) = (self.value(z), self.value(w), self.value(b));
        let (d, k) = (vz.shape()[1], vz.shape()[2]);
        if groups == 0 || d % groups != 0 {
            return Err(Error::Shape(format!("complex_block_linear: {d} channels in {groups} groups")));
        }
        let bs = d / groups;
        if vw.shape() != [2, groups, bs, bs] || vb.shape() != [2, groups, bs] {
            return Err(Error::Shape("complex_block_linear: weight shape".into()));
        }
        let (zr, zi) = vz.data().split_at(d * k);
        let (wr, wi) = vw.data().split_at(groups * bs * bs);
        let (br, bi) = vb.data().split_at(groups * bs);
        let mut out = vec![T::zero(); 2 * d * k];
        let (yr, yi) = out.split_at_mut(d * k);
        for g in 0..groups {
            for o in 0..bs {
                let row = g * bs + o;
                let (b0, b1) = (br[row], bi[row]);
                yr[row * k..(row + 1) * k].iter_mut().for_each(|v| *v = b0);
                yi[row * k..(row + 1) * k].iter_mut().for_each(|v| *v = b1);
                for i in 0..bs {
                    let col = g * bs + i;
                    let widx = (g * bs + o) * bs + i;
                    let (a, c) = (wr[widx], wi[widx]);
                    for m in 0..k {
                        let (x, y) = (zr[col * k + m], zi[col * k + m]);
                        yr[row * k + m] = yr[row * k + m] + a * x - c * y;
                        yi[row * k + m] = yi[row * k + m] + a * y + c * x;
                    }
                }
            }
        }
        let out = Tensor::from_vec(vz.shape(), out)?;
        Ok(self.push(out, Op::ComplexBlockLinear { z, w, b, groups }, &[z, w, b]))
    }

    /// Mixes channel blocks with row-softmax weights:
    /// `Y_g = sum_h softmax(logits)_{g h} Z_h`, applied to real and imaginary parts.
    pub fn block_mix(&mut self, z: Var, logits: Var, groups: usize) -> Result<Var> {
        let (vz, vl) = (self.value(z), self.value(logits));
        let (d, k) = (vz.shape()[1], vz.shape()[2]);
        if groups == 0 || d % groups != 0 || vl.shape() != [groups, groups] {
            return Err(Error::Shape("block_mix: logits must be (G, G) and divide channels".into()));
        }
        let softmax = row_softmax(vl.data(), groups);
        let block = (d / groups) * k;
        let mut out = vec![T::zero(); 2 * d * k];
        for part in 0..2 {
            let src = &vz.data()[part * d * k..(part + 1) * d * k];
            let dst = &mut out[part * d * k..(part + 1) * d * k];
            for g in 0..groups {
                for h in 0..groups {
                    let s = T::from_f64_lossy(softmax[g * groups + h]);
                    for (o, v) in dst[g * block..(g + 1) * block]
                        .iter_mut()
                        .zip(&src[h * block..(h + 1) * block])
                    {
                        *o = *o + s * *v;
                    }
                }
            }
        }
        let out = Tensor::from_vec(vz.shape(), out)?;
        let op = Op::BlockMix {
            z,
            logits,
            groups,
            softmax,
        };
        Ok(self.push(out, op, &[z, logits]))
    }

    /// `(C, nx, ny)` to `(C p p, nx/p, ny/p)`: each token row holds one
    /// channel-offset pair of a non-overlapping `p x p` patch.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
            return Err(Error::Shape(format!("patchify: {s:?} by {patch}")));
        }
        let data = patch_permute(vx.data(), s[0], s[1], s[2], patch, true);
        let out = Tensor::from_vec(&[s[0] * patch * patch, s[1] / patch, s[2] / patch], data)?;
        Ok(self.push(out, Op::Patchify { x, patch }, &[x]))
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || patch == 0 || s[0] % (patch * patch) != 0 {
            return Err(Error::Shape(format!("unpatchify: {s:?} by {patch}")));
        }
        let c = s[0] / (patch * patch);
        let (nx, ny) = (s[1] * patch, s[2] * patch);
        let data = patch_permute(vx.data(), c, nx, ny, patch, false);
        let out = Tensor::from_vec(&[c, nx, ny], data)?;
        Ok(self.push(out, Op::Unpatchify { x, patch }, &[x]))
    }

    /// Scalar `||pred - truth||_2 / ||truth||_2` over all entries.
    /// A zero-norm truth is guarded by `1e-12` and flagged.
    pub fn relative_l2(&mut self, pred: Var, truth: Var) -> Result<Var> {
        self.same_shape(pred, truth, "relative_l2")?;
        let (vp, vt) = (self.value(pred), self.value(truth));
        let diff_norm = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum::<f64>()
            .sqrt();
        let mut truth_norm = vt.sum_sq().sqrt();
        if truth_norm < LOSS_EPS {
            self.flags.push("relative_l2: zero-norm truth".into());
            truth_norm = LOSS_EPS;
        }
        let out = Tensor::from_vec(&[1], vec![T::from_f64_lossy(diff_norm / truth_norm)])?;
        let op = Op::RelativeL2 {
            pred,
            truth,
            diff_norm,
            truth_norm,
        };
        Ok(self.push(out, op, &[pred, truth]))
    }

    /// Sum of scalars.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = *terms.first().ok_or_else(|| Error::Empty("sum of nothing".into()))?;
        for t in &terms[1..] {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|v| *v * *s).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let gx = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| *gv * T::from_f64_lossy(gelu_parts(xv.to_f64_lossy()).1))
                    .collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (cout, cin, n) = (vw.shape()[0], vw.shape()[1], vx.row_len());
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); cin * n];
                    T::gemm(cin, cout, n, vw.data(), true, g, false, T::zero(), &mut gx);
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); cout * cin];
                    T::gemm(cout, n, cin, g, false, vx.data(), true, T::zero(), &mut gw);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = g.chunks(n).map(|row| row.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let vx = self.value(*x);
                let mut gx = vec![T::zero(); vx.len()];
                let off = start * vx.row_len();
                gx[off..off + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vx = self.value(*x);
                let (c, n) = (vx.rows(), vx.row_len());
                let vg = self.value(*gamma).data();
                let mut gx = vec![T::zero(); c * n];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ch in 0..c {
                    let gr = &g[ch * n..(ch + 1) * n];
                    let hr = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: f64 = gr.iter().map(|v| v.to_f64_lossy()).sum();
                    let sum_gh: f64 = gr
                        .iter()
                        .zip(hr)
                        .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
                        .sum();
                    gg[ch] = T::from_f64_lossy(sum_gh);
                    gb[ch] = T::from_f64_lossy(sum_g);
                    let k = vg[ch].to_f64_lossy() * inv_std[ch];
                    let (mg, mgh) = (sum_g / n as f64, sum_gh / n as f64);
                    for m in 0..n {
                        let v = k * (gr[m].to_f64_lossy() - mg - hr[m].to_f64_lossy() * mgh);
                        gx[ch * n + m] = T::from_f64_lossy(v);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Denormalize {
                y,
                reference,
                offset,
                mean,
                std,
            } => {
                let (vy, vr) = (self.value(*y), self.value(*reference));
                let (c, n) = (vy.rows(), vy.row_len());
                if self.wants(*y) {
                    let mut gy = vec![T::zero(); c * n];
                    for ch in 0..c {
                        let s = T::from_f64_lossy(std[ch]);
                        for m in 0..n {
                            gy[ch * n + m] = g[ch * n + m] * s;
                        }
                    }
                    self.accumulate(grads, *y, gy);
                }
                if self.wants(*reference) {
                    let mut gr = vec![T::zero(); vr.len()];
                    for ch in 0..c {
                        let gs = &g[ch * n..(ch + 1) * n];
                        let g_mean: f64 = gs.iter().map(|v| v.to_f64_lossy()).sum();
                        let g_std: f64 = gs
                            .iter()
                            .zip(vy.row(ch))
                            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
                            .sum();
                        let row = vr.row(offset + ch);
                        let base = (offset + ch) * n;
                        for m in 0..n {
                            let centered = row[m].to_f64_lossy() - mean[ch];
                            let v = g_mean / n as f64 + g_std * centered / (n as f64 * std[ch]);
                            gr[base + m] = T::from_f64_lossy(v);
                        }
                    }
                    self.accumulate(grads, *reference, gr);
                }
            }
            Op::ClipMin { x, floor, channels } => {
                let vx = self.value(*x);
                let n = vx.row_len();
                let mut gx = g.to_vec();
                for (ch, &on) in channels.iter().enumerate() {
                    if on {
                        for m in ch * n..(ch + 1) * n {
                            if vx.data()[m] < *floor {
                                gx[m] = T::zero();
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Correct {
                pred,
                reference,
                modes,
                magnitude,
            } => {
                let (vp, vr) = (self.value(*pred), self.value(*reference));
                let n = vp.row_len();
                let mut gp = Vec::with_capacity(vp.len());
                let mut gr = Vec::with_capacity(vp.len());
                for (ch, mode) in modes.iter().enumerate() {
                    let gs = &g[ch * n..(ch + 1) * n];
                    match mode {
                        CorrectionMode::Magnitude => {
                            let st = magnitude[ch].as_ref().expect("magnitude state cached");
                            let (a, b) = magnitude_correct_backward(vp.row(ch), vr.row(ch), st, gs);
                            gp.extend(a);
                            gr.extend(b);
                        }
                        CorrectionMode::Shift => {
                            let (a, b) = shift_correct_backward(gs);
                            gp.extend(a);
                            gr.extend(b);
                        }
                        CorrectionMode::None => {
                            gp.extend_from_slice(gs);
                            gr.extend(std::iter::repeat_n(T::zero(), n));
                        }
                    }
                }
                self.accumulate(grads, *pred, gp);
                self.accumulate(grads, *reference, gr);
            }
            Op::FftRetain { x, plan } => {
                let c = self.value(*x).rows();
                let (nx, ny) = plan.modes().dims();
                let scale = T::one() / T::from_usize(nx * ny).unwrap();
                let gx = plan.inverse(g, c).into_iter().map(|v| v * scale).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::IfftScatter { z, plan } => {
                let c = self.value(*z).shape()[1];
                let (nx, ny) = plan.modes().dims();
                let scale = T::from_usize(nx * ny).unwrap();
                let gz = plan.forward(g, c).into_iter().map(|v| v * scale).collect();
                self.accumulate(grads, *z, gz);
            }
            Op::ModeMix { z, wre, wim } => self.mode_mix_backward(*z, *wre, *wim, g, grads),
            Op::ComplexBlockLinear { z, w, b, groups } => {
                self.block_linear_backward(*z, *w, *b, *groups, g, grads)
            }
            Op::BlockMix {
                z,
                logits,
                groups,
                softmax,
            } => self.block_mix_backward(*z, *logits, *groups, softmax, g, grads),
            Op::Patchify { x, patch } => {
                let s = self.value(*x).shape();
                let gx = patch_permute(g, s[0], s[1], s[2], *patch, false);
                self.accumulate(grads, *x, gx);
            }
            Op::Unpatchify { x, patch } => {
                let s = node.value.shape();
                let gx = patch_permute(g, s[0], s[1], s[2], *patch, true);
                self.accumulate(grads, *x, gx);
            }
            Op::RelativeL2 {
                pred,
                truth,
                diff_norm,
                truth_norm,
            } => {
                let (vp, vt) = (self.value(*pred), self.value(*truth));
                let up = g[0].to_f64_lossy();
                if *diff_norm > 0.0 && self.wants(*pred) {
                    let k = up / (diff_norm * truth_norm);
                    let gp = vp
                        .data()
                        .iter()
                        .zip(vt.data())
                        .map(|(a, b)| T::from_f64_lossy(k * (a.to_f64_lossy() - b.to_f64_lossy())))
                        .collect();
                    self.accumulate(grads, *pred, gp);
                }
                if self.wants(*truth) {
                    let k1 = if *diff_norm > 0.0 { up / (diff_norm * truth_norm) } else { 0.0 };
                    let k2 = up * diff_norm / truth_norm.powi(3);
                    let gt = vp
                        .data()
                        .iter()
                        .zip(vt.data())
                        .map(|(a, b)| {
                            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                            T::from_f64_lossy(-k1 * (a - b) - k2 * b)
                        })
                        .collect();
                    self.accumulate(grads, *truth, gt);
                }
            }
        }
    }

    fn mode_mix_backward(&self, z: Var, wre: Var, wim: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (vz, vr, vi) = (self.value(z), self.value(wre), self.value(wim));
        let (cin, k) = (vz.shape()[1], vz.shape()[2]);
        let cout = vr.shape()[1];
        let (zr, zi) = vz.data().split_at(cin * k);
        let (gr, gi) = g.split_at(cout * k);
        if self.wants(z) {
            let mut gz = vec![T::zero(); 2 * cin * k];
            let (gzr, gzi) = gz.split_at_mut(cin * k);
            for i in 0..cin {
                for o in 0..cout {
                    let w0 = (i * cout + o) * k;
                    for m in 0..k {
                        // conj(W) * gY
                        let (a, b) = (vr.data()[w0 + m], vi.data()[w0 + m]);
                        let (x, y) = (gr[o * k + m], gi[o * k + m]);
                        gzr[i * k + m] = gzr[i * k + m] + a * x + b * y;
                        gzi[i * k + m] = gzi[i * k + m] + a * y - b * x;
                    }
                }
            }
            self.accumulate(grads, z, gz);
        }
        if self.wants(wre) || self.wants(wim) {
            let mut gwr = vec![T::zero(); cin * cout * k];
            let mut gwi = vec![T::zero(); cin * cout * k];
            for i in 0..cin {
                for o in 0..cout {
                    let w0 = (i * cout + o) * k;
                    for m in 0..k {
                        // gY * conj(Z)
                        let (x, y) = (gr[o * k + m], gi[o * k + m]);
                        let (a, b) = (zr[i * k + m], zi[i * k + m]);
                        gwr[w0 + m] = x * a + y * b;
                        gwi[w0 + m] = y * a - x * b;
                    }
                }
            }
            self.accumulate(grads, wre, gwr);
            self.accumulate(grads, wim, gwi);
        }
    }

    fn block_linear_backward(&self, z: Var, w: Var, b: Var, groups: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (vz, vw) = (self.value(z), self.value(w));
        let (d, k) = (vz.shape()[1], vz.shape()[2]);
        let bs = d / groups;
        let (zr, zi) = vz.data().split_at(d * k);
        let (wr, wi) = vw.data().split_at(groups * bs * bs);
        let (gr, gi) = g.split_at(d * k);
        if self.wants(z) {
            let mut gz = vec![T::zero(); 2 * d * k];
            let (gzr, gzi) = gz.split_at_mut(d * k);
            for gidx in 0..groups {
                for o in 0..bs {
                    let row = gidx * bs + o;
                    for i in 0..bs {
                        let col = gidx * bs + i;
                        let widx = row * bs + i;
                        let (a, c) = (wr[widx], wi[widx]);
                        for m in 0..k {
                            let (x, y) = (gr[row * k + m], gi[row * k + m]);
                            gzr[col * k + m] = gzr[col * k + m] + a * x + c * y;
                            gzi[col * k + m] = gzi[col * k + m] + a * y - c * x;
                        }
                    }
                }
            }
            self.accumulate(grads, z, gz);
        }
        if self.wants(w) {
            let mut gw = vec![T::zero(); 2 * groups * bs * bs];
            let half = groups * bs * bs;
            for gidx in 0..groups {
                for o in 0..bs {
                    let row = gidx * bs + o;
                    for i in 0..bs {
                        let col = gidx * bs + i;
                        let (mut sr, mut si) = (0.0, 0.0);
                        for m in 0..k {
                            let (x, y) = (gr[row * k + m].to_f64_lossy(), gi[row * k + m].to_f64_lossy());
                            let (a, c) = (zr[col * k + m].to_f64_lossy(), zi[col * k + m].to_f64_lossy());
                            sr += x * a + y * c;
                            si += y * a - x * c;
                        }
                        gw[row * bs + i] = T::from_f64_lossy(sr);
                        gw[half + row * bs + i] = T::from_f64_lossy(si);
                    }
                }
            }
            self.accumulate(grads, w, gw);
        }
        if self.wants(b) {
            let mut gb = vec![T::zero(); 2 * d];
            for row in 0..d {
                gb[row] = gr[row * k..(row + 1) * k].iter().copied().sum();
                gb[d + row] = gi[row * k..(row + 1) * k].iter().copied().sum();
            }
            self.accumulate(grads, b, gb);
        }
    }

    fn block_mix_backward(
        &self,
        z: Var,
        logits: Var,
        groups: usize,
        softmax: &[f64],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let vz = self.value(z);
        let (d, k) = (vz.shape()[1], vz.shape()[2]);
        let block = (d / groups) * k;
        if self.wants(z) {
            let mut gz = vec![T::zero(); 2 * d * k];
            for part in 0..2 {
                let gsrc = &g[part * d * k..(part + 1) * d * k];
                let dst = &mut gz[part * d * k..(part + 1) * d * k];
                for gi in 0..groups {
                    for h in 0..groups {
                        let s = T::from_f64_lossy(softmax[gi * groups + h]);
                        for (o, v) in dst[h * block..(h + 1) * block]
                            .iter_mut()
                            .zip(&gsrc[gi * block..(gi + 1) * block])
                        {
                            *o = *o + s * *v;
                        }
                    }
                }
            }
            self.accumulate(grads, z, gz);
        }
        if self.wants(logits) {
            // dL/dS_{gh} = <gY_g, Z_h>
            let mut gs = vec![0.0; groups * groups];
            for part in 0..2 {
                let gsrc = &g[part * d * k..(part + 1) * d * k];
                let zsrc = &vz.data()[part * d * k..(part + 1) * d * k];
                for gi in 0..groups {
                    for h in 0..groups {
                        gs[gi * groups + h] += gsrc[gi * block..(gi + 1) * block]
                            .iter()
                            .zip(&zsrc[h * block..(h + 1) * block])
                            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
                            .sum::<f64>();
                    }
                }
            }
            let mut gl = vec![T::zero(); groups * groups];
            for gi in 0..groups {
                let row = &softmax[gi * groups..(gi + 1) * groups];
                let grow = &gs[gi * groups..(gi + 1) * groups];
                let dot: f64 = row.iter().zip(grow).map(|(s, x)| s * x).sum();
                for h in 0..groups {
                    gl[gi * groups + h] = T::from_f64_lossy(row[h] * (grow[h] - dot));
                }
            }
            self.accumulate(grads, logits, gl);
        }
    }
}

fn row_softmax<T: Real>(logits: &[T], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let row: Vec<f64> = logits[r * n..(r + 1) * n].iter().map(|v| v.to_f64_lossy()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (o, e) in out[r * n..(r + 1) * n].iter_mut().zip(exps) {
            *o = e / total;
        }
    }
    out
}

/// Gathers `(c, nx, ny)` into patch-token layout (`to_tokens`) or scatters back.
fn patch_permute<T: Real>(src: &[T], c: usize, nx: usize, ny: usize, p: usize, to_tokens: bool) -> Vec<T> {
    let (tx, ty) = (nx / p, ny / p);
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for a in 0..p {
            for b in 0..p {
                let trow = (ch * p + a) * p + b;
                for ti in 0..tx {
                    for tj in 0..ty {
                        let tok = trow * tx * ty + ti * ty + tj;
                        let cell = ch * nx * ny + (ti * p + a) * ny + tj * p + b;
                        if to_tokens {
                            out[tok] = src[cell];
                        } else {
                            out[cell] = src[tok];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{ModeMask, ModeSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Builds a scalar from `inputs` (all treated as parameters), compares the
    /// tape gradient with central differences on every entry.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |ts: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
            let out = build(&mut g, &vars);
            g.value(out).data()[0]
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ti]).map(|v| v.to_vec()).unwrap_or(vec![0.0; t.len()]);
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[e];
                let denom = a.abs().max(fd.abs()).max(1e-7);
                assert!(
                    (a - fd).abs() / denom < 1e-5,
                    "input {ti} entry {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed random weights so every
    /// output entry contributes a distinct gradient.
    fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
        let shape = g.value(v).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&shape, &mut rng, -1.0, 1.0);
        let truth = g.constant(w);
        // relative_l2 against a fixed target is a smooth scalar
        g.relative_l2(v, truth).unwrap()
    }

    #[test]
    fn grad_linear_gelu_add_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5], &mut rng, -1.0, 1.0);
        let w = random(&[4, 3], &mut rng, -1.0, 1.0);
        let b = random(&[4], &mut rng, -1.0, 1.0);
        check(vec![x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let a = g.gelu(y);
            let s = g.scale(a, 0.7);
            let z = g.add(s, y).unwrap();
            project(g, z, 9)
        });
    }

    #[test]
    fn grad_concat_slice_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[2, 3, 4], &mut rng, -1.0, 1.0);
        let b = random(&[1, 3, 4], &mut rng, -1.0, 1.0);
        let gamma = random(&[2], &mut rng, 0.5, 1.5);
        let beta = random(&[2], &mut rng, -0.5, 0.5);
        check(vec![a, b, gamma, beta], |g, v| {
            let c = g.concat(&[v[0], v[1]]).unwrap();
            let s = g.slice(c, 1, 2).unwrap();
            let n = g.instance_norm(s, v[2], v[3]).unwrap();
            project(g, n, 4)
        });
    }

    #[test]
    fn grad_denormalize_and_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random(&[2, 4, 4], &mut rng, -1.0, 1.0);
        let r = random(&[4, 4, 4], &mut rng, 0.5, 2.0);
        check(vec![y, r], |g, v| {
            let d = g.denormalize(v[0], v[1], 2).unwrap();
            let c = g.clip_min(d, 0.9, &[true, false]).unwrap();
            project(g, c, 5)
        });
    }

    #[test]
    fn grad_correction_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random(&[3, 4, 4], &mut rng, 0.1, 2.0);
        let r = random(&[3, 4, 4], &mut rng, 0.1, 2.0);
        let modes = [CorrectionMode::Magnitude, CorrectionMode::Shift, CorrectionMode::None];
        check(vec![p, r], |g, v| {
            let c = g.correct(v[0], v[1], &modes, 1e-12).unwrap();
            project(g, c, 6)
        });
    }

    #[test]
    fn grad_spectral_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = Arc::new(SpectralPlan::new(ModeSet::new(8, 6, 2, ModeMask::Disk).unwrap()));
        let k = plan.modes().len();
        let x = random(&[2, 8, 6], &mut rng, -1.0, 1.0);
        let wr = random(&[2, 3, k], &mut rng, -1.0, 1.0);
        let wi = random(&[2, 3, k], &mut rng, -1.0, 1.0);
        check(vec![x, wr, wi], |g, v| {
            let z = g.fft_retain(v[0], &plan).unwrap();
            let m = g.mode_mix(z, v[1], v[2]).unwrap();
            let y = g.ifft_scatter(m, &plan).unwrap();
            project(g, y, 7)
        });
    }

    #[test]
    fn grad_attention_pieces() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d, k, groups) = (4, 5, 2);
        let z = random(&[2, d, k], &mut rng, -1.0, 1.0);
        let w = random(&[2, groups, 2, 2], &mut rng, -1.0, 1.0);
        let b = random(&[2, groups, 2], &mut rng, -1.0, 1.0);
        let logits = random(&[groups, groups], &mut rng, -1.0, 1.0);
        check(vec![z, w, b, logits], |g, v| {
            let h = g.complex_block_linear(v[0], v[1], v[2], groups).unwrap();
            let a = g.gelu(h);
            let m = g.block_mix(a, v[3], groups).unwrap();
            project(g, m, 8)
        });
    }

    #[test]
    fn grad_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 4, 8], &mut rng, -1.0, 1.0);
        let w = random(&[3, 8], &mut rng, -1.0, 1.0);
        let w2 = random(&[8, 3], &mut rng, -1.0, 1.0);
        check(vec![x, w, w2], |g, v| {
            let t = g.patchify(v[0], 2).unwrap();
            let e = g.linear(t, v[1], None).unwrap();
            let d = g.linear(e, v[2], None).unwrap();
            let u = g.unpatchify(d, 2).unwrap();
            project(g, u, 10)
        });
    }

    #[test]
    fn grad_relative_l2_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&[6], &mut rng, -1.0, 1.0);
        let b = random(&[6], &mut rng, -1.0, 1.0);
        check(vec![a, b], |g, v| g.relative_l2(v[0], v[1]).unwrap());
    }

    #[test]
    fn patchify_round_trip_and_layout() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let x = g.constant(Tensor::from_vec(&[2, 4, 4], data.clone()).unwrap());
        let t = g.patchify(x, 2).unwrap();
        assert_eq!(g.value(t).shape(), &[8, 2, 2]);
        // row 0 = channel 0, offset (0,0): cells (0,0),(0,2),(2,0),(2,2)
        assert_eq!(g.value(t).row(0), &[0.0, 2.0, 8.0, 10.0]);
        let back = g.unpatchify(t, 2).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn zero_truth_is_flagged() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[4], 1.0));
        let z = g.constant(Tensor::zeros(&[4]));
        let l = g.relative_l2(a, z).unwrap();
        assert_eq!(g.flags().len(), 1);
        assert!(g.value(l).data()[0].is_finite());
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[3], 2.0));
        let p = g.param(Arc::new(Tensor::full(&[3], 1.0)));
        let s = g.add(c, p).unwrap();
        let t = g.constant(Tensor::full(&[3], 5.0));
        let l = g.relative_l2(s, t).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
