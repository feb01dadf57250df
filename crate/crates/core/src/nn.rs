//! Convolution, pooling, and parameter-set building blocks.
//!
//! All kernels are sequential with a fixed per-output-element accumulation
//! order: bias first, then contributions in ascending (ic, [kt,] kh, kw).
//! A brute-force loop that sums in that same order reproduces these outputs
//! bit for bit, which is what the kernel tests rely on.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpImpl};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shape contract for a 2D or 3D convolution (unit stride, zero padding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// [kh, kw] or [kt, kh, kw].
    pub kernel: Vec<usize>,
    /// Same arity as `kernel`.
    pub padding: Vec<usize>,
}

impl ConvSpec {
    pub fn c2(in_channels: usize, out_channels: usize, kernel: (usize, usize), padding: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: vec![kernel.0, kernel.1],
            padding: vec![padding.0, padding.1],
        }
    }

    pub fn c3(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: vec![kernel.0, kernel.1, kernel.2],
            padding: vec![padding.0, padding.1, padding.2],
        }
    }

    pub fn is_3d(&self) -> bool {
        self.kernel.len() == 3
    }

    fn out_dim(&self, op: &'static str, axis: usize, input: usize) -> Result<usize> {
        let k = self.kernel[axis];
        let p = self.padding[axis];
        let padded = input + 2 * p;
        if k == 0 || k > padded {
            return Err(Error::BadShape {
                op,
                shape: vec![input],
                reason: format!("kernel {k} exceeds padded extent {padded} on axis {axis}"),
            });
        }
        Ok(padded - k + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel.len() != 2 || self.padding.len() != 2 {
            return Err(Error::invalid(format!(
                "2D conv needs 2-axis kernel/padding, got {:?}/{:?}",
                self.kernel, self.padding
            )));
        }
        Ok((self.out_dim("conv2d", 0, h)?, self.out_dim("conv2d", 1, w)?))
    }

    pub fn out_thw(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if self.kernel.len() != 3 || self.padding.len() != 3 {
            return Err(Error::invalid(format!(
                "3D conv needs 3-axis kernel/padding, got {:?}/{:?}",
                self.kernel, self.padding
            )));
        }
        Ok((
            self.out_dim("conv3d", 0, t)?,
            self.out_dim("conv3d", 1, h)?,
            self.out_dim("conv3d", 2, w)?,
        ))
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        vec![self.out_channels]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }
}

/// Ordered, named parameter tensors. Order is the identity used by
/// checkpoints, the optimizer state, and gradcheck, so it never depends on
/// hashing.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<E: Element> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Appends a parameter; the tensor is marked as requiring gradients.
    pub fn insert(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        if self.index_of(name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name: {name}")));
        }
        self.entries.push((name.to_string(), t.with_requires_grad(true)));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor<E>) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn entry_mut(&mut self, i: usize) -> (&str, &mut Tensor<E>) {
        let (n, t) = &mut self.entries[i];
        (n, t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n, t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<F>()))
                .collect(),
        }
    }
}

/// Xavier/Glorot uniform init over [-sqrt(6/(fan_in+fan_out)), +...).
pub fn xavier_uniform<E: Element, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("xavier shape validated by caller")
}

// ---- shape checks shared by graph wrappers and standalone kernels ----

fn check_conv2d_shapes<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    if x.rank() != 4 || x.shape()[1] != spec.in_channels {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: format!("want (N, {}, H, W)", spec.in_channels),
        });
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv2d.weight",
            lhs: w.shape().to_vec(),
            rhs: spec.weight_shape(),
        });
    }
    if b.shape() != spec.bias_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv2d.bias",
            lhs: b.shape().to_vec(),
            rhs: spec.bias_shape(),
        });
    }
    spec.out_hw(x.shape()[2], x.shape()[3])
}

fn check_conv3d_shapes<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize)> {
    if x.rank() != 5 || x.shape()[1] != spec.in_channels {
        return Err(Error::BadShape {
            op: "conv3d",
            shape: x.shape().to_vec(),
            reason: format!("want (N, {}, T, H, W)", spec.in_channels),
        });
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv3d.weight",
            lhs: w.shape().to_vec(),
            rhs: spec.weight_shape(),
        });
    }
    if b.shape() != spec.bias_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv3d.bias",
            lhs: b.shape().to_vec(),
            rhs: spec.bias_shape(),
        });
    }
    spec.out_thw(x.shape()[2], x.shape()[3], x.shape()[4])
}

// ---- conv2d ----

pub fn conv2d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let (oh_n, ow_n) = check_conv2d_shapes(x, w, b, spec)?;
    let (nb, ic_n, h, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oc_n = spec.out_channels;
    let (kh_n, kw_n) = (spec.kernel[0], spec.kernel[1]);
    let (ph, pw) = (spec.padding[0], spec.padding[1]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());

    let mut out = vec![E::zero(); nb * oc_n * oh_n * ow_n];
    for n in 0..nb {
        for oc in 0..oc_n {
            let o_base = (n * oc_n + oc) * oh_n * ow_n;
            out[o_base..o_base + oh_n * ow_n].fill(bd[oc]);
            for ic in 0..ic_n {
                let x_base = (n * ic_n + ic) * h * w_in;
                for kh in 0..kh_n {
                    for oh in 0..oh_n {
                        let Some(ih) = (oh + kh).checked_sub(ph).filter(|&ih| ih < h) else {
                            continue;
                        };
                        let x_row = &xd[x_base + ih * w_in..x_base + (ih + 1) * w_in];
                        let o_row = &mut out[o_base + oh * ow_n..o_base + (oh + 1) * ow_n];
                        for kw in 0..kw_n {
                            let wv = wd[((oc * ic_n + ic) * kh_n + kh) * kw_n + kw];
                            let ow_lo = pw.saturating_sub(kw);
                            let ow_hi = (w_in + pw).saturating_sub(kw).min(ow_n);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let iw0 = ow_lo + kw - pw;
                            for (o, xv) in o_row[ow_lo..ow_hi]
                                .iter_mut()
                                .zip(&x_row[iw0..iw0 + ow_hi - ow_lo])
                            {
                                *o += *xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![nb, oc_n, oh_n, ow_n], out)
}

#[derive(Debug)]
struct Conv2dOp {
    spec: ConvSpec,
}

impl<E: Element> OpImpl<E> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (nb, ic_n, h, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc_n, oh_n, ow_n) = (output.shape()[1], output.shape()[2], output.shape()[3]);
        let (kh_n, kw_n) = (self.spec.kernel[0], self.spec.kernel[1]);
        let (ph, pw) = (self.spec.padding[0], self.spec.padding[1]);
        let (xd, wd) = (x.data(), w.data());

        let dx = needs[0].then(|| {
            let mut dx = vec![E::zero(); x.numel()];
            for n in 0..nb {
                for oc in 0..oc_n {
                    let g_base = (n * oc_n + oc) * oh_n * ow_n;
                    for ic in 0..ic_n {
                        let x_base = (n * ic_n + ic) * h * w_in;
                        for kh in 0..kh_n {
                            for oh in 0..oh_n {
                                let Some(ih) = (oh + kh).checked_sub(ph).filter(|&ih| ih < h)
                                else {
                                    continue;
                                };
                                let g_row = &grad_out[g_base + oh * ow_n..g_base + (oh + 1) * ow_n];
                                let dx_row =
                                    &mut dx[x_base + ih * w_in..x_base + (ih + 1) * w_in];
                                for kw in 0..kw_n {
                                    let wv = wd[((oc * ic_n + ic) * kh_n + kh) * kw_n + kw];
                                    let ow_lo = pw.saturating_sub(kw);
                                    let ow_hi = (w_in + pw).saturating_sub(kw).min(ow_n);
                                    if ow_lo >= ow_hi {
                                        continue;
                                    }
                                    let iw0 = ow_lo + kw - pw;
                                    for (d, g) in dx_row[iw0..iw0 + ow_hi - ow_lo]
                                        .iter_mut()
                                        .zip(&g_row[ow_lo..ow_hi])
                                    {
                                        *d += *g * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx
        });

        let dw = needs[1].then(|| {
            let mut dw = vec![E::zero(); w.numel()];
            for oc in 0..oc_n {
                for ic in 0..ic_n {
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let mut acc = E::zero();
                            let ow_lo = pw.saturating_sub(kw);
                            let ow_hi = (w_in + pw).saturating_sub(kw).min(ow_n);
                            if ow_lo < ow_hi {
                                let iw0 = ow_lo + kw - pw;
                                for n in 0..nb {
                                    let g_base = (n * oc_n + oc) * oh_n * ow_n;
                                    let x_base = (n * ic_n + ic) * h * w_in;
                                    for oh in 0..oh_n {
                                        let Some(ih) =
                                            (oh + kh).checked_sub(ph).filter(|&ih| ih < h)
                                        else {
                                            continue;
                                        };
                                        let g_row = &grad_out
                                            [g_base + oh * ow_n..g_base + (oh + 1) * ow_n];
                                        let x_row =
                                            &xd[x_base + ih * w_in..x_base + (ih + 1) * w_in];
                                        for (g, xv) in g_row[ow_lo..ow_hi]
                                            .iter()
                                            .zip(&x_row[iw0..iw0 + ow_hi - ow_lo])
                                        {
                                            acc += *g * *xv;
                                        }
                                    }
                                }
                            }
                            dw[((oc * ic_n + ic) * kh_n + kh) * kw_n + kw] = acc;
                        }
                    }
                }
            }
            dw
        });

        let db = needs[2].then(|| {
            let mut db = vec![E::zero(); oc_n];
            for n in 0..nb {
                for oc in 0..oc_n {
                    let g_base = (n * oc_n + oc) * oh_n * ow_n;
                    for g in &grad_out[g_base..g_base + oh_n * ow_n] {
                        db[oc] += *g;
                    }
                }
            }
            db
        });

        vec![dx, dw, db]
    }
}

pub fn conv2d<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    spec: &ConvSpec,
) -> Result<NodeId> {
    let out = conv2d_fwd(g.value(x), g.value(w), g.value(b), spec)?;
    Ok(g.push(
        Box::new(Conv2dOp { spec: spec.clone() }),
        vec![x, w, b],
        out,
    ))
}

// ---- conv3d ----

pub fn conv3d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let (ot_n, oh_n, ow_n) = check_conv3d_shapes(x, w, b, spec)?;
    let (nb, ic_n, t, h, w_in) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let oc_n = spec.out_channels;
    let (kt_n, kh_n, kw_n) = (spec.kernel[0], spec.kernel[1], spec.kernel[2]);
    let (pt, ph, pw) = (spec.padding[0], spec.padding[1], spec.padding[2]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());

    let mut out = vec![E::zero(); nb * oc_n * ot_n * oh_n * ow_n];
    for n in 0..nb {
        for oc in 0..oc_n {
            let o_base = ((n * oc_n + oc) * ot_n) * oh_n * ow_n;
            out[o_base..o_base + ot_n * oh_n * ow_n].fill(bd[oc]);
            for ic in 0..ic_n {
                let x_base = ((n * ic_n + ic) * t) * h * w_in;
                for kt in 0..kt_n {
                    for ot in 0..ot_n {
                        let Some(it) = (ot + kt).checked_sub(pt).filter(|&it| it < t) else {
                            continue;
                        };
                        for kh in 0..kh_n {
                            for oh in 0..oh_n {
                                let Some(ih) = (oh + kh).checked_sub(ph).filter(|&ih| ih < h)
                                else {
                                    continue;
                                };
                                let x_off = x_base + (it * h + ih) * w_in;
                                let x_row = &xd[x_off..x_off + w_in];
                                let o_off = o_base + (ot * oh_n + oh) * ow_n;
                                let o_row = &mut out[o_off..o_off + ow_n];
                                for kw in 0..kw_n {
                                    let wv = wd[(((oc * ic_n + ic) * kt_n + kt) * kh_n + kh)
                                        * kw_n
                                        + kw];
                                    let ow_lo = pw.saturating_sub(kw);
                                    let ow_hi = (w_in + pw).saturating_sub(kw).min(ow_n);
                                    if ow_lo >= ow_hi {
                                        continue;
                                    }
                                    let iw0 = ow_lo + kw - pw;
                                    for (o, xv) in o_row[ow_lo..ow_hi]
                                        .iter_mut()
                                        .zip(&x_row[iw0..iw0 + ow_hi - ow_lo])
                                    {
                                        *o += *xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![nb, oc_n, ot_n, oh_n, ow_n], out)
}

#[derive(Debug)]
struct Conv3dOp {
    spec: ConvSpec,
}

impl<E: Element> OpImpl<E> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (nb, ic_n, t, h, w_in) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
            x.shape()[4],
        );
        let (oc_n, ot_n, oh_n, ow_n) = (
            output.shape()[1],
            output.shape()[2],
            output.shape()[3],
            output.shape()[4],
        );
        let (kt_n, kh_n, kw_n) = (self.spec.kernel[0], self.spec.kernel[1], self.spec.kernel[2]);
        let (pt, ph, pw) = (self.spec.padding[0], self.spec.padding[1], self.spec.padding[2]);
        let (xd, wd) = (x.data(), w.data());

        let dx = needs[0].then(|| {
            let mut dx = vec![E::zero(); x.numel()];
            for n in 0..nb {
                for oc in 0..oc_n {
                    let g_base = ((n * oc_n + oc) * ot_n) * oh_n * ow_n;
                    for ic in 0..ic_n {
                        let x_base = ((n * ic_n + ic) * t) * h * w_in;
                        for kt in 0..kt_n {
                            for ot in 0..ot_n {
                                let Some(it) = (ot + kt).checked_sub(pt).filter(|&it| it < t)
                                else {
                                    continue;
                                };
                                for kh in 0..kh_n {
                                    for oh in 0..oh_n {
                                        let Some(ih) =
                                            (oh + kh).checked_sub(ph).filter(|&ih| ih < h)
                                        else {
                                            continue;
                                        };
                                        let g_off = g_base + (ot * oh_n + oh) * ow_n;
                                        let g_row = &grad_out[g_off..g_off + ow_n];
                                        let x_off = x_base + (it * h + ih) * w_in;
                                        let dx_row = &mut dx[x_off..x_off + w_in];
                                        for kw in 0..kw_n {
                                            let wv = wd[(((oc * ic_n + ic) * kt_n + kt) * kh_n
                                                + kh)
                                                * kw_n
                                                + kw];
                                            let ow_lo = pw.saturating_sub(kw);
                                            let ow_hi =
                                                (w_in + pw).saturating_sub(kw).min(ow_n);
                                            if ow_lo >= ow_hi {
                                                continue;
                                            }
                                            let iw0 = ow_lo + kw - pw;
                                            for (d, g) in dx_row[iw0..iw0 + ow_hi - ow_lo]
                                                .iter_mut()
                                                .zip(&g_row[ow_lo..ow_hi])
                                            {
                                                *d += *g * wv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx
        });

        let dw = needs[1].then(|| {
            let mut dw = vec![E::zero(); w.numel()];
            for oc in 0..oc_n {
                for ic in 0..ic_n {
                    for kt in 0..kt_n {
                        for kh in 0..kh_n {
                            for kw in 0..kw_n {
                                let mut acc = E::zero();
                                let ow_lo = pw.saturating_sub(kw);
                                let ow_hi = (w_in + pw).saturating_sub(kw).min(ow_n);
                                if ow_lo < ow_hi {
                                    let iw0 = ow_lo + kw - pw;
                                    for n in 0..nb {
                                        let g_base = ((n * oc_n + oc) * ot_n) * oh_n * ow_n;
                                        let x_base = ((n * ic_n + ic) * t) * h * w_in;
                                        for ot in 0..ot_n {
                                            let Some(it) =
                                                (ot + kt).checked_sub(pt).filter(|&it| it < t)
                                            else {
                                                continue;
                                            };
                                            for oh in 0..oh_n {
                                                let Some(ih) = (oh + kh)
                                                    .checked_sub(ph)
                                                    .filter(|&ih| ih < h)
                                                else {
                                                    continue;
                                                };
                                                let g_off = g_base + (ot * oh_n + oh) * ow_n;
                                                let x_off = x_base + (it * h + ih) * w_in;
                                                for (g, xv) in grad_out
                                                    [g_off + ow_lo..g_off + ow_hi]
                                                    .iter()
                                                    .zip(&xd[x_off + iw0
                                                        ..x_off + iw0 + ow_hi - ow_lo])
                                                {
                                                    acc += *g * *xv;
                                                }
                                            }
                                        }
                                    }
                                }
                                dw[(((oc * ic_n + ic) * kt_n + kt) * kh_n + kh) * kw_n + kw] =
                                    acc;
                            }
                        }
                    }
                }
            }
            dw
        });

        let db = needs[2].then(|| {
            let mut db = vec![E::zero(); oc_n];
            for n in 0..nb {
                for oc in 0..oc_n {
                    let g_base = ((n * oc_n + oc) * ot_n) * oh_n * ow_n;
                    for g in &grad_out[g_base..g_base + ot_n * oh_n * ow_n] {
                        db[oc] += *g;
                    }
                }
            }
            db
        });

        vec![dx, dw, db]
    }
}

pub fn conv3d<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    spec: &ConvSpec,
) -> Result<NodeId> {
    let out = conv3d_fwd(g.value(x), g.value(w), g.value(b), spec)?;
    Ok(g.push(
        Box::new(Conv3dOp { spec: spec.clone() }),
        vec![x, w, b],
        out,
    ))
}

// ---- transposed conv, fixed 2x2 kernel, stride 2 ----

/// Upsampling transposed convolution. Weight layout (OC, IC, 2, 2); each
/// output pixel is reached by exactly one kernel tap, so
/// out[n,oc,oh,ow] = b[oc] + sum_ic x[n,ic,oh/2,ow/2] * w[oc,ic,oh%2,ow%2].
pub fn tconv2d_fwd<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::BadShape {
            op: "tconv2d",
            shape: x.shape().to_vec(),
            reason: "want (N, C, H, W)".into(),
        });
    }
    let (nb, ic_n, h, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ok = w.rank() == 4 && w.shape()[1] == ic_n && w.shape()[2] == 2 && w.shape()[3] == 2;
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "tconv2d.weight",
            lhs: w.shape().to_vec(),
            rhs: vec![w.shape().first().copied().unwrap_or(0), ic_n, 2, 2],
        });
    }
    let oc_n = w.shape()[0];
    if b.shape() != [oc_n] {
        return Err(Error::ShapeMismatch {
            op: "tconv2d.bias",
            lhs: b.shape().to_vec(),
            rhs: vec![oc_n],
        });
    }
    let (oh_n, ow_n) = (2 * h, 2 * w_in);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![E::zero(); nb * oc_n * oh_n * ow_n];
    for n in 0..nb {
        for oc in 0..oc_n {
            let o_base = (n * oc_n + oc) * oh_n * ow_n;
            out[o_base..o_base + oh_n * ow_n].fill(bd[oc]);
            for ic in 0..ic_n {
                let x_base = (n * ic_n + ic) * h * w_in;
                for dh in 0..2 {
                    for dw_ in 0..2 {
                        let wv = wd[((oc * ic_n + ic) * 2 + dh) * 2 + dw_];
                        for ih in 0..h {
                            let x_row = &xd[x_base + ih * w_in..x_base + (ih + 1) * w_in];
                            let o_off = o_base + (2 * ih + dh) * ow_n + dw_;
                            for (iw, xv) in x_row.iter().enumerate() {
                                out[o_off + 2 * iw] += *xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![nb, oc_n, oh_n, ow_n], out)
}

#[derive(Debug)]
struct TConv2dOp;

impl<E: Element> OpImpl<E> for TConv2dOp {
    fn name(&self) -> &'static str {
        "tconv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (nb, ic_n, h, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc_n, ow_n) = (output.shape()[1], output.shape()[3]);
        let oh_n = output.shape()[2];
        let (xd, wd) = (x.data(), w.data());

        let dx = needs[0].then(|| {
            let mut dx = vec![E::zero(); x.numel()];
            for n in 0..nb {
                for oc in 0..oc_n {
                    let g_base = (n * oc_n + oc) * oh_n * ow_n;
                    for ic in 0..ic_n {
                        let x_base = (n * ic_n + ic) * h * w_in;
                        for dh in 0..2 {
                            for dw_ in 0..2 {
                                let wv = wd[((oc * ic_n + ic) * 2 + dh) * 2 + dw_];
                                for ih in 0..h {
                                    let g_off = g_base + (2 * ih + dh) * ow_n + dw_;
                                    let dx_row =
                                        &mut dx[x_base + ih * w_in..x_base + (ih + 1) * w_in];
                                    for (iw, d) in dx_row.iter_mut().enumerate() {
                                        *d += grad_out[g_off + 2 * iw] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx
        });

        let dw = needs[1].then(|| {
            let mut dw = vec![E::zero(); w.numel()];
            for oc in 0..oc_n {
                for ic in 0..ic_n {
                    for dh in 0..2 {
                        for dw_ in 0..2 {
                            let mut acc = E::zero();
                            for n in 0..nb {
                                let g_base = (n * oc_n + oc) * oh_n * ow_n;
                                let x_base = (n * ic_n + ic) * h * w_in;
                                for ih in 0..h {
                                    let g_off = g_base + (2 * ih + dh) * ow_n + dw_;
                                    let x_row =
                                        &xd[x_base + ih * w_in..x_base + (ih + 1) * w_in];
                                    for (iw, xv) in x_row.iter().enumerate() {
                                        acc += grad_out[g_off + 2 * iw] * *xv;
                                    }
                                }
                            }
                            dw[((oc * ic_n + ic) * 2 + dh) * 2 + dw_] = acc;
                        }
                    }
                }
            }
            dw
        });

        let db = needs[2].then(|| {
            let mut db = vec![E::zero(); oc_n];
            for n in 0..nb {
                for oc in 0..oc_n {
                    let g_base = (n * oc_n + oc) * oh_n * ow_n;
                    for g in &grad_out[g_base..g_base + oh_n * ow_n] {
                        db[oc] += *g;
                    }
                }
            }
            db
        });

        vec![dx, dw, db]
    }
}

pub fn tconv2d<E: Element>(g: &mut Graph<E>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let out = tconv2d_fwd(g.value(x), g.value(w), g.value(b))?;
    Ok(g.push(Box::new(TConv2dOp), vec![x, w, b], out))
}

// ---- max pooling, fixed 2x2 window, stride 2 ----

/// Returns the pooled tensor and the flat input index of each window maximum.
/// Ties pick the first element in row-major window order.
pub fn maxpool2d_fwd<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<usize>)> {
    if x.rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
        return Err(Error::BadShape {
            op: "maxpool2d",
            shape: x.shape().to_vec(),
            reason: "want (N, C, H, W) with even H and W".into(),
        });
    }
    let (nb, c_n, h, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh_n, ow_n) = (h / 2, w_in / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(nb * c_n * oh_n * ow_n);
    let mut arg = Vec::with_capacity(out.capacity());
    for n in 0..nb {
        for c in 0..c_n {
            let base = (n * c_n + c) * h * w_in;
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let i00 = base + (2 * oh) * w_in + 2 * ow;
                    let mut best_i = i00;
                    let mut best_v = xd[i00];
                    for (dh, dw) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let i = base + (2 * oh + dh) * w_in + 2 * ow + dw;
                        if xd[i] > best_v {
                            best_v = xd[i];
                            best_i = i;
                        }
                    }
                    out.push(best_v);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![nb, c_n, oh_n, ow_n], out)?, arg))
}

#[derive(Debug)]
struct MaxPool2dOp {
    argmax: Vec<usize>,
}

impl<E: Element> OpImpl<E> for MaxPool2dOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad_out: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            let mut dx = vec![E::zero(); inputs[0].numel()];
            for (g, &i) in grad_out.iter().zip(&self.argmax) {
                dx[i] += *g;
            }
            dx
        })]
    }
}

pub fn maxpool2d<E: Element>(g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
    let (out, argmax) = maxpool2d_fwd(g.value(x))?;
    Ok(g.push(Box::new(MaxPool2dOp { argmax }), vec![x], out))
}
