//! A small tape-based reverse-mode differentiator over [`Tensor`].
//!
//! Only the operations the parsing network needs are provided. Every op
//! records a backward closure when at least one of its inputs requires a
//! gradient, so evaluation-only passes pay nothing beyond the forward math.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = bw(&g, &inputs, &node.value);
                for (var, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[var.0].requires_grad {
                        continue;
                    }
                    match &mut grads[var.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    // ---------------------------------------------------------------------
    // elementwise and structural ops

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(
            out,
            vec![x],
            Box::new(|g, _, out| {
                let mut dx = g.clone();
                for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `Σ coef_i · v_i` over same-shaped values.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Contract("linear_combination of no terms".into()))?;
        let shape = self.value(first).shape();
        let mut out = Tensor::zeros(shape.0, shape.1, shape.2);
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape {
                return Err(Error::shape(
                    "linear_combination",
                    format!("{:?} vs {:?}", t.shape(), shape),
                ));
            }
            out.axpy(c, t);
        }
        let coefs: Vec<f64> = terms.iter().map(|&(_, c)| c).collect();
        Ok(self.push(
            out,
            terms.iter().map(|&(v, _)| v).collect(),
            Box::new(move |g, _, _| coefs.iter().map(|&c| Some(g.scale(c))).collect()),
        ))
    }

    /// Elementwise mean of same-shaped values. Each element is summed in
    /// sorted order, so the result does not depend on the order of `vars`.
    pub fn mean(&mut self, vars: &[Var]) -> Result<Var> {
        let &first = vars
            .first()
            .ok_or_else(|| Error::Contract("mean of no values".into()))?;
        let shape = self.value(first).shape();
        if let Some(bad) = vars.iter().find(|&&v| self.value(v).shape() != shape) {
            return Err(Error::shape(
                "mean",
                format!("{:?} vs {:?}", self.value(*bad).shape(), shape),
            ));
        }
        let k = vars.len();
        let mut out = Tensor::zeros(shape.0, shape.1, shape.2);
        let mut buf = vec![0.0; k];
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            for (b, &v) in buf.iter_mut().zip(vars) {
                *b = self.nodes[v.0].value.data()[i];
            }
            buf.sort_unstable_by(f64::total_cmp);
            *o = buf.iter().sum::<f64>() / k as f64;
        }
        Ok(self.push(
            out,
            vars.to_vec(),
            Box::new(move |g, _, _| (0..k).map(|_| Some(g.scale(1.0 / k as f64))).collect()),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear_combination(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, vec![a], Box::new(move |g, _, _| vec![Some(g.scale(s))]))
    }

    /// `mul · x + add`, elementwise, with constant coefficients.
    pub fn affine_const(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.value(x).map(|v| mul * v + add);
        self.push(out, vec![x], Box::new(move |g, _, _| vec![Some(g.scale(mul))]))
    }

    /// `w · x + b` where `w` and `b` are learnable `[1,1,1]` scalars.
    pub fn scalar_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.value(w).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::shape("scalar_affine", "weight and bias must be scalars"));
        }
        let (wv, bv) = (self.value(w).item(), self.value(b).item());
        let out = self.value(x).map(|v| wv * v + bv);
        Ok(self.push(
            out,
            vec![x, w, b],
            Box::new(|g, inp, _| {
                let wv = inp[1].item();
                let dw: f64 = g.data().iter().zip(inp[0].data()).map(|(g, x)| g * x).sum();
                let db: f64 = g.data().iter().sum();
                vec![Some(g.scale(wv)), Some(Tensor::scalar(dw)), Some(Tensor::scalar(db))]
            }),
        ))
    }

    /// Stack values with equal spatial size along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of no tensors".into()))?;
        let (_, h, w) = self.value(first).shape();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.height() != h || t.width() != w {
                return Err(Error::shape(
                    "concat",
                    format!("spatial {:?} vs ({h}, {w})", t.shape()),
                ));
            }
            sizes.push(t.channels());
            data.extend_from_slice(t.data());
        }
        let c: usize = sizes.iter().sum();
        let out = Tensor::from_vec(c, h, w, data);
        Ok(self.push(
            out,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let plane = h * w;
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&ch| {
                        let slice = g.data()[offset * plane..(offset + ch) * plane].to_vec();
                        offset += ch;
                        Some(Tensor::from_vec(ch, h, w, slice))
                    })
                    .collect()
            }),
        ))
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).shape();
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let src = self.value(x);
        let mut out = Tensor::zeros(c, oh, ow);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = src.at(ch, y, xx) * inv;
                    let o = &mut out.data_mut()[(ch * oh + y / k) * ow + xx / k];
                    *o += v;
                }
            }
        }
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(c, h, w);
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx.set(ch, y, xx, g.at(ch, y / k, xx / k) * inv);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // convolution

    /// Grouped 2-D convolution.
    ///
    /// `weight` is stored as `[C_out, C_in / groups, k * k]`, `bias` (optional)
    /// as `[C_out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x), self.value(weight), spec)?;
        if let Some(b) = bias {
            if self.value(b).shape() != (geom.cout, 1, 1) {
                return Err(Error::shape("conv2d", "bias must be [C_out, 1, 1]"));
            }
        }
        let mut out = match bias {
            Some(b) => {
                let mut o = Tensor::zeros(geom.cout, geom.oh, geom.ow);
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    o.channel_mut(co).fill(bv);
                }
                o
            }
            None => Tensor::zeros(geom.cout, geom.oh, geom.ow),
        };
        geom.forward(self.value(x).data(), self.value(weight).data(), out.data_mut());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            inputs,
            Box::new(move |g, inp, _| {
                let mut dx = Tensor::zeros(geom.cin, geom.h, geom.w);
                let mut dw = Tensor::zeros(inp[1].channels(), inp[1].height(), inp[1].width());
                geom.backward(g.data(), inp[0].data(), inp[1].data(), dx.data_mut(), dw.data_mut());
                let mut grads = vec![Some(dx), Some(dw)];
                if inp.len() == 3 {
                    let db: Vec<f64> = (0..geom.cout).map(|co| g.channel(co).iter().sum()).collect();
                    grads.push(Some(Tensor::vector(db)));
                }
                grads
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // prototype / metric ops

    /// Mean feature vector over the pixels where `mask` is true.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (d, h, w) = self.value(x).shape();
        if mask.len() != h * w {
            return Err(Error::shape(
                "masked_mean",
                format!("mask has {} entries, features have {}", mask.len(), h * w),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("masked_mean over an empty region".into()));
        }
        let inv = 1.0 / count as f64;
        let src = self.value(x);
        let out: Vec<f64> = (0..d)
            .map(|c| {
                src.channel(c)
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| v)
                    .sum::<f64>()
                    * inv
            })
            .collect();
        let mask = mask.to_vec();
        Ok(self.push(
            Tensor::vector(out),
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(d, h, w);
                for c in 0..d {
                    let gc = g.data()[c] * inv;
                    for (o, &m) in dx.channel_mut(c).iter_mut().zip(&mask) {
                        if m {
                            *o = gc;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-pixel cosine similarity between `x` (`[D,h,w]`) and `p` (`[D,1,1]`),
    /// with each norm clamped below at `eps`. Output is `[1,h,w]`.
    pub fn cosine_map(&mut self, x: Var, p: Var, eps: f64) -> Result<Var> {
        let (d, h, w) = self.value(x).shape();
        if self.value(p).shape() != (d, 1, 1) {
            return Err(Error::shape(
                "cosine_map",
                format!("prototype {:?} vs feature dim {d}", self.value(p).shape()),
            ));
        }
        let plane = h * w;
        let (xs, ps) = (self.value(x).data(), self.value(p).data());
        let pn = ps.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut out = vec![0.0; plane];
        let mut norms = vec![0.0; plane];
        let mut dots = vec![0.0; plane];
        for c in 0..d {
            let pc = ps[c];
            let row = &xs[c * plane..(c + 1) * plane];
            for i in 0..plane {
                dots[i] += row[i] * pc;
                norms[i] += row[i] * row[i];
            }
        }
        for i in 0..plane {
            norms[i] = norms[i].sqrt();
            out[i] = dots[i] / (norms[i].max(eps) * pn.max(eps));
        }
        Ok(self.push(
            Tensor::from_vec(1, h, w, out),
            vec![x, p],
            Box::new(move |g, inp, _| {
                let (xs, ps) = (inp[0].data(), inp[1].data());
                let gd = g.data();
                let pe = pn.max(eps);
                let mut dx = Tensor::zeros(d, h, w);
                let mut dp = vec![0.0; d];
                // per-pixel coefficients
                let mut ax = vec![0.0; plane]; // multiplies p_c in dx
                let mut bx = vec![0.0; plane]; // multiplies x_c in dx
                let mut bp = 0.0; // multiplies p_c in dp
                for i in 0..plane {
                    let ne = norms[i].max(eps);
                    ax[i] = gd[i] / (ne * pe);
                    // a clamped norm is constant, so it contributes nothing
                    if norms[i] > eps {
                        bx[i] = -gd[i] * dots[i] / (ne * ne * pe * norms[i]);
                    }
                    if pn > eps {
                        bp -= gd[i] * dots[i] / (ne * pe * pe * pn);
                    }
                }
                let dxd = dx.data_mut();
                for c in 0..d {
                    let pc = ps[c];
                    let row = &xs[c * plane..(c + 1) * plane];
                    let drow = &mut dxd[c * plane..(c + 1) * plane];
                    let mut acc = 0.0;
                    for i in 0..plane {
                        drow[i] = ax[i] * pc + bx[i] * row[i];
                        acc += ax[i] * row[i];
                    }
                    dp[c] = acc + bp * pc;
                }
                vec![Some(dx), Some(Tensor::vector(dp))]
            }),
        ))
    }

    /// Attention with residual: `x ⊙ a + x` where the `[1,h,w]` map `a` is
    /// broadcast over every channel of `x`.
    pub fn attend_residual(&mut self, x: Var, a: Var) -> Result<Var> {
        let (d, h, w) = self.value(x).shape();
        if self.value(a).shape() != (1, h, w) {
            return Err(Error::shape("attend_residual", "attention map must be [1,h,w]"));
        }
        let plane = h * w;
        let (xs, av) = (self.value(x).data(), self.value(a).data());
        let mut out = Tensor::zeros(d, h, w);
        for c in 0..d {
            let o = out.channel_mut(c);
            for i in 0..plane {
                o[i] = xs[c * plane + i] * (1.0 + av[i]);
            }
        }
        Ok(self.push(
            out,
            vec![x, a],
            Box::new(move |g, inp, _| {
                let (xs, av) = (inp[0].data(), inp[1].data());
                let gd = g.data();
                let mut dx = Tensor::zeros(d, h, w);
                let mut da = vec![0.0; plane];
                for c in 0..d {
                    let drow = dx.channel_mut(c);
                    for i in 0..plane {
                        let gi = gd[c * plane + i];
                        drow[i] = gi * (1.0 + av[i]);
                        da[i] += gi * xs[c * plane + i];
                    }
                }
                vec![Some(dx), Some(Tensor::from_vec(1, h, w, da))]
            }),
        ))
    }

    /// Mean over pixels of `-log softmax(logits)[target]`, softmax taken over
    /// channels. `target[i]` indexes a channel.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let (c, h, w) = self.value(logits).shape();
        let plane = h * w;
        if target.len() != plane {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for {} pixels", target.len(), plane),
            ));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "target channel {bad} outside the {c} predicted classes"
            )));
        }
        let probs = crate::tensor::softmax_channels(self.value(logits));
        let loss = target
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let logit = self.value(logits).data()[t * plane + i];
                let pd = self.value(logits).data();
                let m = (0..c).map(|k| pd[k * plane + i]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|k| (pd[k * plane + i] - m).exp()).sum::<f64>().ln();
                lse - logit
            })
            .sum::<f64>()
            / plane as f64;
        let target = target.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g, _, _| {
                let s = g.item() / plane as f64;
                let mut d = probs.scale(s);
                for (i, &t) in target.iter().enumerate() {
                    d.data_mut()[t * plane + i] -= s;
                }
                vec![Some(d)]
            }),
        ))
    }
}

/// Stride / padding / grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> Result<Self> {
        let (cin, h, w) = x.shape();
        let (cout, cin_per, kk) = weight.shape();
        let k = spec.kernel;
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::shape("conv2d", "channels not divisible by groups"));
        }
        if cin_per != cin / spec.groups || kk != k * k {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} does not fit input {cin} channels, kernel {k}", weight.shape()),
            ));
        }
        if h + 2 * spec.padding < k || w + 2 * spec.padding < k || spec.stride == 0 {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - k) / spec.stride + 1;
        Ok(Self { cin, h, w, cout, oh, ow, spec })
    }

    /// Output indices `o` for which `o * stride + k - pad` lands in `[0, n)`.
    #[inline]
    fn valid_range(&self, kidx: usize, n: usize, on: usize) -> (usize, usize) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let off = kidx as isize - p;
        // o*s + off >= 0  -> o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= n-1 -> o <= (n-1-off)/s
        let hi_num = n as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(on as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let cin_per = self.cin / self.spec.groups;
        let cout_per = self.cout / self.spec.groups;
        let (ih, iw, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let p = self.spec.padding;
        for co in 0..self.cout {
            let grp = co / cout_per;
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for cil in 0..cin_per {
                let ci = grp * cin_per + cil;
                let xplane = &x[ci * ih * iw..(ci + 1) * ih * iw];
                for ky in 0..k {
                    let (oy0, oy1) = self.valid_range(ky, ih, oh);
                    for kx in 0..k {
                        let wv = wt[(co * cin_per + cil) * k * k + ky * k + kx];
                        let (ox0, ox1) = self.valid_range(kx, iw, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let xrow = &xplane[iy * iw..(iy + 1) * iw];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let ix0 = ox0 + kx - p;
                                for (o, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward(&self, g: &[f64], x: &[f64], wt: &[f64], dx: &mut [f64], dw: &mut [f64]) {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let cin_per = self.cin / self.spec.groups;
        let cout_per = self.cout / self.spec.groups;
        let (ih, iw, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let p = self.spec.padding;
        for co in 0..self.cout {
            let grp = co / cout_per;
            let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
            for cil in 0..cin_per {
                let ci = grp * cin_per + cil;
                let xplane = &x[ci * ih * iw..(ci + 1) * ih * iw];
                let dxplane = &mut dx[ci * ih * iw..(ci + 1) * ih * iw];
                for ky in 0..k {
                    let (oy0, oy1) = self.valid_range(ky, ih, oh);
                    for kx in 0..k {
                        let widx = (co * cin_per + cil) * k * k + ky * k + kx;
                        let wv = wt[widx];
                        let (ox0, ox1) = self.valid_range(kx, iw, ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - p;
                                let gv = grow[ox];
                                acc += gv * xplane[iy * iw + ix];
                                dxplane[iy * iw + ix] += gv * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}
