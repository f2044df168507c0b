//! Differentiable operations on [`Var`].
//!
//! Convention: a rank-2 view `[rows, cols]` with `cols` the product of all
//! trailing dimensions. Channel-last layouts (`[time, channels]` and
//! `[time, freq, channels]`) are used throughout.

use std::rc::Rc;

use crate::{gemm, AutogradError, Result, Tensor, Var};

/// Index marker for [`Var::gather`] entries that read as zero.
pub const PAD: usize = usize::MAX;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutogradError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_scalar(op: &'static str, s: &Tensor) -> Result<()> {
    if s.len() != 1 {
        return Err(AutogradError::shape(op, format!("expected a scalar, got {:?}", s.shape())));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        if b.rows() != k {
            return Err(AutogradError::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let out = a.matmul(&b)?;
        Ok(self.tape().op(out, &[self, rhs], move |g, need| {
            let ga = need[0].then(|| {
                let mut o = vec![0.0; m * k];
                gemm(false, true, m, n, k, 1.0, g.data(), b.data(), 0.0, &mut o);
                Tensor::new(a.shape().to_vec(), o)
            });
            let gb = need[1].then(|| {
                let mut o = vec![0.0; k * n];
                gemm(true, false, k, m, n, 1.0, a.data(), g.data(), 0.0, &mut o);
                Tensor::new(b.shape().to_vec(), o)
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        check_same("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape().op(out, &[self, rhs], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        check_same("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape().op(out, &[self, rhs], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|x| -x))]
        }))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        check_same("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape().op(out, &[self, rhs], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |x, y| x * y)),
                need[1].then(|| g.zip_map(&a, |x, y| x * y)),
            ]
        }))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, c: Rc<Tensor>) -> Result<Var<'t>> {
        let a = self.value();
        check_same("mul_const", &a, &c)?;
        let out = a.zip_map(&c, |x, y| x * y);
        Ok(self.tape().op(out, &[self], move |g, _| vec![Some(g.zip_map(&c, |x, y| x * y))]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape().op(out, &[self], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape().op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// Adds `bias[j]` to every row's column `j`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        let (r, c) = (a.rows(), a.cols());
        if b.len() != c {
            return Err(AutogradError::shape(
                "add_bias",
                format!("{:?} + bias {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = a.as_ref().clone();
        for row in out.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let bshape = b.shape().to_vec();
        Ok(self.tape().op(out, &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, x) in acc.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                Tensor::new(bshape.clone(), acc)
            });
            vec![need[0].then(|| g.clone()), gb]
        }))
    }

    /// Multiplies column `j` of every row by `scale[j]`.
    pub fn mul_cols(self, scale: Var<'t>) -> Result<Var<'t>> {
        let (a, s) = (self.value(), scale.value());
        let (r, c) = (a.rows(), a.cols());
        if s.len() != c {
            return Err(AutogradError::shape(
                "mul_cols",
                format!("{:?} * scale {:?}", a.shape(), s.shape()),
            ));
        }
        let mut out = a.as_ref().clone();
        for row in out.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(s.data()) {
                *x *= y;
            }
        }
        Ok(self.tape().op(out, &[self, scale], move |g, need| {
            let ga = need[0].then(|| {
                let mut o = g.clone();
                for row in o.data_mut().chunks_mut(c) {
                    for (x, y) in row.iter_mut().zip(s.data()) {
                        *x *= y;
                    }
                }
                o
            });
            let gs = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for ((acc, gx), ax) in acc.iter_mut().zip(g.row(i)).zip(a.row(i)) {
                        *acc += gx * ax;
                    }
                }
                Tensor::new(s.shape().to_vec(), acc)
            });
            vec![ga, gs]
        }))
    }

    /// Multiplies every entry by a scalar variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (a, sv) = (self.value(), s.value());
        check_scalar("mul_scalar", &sv)?;
        let k = sv.item();
        let out = a.map(|x| x * k);
        Ok(self.tape().op(out, &[self, s], move |g, need| {
            vec![
                need[0].then(|| g.map(|x| x * k)),
                need[1].then(|| {
                    Tensor::new(
                        sv.shape().to_vec(),
                        vec![g.data().iter().zip(a.data()).map(|(x, y)| x * y).sum()],
                    )
                }),
            ]
        }))
    }

    /// Adds a scalar variable to every entry.
    pub fn add_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (a, sv) = (self.value(), s.value());
        check_scalar("add_scalar", &sv)?;
        let k = sv.item();
        let out = a.map(|x| x + k);
        let sshape = sv.shape().to_vec();
        Ok(self.tape().op(out, &[self, s], move |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| Tensor::new(sshape.clone(), vec![g.sum()]))]
        }))
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        self.tape().note_pattern(a.data().iter().map(|&x| x > 0.0));
        let out = a.map(|x| x.max(0.0));
        self.tape().op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&a, |gx, x| if x > 0.0 { gx } else { 0.0 }))]
        })
    }

    /// Parametric ReLU with a single learned negative slope.
    pub fn prelu(self, slope: Var<'t>) -> Result<Var<'t>> {
        let (a, s) = (self.value(), slope.value());
        check_scalar("prelu", &s)?;
        let k = s.item();
        self.tape().note_pattern(a.data().iter().map(|&x| x > 0.0));
        let out = a.map(|x| if x > 0.0 { x } else { k * x });
        Ok(self.tape().op(out, &[self, slope], move |g, need| {
            let ga = need[0].then(|| g.zip_map(&a, |gx, x| if x > 0.0 { gx } else { k * gx }));
            let gs = need[1].then(|| {
                let v: f64 = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(gx, &x)| if x > 0.0 { 0.0 } else { gx * x })
                    .sum();
                Tensor::new(s.shape().to_vec(), vec![v])
            });
            vec![ga, gs]
        }))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = Rc::new(self.value().map(sigmoid));
        let y = out.clone();
        self.tape().op(out.as_ref().clone(), &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |gx, y| gx * y * (1.0 - y)))]
        })
    }

    /// `ln(p / (1 - p))`; inputs must lie strictly inside (0, 1).
    pub fn logit(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(AutogradError::NonFinite("logit of a value outside (0, 1)".into()));
        }
        let out = a.map(|p| (p / (1.0 - p)).ln());
        Ok(self.tape().op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&a, |gx, p| gx / (p * (1.0 - p))))]
        }))
    }

    /// `ln(x + eps)`.
    pub fn ln_eps(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let out = a.map(|x| (x + eps).ln());
        self.tape().op(out, &[self], move |g, _| vec![Some(g.zip_map(&a, |gx, x| gx / (x + eps)))])
    }

    pub fn square(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(|x| x * x);
        self.tape().op(out, &[self], move |g, _| vec![Some(g.zip_map(&a, |gx, x| 2.0 * gx * x))])
    }

    /// `sqrt(re^2 + im^2)`, with a zero subgradient at the origin.
    pub fn magnitude(re: Var<'t>, im: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (re.value(), im.value());
        check_same("magnitude", &a, &b)?;
        let out = Rc::new(a.zip_map(&b, |x, y| x.hypot(y)));
        re.tape().note_pattern(out.data().iter().map(|&m| m > 0.0));
        let m = out.clone();
        Ok(re.tape().op(out.as_ref().clone(), &[re, im], move |g, need| {
            let part = |src: &Tensor| {
                let mut o = vec![0.0; src.len()];
                for i in 0..o.len() {
                    let mag = m.data()[i];
                    if mag > 0.0 {
                        o[i] = g.data()[i] * src.data()[i] / mag;
                    }
                }
                Tensor::new(src.shape().to_vec(), o)
            };
            vec![need[0].then(|| part(&a)), need[1].then(|| part(&b))]
        }))
    }

    /// Normalizes all entries jointly: `(x - mean) / sqrt(var + eps)`.
    pub fn global_norm(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let n = a.len() as f64;
        let mean = a.sum() / n;
        let var = a.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = (var + eps).sqrt();
        let y = Rc::new(a.map(|x| (x - mean) / sd));
        let yc = y.clone();
        self.tape().op(y.as_ref().clone(), &[self], move |g, _| {
            let gm = g.sum() / n;
            let gym = g.data().iter().zip(yc.data()).map(|(a, b)| a * b).sum::<f64>() / n;
            vec![Some(g.zip_map(&yc, |gx, y| (gx - gm - y * gym) / sd))]
        })
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| AutogradError::shape("concat_cols", "no inputs"))?;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let r = vals[0].rows();
        if vals.iter().any(|v| v.rows() != r) {
            return Err(AutogradError::shape(
                "concat_cols",
                format!("{:?}", vals.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()),
            ));
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        Ok(first.tape().op(Tensor::matrix(r, total, out), parts, move |g, need| {
            let mut start = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let s = start;
                    start += w;
                    nd.then(|| g.slice_cols(s, s + w))
                })
                .collect()
        }))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if start > end || end > c {
            return Err(AutogradError::shape("slice_cols", format!("[{start}, {end}) of {c}")));
        }
        let out = a.slice_cols(start, end);
        let shape = a.shape().to_vec();
        Ok(self.tape().op(out, &[self], move |g, _| {
            let w = end - start;
            let mut o = vec![0.0; r * c];
            for i in 0..r {
                o[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Some(Tensor::new(shape.clone(), o))]
        }))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| AutogradError::shape("concat_rows", "no inputs"))?;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let c = vals[0].cols();
        if vals.iter().any(|v| v.cols() != c) {
            return Err(AutogradError::shape("concat_rows", "column counts differ"));
        }
        let lens: Vec<usize> = vals.iter().map(|v| v.len()).collect();
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut out = Vec::with_capacity(rows * c);
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape().op(Tensor::matrix(rows, c, out), parts, move |g, need| {
            let mut start = 0;
            lens.iter()
                .zip(need)
                .zip(&shapes)
                .map(|((&l, &nd), shape)| {
                    let s = start;
                    start += l;
                    nd.then(|| Tensor::new(shape.clone(), g.data()[s..s + l].to_vec()))
                })
                .collect()
        }))
    }

    /// `out[i] = x[index[i]]` over the flattened input, [`PAD`] reading zero.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() || index.iter().any(|&i| i != PAD && i >= a.len()) {
            return Err(AutogradError::shape("gather", format!("{} indices into {}", index.len(), a.len())));
        }
        let out: Vec<f64> =
            index.iter().map(|&i| if i == PAD { 0.0 } else { a.data()[i] }).collect();
        let in_shape = a.shape().to_vec();
        let in_len = a.len();
        Ok(self.tape().op(Tensor::new(shape.to_vec(), out), &[self], move |g, _| {
            let mut o = vec![0.0; in_len];
            for (&i, gx) in index.iter().zip(g.data()) {
                if i != PAD {
                    o[i] += gx;
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), o))]
        }))
    }

    /// `out row r = x row index[r]`.
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        if index.iter().any(|&i| i >= r) {
            return Err(AutogradError::shape("gather_rows", format!("row index out of {r}")));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(a.row(i));
        }
        let in_shape = a.shape().to_vec();
        Ok(self.tape().op(Tensor::matrix(index.len(), c, out), &[self], move |g, _| {
            let mut o = vec![0.0; r * c];
            for (k, &i) in index.iter().enumerate() {
                for (acc, x) in o[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                    *acc += x;
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), o))]
        }))
    }

    /// Overlap-adds `[frames, width]` with the given hop into a signal of
    /// `out_len` samples; samples past `out_len` are discarded.
    pub fn overlap_add(self, hop: usize, out_len: usize) -> Var<'t> {
        let a = self.value();
        let (frames, width) = (a.rows(), a.cols());
        let mut out = vec![0.0; out_len];
        for f in 0..frames {
            let base = f * hop;
            for (j, x) in a.row(f).iter().enumerate() {
                if base + j < out_len {
                    out[base + j] += x;
                }
            }
        }
        let shape = a.shape().to_vec();
        self.tape().op(Tensor::vector(out), &[self], move |g, _| {
            let mut o = vec![0.0; frames * width];
            for f in 0..frames {
                let base = f * hop;
                for j in 0..width {
                    if base + j < out_len {
                        o[f * width + j] = g.data()[base + j];
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), o))]
        })
    }

    /// Per-channel dilated convolution over time for `[time, channels]` input
    /// with kernel `[taps, channels]` and zero "same" padding.
    pub fn depthwise_conv1d(self, kernel: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        let (t_len, c) = (x.rows(), x.cols());
        let taps = w.rows();
        if w.cols() != c || taps % 2 == 0 {
            return Err(AutogradError::shape(
                "depthwise_conv1d",
                format!("input {:?} kernel {:?}", x.shape(), w.shape()),
            ));
        }
        let half = (taps / 2) as isize;
        let offsets: Vec<isize> = (0..taps as isize).map(|k| (k - half) * dilation as isize).collect();
        let mut out = vec![0.0; t_len * c];
        for (k, &off) in offsets.iter().enumerate() {
            let wk = w.row(k);
            for t in 0..t_len {
                let s = t as isize + off;
                if s < 0 || s >= t_len as isize {
                    continue;
                }
                let src = x.row(s as usize);
                let dst = &mut out[t * c..(t + 1) * c];
                for ch in 0..c {
                    dst[ch] += wk[ch] * src[ch];
                }
            }
        }
        Ok(self.tape().op(Tensor::new(x.shape().to_vec(), out), &[self, kernel], move |g, need| {
            let mut gx = need[0].then(|| vec![0.0; t_len * c]);
            let mut gw = need[1].then(|| vec![0.0; taps * c]);
            for (k, &off) in offsets.iter().enumerate() {
                for t in 0..t_len {
                    let s = t as isize + off;
                    if s < 0 || s >= t_len as isize {
                        continue;
                    }
                    let s = s as usize;
                    let gt = g.row(t);
                    if let Some(gx) = gx.as_mut() {
                        let wk = w.row(k);
                        let dst = &mut gx[s * c..(s + 1) * c];
                        for ch in 0..c {
                            dst[ch] += wk[ch] * gt[ch];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let src = x.row(s);
                        let dst = &mut gw[k * c..(k + 1) * c];
                        for ch in 0..c {
                            dst[ch] += src[ch] * gt[ch];
                        }
                    }
                }
            }
            vec![
                gx.map(|v| Tensor::new(x.shape().to_vec(), v)),
                gw.map(|v| Tensor::new(w.shape().to_vec(), v)),
            ]
        }))
    }

    /// Per-channel 3x3 convolution over a `[time, freq, channels]` plane:
    /// valid along time (two frames shorter), zero "same" padding along
    /// frequency with the given stride. Kernel shape `[3, 3, channels]`.
    pub fn depthwise_conv2d(self, kernel: Var<'t>, freq_stride: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        let xs = x.shape().to_vec();
        if xs.len() != 3 || w.shape() != [3, 3, xs[2]] || xs[0] < 3 || freq_stride == 0 {
            return Err(AutogradError::shape(
                "depthwise_conv2d",
                format!("input {:?} kernel {:?}", xs, w.shape()),
            ));
        }
        let (t_in, f_in, c) = (xs[0], xs[1], xs[2]);
        let t_out = t_in - 2;
        let f_out = f_in.div_ceil(freq_stride);
        let idx_in = move |t: usize, f: usize| (t * f_in + f) * c;
        let idx_out = move |t: usize, f: usize| (t * f_out + f) * c;
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; t_out * f_out * c];
        for t in 0..t_out {
            for fo in 0..f_out {
                let o = idx_out(t, fo);
                for dt in 0..3 {
                    for df in 0..3 {
                        let fi = (fo * freq_stride + df) as isize - 1;
                        if fi < 0 || fi >= f_in as isize {
                            continue;
                        }
                        let i = idx_in(t + dt, fi as usize);
                        let k = (dt * 3 + df) * c;
                        for ch in 0..c {
                            out[o + ch] += wd[k + ch] * xd[i + ch];
                        }
                    }
                }
            }
        }
        let out_shape = vec![t_out, f_out, c];
        Ok(self.tape().op(Tensor::new(out_shape, out), &[self, kernel], move |g, need| {
            let gd = g.data();
            let xd = x.data();
            let wd = w.data();
            let mut gx = need[0].then(|| vec![0.0; x.len()]);
            let mut gw = need[1].then(|| vec![0.0; w.len()]);
            for t in 0..t_out {
                for fo in 0..f_out {
                    let o = idx_out(t, fo);
                    for dt in 0..3 {
                        for df in 0..3 {
                            let fi = (fo * freq_stride + df) as isize - 1;
                            if fi < 0 || fi >= f_in as isize {
                                continue;
                            }
                            let i = idx_in(t + dt, fi as usize);
                            let k = (dt * 3 + df) * c;
                            if let Some(gx) = gx.as_mut() {
                                for ch in 0..c {
                                    gx[i + ch] += wd[k + ch] * gd[o + ch];
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                for ch in 0..c {
                                    gw[k + ch] += xd[i + ch] * gd[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                gx.map(|v| Tensor::new(x.shape().to_vec(), v)),
                gw.map(|v| Tensor::new(w.shape().to_vec(), v)),
            ]
        }))
    }

    /// Sliding mean over `window` consecutive time steps and all frequency
    /// bins of a `[time, freq, channels]` plane, giving `[time - window + 1, channels]`.
    pub fn window_mean(self, window: usize) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 3 || window == 0 || window > xs[0] {
            return Err(AutogradError::shape("window_mean", format!("{xs:?} window {window}")));
        }
        let (t_in, f_in, c) = (xs[0], xs[1], xs[2]);
        let p_out = t_in - window + 1;
        let norm = 1.0 / (window * f_in) as f64;
        // prefix[t] = sum over time < t and all freq, per channel
        let mut prefix = vec![0.0; (t_in + 1) * c];
        for t in 0..t_in {
            for f in 0..f_in {
                let base = (t * f_in + f) * c;
                for ch in 0..c {
                    prefix[(t + 1) * c + ch] += x.data()[base + ch];
                }
            }
            for ch in 0..c {
                prefix[(t + 1) * c + ch] += prefix[t * c + ch];
            }
        }
        let mut out = vec![0.0; p_out * c];
        for p in 0..p_out {
            for ch in 0..c {
                out[p * c + ch] = (prefix[(p + window) * c + ch] - prefix[p * c + ch]) * norm;
            }
        }
        Ok(self.tape().op(Tensor::matrix(p_out, c, out), &[self], move |g, _| {
            // time step t receives the sum of g over windows p in [t - window + 1, t]
            let mut gp = vec![0.0; (p_out + 1) * c];
            for p in 0..p_out {
                for ch in 0..c {
                    gp[(p + 1) * c + ch] = gp[p * c + ch] + g.data()[p * c + ch];
                }
            }
            let mut o = vec![0.0; t_in * f_in * c];
            for t in 0..t_in {
                let hi = t.min(p_out - 1) + 1;
                let lo = (t + 1).saturating_sub(window);
                if lo >= hi {
                    continue;
                }
                for ch in 0..c {
                    let v = (gp[hi * c + ch] - gp[lo * c + ch]) * norm;
                    for f in 0..f_in {
                        o[(t * f_in + f) * c + ch] = v;
                    }
                }
            }
            vec![Some(Tensor::new(xs.clone(), o))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = a.as_ref().clone().reshape(shape)?;
        Ok(self.tape().op(out, &[self], move |g, _| {
            vec![Some(Tensor::new(old.clone(), g.data().to_vec()))]
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.tape().op(Tensor::scalar(a.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column means of a matrix, shape `[1, cols]`.
    pub fn mean_rows(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(a.row(i)) {
                *o += x / r as f64;
            }
        }
        let shape = a.shape().to_vec();
        self.tape().op(Tensor::matrix(1, c, out), &[self], move |g, _| {
            let mut o = Vec::with_capacity(r * c);
            for _ in 0..r {
                o.extend(g.data().iter().map(|x| x / r as f64));
            }
            vec![Some(Tensor::new(shape.clone(), o))]
        })
    }

    /// Sum of scalar variables.
    pub fn sum_all(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| AutogradError::shape("sum_all", "no inputs"))?;
        let mut acc = *first;
        for p in &parts[1..] {
            acc = acc.add(*p)?;
        }
        Ok(acc)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use crate::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w * f(x)))/dx against central differences.
    fn check_unary(x: Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let report = check_input_gradient(&x, 1e-5, |input, want| {
            let tape = Tape::with_branch_tracking();
            let v = tape.leaf(input.clone(), want);
            let y = f(v);
            let wv = tape.constant(random(&y.shape(), 99));
            let loss = y.mul(wv).unwrap().sum();
            let grad = want.then(|| tape.backward(loss).get(v).cloned().unwrap());
            (loss.item(), tape.branch_signature(), grad)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(random(&[4, 5], 1), |v| v.sigmoid());
        check_unary(random(&[4, 5], 2), |v| v.relu());
        check_unary(random(&[4, 5], 3), |v| v.square().ln_eps(0.1));
        check_unary(random(&[4, 5], 4), |v| v.global_norm(1e-10));
        check_unary(random(&[4, 5], 5).map(|x| 0.5 + 0.4 * x), |v| v.logit().unwrap());
        check_unary(random(&[4, 5], 6), |v| v.scale(3.0).add_const(1.0).mean_rows());
    }

    #[test]
    fn structural_gradients() {
        check_unary(random(&[6, 4], 7), |v| {
            let a = v.slice_cols(0, 2).unwrap();
            let b = v.slice_cols(1, 4).unwrap();
            Var::concat_cols(&[b, a, v]).unwrap()
        });
        check_unary(random(&[6, 4], 8), |v| Var::concat_rows(&[v, v.square()]).unwrap());
        check_unary(random(&[6, 4], 9), |v| {
            v.gather_rows(Rc::new(vec![0, 0, 5, 2, 2, 2])).unwrap()
        });
        check_unary(random(&[10], 10), |v| {
            v.gather(Rc::new(vec![0, 1, PAD, 3, 3, 9]), &[2, 3]).unwrap()
        });
        check_unary(random(&[5, 4], 11), |v| v.overlap_add(2, 11));
        check_unary(random(&[9, 2, 3], 12), |v| v.window_mean(4).unwrap());
    }

    #[test]
    fn magnitude_gradient() {
        let re = random(&[3, 4], 13);
        let im = random(&[3, 4], 14);
        check_unary(re, |v| {
            let im = v.tape().constant(im.clone());
            Var::magnitude(v, im).unwrap()
        });
    }

    #[test]
    fn parameterized_gradients() {
        let other = random(&[5, 3], 20);
        check_unary(random(&[4, 5], 21), |v| v.matmul(v.tape().constant(other.clone())).unwrap());
        let left = random(&[2, 4], 22);
        check_unary(random(&[4, 5], 23), |v| v.tape().constant(left.clone()).matmul(v).unwrap());
        let x = random(&[7, 3], 24);
        check_unary(random(&[3, 3], 25), |k| {
            k.tape().constant(x.clone()).depthwise_conv1d(k, 2).unwrap()
        });
        let k = random(&[3, 3], 26);
        check_unary(random(&[7, 3], 27), |v| {
            v.depthwise_conv1d(v.tape().constant(k.clone()), 3).unwrap()
        });
        let plane = random(&[5, 6, 2], 28);
        check_unary(random(&[3, 3, 2], 29), |k| {
            k.tape().constant(plane.clone()).depthwise_conv2d(k, 2).unwrap()
        });
        let k2 = random(&[3, 3, 2], 30);
        check_unary(random(&[5, 7, 2], 31), |v| {
            v.depthwise_conv2d(v.tape().constant(k2.clone()), 2).unwrap()
        });
        let x = random(&[4, 3], 32);
        check_unary(random(&[3], 33), |b| {
            let xv = b.tape().constant(x.clone());
            xv.add_bias(b).unwrap().mul_cols(b).unwrap()
        });
        check_unary(random(&[1], 34), |s| {
            let xv = s.tape().constant(x.clone());
            xv.mul_scalar(s).unwrap().add_scalar(s).unwrap().prelu(s).unwrap()
        });
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let tape = Tape::new();
        let x = random(&[6, 2], 40);
        let w = random(&[3, 2], 41);
        let y = tape.constant(x.clone()).depthwise_conv1d(tape.constant(w.clone()), 2).unwrap();
        let y = y.value();
        for t in 0..6 {
            for c in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    let src = t as isize + (k as isize - 1) * 2;
                    if (0..6).contains(&src) {
                        s += w.data()[k * 2 + c] * x.data()[src as usize * 2 + c];
                    }
                }
                assert!((y.data()[t * 2 + c] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_inputs_skip_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = a.square();
        assert!(!b.requires_grad());
        let c = tape.leaf(Tensor::scalar(3.0), true);
        let d = b.mul(c).unwrap();
        let grads = tape.backward(d);
        assert_eq!(grads.get(c).unwrap().item(), 4.0);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
