//! Raw numeric kernels shared by graph recording and replay.

/// Output length of a convolution or pooling window sweep.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, image: &[f64], col: &mut [f64]) {
    let so = g.spatial_out();
    let (p, s) = (g.padding as isize, g.stride as isize);
    for ch in 0..g.c {
        let plane = &image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * so..(row + 1) * so];
                for oy in 0..g.oh {
                    let y = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let x = ox as isize * s + kj as isize - p;
                        *out = if x < 0 || x >= g.w as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], image: &mut [f64]) {
    let so = g.spatial_out();
    let (p, s) = (g.padding as isize, g.stride as isize);
    for ch in 0..g.c {
        let plane = &mut image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * so..(row + 1) * so];
                for oy in 0..g.oh {
                    let y = oy as isize * s + ki as isize - p;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let x = ox as isize * s + kj as isize - p;
                        if x >= 0 && x < g.w as isize {
                            plane[y as usize * g.w + x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n] + beta * C, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents for the row-major and
    // transposed views used by the callers below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (patch, so) = (g.patch(), g.spatial_out());
    let mut out = vec![0.0; g.n * g.f * so];
    let mut col = vec![0.0; patch * so];
    for n in 0..g.n {
        im2col(g, &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], &mut col);
        let dst = &mut out[n * g.f * so..(n + 1) * g.f * so];
        for (f, chunk) in dst.chunks_exact_mut(so).enumerate() {
            chunk.fill(bias[f]);
        }
        gemm(g.f, patch, so, kernel, (patch as isize, 1), &col, (so as isize, 1), 1.0, dst);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (patch, so) = (g.patch(), g.spatial_out());
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dk = need[1].then(|| vec![0.0; kernel.len()]);
    let mut db = need[2].then(|| vec![0.0; g.f]);
    let mut col = vec![0.0; patch * so];
    let mut dcol = vec![0.0; patch * so];
    for n in 0..g.n {
        let dy = &dout[n * g.f * so..(n + 1) * g.f * so];
        if let Some(db) = db.as_mut() {
            for (f, chunk) in dy.chunks_exact(so).enumerate() {
                db[f] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], &mut col);
            // dK[f, patch] += dY[f, so] * col^T[so, patch]
            gemm(g.f, so, patch, dy, (so as isize, 1), &col, (1, so as isize), 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[patch, so] = K^T[patch, f] * dY[f, so]
            gemm(patch, g.f, so, kernel, (1, patch as isize), dy, (so as isize, 1), 0.0, &mut dcol);
            col2im_add(g, &dcol, &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w]);
        }
    }
    ConvGrads { input: dx, kernel: dk, bias: db }
}

/// Max pooling over `[planes, h, w]`. Returns values and, per output cell,
/// the flat input index of the winning element. Ties keep the first element
/// in row-major scan order.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = conv_output_size(h, k, stride, 0);
    let ow = conv_output_size(w, k, stride, 0);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, oh, ow)
}

/// Bilinear resampling with half-pixel centers (edge samples clamp).
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(out_h, h);
    let cols = axis(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
