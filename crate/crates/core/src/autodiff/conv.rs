//! Same-padded 2-D convolution kernels (im2col + GEMM).

/// Geometry of one convolution: input `[n, c, h, w]`, weights `[o, c, k, k]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn input_len(&self) -> usize {
        self.in_channels * self.plane()
    }

    fn output_len(&self) -> usize {
        self.out_channels * self.plane()
    }
}

/// Strided matrix operand: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product; `c` is row-major `m×n`.
fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * a.rs + (k.max(1) - 1) * a.cs < a.data.len());
    assert!((k.max(1) - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every addressed element of `a`, `b` and
    // `c` inside its slice, and `c` does not alias the shared inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, input: &[f64], col: &mut [f64]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.pad());
    let plane = g.plane();
    for c in 0..g.in_channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let iy = y + ky;
                    if iy < p || iy - p >= h || x_lo >= x_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let iy = iy - p;
                    out_row[..x_lo].fill(0.0);
                    out_row[x_hi..].fill(0.0);
                    let ix_lo = x_lo + kx - p;
                    let len = x_hi - x_lo;
                    out_row[x_lo..x_hi].copy_from_slice(&src[iy * w + ix_lo..iy * w + ix_lo + len]);
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f64], input_grad: &mut [f64]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.pad());
    let plane = g.plane();
    for c in 0..g.in_channels {
        let dst = &mut input_grad[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y + ky;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let iy = iy - p;
                    let ix_lo = x_lo + kx - p;
                    let d = &mut dst[iy * w + ix_lo..iy * w + ix_lo + (x_hi - x_lo)];
                    for (o, s) in d.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *o += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.output_len()];
    let mut col = if g.kernel == 1 { Vec::new() } else { vec![0.0; patch * plane] };
    for n in 0..g.batch {
        let x = &input[n * g.input_len()..(n + 1) * g.input_len()];
        let y = &mut out[n * g.output_len()..(n + 1) * g.output_len()];
        for (o, &b) in bias.iter().enumerate() {
            y[o * plane..(o + 1) * plane].fill(b);
        }
        let cols = if g.kernel == 1 {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        gemm(
            g.out_channels,
            patch,
            plane,
            View {
                data: weight,
                rs: patch,
                cs: 1,
            },
            View {
                data: cols,
                rs: plane,
                cs: 1,
            },
            1.0,
            y,
        );
    }
    out
}

/// Gradients of a convolution. Each requested output is accumulated into
/// the provided buffer.
pub(crate) struct ConvGrads<'a> {
    pub input: Option<&'a mut [f64]>,
    pub weight: Option<&'a mut [f64]>,
    pub bias: Option<&'a mut [f64]>,
}

pub(crate) fn backward(g: &ConvGeometry, input: &[f64], weight: &[f64], grad_out: &[f64], grads: ConvGrads<'_>) {
    let plane = g.plane();
    let patch = g.patch_len();
    let ConvGrads {
        input: mut grad_in,
        weight: mut grad_w,
        bias: mut grad_b,
    } = grads;
    let mut col = vec![0.0; if g.kernel == 1 { 0 } else { patch * plane }];
    let mut dcol = vec![0.0; if grad_in.is_some() { patch * plane } else { 0 }];

    for n in 0..g.batch {
        let go = &grad_out[n * g.output_len()..(n + 1) * g.output_len()];

        if let Some(gb) = grad_b.as_deref_mut() {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += go[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }

        if let Some(gw) = grad_w.as_deref_mut() {
            let x = &input[n * g.input_len()..(n + 1) * g.input_len()];
            let cols: &[f64] = if g.kernel == 1 {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dW[o, j] += sum_p go[o, p] * col[j, p]
            gemm(
                g.out_channels,
                plane,
                patch,
                View {
                    data: go,
                    rs: plane,
                    cs: 1,
                },
                View {
                    data: cols,
                    rs: 1,
                    cs: plane,
                },
                1.0,
                gw,
            );
        }

        if let Some(gi) = grad_in.as_deref_mut() {
            let gi = &mut gi[n * g.input_len()..(n + 1) * g.input_len()];
            // dcol[j, p] = sum_o W[o, j] * go[o, p]
            if g.kernel == 1 {
                gemm(
                    patch,
                    g.out_channels,
                    plane,
                    View {
                        data: weight,
                        rs: 1,
                        cs: patch,
                    },
                    View {
                        data: go,
                        rs: plane,
                        cs: 1,
                    },
                    1.0,
                    gi,
                );
            } else {
                gemm(
                    patch,
                    g.out_channels,
                    plane,
                    View {
                        data: weight,
                        rs: 1,
                        cs: patch,
                    },
                    View {
                        data: go,
                        rs: plane,
                        cs: 1,
                    },
                    0.0,
                    &mut dcol,
                );
                col2im_add(g, &dcol, gi);
            }
        }
    }
}
