//! Forward/backward kernels for the structured ops. Direct loops, no im2col;
//! inputs are small (<= 32x32) so correctness and clarity win.

/// Output spatial size for a conv dimension.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
    for n in 0..d.n {
        for co in 0..d.c_out {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias[co];
                    for ci in 0..d.c_in {
                        for ky in 0..d.k {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.k {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let iv = input
                                    [((n * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize];
                                let kv = kernel[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((n * d.c_out + co) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    grad_input: &mut [f64],
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    for n in 0..d.n {
        for co in 0..d.c_out {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let g = grad_out[((n * d.c_out + co) * d.oh + oy) * d.ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    grad_bias[co] += g;
                    for ci in 0..d.c_in {
                        for ky in 0..d.k {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.k {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let in_idx =
                                    ((n * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize;
                                let k_idx = ((co * d.c_in + ci) * d.k + ky) * d.k + kx;
                                grad_input[in_idx] += g * kernel[k_idx];
                                grad_kernel[k_idx] += g * input[in_idx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// y = x * w^T + b with x: [n, in], w: [out, in], b: [out].
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut acc = b[o];
            for j in 0..din {
                acc += x[i * din + j] * w[o * din + j];
            }
            y[i * dout + o] = acc;
        }
    }
    y
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    grad_x: &mut [f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    for i in 0..n {
        for o in 0..dout {
            let g = grad_out[i * dout + o];
            if g == 0.0 {
                continue;
            }
            grad_b[o] += g;
            for j in 0..din {
                grad_x[i * din + j] += g * w[o * din + j];
                grad_w[o * din + j] += g * x[i * din + j];
            }
        }
    }
}

/// Numerically stable softplus: ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
