//! Direct 3-D convolution kernels (forward and both backward products).
//!
//! Loops are ordered so that one output row stays hot while the input rows it
//! touches stream past; the innermost loop is an axpy or dot over `w`.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

/// Output indices `o` in `[lo, hi)` for which `o * s + k - p` lands inside `[0, input)`.
#[inline]
fn valid_range(output: usize, input: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if input + p > k {
        ((input - 1 + p - k) / s + 1).min(output)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv3d_output_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if input + 2 * padding < k || stride == 0 {
        None
    } else {
        Some((input + 2 * padding - k) / stride + 1)
    }
}

struct ConvShape {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    ind: [usize; 3],
    outd: [usize; 3],
}

fn check_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Result<ConvShape> {
    let [n, c, d, h, wd] = x.dims5()?;
    let ws = w.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::Shape(format!(
            "conv3d weight must be (c_out, c_in, k, k, k), got {ws:?}"
        )));
    }
    let (cout, cin, k) = (ws[0], ws[1], ws[2]);
    if cin != c {
        return Err(Error::Shape(format!(
            "conv3d channel axis (dim 1): input has {c} channels, weight expects {cin}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Shape(format!("conv3d kernel size must be odd, got {k}")));
    }
    if g.padding != 0 && g.padding != (k - 1) / 2 {
        return Err(Error::Shape(format!(
            "conv3d padding must be 0 or {}, got {}",
            (k - 1) / 2,
            g.padding
        )));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv3d bias must have shape [{cout}], got {:?}",
                b.shape()
            )));
        }
    }
    let mut outd = [0; 3];
    for (axis, (&i, o)) in [d, h, wd].iter().zip(outd.iter_mut()).enumerate() {
        *o = conv3d_output_dim(i, k, g.stride, g.padding).ok_or_else(|| {
            Error::Shape(format!(
                "conv3d spatial axis {} (size {i}) too small for kernel {k} with padding {}",
                axis + 2,
                g.padding
            ))
        })?;
    }
    Ok(ConvShape {
        n,
        cin,
        cout,
        k,
        ind: [d, h, wd],
        outd,
    })
}

#[inline]
fn axpy_row(dst: &mut [f64], src: &[f64], a: f64, lo: usize, hi: usize, s: usize, off: isize) {
    if s == 1 {
        let start = (lo as isize + off) as usize;
        let src = &src[start..start + (hi - lo)];
        for (d, v) in dst[lo..hi].iter_mut().zip(src) {
            *d += a * v;
        }
    } else {
        for (o, d) in dst[lo..hi].iter_mut().enumerate() {
            *d += a * src[(((lo + o) * s) as isize + off) as usize];
        }
    }
}

/// Convolution forward; validated here, computed on the GEMM path.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    check_conv(x, w, Some(b), g)?;
    super::gemm::conv3d_forward(x, w, b, g)
}

/// Gradients with respect to input, weight and bias, on the GEMM path.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_conv(x, w, None, g)?;
    super::gemm::conv3d_backward(x, w, grad_out, g)
}

/// Reference forward: direct loops, no column buffer.
pub fn conv3d_forward_direct(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    g: ConvGeometry,
) -> Result<Tensor> {
    let cs = check_conv(x, w, Some(b), g)?;
    let (s, p, k) = (g.stride, g.padding, cs.k);
    let [id, ih, iw] = cs.ind;
    let [od, oh, ow] = cs.outd;
    let plane_in = id * ih * iw;
    let plane_out = od * oh * ow;
    let mut out = vec![0.0; cs.n * cs.cout * plane_out];
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    let k3 = k * k * k;
    for_each_chunk(&mut out, plane_out, |chunk, dst| {
        let (ni, co) = (chunk / cs.cout, chunk % cs.cout);
        dst.fill(bd[co]);
        let xrange: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(ow, iw, s, kx, p)).collect();
        for oz in 0..od {
            for oy in 0..oh {
                let row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                for ci in 0..cs.cin {
                    let xbase = (ni * cs.cin + ci) * plane_in;
                    let wbase = (co * cs.cin + ci) * k3;
                    for kz in 0..k {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let rs = xbase + (iz as usize * ih + iy as usize) * iw;
                            let src = &xd[rs..rs + iw];
                            for (kx, &(lo, hi)) in xrange.iter().enumerate() {
                                let wv = wdat[wbase + (kz * k + ky) * k + kx];
                                axpy_row(row, src, wv, lo, hi, s, kx as isize - p as isize);
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[cs.n, cs.cout, od, oh, ow], out)
}

/// Reference gradients: direct loops.
pub fn conv3d_backward_direct(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let cs = check_conv(x, w, None, g)?;
    let (s, p, k) = (g.stride, g.padding, cs.k);
    let [id, ih, iw] = cs.ind;
    let [od, oh, ow] = cs.outd;
    if grad_out.shape() != [cs.n, cs.cout, od, oh, ow] {
        return Err(Error::Shape(format!(
            "conv3d backward: upstream gradient shape {:?} does not match output",
            grad_out.shape()
        )));
    }
    let plane_in = id * ih * iw;
    let plane_out = od * oh * ow;
    let k3 = k * k * k;
    let xd = x.data();
    let wdat = w.data();
    let gd = grad_out.data();
    let xrange: Vec<(usize, usize)> = (0..k).map(|kx| valid_range(ow, iw, s, kx, p)).collect();

    // d/dx: one chunk per (sample, input channel).
    let mut gx = vec![0.0; cs.n * cs.cin * plane_in];
    for_each_chunk(&mut gx, plane_in, |chunk, dst| {
        let (ni, ci) = (chunk / cs.cin, chunk % cs.cin);
        for oz in 0..od {
            for oy in 0..oh {
                for co in 0..cs.cout {
                    let gs = ((ni * cs.cout + co) * od + oz) * oh * ow + oy * ow;
                    let grow = &gd[gs..gs + ow];
                    let wbase = (co * cs.cin + ci) * k3;
                    for kz in 0..k {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let rs = (iz as usize * ih + iy as usize) * iw;
                            let drow = &mut dst[rs..rs + iw];
                            for (kx, &(lo, hi)) in xrange.iter().enumerate() {
                                let wv = wdat[wbase + (kz * k + ky) * k + kx];
                                let off = kx as isize - p as isize;
                                for ox in lo..hi {
                                    drow[((ox * s) as isize + off) as usize] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // d/dw: one chunk per output channel.
    let mut gw = vec![0.0; cs.cout * cs.cin * k3];
    for_each_chunk(&mut gw, cs.cin * k3, |co, dst| {
        for ni in 0..cs.n {
            for oz in 0..od {
                for oy in 0..oh {
                    let gs = ((ni * cs.cout + co) * od + oz) * oh * ow + oy * ow;
                    let grow = &gd[gs..gs + ow];
                    for ci in 0..cs.cin {
                        let xbase = (ni * cs.cin + ci) * plane_in;
                        for kz in 0..k {
                            let iz = (oz * s + kz) as isize - p as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let rs = xbase + (iz as usize * ih + iy as usize) * iw;
                                let src = &xd[rs..rs + iw];
                                for (kx, &(lo, hi)) in xrange.iter().enumerate() {
                                    let off = kx as isize - p as isize;
                                    let mut acc = 0.0;
                                    if s == 1 {
                                        let st = (lo as isize + off) as usize;
                                        for (a, b) in grow[lo..hi].iter().zip(&src[st..st + hi - lo]) {
                                            acc += a * b;
                                        }
                                    } else {
                                        for ox in lo..hi {
                                            acc += grow[ox] * src[((ox * s) as isize + off) as usize];
                                        }
                                    }
                                    dst[(ci * k + kz) * k * k + ky * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let gb = channel_sums(grad_out, cs.n, cs.cout, plane_out);
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        gb,
    ))
}

fn channel_sums(t: &Tensor, n: usize, c: usize, plane: usize) -> Tensor {
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let s = (ni * c + ci) * plane;
            *o += t.data()[s..s + plane].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[c], out).expect("length matches")
}

fn check_transpose(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<([usize; 5], usize)> {
    let dims = x.dims5()?;
    let ws = w.shape();
    if ws.len() != 5 || ws[2..] != [2, 2, 2] {
        return Err(Error::Shape(format!(
            "conv_transpose3d weight must be (c_in, c_out, 2, 2, 2), got {ws:?}"
        )));
    }
    if ws[0] != dims[1] {
        return Err(Error::Shape(format!(
            "conv_transpose3d channel axis (dim 1): input has {} channels, weight expects {}",
            dims[1], ws[0]
        )));
    }
    if let Some(b) = b {
        if b.shape() != [ws[1]] {
            return Err(Error::Shape(format!(
                "conv_transpose3d bias must have shape [{}], got {:?}",
                ws[1],
                b.shape()
            )));
        }
    }
    Ok((dims, ws[1]))
}

/// Kernel-2, stride-2 transposed convolution. Weight layout `(c_in, c_out, 2, 2, 2)`.
pub fn conv_transpose3d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([n, cin, d, h, wd], cout) = check_transpose(x, w, Some(b))?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let plane_in = d * h * wd;
    let plane_out = od * oh * ow;
    let mut out = vec![0.0; n * cout * plane_out];
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    for_each_chunk(&mut out, plane_out, |chunk, dst| {
        let (ni, co) = (chunk / cout, chunk % cout);
        dst.fill(bd[co]);
        for z in 0..d {
            for a in 0..2 {
                for y in 0..h {
                    for bb in 0..2 {
                        let rs = ((2 * z + a) * oh + 2 * y + bb) * ow;
                        let row = &mut dst[rs..rs + ow];
                        for ci in 0..cin {
                            let xs = (ni * cin + ci) * plane_in + (z * h + y) * wd;
                            let src = &xd[xs..xs + wd];
                            let wb = ((ci * cout + co) * 2 + a) * 4 + bb * 2;
                            let (w0, w1) = (wdat[wb], wdat[wb + 1]);
                            for (pair, &v) in row.chunks_exact_mut(2).zip(src) {
                                pair[0] += w0 * v;
                                pair[1] += w1 * v;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[n, cout, od, oh, ow], out)
}

pub fn conv_transpose3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ([n, cin, d, h, wd], cout) = check_transpose(x, w, None)?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    if grad_out.shape() != [n, cout, od, oh, ow] {
        return Err(Error::Shape(format!(
            "conv_transpose3d backward: upstream gradient shape {:?} does not match output",
            grad_out.shape()
        )));
    }
    let plane_in = d * h * wd;
    let plane_out = od * oh * ow;
    let xd = x.data();
    let wdat = w.data();
    let gd = grad_out.data();

    let mut gx = vec![0.0; n * cin * plane_in];
    for_each_chunk(&mut gx, plane_in, |chunk, dst| {
        let (ni, ci) = (chunk / cin, chunk % cin);
        for z in 0..d {
            for y in 0..h {
                let row = &mut dst[(z * h + y) * wd..(z * h + y + 1) * wd];
                for co in 0..cout {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let gs = (ni * cout + co) * plane_out + ((2 * z + a) * oh + 2 * y + bb) * ow;
                            let grow = &gd[gs..gs + ow];
                            let wb = ((ci * cout + co) * 2 + a) * 4 + bb * 2;
                            let (w0, w1) = (wdat[wb], wdat[wb + 1]);
                            for (r, pair) in row.iter_mut().zip(grow.chunks_exact(2)) {
                                *r += w0 * pair[0] + w1 * pair[1];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut gw = vec![0.0; cin * cout * 8];
    for_each_chunk(&mut gw, cout * 8, |ci, dst| {
        for ni in 0..n {
            for z in 0..d {
                for y in 0..h {
                    let xs = (ni * cin + ci) * plane_in + (z * h + y) * wd;
                    let src = &xd[xs..xs + wd];
                    for co in 0..cout {
                        for a in 0..2 {
                            for bb in 0..2 {
                                let gs = (ni * cout + co) * plane_out
                                    + ((2 * z + a) * oh + 2 * y + bb) * ow;
                                let grow = &gd[gs..gs + ow];
                                let (mut s0, mut s1) = (0.0, 0.0);
                                for (&v, pair) in src.iter().zip(grow.chunks_exact(2)) {
                                    s0 += v * pair[0];
                                    s1 += v * pair[1];
                                }
                                let wb = (co * 2 + a) * 4 + bb * 2;
                                dst[wb] += s0;
                                dst[wb + 1] += s1;
                            }
                        }
                    }
                }
            }
        }
    });

    let gb = channel_sums(grad_out, n, cout, plane_out);
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        gb,
    ))
}
