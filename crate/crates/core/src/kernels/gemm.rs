//! im2col + GEMM convolution path.
//!
//! Output positions are processed in chunks of whole output rows so the
//! column buffer stays bounded. Must agree with the direct kernels in
//! [`super::conv`] to 1e-12.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::Tensor;

use super::conv::{conv3d_output_dim, ConvGeometry};

/// Upper bound on column-buffer elements per chunk.
const COL_BUDGET: usize = 1 << 21;

struct Layout {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    ind: [usize; 3],
    outd: [usize; 3],
    s: usize,
    p: usize,
}

impl Layout {
    fn kdim(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane_in(&self) -> usize {
        self.ind.iter().product()
    }

    fn plane_out(&self) -> usize {
        self.outd.iter().product()
    }

    /// Output rows `(oz, oy)` per chunk.
    fn rows_per_chunk(&self) -> usize {
        let row = self.kdim() * self.outd[2];
        (COL_BUDGET / row.max(1)).max(1)
    }

    fn new(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<Layout> {
        let [n, cin, d, h, wd] = x.dims5()?;
        let ws = w.shape();
        if ws.len() != 5 || ws[1] != cin {
            return Err(Error::Shape(format!(
                "conv3d channel axis (dim 1): input has {cin} channels, weight shape {ws:?}"
            )));
        }
        let k = ws[2];
        let mut outd = [0; 3];
        for (o, &i) in outd.iter_mut().zip(&[d, h, wd]) {
            *o = conv3d_output_dim(i, k, g.stride, g.padding)
                .ok_or_else(|| Error::Shape("conv3d spatial dims too small".into()))?;
        }
        Ok(Layout {
            n,
            cin,
            cout: ws[0],
            k,
            ind: [d, h, wd],
            outd,
            s: g.stride,
            p: g.padding,
        })
    }
}

/// Fills `col` (kdim x len, row-major) for output rows `[r0, r1)` of sample `xs`.
fn im2col(l: &Layout, xs: &[f64], r0: usize, r1: usize, col: &mut [f64]) {
    let [id, ih, iw] = l.ind;
    let [_, oh, ow] = l.outd;
    let len = (r1 - r0) * ow;
    let k = l.k;
    for ci in 0..l.cin {
        let plane = &xs[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * len..(row + 1) * len];
                    for r in r0..r1 {
                        let (oz, oy) = (r / oh, r % oh);
                        let seg = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                        let iz = (oz * l.s + kz) as isize - l.p as isize;
                        let iy = (oy * l.s + ky) as isize - l.p as isize;
                        if iz < 0 || iy < 0 || iz >= id as isize || iy >= ih as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &plane[(iz as usize * ih + iy as usize) * iw..][..iw];
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * l.s + kx) as isize - l.p as isize;
                            *v = if ix < 0 || ix >= iw as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back onto the input gradient of one sample.
fn col2im(l: &Layout, col: &[f64], r0: usize, r1: usize, gxs: &mut [f64]) {
    let [id, ih, iw] = l.ind;
    let [_, oh, ow] = l.outd;
    let len = (r1 - r0) * ow;
    let k = l.k;
    for ci in 0..l.cin {
        let plane = &mut gxs[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &col[row * len..(row + 1) * len];
                    for r in r0..r1 {
                        let (oz, oy) = (r / oh, r % oh);
                        let iz = (oz * l.s + kz) as isize - l.p as isize;
                        let iy = (oy * l.s + ky) as isize - l.p as isize;
                        if iz < 0 || iy < 0 || iz >= id as isize || iy >= ih as isize {
                            continue;
                        }
                        let dst = &mut plane[(iz as usize * ih + iy as usize) * iw..][..iw];
                        let seg = &src[(r - r0) * ow..(r - r0 + 1) * ow];
                        for (ox, v) in seg.iter().enumerate() {
                            let ix = (ox * l.s + kx) as isize - l.p as isize;
                            if ix >= 0 && ix < iw as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let l = Layout::new(x, w, g)?;
    let (kd, po, pi) = (l.kdim(), l.plane_out(), l.plane_in());
    let rows = l.outd[0] * l.outd[1];
    let step = l.rows_per_chunk();
    let mut out = vec![0.0; l.n * l.cout * po];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for_each_chunk(&mut out, l.cout * po, |ni, dst| {
        for (co, plane) in dst.chunks_mut(po).enumerate() {
            plane.fill(bd[co]);
        }
        let xs = &xd[ni * l.cin * pi..(ni + 1) * l.cin * pi];
        let mut col = vec![0.0; kd * step.min(rows) * l.outd[2]];
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + step).min(rows);
            let len = (r1 - r0) * l.outd[2];
            im2col(&l, xs, r0, r1, &mut col[..kd * len]);
            let off = r0 * l.outd[2];
            gemm(l.cout, kd, len, wd, (kd, 1), &col[..kd * len], (len, 1), 1.0, &mut dst[off..], (po, 1));
            r0 = r1;
        }
    });
    Tensor::from_vec(&[l.n, l.cout, l.outd[0], l.outd[1], l.outd[2]], out)
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let l = Layout::new(x, w, g)?;
    let (kd, po, pi) = (l.kdim(), l.plane_out(), l.plane_in());
    if grad_out.shape() != [l.n, l.cout, l.outd[0], l.outd[1], l.outd[2]] {
        return Err(Error::Shape(format!(
            "conv3d backward: upstream gradient shape {:?} does not match output",
            grad_out.shape()
        )));
    }
    let rows = l.outd[0] * l.outd[1];
    let step = l.rows_per_chunk();
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());

    let mut gx = vec![0.0; l.n * l.cin * pi];
    for_each_chunk(&mut gx, l.cin * pi, |ni, dst| {
        let gs = &gd[ni * l.cout * po..(ni + 1) * l.cout * po];
        let mut col = vec![0.0; kd * step.min(rows) * l.outd[2]];
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + step).min(rows);
            let len = (r1 - r0) * l.outd[2];
            let off = r0 * l.outd[2];
            gemm(kd, l.cout, len, wd, (1, kd), &gs[off..], (po, 1), 0.0, &mut col[..kd * len], (len, 1));
            col2im(&l, &col[..kd * len], r0, r1, dst);
            r0 = r1;
        }
    });

    let mut gw = vec![0.0; l.cout * kd];
    let mut col = vec![0.0; kd * step.min(rows) * l.outd[2]];
    for ni in 0..l.n {
        let xs = &xd[ni * l.cin * pi..(ni + 1) * l.cin * pi];
        let gs = &gd[ni * l.cout * po..(ni + 1) * l.cout * po];
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + step).min(rows);
            let len = (r1 - r0) * l.outd[2];
            im2col(&l, xs, r0, r1, &mut col[..kd * len]);
            let off = r0 * l.outd[2];
            gemm(l.cout, len, kd, &gs[off..], (po, 1), &col[..kd * len], (1, len), 1.0, &mut gw, (kd, 1));
            r0 = r1;
        }
    }

    let mut gb = vec![0.0; l.cout];
    for ni in 0..l.n {
        for (co, s) in gb.iter_mut().enumerate() {
            let o = (ni * l.cout + co) * po;
            *s += gd[o..o + po].iter().sum::<f64>();
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        Tensor::from_vec(&[l.cout], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv::{conv3d_backward_direct, conv3d_forward_direct};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn matches_direct_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(s, p, k, n) in &[(1, 1, 3, 2), (1, 0, 3, 1), (2, 1, 3, 2), (1, 0, 1, 3)] {
            let x = Tensor::randn(&[n, 3, 6, 5, 7], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[4], 1.0, &mut rng);
            let geom = ConvGeometry { stride: s, padding: p };
            let fast = conv3d_forward(&x, &w, &b, geom).unwrap();
            let slow = conv3d_forward_direct(&x, &w, &b, geom).unwrap();
            assert!(max_diff(&fast, &slow) < 1e-12);
            let go = Tensor::randn(fast.shape(), 1.0, &mut rng);
            let (a1, a2, a3) = conv3d_backward(&x, &w, &go, geom).unwrap();
            let (b1, b2, b3) = conv3d_backward_direct(&x, &w, &go, geom).unwrap();
            assert!(max_diff(&a1, &b1) < 1e-12);
            assert!(max_diff(&a2, &b2) < 1e-12);
            assert!(max_diff(&a3, &b3) < 1e-12);
        }
    }
}
