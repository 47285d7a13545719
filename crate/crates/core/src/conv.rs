//! Convolution kernels over C×Q×N feature maps.
//!
//! Kernels are laid out `C_out×C_in×kh×kw` for both the regular and the
//! transposed convolution. Every kernel takes explicit active input/output
//! channel lists so the same loop nest serves the dense path (all channels)
//! and the skip path (only gated-in channels). Both lower to one
//! matrix product over gathered windows; each call returns the number of
//! multiply-accumulates in that product, padded taps included.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Kernel size, stride, zero padding and (transposed only) output padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oph: usize,
    pub opw: usize,
}

impl ConvGeom {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oph: 0,
            opw: 0,
        }
    }

    pub fn with_output_pad(mut self, oph: usize, opw: usize) -> Self {
        self.oph = oph;
        self.opw = opw;
        self
    }

    /// 1×1 kernel, unit stride, no padding.
    pub fn pointwise() -> Self {
        Self::new((1, 1), (1, 1), (0, 0))
    }

    fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.sh == 0 || self.sw == 0 {
            return Err(Error::Invalid(format!(
                "degenerate convolution geometry {self:?}"
            )));
        }
        Ok(())
    }

    /// Output spatial size of the forward convolution.
    pub fn conv_out(&self, q: usize, n: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (qp, np) = (q + 2 * self.ph, n + 2 * self.pw);
        if self.kh > qp || self.kw > np {
            return Err(Error::InvalidShape {
                shape: vec![q, n],
                reason: format!(
                    "kernel {}×{} larger than padded input {qp}×{np}",
                    self.kh, self.kw
                ),
            });
        }
        Ok(((qp - self.kh) / self.sh + 1, (np - self.kw) / self.sw + 1))
    }

    /// Output spatial size of the transposed convolution.
    pub fn transpose_out(&self, q: usize, n: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let qf = (q - 1) * self.sh + self.kh + self.oph;
        let nf = (n - 1) * self.sw + self.kw + self.opw;
        if qf <= 2 * self.ph || nf <= 2 * self.pw {
            return Err(Error::InvalidShape {
                shape: vec![q, n],
                reason: "transposed convolution output would be empty".into(),
            });
        }
        Ok((qf - 2 * self.ph, nf - 2 * self.pw))
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }
}

/// Input/kernel sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub q: usize,
    pub n: usize,
}

fn check_kernel(dims: ConvDims, geom: &ConvGeom, kernel_len: usize) -> Result<()> {
    let want = dims.c_out * dims.c_in * geom.taps();
    if kernel_len != want {
        return Err(Error::shape(
            "conv kernel",
            &[kernel_len],
            &[dims.c_out, dims.c_in, geom.kh, geom.kw],
        ));
    }
    Ok(())
}

/// `c += a·b` for an `m×k` by `k×n` product given as (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let extent =
        |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(extent(m, k, rsa, csa) <= a.len());
    assert!(extent(k, n, rsb, csb) <= b.len());
    assert!(extent(m, n, rsc, csc) <= c.len());
    // SAFETY: the asserts above bound every index the product touches.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            (rsa as isize, csa as isize),
            b.as_ptr(),
            (rsb as isize, csb as isize),
            T::one(),
            c.as_mut_ptr(),
            (rsc as isize, csc as isize),
        );
    }
}

/// Output indices `j < len_out` for which `j·stride + k − pad` lands in `0..len_in`.
fn valid_range(
    len_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    len_in: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len_in + pad > k {
        (len_in + pad - k).div_ceil(stride).min(len_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Walks every (window row, window position, map index) triple shared by
/// [`im2col`] and [`col2im`]. Window `(i, j)` of tap `(kq, kn)` reads map
/// position `(i·sh + kq − ph, j·sw + kn − pw)`.
#[allow(clippy::too_many_arguments)]
fn for_windows(
    chans: &[usize],
    (q, n): (usize, usize),
    geom: &ConvGeom,
    (qo, no): (usize, usize),
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let p = qo * no;
    for (k, &ch) in chans.iter().enumerate() {
        for kq in 0..geom.kh {
            let (ilo, ihi) = valid_range(qo, kq, geom.sh, geom.ph, q);
            for kn in 0..geom.kw {
                let (jlo, jhi) = valid_range(no, kn, geom.sw, geom.pw, n);
                if jlo >= jhi {
                    continue;
                }
                let row = ((k * geom.kh + kq) * geom.kw + kn) * p;
                for i in ilo..ihi {
                    let r = i * geom.sh + kq - geom.ph;
                    let src = (ch * q + r) * n + jlo * geom.sw + kn - geom.pw;
                    f(row + i * no + jlo, src, jhi - jlo, geom.sw);
                }
            }
        }
    }
}

/// Gathers the `kh×kw` windows of the listed channels of a `C×q×n` map into
/// a `(|chans|·kh·kw)×(qo·no)` matrix, zeros outside the map.
fn im2col<T: Real>(
    src: &[T],
    chans: &[usize],
    qn: (usize, usize),
    geom: &ConvGeom,
    out: (usize, usize),
) -> Vec<T> {
    let mut cols = vec![T::zero(); chans.len() * geom.taps() * out.0 * out.1];
    for_windows(chans, qn, geom, out, |d, s, len, stride| {
        if stride == 1 {
            cols[d..d + len].copy_from_slice(&src[s..s + len]);
        } else {
            for (j, c) in cols[d..d + len].iter_mut().enumerate() {
                *c = src[s + j * stride];
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: adds each window entry back onto its map position.
fn col2im<T: Real>(
    cols: &[T],
    chans: &[usize],
    qn: (usize, usize),
    geom: &ConvGeom,
    out: (usize, usize),
    dst: &mut [T],
) {
    for_windows(chans, qn, geom, out, |d, s, len, stride| {
        for (j, &c) in cols[d..d + len].iter().enumerate() {
            dst[s + j * stride] += c;
        }
    });
}

/// Cross-correlation. `out` must hold `c_out×qo×no` values and is
/// accumulated into; inactive output channels are left untouched.
pub fn conv2d_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    dims: ConvDims,
    geom: &ConvGeom,
    active_in: &[usize],
    active_out: &[usize],
    out: &mut [T],
) -> Result<u64> {
    check_kernel(dims, geom, kernel.len())?;
    let (qo, no) = geom.conv_out(dims.q, dims.n)?;
    let (p, taps) = (qo * no, geom.taps());
    let kk = active_in.len() * taps;
    let cols = im2col(input, active_in, (dims.q, dims.n), geom, (qo, no));
    let mut w = Vec::with_capacity(active_out.len() * kk);
    for &co in active_out {
        for &ci in active_in {
            let b = (co * dims.c_in + ci) * taps;
            w.extend_from_slice(&kernel[b..b + taps]);
        }
    }
    let mut acc = vec![T::zero(); active_out.len() * p];
    gemm(
        (active_out.len(), kk, p),
        &w,
        (kk, 1),
        &cols,
        (p, 1),
        &mut acc,
        (p, 1),
    );
    for (ko, &co) in active_out.iter().enumerate() {
        for (o, &a) in out[co * p..(co + 1) * p]
            .iter_mut()
            .zip(&acc[ko * p..(ko + 1) * p])
        {
            *o += a;
        }
    }
    Ok((active_out.len() * kk * p) as u64)
}

/// Gradients of [`conv2d_forward`] (all channels) w.r.t. input and kernel.
pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    dims: ConvDims,
    geom: &ConvGeom,
    grad_out: &[T],
    grad_input: &mut [T],
    grad_kernel: &mut [T],
) -> Result<()> {
    check_kernel(dims, geom, kernel.len())?;
    let (qo, no) = geom.conv_out(dims.q, dims.n)?;
    let p = qo * no;
    let kk = dims.c_in * geom.taps();
    let all_in: Vec<usize> = (0..dims.c_in).collect();
    let cols = im2col(input, &all_in, (dims.q, dims.n), geom, (qo, no));
    gemm(
        (dims.c_out, p, kk),
        grad_out,
        (p, 1),
        &cols,
        (1, p),
        grad_kernel,
        (kk, 1),
    );
    let mut gcols = vec![T::zero(); kk * p];
    gemm(
        (kk, dims.c_out, p),
        kernel,
        (1, kk),
        grad_out,
        (p, 1),
        &mut gcols,
        (p, 1),
    );
    col2im(
        &gcols,
        &all_in,
        (dims.q, dims.n),
        geom,
        (qo, no),
        grad_input,
    );
    Ok(())
}

/// Transposed convolution (scatter form): each input position is spread
/// over a `kh×kw` window of the stride-dilated output, which is then cropped
/// by the padding. `out` holds `c_out×qo×no` values and is accumulated into.
pub fn conv2d_transpose_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    dims: ConvDims,
    geom: &ConvGeom,
    active_in: &[usize],
    active_out: &[usize],
    out: &mut [T],
) -> Result<u64> {
    check_kernel(dims, geom, kernel.len())?;
    let (qo, no) = geom.transpose_out(dims.q, dims.n)?;
    let (p, taps, kin) = (dims.q * dims.n, geom.taps(), active_in.len());
    let mut x = Vec::with_capacity(kin * p);
    for &ci in active_in {
        x.extend_from_slice(&input[ci * p..(ci + 1) * p]);
    }
    let rows = active_out.len() * taps;
    let mut w = vec![T::zero(); rows * kin];
    for (ko, &co) in active_out.iter().enumerate() {
        for (k, &ci) in active_in.iter().enumerate() {
            let b = (co * dims.c_in + ci) * taps;
            for t in 0..taps {
                w[(ko * taps + t) * kin + k] = kernel[b + t];
            }
        }
    }
    let mut cols = vec![T::zero(); rows * p];
    gemm((rows, kin, p), &w, (kin, 1), &x, (p, 1), &mut cols, (p, 1));
    col2im(&cols, active_out, (qo, no), geom, (dims.q, dims.n), out);
    Ok((rows * kin * p) as u64)
}

/// Gradients of [`conv2d_transpose_forward`] (all channels).
pub fn conv2d_transpose_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    dims: ConvDims,
    geom: &ConvGeom,
    grad_out: &[T],
    grad_input: &mut [T],
    grad_kernel: &mut [T],
) -> Result<()> {
    check_kernel(dims, geom, kernel.len())?;
    let (qo, no) = geom.transpose_out(dims.q, dims.n)?;
    let (p, taps) = (dims.q * dims.n, geom.taps());
    let rows = dims.c_out * taps;
    let all_out: Vec<usize> = (0..dims.c_out).collect();
    let gcols = im2col(grad_out, &all_out, (qo, no), geom, (dims.q, dims.n));
    let mut wt = vec![T::zero(); dims.c_in * rows];
    for co in 0..dims.c_out {
        for ci in 0..dims.c_in {
            let b = (co * dims.c_in + ci) * taps;
            for t in 0..taps {
                wt[ci * rows + co * taps + t] = kernel[b + t];
            }
        }
    }
    gemm(
        (dims.c_in, rows, p),
        &wt,
        (rows, 1),
        &gcols,
        (p, 1),
        grad_input,
        (p, 1),
    );
    let mut gw = vec![T::zero(); rows * dims.c_in];
    gemm(
        (rows, p, dims.c_in),
        &gcols,
        (p, 1),
        input,
        (1, p),
        &mut gw,
        (dims.c_in, 1),
    );
    for co in 0..dims.c_out {
        for ci in 0..dims.c_in {
            let b = (co * dims.c_in + ci) * taps;
            for t in 0..taps {
                grad_kernel[b + t] += gw[(co * taps + t) * dims.c_in + ci];
            }
        }
    }
    Ok(())
}
