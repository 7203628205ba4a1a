use rayon::prelude::*;

use super::Tensor;
use crate::error::{EmfError, Result};

/// Weights `(C_out, C_in / groups, k_h, k_w)` plus per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    /// Square kernel with "same"-style padding `k div 2`.
    pub fn new(weight: Tensor, bias: Vec<f32>, stride: usize, groups: usize) -> Result<Self> {
        let k = weight.shape().get(2).copied().unwrap_or(1);
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding: k / 2,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, groups: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[c_out, c_in / groups, k, k]),
            bias: vec![0.0; c_out],
            stride,
            padding: k / 2,
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.len() != 4 {
            return Err(EmfError::shape(format!(
                "conv weight must be (C_out, C_in/groups, k_h, k_w), got {s:?}"
            )));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(EmfError::Argument(format!(
                "stride ({}) and groups ({}) must be >= 1",
                self.stride, self.groups
            )));
        }
        if !s[0].is_multiple_of(self.groups) {
            return Err(EmfError::shape(format!(
                "C_out {} not divisible by groups {}",
                s[0], self.groups
            )));
        }
        if self.bias.len() != s[0] {
            return Err(EmfError::shape(format!(
                "bias length {} does not match C_out {}",
                self.bias.len(),
                s[0]
            )));
        }
        Ok(())
    }
}

/// `floor((size + 2 pad - k) / stride) + 1`, or `None` when the kernel does
/// not fit.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

fn check_shapes(input: &Tensor, p: &ConvParams) -> Result<(usize, usize, usize, usize, usize)> {
    p.validate()?;
    let (c, h, w) = input.dims3()?;
    if c != p.in_channels() {
        return Err(EmfError::shape(format!(
            "input {:?} incompatible with weight {:?} (groups {})",
            input.shape(),
            p.weight.shape(),
            p.groups
        )));
    }
    let (kh, kw) = p.kernel();
    match (
        conv_output_size(h, kh, p.stride, p.padding),
        conv_output_size(w, kw, p.stride, p.padding),
    ) {
        (Some(ho), Some(wo)) => Ok((c, h, w, ho, wo)),
        _ => Err(EmfError::shape(format!(
            "kernel {:?} larger than padded input {:?}",
            p.weight.shape(),
            input.shape()
        ))),
    }
}

/// Naive cross-correlation, one output element at a time. Products are
/// accumulated in f64 and rounded once, so the result is close to exact and
/// serves as an oracle for the optimized paths.
pub fn conv2d_reference(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (_, h, w, ho, wo) = check_shapes(input, p)?;
    let c_out = p.out_channels();
    let (kh, kw) = p.kernel();
    let cin_g = p.weight.shape()[1];
    let cout_g = c_out / p.groups;
    let mut out = Tensor::zeros(&[c_out, ho, wo]);
    let x = input.data();
    let wt = p.weight.data();
    for co in 0..c_out {
        let g = co / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = p.bias[co] as f64;
                for ci in 0..cin_g {
                    let cin = g * cin_g + ci;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(cin * h + iy as usize) * w + ix as usize];
                            let wv = wt[((co * cin_g + ci) * kh + ky) * kw + kx];
                            acc += wv as f64 * xv as f64;
                        }
                    }
                }
                out.set3(co, oy, ox, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Production convolution. Depthwise kernels run a direct loop; dense and
/// grouped kernels go through im2col + SGEMM. Results do not depend on the
/// number of threads.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (_, h, w, ho, wo) = check_shapes(input, p)?;
    if p.is_depthwise() && p.weight.shape()[0] == p.groups {
        return Ok(depthwise(input, p, h, w, ho, wo));
    }
    let c_out = p.out_channels();
    let (kh, kw) = p.kernel();
    let cin_g = p.weight.shape()[1];
    let cout_g = c_out / p.groups;
    let k = cin_g * kh * kw;
    let n = ho * wo;
    let mut out = vec![0.0f32; c_out * n];
    let pointwise = kh == 1 && kw == 1 && p.stride == 1 && p.padding == 0;
    for g in 0..p.groups {
        let cols;
        let b: &[f32] = if pointwise {
            &input.data()[g * cin_g * n..(g + 1) * cin_g * n]
        } else {
            cols = im2col(input, g * cin_g, cin_g, p, h, w, ho, wo);
            &cols
        };
        let a = &p.weight.data()[g * cout_g * k..(g + 1) * cout_g * k];
        let c = &mut out[g * cout_g * n..(g + 1) * cout_g * n];
        for (row, chunk) in c.chunks_mut(n).enumerate() {
            chunk.fill(p.bias[g * cout_g + row]);
        }
        gemm_acc(cout_g, k, n, a, b, c);
    }
    Tensor::from_vec(&[c_out, ho, wo], out)
}

const GEMM_ROW_BLOCK: usize = 16;

/// `c += a (m x k) * b (k x n)`, all row-major and contiguous.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let run = |rows: usize, a_blk: &[f32], c_blk: &mut [f32]| {
        // SAFETY: pointers and strides describe the row-major buffers
        // checked above; `c_blk` is exclusively borrowed.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a_blk.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    // every block repacks b, so split no finer than the thread count
    let threads = rayon::current_num_threads();
    let work = m * k * n;
    if threads == 1 || work < 1 << 16 || m <= GEMM_ROW_BLOCK {
        run(m, a, c);
        return;
    }
    let rows = m.div_ceil(threads).max(GEMM_ROW_BLOCK);
    c.par_chunks_mut(rows * n)
        .zip(a.par_chunks(rows * k))
        .for_each(|(c_blk, a_blk)| run(c_blk.len() / n, a_blk, c_blk));
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &Tensor,
    c0: usize,
    cin: usize,
    p: &ConvParams,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let (kh, kw) = p.kernel();
    let n = ho * wo;
    let mut cols = vec![0.0f32; cin * kh * kw * n];
    let x = input.data();
    // output columns whose tap kx lands inside the row
    let valid: Vec<(usize, usize)> = (0..kw)
        .map(|kx| {
            let pad = p.padding as isize;
            let lo = ceil_div_nonneg(pad - kx as isize, p.stride as isize);
            let hi = ceil_div_nonneg(w as isize + pad - kx as isize, p.stride as isize).min(wo);
            (lo, hi)
        })
        .collect();
    cols.par_chunks_mut(kh * kw * n)
        .enumerate()
        .for_each(|(ci, block)| {
            let plane = &x[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut block[(ky * kw + kx) * n..(ky * kw + kx + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        let (lo, hi) = valid[kx];
                        if lo >= hi {
                            continue;
                        }
                        let ix0 = lo * p.stride + kx - p.padding;
                        if p.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (d, &v) in dst[lo..hi]
                                .iter_mut()
                                .zip(src[ix0..].iter().step_by(p.stride))
                            {
                                *d = v;
                            }
                        }
                    }
                }
            }
        });
    cols
}

/// Per-channel direct convolution. Taps are accumulated in the same
/// row-major kernel order as [`conv2d_reference`], so outputs agree bit for
/// bit.
const LANES: usize = 8;

fn depthwise(input: &Tensor, p: &ConvParams, h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
    let c = p.groups;
    let (kh, kw) = p.kernel();
    let s = p.stride;
    let pad = p.padding as isize;
    let x = input.data();
    let wt = p.weight.data();
    let pw = w.div_ceil(s);
    // per kx: valid output columns [lo, hi) with 0 <= ox*s + kx - pad < w, and
    // the position of column lo*s + kx - pad within the phase-split row:
    // column ox*s + kx - pad lies in phase (kx - pad) mod s at index
    // ox + floor((kx - pad) / s)
    let taps: Vec<(usize, usize, usize)> = (0..kw)
        .map(|kx| {
            let lo = ceil_div_nonneg(pad - kx as isize, s as isize);
            let hi = ceil_div_nonneg(w as isize + pad - kx as isize, s as isize).min(wo);
            let off = kx as isize - pad;
            let (phase, dj) = (off.rem_euclid(s as isize), off.div_euclid(s as isize));
            (
                lo,
                hi.max(lo),
                (phase * pw as isize + dj + lo as isize) as usize,
            )
        })
        .collect();
    // columns where every kx is valid
    let inner = (
        taps.iter().map(|t| t.0).max().unwrap_or(0),
        taps.iter().map(|t| t.1).min().unwrap_or(0),
    );
    let mut out = vec![0.0f32; c * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(ch, o)| {
        o.fill(p.bias[ch]);
        let plane = phase_split(&x[ch * h * w..(ch + 1) * h * w], h, w, s);
        let kern = &wt[ch * kh * kw..(ch + 1) * kh * kw];
        for (oy, dst) in o.chunks_exact_mut(wo).enumerate() {
            let rows: Vec<(usize, &[f32])> = (0..kh)
                .filter_map(|ky| {
                    let iy = (oy * s + ky) as isize - pad;
                    (0..h as isize).contains(&iy).then(|| {
                        let iy = iy as usize;
                        (ky, &plane[iy * s * pw..(iy + 1) * s * pw])
                    })
                })
                .collect();
            let tap = |ox: usize, acc: &mut f32| {
                for &(ky, row) in &rows {
                    for (kx, &(lo, hi, base)) in taps.iter().enumerate() {
                        if (lo..hi).contains(&ox) {
                            *acc += kern[ky * kw + kx] * row[base + ox - lo];
                        }
                    }
                }
            };
            let mut ox = 0;
            while ox < wo {
                if ox >= inner.0 && ox + LANES <= inner.1 {
                    let mut acc = [0.0f32; LANES];
                    acc.copy_from_slice(&dst[ox..ox + LANES]);
                    for &(ky, row) in &rows {
                        for (kx, &(lo, _, base)) in taps.iter().enumerate() {
                            let wv = kern[ky * kw + kx];
                            let j = base + ox - lo;
                            let src = &row[j..j + LANES];
                            for (a, &v) in acc.iter_mut().zip(src) {
                                *a += wv * v;
                            }
                        }
                    }
                    dst[ox..ox + LANES].copy_from_slice(&acc);
                    ox += LANES;
                } else {
                    tap(ox, &mut dst[ox]);
                    ox += 1;
                }
            }
        }
    });
    Tensor::from_vec(&[c, ho, wo], out).expect("depthwise output shape")
}

/// Rearranges each row of an `h x w` plane into `s` column phases of
/// `ceil(w / s)` entries: phase `p` holds columns `p, p + s, p + 2s, ...`.
/// Strided taps then read contiguous memory.
fn phase_split(plane: &[f32], h: usize, w: usize, s: usize) -> std::borrow::Cow<'_, [f32]> {
    if s == 1 {
        return std::borrow::Cow::Borrowed(plane);
    }
    let pw = w.div_ceil(s);
    let mut out = vec![0.0f32; h * s * pw];
    for (row, dst) in plane.chunks_exact(w).zip(out.chunks_exact_mut(s * pw)) {
        for (ph, d) in dst.chunks_exact_mut(pw).enumerate() {
            for (o, &v) in d.iter_mut().zip(row[ph..].iter().step_by(s)) {
                *o = v;
            }
        }
    }
    std::borrow::Cow::Owned(out)
}

/// Smallest `q >= 0` with `q * d >= n`.
fn ceil_div_nonneg(n: isize, d: isize) -> usize {
    if n <= 0 {
        0
    } else {
        ((n + d - 1) / d) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_depthwise_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 5, 6], 1.0);
        let p = ConvParams::new(Tensor::full(&[3, 1, 1, 1], 1.0), vec![0.0; 3], 1, 3).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let p = ConvParams::new(Tensor::full(&[1, 1, 3, 3], 1.0), vec![0.0], 1, 1).unwrap();
        for out in [conv2d(&x, &p).unwrap(), conv2d_reference(&x, &p).unwrap()] {
            assert_eq!(out.shape(), &[1, 5, 5]);
            assert_eq!(out.at3(0, 2, 2), 9.0);
            assert_eq!(out.at3(0, 0, 0), 4.0);
            assert_eq!(out.at3(0, 4, 4), 4.0);
            assert_eq!(out.at3(0, 0, 2), 6.0);
        }
    }

    #[test]
    fn output_size_rule() {
        assert_eq!(conv_output_size(240, 7, 2, 3), Some(120));
        assert_eq!(conv_output_size(19, 7, 2, 3), Some(10));
        assert_eq!(conv_output_size(2, 7, 1, 0), None);
    }

    #[test]
    fn mismatched_channels_name_both_shapes() {
        let x = Tensor::zeros(&[4, 8, 8]);
        let p = ConvParams::zeros(2, 3, 3, 1, 1);
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(
            err.contains("[4, 8, 8]") && err.contains("[2, 3, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn depthwise_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, s) in &[(3, 1), (7, 1), (7, 2), (3, 2), (1, 1), (5, 3)] {
            for &(h, w) in &[(11, 13), (2, 2), (23, 40)] {
                let x = random(&mut rng, &[4, h, w], 1.0);
                let p = ConvParams::new(random(&mut rng, &[4, 1, k, k], 0.5), vec![0.1; 4], s, 4)
                    .unwrap();
                let d = conv2d(&x, &p)
                    .unwrap()
                    .max_abs_diff(&conv2d_reference(&x, &p).unwrap())
                    .unwrap();
                assert!(d < 1e-6, "k={k} s={s} {h}x{w}: {d}");
            }
        }
    }

    #[test]
    fn grouped_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[4, 9, 7], 1.0);
        let p = ConvParams::new(random(&mut rng, &[6, 2, 3, 3], 0.5), vec![0.2; 6], 2, 2).unwrap();
        let d = conv2d(&x, &p)
            .unwrap()
            .max_abs_diff(&conv2d_reference(&x, &p).unwrap())
            .unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn large_gemm_is_thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[48, 20, 20], 1.0);
        let p =
            ConvParams::new(random(&mut rng, &[64, 48, 1, 1], 0.2), vec![0.0; 64], 1, 1).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| conv2d(&x, &p).unwrap())
        };
        assert_eq!(run(1), run(3));
    }
}
