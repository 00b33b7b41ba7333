//! Convolutions via im2col plus the matmul kernels. "Same"-length dilated
//! variants use left (causal) zero padding of d*(K-1), which is what the
//! temporal stacks rely on.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{record, Var};

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    /// top, bottom, left, right zero padding
    pub pad: (usize, usize, usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            pad: (0, 0, 0, 0),
            dilation: (1, 1),
        }
    }
}

impl Conv2dSpec {
    /// Symmetric padding with a given stride, the usual CNN layer setup.
    pub fn strided(stride: usize, pad: usize) -> Self {
        Conv2dSpec {
            stride: (stride, stride),
            pad: (pad, pad, pad, pad),
            dilation: (1, 1),
        }
    }

    pub fn out_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let span_h = self.dilation.0 * (kh - 1) + 1;
        let span_w = self.dilation.1 * (kw - 1) + 1;
        let ph = h + self.pad.0 + self.pad.1;
        let pw = w + self.pad.2 + self.pad.3;
        if ph < span_h || pw < span_w {
            return None;
        }
        Some(((ph - span_h) / self.stride.0 + 1, (pw - span_w) / self.stride.1 + 1))
    }
}

/// out[m,n] += a[m,k] * b[k,n]  (duplicated small kernel; conv keeps its own
/// raw buffers rather than round-tripping Arrays)
fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            if aip == T::ZERO {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

struct ColPlan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl ColPlan {
    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn cols(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Source pixel for (output position, kernel tap); None when in padding.
    fn src(&self, ohi: usize, owi: usize, khi: usize, kwi: usize) -> Option<(usize, usize)> {
        let ih = (ohi * self.spec.stride.0 + khi * self.spec.dilation.0) as isize - self.spec.pad.0 as isize;
        let iw = (owi * self.spec.stride.1 + kwi * self.spec.dilation.1) as isize - self.spec.pad.2 as isize;
        if ih < 0 || iw < 0 || ih >= self.h as isize || iw >= self.w as isize {
            None
        } else {
            Some((ih as usize, iw as usize))
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut col = vec![T::ZERO; self.rows() * self.cols()];
        let cols = self.cols();
        for ni in 0..self.n {
            let xim = &x[ni * self.cin * self.h * self.w..];
            for ohi in 0..self.oh {
                for owi in 0..self.ow {
                    let row = ((ni * self.oh + ohi) * self.ow + owi) * cols;
                    for ci in 0..self.cin {
                        for khi in 0..self.kh {
                            for kwi in 0..self.kw {
                                if let Some((ih, iw)) = self.src(ohi, owi, khi, kwi) {
                                    col[row + (ci * self.kh + khi) * self.kw + kwi] =
                                        xim[(ci * self.h + ih) * self.w + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, dcol: &[T]) -> Vec<T> {
        let mut dx = vec![T::ZERO; self.n * self.cin * self.h * self.w];
        let cols = self.cols();
        for ni in 0..self.n {
            let base = ni * self.cin * self.h * self.w;
            for ohi in 0..self.oh {
                for owi in 0..self.ow {
                    let row = ((ni * self.oh + ohi) * self.ow + owi) * cols;
                    for ci in 0..self.cin {
                        for khi in 0..self.kh {
                            for kwi in 0..self.kw {
                                if let Some((ih, iw)) = self.src(ohi, owi, khi, kwi) {
                                    let idx = base + (ci * self.h + ih) * self.w + iw;
                                    dx[idx] = dx[idx] + dcol[row + (ci * self.kh + khi) * self.kw + kwi];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2D cross-correlation. x: [N, Cin, H, W], w: [Cout, Cin, KH, KW], b: [Cout].
pub fn conv2d<T: Scalar>(x: &Var<T>, w: &Var<T>, b: &Var<T>, spec: Conv2dSpec) -> Result<Var<T>> {
    let (n, cin, h, wdt) = match x.shape() {
        [a, b2, c, d] => (*a, *b2, *c, *d),
        s => {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: s.to_vec(),
                msg: "input must be [N, C, H, W]".into(),
            })
        }
    };
    let (cout, cin2, kh, kw) = match w.shape() {
        [a, b2, c, d] => (*a, *b2, *c, *d),
        s => {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: s.to_vec(),
                msg: "kernel must be [Cout, Cin, KH, KW]".into(),
            })
        }
    };
    if cin != cin2 || b.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let Some((oh, ow)) = spec.out_dims(h, wdt, kh, kw) else {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            msg: format!("kernel {kh}x{kw} (dilation {:?}) larger than padded input", spec.dilation),
        });
    };
    let plan = ColPlan {
        n,
        cin,
        h,
        w: wdt,
        kh,
        kw,
        oh,
        ow,
        spec,
    };

    let col = plan.im2col(x.value().data());
    // weight as [K, Cout] so out rows are (n, oh, ow) x cout
    let cols = plan.cols();
    let mut wmat = vec![T::ZERO; cols * cout];
    for co in 0..cout {
        for kk in 0..cols {
            wmat[kk * cout + co] = w.value().data()[co * cols + kk];
        }
    }
    let rows = plan.rows();
    let mut out_mat = vec![T::ZERO; rows * cout];
    mm_nn(&col, &wmat, &mut out_mat, rows, cols, cout);

    // scatter [rows, cout] -> [N, Cout, OH, OW], adding bias
    let mut out = vec![T::ZERO; n * cout * oh * ow];
    for ni in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                let r = ((ni * oh + ohi) * ow + owi) * cout;
                for co in 0..cout {
                    out[((ni * cout + co) * oh + ohi) * ow + owi] =
                        out_mat[r + co] + b.value().data()[co];
                }
            }
        }
    }
    let out = Array::from_vec(vec![n, cout, oh, ow], out)?;

    let wv = w.value().clone();
    record(&[x, w, b], out, move |g| {
        // gather g back to [rows, cout]
        let mut gmat = vec![T::ZERO; rows * cout];
        let mut db = vec![T::ZERO; cout];
        for ni in 0..n {
            for co in 0..cout {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let gv = g.data()[((ni * cout + co) * oh + ohi) * ow + owi];
                        gmat[((ni * oh + ohi) * ow + owi) * cout + co] = gv;
                        db[co] = db[co] + gv;
                    }
                }
            }
        }
        // dW: col^T [cols, rows] * gmat [rows, cout] -> [cols, cout] -> [Cout, cols]
        let mut dw_mat = vec![T::ZERO; cols * cout];
        mm_tn(&col, &gmat, &mut dw_mat, cols, rows, cout);
        let mut dw = vec![T::ZERO; cout * cols];
        for co in 0..cout {
            for kk in 0..cols {
                dw[co * cols + kk] = dw_mat[kk * cout + co];
            }
        }
        // dcol = gmat [rows, cout] * wmat^T: wmat is [cols, cout] so nt works
        let mut dcol = vec![T::ZERO; rows * cols];
        mm_nt(&gmat, &wmat, &mut dcol, rows, cout, cols);
        let dx = plan.col2im(&dcol);
        vec![
            Array::from_vec(vec![n, cin, h, plan.w], dx).expect("conv dx"),
            Array::from_vec(wv.shape().to_vec(), dw).expect("conv dw"),
            Array::from_vec(vec![cout], db).expect("conv db"),
        ]
    })
}

/// 1D cross-correlation by viewing the sequence as a 1-row image.
/// x: [N, Cin, L], w: [Cout, Cin, K], b: [Cout].
pub fn conv1d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    b: &Var<T>,
    pad: (usize, usize),
    dilation: usize,
) -> Result<Var<T>> {
    let (n, cin, l) = match x.shape() {
        [a, b2, c] => (*a, *b2, *c),
        s => {
            return Err(Error::BadShape {
                op: "conv1d",
                shape: s.to_vec(),
                msg: "input must be [N, C, L]".into(),
            })
        }
    };
    let (cout, cin2, k) = match w.shape() {
        [a, b2, c] => (*a, *b2, *c),
        s => {
            return Err(Error::BadShape {
                op: "conv1d",
                shape: s.to_vec(),
                msg: "kernel must be [Cout, Cin, K]".into(),
            })
        }
    };
    let x4 = x.reshape(&[n, cin, 1, l])?;
    let w4 = w.reshape(&[cout, cin2, 1, k])?;
    let spec = Conv2dSpec {
        stride: (1, 1),
        pad: (0, 0, pad.0, pad.1),
        dilation: (1, dilation),
    };
    let out = conv2d(&x4, &w4, b, spec)?;
    let lo = out.shape()[3];
    out.reshape(&[n, cout, lo])
}

/// Length-preserving dilated 1D conv with causal (left) zero padding.
pub fn dilated_conv1d_same<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    b: &Var<T>,
    dilation: usize,
) -> Result<Var<T>> {
    if dilation == 0 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    let k = w.shape().last().copied().unwrap_or(0);
    conv1d(x, w, b, (dilation * (k.saturating_sub(1)), 0), dilation)
}

/// Shape-preserving dilated 2D conv with causal (top-left) zero padding.
pub fn dilated_conv2d_same<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    b: &Var<T>,
    dilation: usize,
) -> Result<Var<T>> {
    if dilation == 0 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    let (kh, kw) = match w.shape() {
        [_, _, a, b2] => (*a, *b2),
        s => {
            return Err(Error::BadShape {
                op: "dilated_conv2d_same",
                shape: s.to_vec(),
                msg: "kernel must be [Cout, Cin, KH, KW]".into(),
            })
        }
    };
    let spec = Conv2dSpec {
        stride: (1, 1),
        pad: (dilation * (kh - 1), 0, dilation * (kw - 1), 0),
        dilation: (dilation, dilation),
    };
    conv2d(x, w, b, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tape::Tape;

    fn v(shape: &[usize], data: Vec<f64>) -> Var<f64> {
        Var::constant(Array::from_vec(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn single_tap_kernel_is_identity_any_dilation() {
        let x = v(&[1, 1, 4], vec![1., 2., 3., 4.]);
        let w = v(&[1, 1, 1], vec![1.0]);
        let b = v(&[1], vec![0.0]);
        for d in [1, 2, 5] {
            let out = dilated_conv1d_same(&x, &w, &b, d).unwrap();
            assert_eq!(out.value().data(), &[1., 2., 3., 4.], "dilation {d}");
        }
    }

    #[test]
    fn two_tap_dilated_kernel_shifts_by_two() {
        // kernel [1, 0], dilation 2, causal padding: out[t] = x[t-2]
        let x = v(&[1, 1, 4], vec![10., 20., 30., 40.]);
        let w = v(&[1, 1, 2], vec![1.0, 0.0]);
        let b = v(&[1], vec![0.0]);
        let out = dilated_conv1d_same(&x, &w, &b, 2).unwrap();
        assert_eq!(out.value().data(), &[0., 0., 10., 20.]);
    }

    #[test]
    fn conv1d_matches_sliding_window_oracle() {
        let mut rng = RngStream::new(9, 2);
        let l = 7;
        let k = 3;
        let d = 2;
        let xv: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
        let wv: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let out = dilated_conv1d_same(
            &v(&[1, 1, l], xv.clone()),
            &v(&[1, 1, k], wv.clone()),
            &v(&[1], vec![0.0]),
            d,
        )
        .unwrap();
        let pad = d * (k - 1);
        for t in 0..l {
            let mut acc = 0.0;
            for ki in 0..k {
                let src = t as isize + (ki * d) as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    acc += xv[src as usize] * wv[ki];
                }
            }
            assert!((out.value().data()[t] - acc).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn one_by_one_2d_kernel_scales_elementwise() {
        let x = v(&[1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let w = v(&[1, 1, 1, 1], vec![2.5]);
        let b = v(&[1], vec![0.0]);
        let out = dilated_conv2d_same(&x, &w, &b, 1).unwrap();
        assert_eq!(out.value().data(), &[2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn oversized_kernel_is_dimension_error() {
        let x = v(&[1, 1, 2, 2], vec![0.; 4]);
        let w = v(&[1, 1, 5, 5], vec![0.; 25]);
        let b = v(&[1], vec![0.0]);
        assert!(conv2d(&x, &w, &b, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn strided_output_dims_follow_formula() {
        // 64 -> (64 + 2 - 4)/2 + 1 = 32 for k=4, s=2, p=1
        let spec = Conv2dSpec::strided(2, 1);
        assert_eq!(spec.out_dims(64, 64, 4, 4), Some((32, 32)));
        // k=3, s=2, p=1: (64 + 2 - 3)/2 + 1 = 32
        assert_eq!(spec.out_dims(64, 64, 3, 3), Some((32, 32)));
    }

    #[test]
    fn conv2d_gradients_match_finite_difference() {
        let mut rng = RngStream::new(4, 4);
        let tape = Tape::new();
        let xv = Array::<f64>::from_fn(&[1, 2, 3, 3], |_| rng.normal());
        let wv = Array::<f64>::from_fn(&[2, 2, 2, 2], |_| rng.normal());
        let bv = Array::<f64>::from_fn(&[2], |_| rng.normal());
        let x = tape.leaf(xv.clone());
        let w = tape.leaf(wv.clone());
        let b = tape.leaf(bv.clone());
        let spec = Conv2dSpec::strided(1, 1);
        let loss = conv2d(&x, &w, &b, spec).unwrap().square().unwrap().sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();

        let f = |xa: &Array<f64>, wa: &Array<f64>, ba: &Array<f64>| -> f64 {
            conv2d(
                &Var::constant(xa.clone()),
                &Var::constant(wa.clone()),
                &Var::constant(ba.clone()),
                spec,
            )
            .unwrap()
            .square()
            .unwrap()
            .sum_all()
            .unwrap()
            .value()
            .first()
        };
        let h = 1e-5;
        for (arr, var, label) in [(&xv, &x, "x"), (&wv, &w, "w"), (&bv, &b, "b")] {
            let g = grads.get_or_zeros(var);
            for i in (0..arr.len()).step_by(3) {
                let mut plus = arr.data().to_vec();
                plus[i] += h;
                let mut minus = arr.data().to_vec();
                minus[i] -= h;
                let ap = Array::from_vec(arr.shape().to_vec(), plus).unwrap();
                let am = Array::from_vec(arr.shape().to_vec(), minus).unwrap();
                let num = match label {
                    "x" => (f(&ap, &wv, &bv) - f(&am, &wv, &bv)) / (2.0 * h),
                    "w" => (f(&xv, &ap, &bv) - f(&xv, &am, &bv)) / (2.0 * h),
                    _ => (f(&xv, &wv, &ap) - f(&xv, &wv, &am)) / (2.0 * h),
                };
                let ana = g.data()[i];
                assert!(
                    (ana - num).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1.0),
                    "{label}[{i}] analytic {ana} vs numeric {num}"
                );
            }
        }
    }
}
