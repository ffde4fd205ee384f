//! 2-d convolution over NCHW tensors, im2col + matmul with a direct-loop
//! reference kernel kept alongside for oracle testing.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, TapeOp};
use crate::tensor::{Element, Tensor};
use rayon::prelude::*;

pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - kernel) / stride + 1
}

struct Conv2d {
    stride: usize,
    padding: usize,
}

/// `input` NCHW, `weight` [out_ch, in_ch, kh, kw]; no bias (batchnorm
/// supplies the affine term everywhere this engine uses convolutions).
pub fn conv2d<T: Element>(
    tape: &mut Tape<T>,
    input: NodeId,
    weight: NodeId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let value = conv2d_forward(tape.value(input), tape.value(weight), stride, padding)?;
    Ok(tape.push(
        Box::new(Conv2d { stride, padding }),
        vec![input, weight],
        value,
        None,
    ))
}

fn check_shapes<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, width) = x.dims4()?;
    let &[oc, wc, kh, kw] = w.shape() else {
        return Err(Error::InvalidArgument(format!(
            "conv2d weight must be 4-d [out, in, kh, kw], got {:?}",
            w.shape()
        )));
    };
    if wc != c {
        return Err(Error::shape("conv2d input channels", w.shape(), x.shape()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || width + 2 * padding < kw {
        return Err(Error::shape("conv2d kernel exceeds padded input", w.shape(), x.shape()));
    }
    let oh = conv_output_extent(h, kh, stride, padding);
    let ow = conv_output_extent(width, kw, stride, padding);
    Ok((n, c, h, width, oc, kh, kw, oh, ow))
}

/// Scatter one input sample into column-major patches: row k = (c, kh, kw),
/// column s = (oh, ow).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    col: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    let s = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * s..][..s];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii as usize >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        *d = if jj < 0 || jj as usize >= w {
                            T::zero()
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of `im2col`: scatter-add patch gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    col: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    let s = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((ci * kh + ki) * kw + kj) * s..][..s];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, &g) in row[oi * ow..(oi + 1) * ow].iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dst_row[jj as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Element>(acc: &mut [T], a: T, x: &[T]) {
    for (acc, &x) in acc.iter_mut().zip(x) {
        *acc += a * x;
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, width, oc, kh, kw, oh, ow) = check_shapes(x, w, stride, padding)?;
    let s = oh * ow;
    let k = c * kh * kw;
    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    let sample_in = c * h * width;
    let sample_out = oc * s;
    let wd = w.data();

    out.data_mut()
        .par_chunks_mut(sample_out)
        .zip(x.data().par_chunks(sample_in))
        .for_each(|(out_n, x_n)| {
            let col_buf;
            let col: &[T] = if pointwise {
                x_n
            } else {
                let mut buf = vec![T::zero(); k * s];
                im2col(x_n, &mut buf, c, h, width, kh, kw, oh, ow, stride, padding);
                col_buf = buf;
                &col_buf
            };
            for o in 0..oc {
                let out_row = &mut out_n[o * s..(o + 1) * s];
                let w_row = &wd[o * k..(o + 1) * k];
                for (ki, &a) in w_row.iter().enumerate() {
                    axpy(out_row, a, &col[ki * s..(ki + 1) * s]);
                }
            }
        });
    Ok(out)
}

impl<T: Element> TapeOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, c, h, width, oc, kh, kw, oh, ow) =
            check_shapes(x, w, self.stride, self.padding).expect("shapes checked at forward");
        let s = oh * ow;
        let k = c * kh * kw;
        let pointwise = kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0;
        let sample_in = c * h * width;
        let sample_out = oc * s;
        let wd = w.data();

        let mut dx = Tensor::zeros(x.shape());

        // Per-sample weight gradients computed in parallel, reduced in batch
        // order afterwards so the sum sequence is fixed.
        let per_sample_dw: Vec<Vec<T>> = dx
            .data_mut()
            .par_chunks_mut(sample_in)
            .zip(x.data().par_chunks(sample_in))
            .zip(grad_out.data().par_chunks(sample_out))
            .map(|((dx_n, x_n), dout_n)| {
                let col_buf;
                let col: &[T] = if pointwise {
                    x_n
                } else {
                    let mut buf = vec![T::zero(); k * s];
                    im2col(
                        x_n,
                        &mut buf,
                        c,
                        h,
                        width,
                        kh,
                        kw,
                        oh,
                        ow,
                        self.stride,
                        self.padding,
                    );
                    col_buf = buf;
                    &col_buf
                };

                let mut dw_n = vec![T::zero(); oc * k];
                let mut dcol = vec![T::zero(); k * s];
                for o in 0..oc {
                    let dout_row = &dout_n[o * s..(o + 1) * s];
                    let w_row = &wd[o * k..(o + 1) * k];
                    let dw_row = &mut dw_n[o * k..(o + 1) * k];
                    for ki in 0..k {
                        dw_row[ki] = dot(dout_row, &col[ki * s..(ki + 1) * s]);
                        axpy(&mut dcol[ki * s..(ki + 1) * s], w_row[ki], dout_row);
                    }
                }

                if pointwise {
                    dx_n.copy_from_slice(&dcol);
                } else {
                    col2im(
                        &dcol,
                        dx_n,
                        c,
                        h,
                        width,
                        kh,
                        kw,
                        oh,
                        ow,
                        self.stride,
                        self.padding,
                    );
                }
                dw_n
            })
            .collect();

        let mut dw = Tensor::zeros(w.shape());
        for dw_n in &per_sample_dw {
            for (acc, &g) in dw.data_mut().iter_mut().zip(dw_n) {
                *acc += g;
            }
        }
        let _ = n;
        vec![Some(dx), Some(dw)]
    }
}

/// Direct six-nested-loop convolution. Deliberately naive: this is the
/// oracle the fast kernel is checked against, and it must stay independent
/// of the im2col path.
pub fn conv2d_reference<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, width, oc, kh, kw, oh, ow) = check_shapes(x, w, stride, padding)?;
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for o in 0..oc {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - padding as isize;
                                let jj = (oj * stride + kj) as isize - padding as isize;
                                if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= width {
                                    continue;
                                }
                                let xv = xd[((ni * c + ci) * h + ii as usize) * width + jj as usize];
                                let wv = wd[((o * c + ci) * kh + ki) * kw + kj];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    od[((ni * oc + o) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn box_sum_center_and_corner() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0); // center sees the full box
        assert_eq!(y.data()[0], 4.0); // corner sees a 2x2 quadrant
    }

    #[test]
    fn zero_weight_gives_zero_output() {
        let mut rng = crate::rng::StreamRng::seed_from(1);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.normal());
        let w = Tensor::<f64>::zeros(&[5, 3, 3, 3]);
        let y = conv2d_forward(&x, &w, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_reference_kernel() {
        let mut rng = crate::rng::StreamRng::seed_from(2);
        let x = Tensor::from_fn(&[2, 3, 5, 5], |_| rng.normal());
        let w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.normal());
        let fast = conv2d_forward(&x, &w, 1, 1).unwrap();
        let slow = conv2d_reference(&x, &w, 1, 1).unwrap();
        assert!(crate::tensor::max_abs_diff(&fast, &slow) < 1e-6);
    }

    #[test]
    fn pointwise_matches_reference() {
        let mut rng = crate::rng::StreamRng::seed_from(3);
        let x = Tensor::from_fn(&[2, 6, 4, 4], |_| rng.normal());
        let w = Tensor::from_fn(&[3, 6, 1, 1], |_| rng.normal());
        let fast = conv2d_forward(&x, &w, 1, 0).unwrap();
        let slow = conv2d_reference(&x, &w, 1, 0).unwrap();
        assert!(crate::tensor::max_abs_diff(&fast, &slow) < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::<f64>::ones(&[1, 2, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, 1, 1).unwrap_err();
        match err {
            Error::ShapeMismatch { expected, actual, .. } => {
                assert_eq!(expected, vec![1, 3, 3, 3]);
                assert_eq!(actual, vec![1, 2, 3, 3]);
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn linear_in_input_and_weight() {
        let mut rng = crate::rng::StreamRng::seed_from(4);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.normal());
        let w = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.normal());
        let y1 = conv2d_forward(&x, &w, 1, 1).unwrap();
        let x2 = x.map(|v| v * 2.0);
        let y2 = conv2d_forward(&x2, &w, 1, 1).unwrap();
        let doubled = y1.map(|v| v * 2.0);
        assert!(crate::tensor::max_abs_diff(&y2, &doubled) < 1e-12);
        let _ = tensor(&[1], vec![0.0]);
    }
}
