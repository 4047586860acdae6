//! Layer primitives: 3D convolution (im2col + GEMM), nearest-neighbor
//! upsampling, smooth activations. Everything is f64 and deterministic.

use ndarray::{Array2, Array4};

/// Geometry of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn k3(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: 3,
            stride,
            padding: 1,
        }
    }

    pub fn k1(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            padding: 0,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel.pow(3)
    }

    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_spatial(&self, dims: [usize; 3]) -> [usize; 3] {
        [
            self.out_dim(dims[0]),
            self.out_dim(dims[1]),
            self.out_dim(dims[2]),
        ]
    }
}

/// Lower input patches into a (in_ch * k^3, out_voxels) matrix.
fn im2col(x: &Array4<f64>, spec: &ConvSpec) -> Array2<f64> {
    let (c_in, d, h, w) = x.dim();
    debug_assert_eq!(c_in, spec.in_ch);
    let [od, oh, ow] = spec.out_spatial([d, h, w]);
    let k = spec.kernel;
    let n_out = od * oh * ow;
    let mut m = Array2::<f64>::zeros((c_in * k * k * k, n_out));
    let xs = x.as_slice().expect("input is contiguous");
    let ms = m.as_slice_mut().expect("matrix is contiguous");

    let pad = spec.padding as isize;
    let stride = spec.stride as isize;
    for ci in 0..c_in {
        let x_base = ci * d * h * w;
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let m_base = row * n_out;
                    for oz in 0..od {
                        let iz = oz as isize * stride - pad + kz as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * stride - pad + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let m_row0 = m_base + (oz * oh + oy) * ow;
                            let x_row0 = x_base + (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = ox as isize * stride - pad + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                ms[m_row0 + ox] = xs[x_row0 + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    m
}

/// Scatter-add the adjoint of `im2col` back into input space.
fn col2im(dm: &Array2<f64>, in_dims: (usize, usize, usize, usize), spec: &ConvSpec) -> Array4<f64> {
    let (c_in, d, h, w) = in_dims;
    let [od, oh, ow] = spec.out_spatial([d, h, w]);
    let k = spec.kernel;
    let n_out = od * oh * ow;
    let mut dx = Array4::<f64>::zeros(in_dims);
    let dxs = dx.as_slice_mut().expect("grad is contiguous");
    let dms = dm.as_slice().expect("matrix is contiguous");

    let pad = spec.padding as isize;
    let stride = spec.stride as isize;
    for ci in 0..c_in {
        let x_base = ci * d * h * w;
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let m_base = row * n_out;
                    for oz in 0..od {
                        let iz = oz as isize * stride - pad + kz as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * stride - pad + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let m_row0 = m_base + (oz * oh + oy) * ow;
                            let x_row0 = x_base + (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = ox as isize * stride - pad + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxs[x_row0 + ix as usize] += dms[m_row0 + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// y = conv(x; weight, bias). Weight layout: [out_ch][in_ch][kz][ky][kx].
pub fn conv3d(x: &Array4<f64>, weight: &[f64], bias: &[f64], spec: &ConvSpec) -> Array4<f64> {
    let (_, d, h, w) = x.dim();
    let [od, oh, ow] = spec.out_spatial([d, h, w]);
    let kk = spec.in_ch * spec.kernel.pow(3);

    let m = im2col(x, spec);
    let wmat = Array2::from_shape_vec((spec.out_ch, kk), weight.to_vec()).expect("weight size");
    let mut y = wmat.dot(&m);
    for (mut row, &b) in y.rows_mut().into_iter().zip(bias.iter()) {
        row += b;
    }
    let flat = y.into_raw_vec_and_offset().0;
    Array4::from_shape_vec((spec.out_ch, od, oh, ow), flat).expect("output size")
}

/// Backward pass of `conv3d`. Returns (dx, dweight, dbias).
pub fn conv3d_backward(
    x: &Array4<f64>,
    dy: &Array4<f64>,
    weight: &[f64],
    spec: &ConvSpec,
) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let (_, od, oh, ow) = dy.dim();
    let n_out = od * oh * ow;
    let kk = spec.in_ch * spec.kernel.pow(3);

    let dy_mat = Array2::from_shape_vec(
        (spec.out_ch, n_out),
        dy.as_slice().expect("dy contiguous").to_vec(),
    )
    .expect("dy size");

    let m = im2col(x, spec);
    let dw = dy_mat.dot(&m.t());
    let db: Vec<f64> = dy_mat.rows().into_iter().map(|r| r.sum()).collect();

    let wmat = Array2::from_shape_vec((spec.out_ch, kk), weight.to_vec()).expect("weight size");
    let dm = wmat.t().dot(&dy_mat);
    let dx = col2im(&dm, x.dim(), spec);

    (dx, dw.into_raw_vec_and_offset().0, db)
}

/// Nearest-neighbor 2x upsampling along each spatial axis.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (c, d, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((c, d * 2, h * 2, w * 2));
    for ci in 0..c {
        for z in 0..d * 2 {
            for yy in 0..h * 2 {
                for xx in 0..w * 2 {
                    y[[ci, z, yy, xx]] = x[[ci, z / 2, yy / 2, xx / 2]];
                }
            }
        }
    }
    y
}

/// Adjoint of `upsample2`: each source voxel collects the sum of its 8 copies.
pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (c, d2, h2, w2) = dy.dim();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((c, d, h, w));
    for ci in 0..c {
        for z in 0..d2 {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dx[[ci, z / 2, yy / 2, xx / 2]] += dy[[ci, z, yy, xx]];
                }
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation, x * sigmoid(x). Smooth everywhere, which keeps
/// finite-difference gradient checks well-conditioned.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_map(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(silu)
}

/// dx = dy * silu'(pre) where `pre` is the pre-activation input.
pub fn silu_backward(pre: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    for (d, &p) in dx.iter_mut().zip(pre.iter()) {
        *d *= silu_deriv(p);
    }
    dx
}
