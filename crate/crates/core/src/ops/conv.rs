use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride, symmetric zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec { stride, padding, groups }
    }
}

pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn geometry(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: Conv2dSpec) -> Result<ConvGeom> {
    if x.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be [B,C,H,W], got {x:?}")));
    }
    if w.len() != 4 {
        return Err(Error::shape("conv2d", format!("weight must be [Cout,Cin/g,kh,kw], got {w:?}")));
    }
    if spec.stride == 0 || spec.groups == 0 {
        return Err(Error::shape("conv2d", "stride and groups must be positive"));
    }
    let (b, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if cin % spec.groups != 0 {
        return Err(Error::shape("conv2d", format!("Cin={cin} not divisible by groups={}", spec.groups)));
    }
    if cout % spec.groups != 0 {
        return Err(Error::shape("conv2d", format!("Cout={cout} not divisible by groups={}", spec.groups)));
    }
    if cin_g != cin / spec.groups {
        return Err(Error::shape(
            "conv2d",
            format!("weight dim 1 (Cin/g) is {cin_g}, input has Cin/g={}", cin / spec.groups),
        ));
    }
    if let Some(bs) = bias {
        if bs != [cout] {
            return Err(Error::shape("conv2d", format!("bias must be [{cout}], got {bs:?}")));
        }
    }
    let ph = h + 2 * spec.padding;
    let pw = wd + 2 * spec.padding;
    if ph < kh {
        return Err(Error::shape("conv2d", format!("H={h} with padding {} is smaller than kh={kh}", spec.padding)));
    }
    if pw < kw {
        return Err(Error::shape("conv2d", format!("W={wd} with padding {} is smaller than kw={kw}", spec.padding)));
    }
    Ok(ConvGeom {
        b,
        cin,
        h,
        w: wd,
        cout,
        cin_g,
        kh,
        kw,
        oh: (ph - kh) / spec.stride + 1,
        ow: (pw - kw) / spec.stride + 1,
    })
}

/// Output index range `[lo, hi)` whose input coordinate `o*stride + k - pad`
/// lands inside `[0, n)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), spec)?;
    let cout_g = g.cout / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; g.b * g.cout * plane_out];
    for b in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o = &mut out[(b * g.cout + oc) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                o.fill(bias.data()[oc]);
            }
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let xp = &xd[(b * g.cin + ic) * plane_in..][..plane_in];
                for ki in 0..g.kh {
                    let (oh0, oh1) = valid_range(ki, p, s, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = wd[((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj];
                        let (ow0, ow1) = valid_range(kj, p, s, g.w, g.ow);
                        for oy in oh0..oh1 {
                            let iy = oy * s + ki - p;
                            let xrow = &xp[iy * g.w..][..g.w];
                            let orow = &mut o[oy * g.ow..][..g.ow];
                            if s == 1 {
                                let off = kj as isize - p as isize;
                                for ox in ow0..ow1 {
                                    orow[ox] += wv * xrow[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in ow0..ow1 {
                                    orow[ox] += wv * xrow[ox * s + kj - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.b, g.cout, g.oh, g.ow], out))
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    spec: Conv2dSpec,
    need: (bool, bool, bool),
) -> ConvGrads {
    let g = geometry(x.shape(), w.shape(), None, spec).expect("validated in forward");
    let cout_g = g.cout / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    let mut gx = if need.0 { vec![0.0; xd.len()] } else { Vec::new() };
    let mut gw = if need.1 { vec![0.0; wd.len()] } else { Vec::new() };
    let mut gb = if need.2 { vec![0.0; g.cout] } else { Vec::new() };
    for b in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go = &gd[(b * g.cout + oc) * plane_out..][..plane_out];
            if need.2 {
                gb[oc] += go.iter().sum::<f64>();
            }
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let base_in = (b * g.cin + ic) * plane_in;
                for ki in 0..g.kh {
                    let (oh0, oh1) = valid_range(ki, p, s, g.h, g.oh);
                    for kj in 0..g.kw {
                        let widx = ((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj;
                        let wv = wd[widx];
                        let (ow0, ow1) = valid_range(kj, p, s, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in oh0..oh1 {
                            let iy = oy * s + ki - p;
                            let grow = &go[oy * g.ow..][..g.ow];
                            let row_base = base_in + iy * g.w;
                            for ox in ow0..ow1 {
                                let ix = ox * s + kj - p;
                                let gv = grow[ox];
                                if need.1 {
                                    acc += gv * xd[row_base + ix];
                                }
                                if need.0 {
                                    gx[row_base + ix] += gv * wv;
                                }
                            }
                        }
                        if need.1 {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        x: need.0.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        w: need.1.then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
        b: need.2.then(|| Tensor::from_parts(vec![g.cout], gb)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let x = Tensor::zeros(&[1, 2, 7, 6]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 3]);
    }

    #[test]
    fn names_offending_dimension() {
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, None, Conv2dSpec::default()).unwrap_err().to_string();
        assert!(err.contains("Cin/g"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[4, 1, 3, 3]), None, Conv2dSpec::new(1, 0, 2))
            .unwrap_err()
            .to_string();
        assert!(err.contains("Cin=3"), "{err}");
    }

    #[test]
    fn depthwise_average_of_constant_is_constant() {
        let c = 2.5;
        let x = Tensor::full(&[1, 3, 6, 6], c);
        let w = Tensor::full(&[3, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &w, None, Conv2dSpec::new(1, 0, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        for v in y.data() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::new(&[2, 3, 2, 2], (0..24).map(|v| v as f64 * 0.37 - 3.0).collect()).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = conv2d(&x, &w, Some(&b), Conv2dSpec::default()).unwrap();
        assert!(y.bit_eq(&x));
    }
}
