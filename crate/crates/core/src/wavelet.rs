//! Separable discrete wavelet transform for volumetric feature maps:
//! single-axis analysis/synthesis passes, one-level and multi-level 3D
//! transforms with periodic boundary extension, and the zero-detail
//! low-frequency upsampling used by the attention blocks.
//!
//! Filters are stored in correlation order: analysis computes
//! `y[k] = sum_t f[t] * x[(2k+t) mod n]` and synthesis is the transpose of
//! that map, so for orthonormal families the synthesis pair equals the
//! analysis pair and reconstruction is exact on even extents.

use crate::error::{CoreError, Result};
use crate::tensor::{fs, Scalar, Tensor};

/// Band indices within a [`SubbandSet3D`]. Letters name the D, H, W axes in
/// that order; `L` is the low-pass half, `H` the high-pass half.
pub const LLL: usize = 0;
pub const LLH: usize = 1;
pub const LHL: usize = 2;
pub const LHH: usize = 3;
pub const HLL: usize = 4;
pub const HLH: usize = 5;
pub const HHL: usize = 6;
pub const HHH: usize = 7;

pub const BAND_NAMES: [&str; 8] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

/// Two-channel filter bank. Coefficients are kept in f64 and cast at the
/// point of use so f32 and f64 transforms share one definition.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletFilter {
    pub name: String,
    pub analysis_lo: Vec<f64>,
    pub analysis_hi: Vec<f64>,
    pub synthesis_lo: Vec<f64>,
    pub synthesis_hi: Vec<f64>,
}

impl WaveletFilter {
    /// Orthonormal Haar pair, the default filter.
    pub fn haar() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        WaveletFilter {
            name: "haar".to_string(),
            analysis_lo: vec![s, s],
            analysis_hi: vec![s, -s],
            synthesis_lo: vec![s, s],
            synthesis_hi: vec![s, -s],
        }
    }

    /// Daubechies-2 (four-tap) orthonormal pair, in closed form so the
    /// orthonormality relations hold to machine precision.
    pub fn db2() -> Self {
        let s3 = 3f64.sqrt();
        let s2 = 2f64.sqrt();
        let lo = vec![
            (1.0 + s3) / (4.0 * s2),
            (3.0 + s3) / (4.0 * s2),
            (3.0 - s3) / (4.0 * s2),
            (1.0 - s3) / (4.0 * s2),
        ];
        let hi: Vec<f64> = (0..4)
            .map(|n| if n % 2 == 0 { lo[3 - n] } else { -lo[3 - n] })
            .collect();
        WaveletFilter {
            name: "db2".to_string(),
            analysis_lo: lo.clone(),
            analysis_hi: hi.clone(),
            synthesis_lo: lo,
            synthesis_hi: hi,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "haar" => Ok(Self::haar()),
            "db2" => Ok(Self::db2()),
            other => Err(CoreError::Config(format!(
                "unknown wavelet '{other}' (supported: haar, db2)"
            ))),
        }
    }
}

/// One level of 3D sub-bands, each of shape (C, D/2, H/2, W/2).
#[derive(Debug, Clone)]
pub struct SubbandSet3D<T: Scalar> {
    pub bands: [Tensor<T>; 8],
}

impl<T: Scalar> SubbandSet3D<T> {
    pub fn lll(&self) -> &Tensor<T> {
        &self.bands[LLL]
    }

    /// The seven high-frequency bands, indexed LLH..HHH.
    pub fn details(&self) -> [Tensor<T>; 7] {
        let b = &self.bands;
        [
            b[1].clone(),
            b[2].clone(),
            b[3].clone(),
            b[4].clone(),
            b[5].clone(),
            b[6].clone(),
            b[7].clone(),
        ]
    }
}

/// Detail bands of one decomposition level, indexed LLH..HHH.
pub type DetailBands<T> = [Tensor<T>; 7];

/// m-level decomposition: the running approximation plus one detail set per
/// level. `details[0]` is the finest level (largest extent).
#[derive(Debug, Clone)]
pub struct MultiLevelDecomposition<T: Scalar> {
    pub lf: Tensor<T>,
    pub details: Vec<DetailBands<T>>,
}

impl<T: Scalar> MultiLevelDecomposition<T> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }
}

fn axis_split<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize)> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(CoreError::Shape(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let n = shape[axis];
    if n % 2 != 0 {
        return Err(CoreError::Shape(format!(
            "wavelet transform needs an even extent, axis {axis} has {n}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

/// Single-axis analysis pass. The output keeps the input shape with the axis
/// reordered as low-pass half followed by high-pass half.
pub fn dwt_axis<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    lo: &[f64],
    hi: &[f64],
) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(x, axis)?;
    let half = n / 2;
    let lo: Vec<T> = lo.iter().map(|&c| fs(c)).collect();
    let hi: Vec<T> = hi.iter().map(|&c| fs(c)).collect();
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        let base = o * n * inner;
        for k in 0..half {
            let lo_row = base + k * inner;
            let hi_row = base + (half + k) * inner;
            for (t, (&cl, &ch)) in lo.iter().zip(hi.iter()).enumerate() {
                let src = base + ((2 * k + t) % n) * inner;
                for i in 0..inner {
                    od[lo_row + i] += cl * xd[src + i];
                    od[hi_row + i] += ch * xd[src + i];
                }
            }
        }
    }
    Ok(out)
}

/// Single-axis synthesis pass, the transpose of [`dwt_axis`] with the same
/// coefficient lists. Input must hold the low half then the high half along
/// the axis; output is the plain signal.
pub fn idwt_axis<T: Scalar>(
    y: &Tensor<T>,
    axis: usize,
    lo: &[f64],
    hi: &[f64],
) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(y, axis)?;
    let half = n / 2;
    let lo: Vec<T> = lo.iter().map(|&c| fs(c)).collect();
    let hi: Vec<T> = hi.iter().map(|&c| fs(c)).collect();
    let mut out = Tensor::zeros(y.shape());
    let yd = y.data();
    let od = out.data_mut();
    for o in 0..outer {
        let base = o * n * inner;
        for k in 0..half {
            let lo_row = base + k * inner;
            let hi_row = base + (half + k) * inner;
            for (t, (&cl, &ch)) in lo.iter().zip(hi.iter()).enumerate() {
                let dst = base + ((2 * k + t) % n) * inner;
                for i in 0..inner {
                    od[dst + i] += cl * yd[lo_row + i] + ch * yd[hi_row + i];
                }
            }
        }
    }
    Ok(out)
}

/// Full separable analysis along W, H, then D, leaving the eight sub-bands
/// stacked as octants of a same-shape tensor (low halves first).
pub fn dwt3d_stacked<T: Scalar>(x: &Tensor<T>, filter: &WaveletFilter) -> Result<Tensor<T>> {
    x.dims4()?;
    let w = dwt_axis(x, 3, &filter.analysis_lo, &filter.analysis_hi)?;
    let h = dwt_axis(&w, 2, &filter.analysis_lo, &filter.analysis_hi)?;
    dwt_axis(&h, 1, &filter.analysis_lo, &filter.analysis_hi)
}

/// Inverse of [`dwt3d_stacked`]: synthesis along D, H, then W.
pub fn idwt3d_stacked<T: Scalar>(s: &Tensor<T>, filter: &WaveletFilter) -> Result<Tensor<T>> {
    s.dims4()?;
    let d = idwt_axis(s, 1, &filter.synthesis_lo, &filter.synthesis_hi)?;
    let h = idwt_axis(&d, 2, &filter.synthesis_lo, &filter.synthesis_hi)?;
    idwt_axis(&h, 3, &filter.synthesis_lo, &filter.synthesis_hi)
}

/// Copies octant `band` (bit 2 = D-high, bit 1 = H-high, bit 0 = W-high) out
/// of a stacked sub-band tensor.
pub fn extract_octant<T: Scalar>(stacked: &Tensor<T>, band: usize) -> Result<Tensor<T>> {
    let (c, d, h, w) = stacked.dims4()?;
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let (od, oh, ow) = (
        if band & 4 != 0 { hd } else { 0 },
        if band & 2 != 0 { hh } else { 0 },
        if band & 1 != 0 { hw } else { 0 },
    );
    let sd = stacked.data();
    let mut out = Tensor::zeros(&[c, hd, hh, hw]);
    let odata = out.data_mut();
    for ci in 0..c {
        for zd in 0..hd {
            for zh in 0..hh {
                let src = ((ci * d + od + zd) * h + oh + zh) * w + ow;
                let dst = ((ci * hd + zd) * hh + zh) * hw;
                odata[dst..dst + hw].copy_from_slice(&sd[src..src + hw]);
            }
        }
    }
    Ok(out)
}

/// Packs eight half-extent bands back into the stacked octant layout.
pub fn merge_octants<T: Scalar>(bands: &[Tensor<T>; 8]) -> Result<Tensor<T>> {
    let (c, hd, hh, hw) = bands[0].dims4()?;
    for (i, b) in bands.iter().enumerate() {
        if b.shape() != bands[0].shape() {
            return Err(CoreError::Shape(format!(
                "band {} ({}) has shape {:?}, expected {:?}",
                i,
                BAND_NAMES[i],
                b.shape(),
                bands[0].shape()
            )));
        }
    }
    let (d, h, w) = (2 * hd, 2 * hh, 2 * hw);
    let mut out = Tensor::zeros(&[c, d, h, w]);
    let odata = out.data_mut();
    for (band, bt) in bands.iter().enumerate() {
        let (od, oh, ow) = (
            if band & 4 != 0 { hd } else { 0 },
            if band & 2 != 0 { hh } else { 0 },
            if band & 1 != 0 { hw } else { 0 },
        );
        let bd = bt.data();
        for ci in 0..c {
            for zd in 0..hd {
                for zh in 0..hh {
                    let dst = ((ci * d + od + zd) * h + oh + zh) * w + ow;
                    let src = ((ci * hd + zd) * hh + zh) * hw;
                    odata[dst..dst + hw].copy_from_slice(&bd[src..src + hw]);
                }
            }
        }
    }
    Ok(out)
}

/// One level of 3D analysis: eight sub-bands at half extent.
pub fn dwt3d<T: Scalar>(x: &Tensor<T>, filter: &WaveletFilter) -> Result<SubbandSet3D<T>> {
    let stacked = dwt3d_stacked(x, filter)?;
    let mut bands = Vec::with_capacity(8);
    for b in 0..8 {
        bands.push(extract_octant(&stacked, b)?);
    }
    Ok(SubbandSet3D {
        bands: bands.try_into().expect("eight bands"),
    })
}

/// One level of 3D synthesis, the exact inverse of [`dwt3d`].
pub fn idwt3d<T: Scalar>(bands: &SubbandSet3D<T>, filter: &WaveletFilter) -> Result<Tensor<T>> {
    let stacked = merge_octants(&bands.bands)?;
    idwt3d_stacked(&stacked, filter)
}

/// m-level decomposition by recursing on the running approximation.
pub fn dwt3d_multi<T: Scalar>(
    x: &Tensor<T>,
    m: usize,
    filter: &WaveletFilter,
) -> Result<MultiLevelDecomposition<T>> {
    if m < 1 {
        return Err(CoreError::Config(format!(
            "decomposition depth must be >= 1, got {m}"
        )));
    }
    let (_, d, h, w) = x.dims4()?;
    let div = 1usize << m;
    if d % div != 0 || h % div != 0 || w % div != 0 {
        return Err(CoreError::Shape(format!(
            "extents ({d},{h},{w}) not divisible by 2^{m}"
        )));
    }
    let mut details = Vec::with_capacity(m);
    let mut cur = x.clone();
    for _ in 0..m {
        let set = dwt3d(&cur, filter)?;
        cur = set.lll().clone();
        details.push(set.details());
    }
    Ok(MultiLevelDecomposition { lf: cur, details })
}

/// Inverse of [`dwt3d_multi`], finishing at the original extent.
pub fn idwt3d_multi<T: Scalar>(
    dec: &MultiLevelDecomposition<T>,
    filter: &WaveletFilter,
) -> Result<Tensor<T>> {
    let mut cur = dec.lf.clone();
    for (level, det) in dec.details.iter().enumerate().rev() {
        if det[0].shape() != cur.shape() {
            return Err(CoreError::Shape(format!(
                "detail level {} has band shape {:?}, expected {:?}",
                level + 1,
                det[0].shape(),
                cur.shape()
            )));
        }
        let bands: [Tensor<T>; 8] = [
            cur,
            det[0].clone(),
            det[1].clone(),
            det[2].clone(),
            det[3].clone(),
            det[4].clone(),
            det[5].clone(),
            det[6].clone(),
        ];
        cur = idwt3d(&SubbandSet3D { bands }, filter)?;
    }
    Ok(cur)
}

/// Reconstructs from the approximation alone, treating every detail band as
/// zero: the upsampling operator of the attention block. Extents grow by
/// 2^m; m = 0 is the identity.
pub fn lf_upsample<T: Scalar>(
    lf: &Tensor<T>,
    m: usize,
    filter: &WaveletFilter,
) -> Result<Tensor<T>> {
    let mut cur = lf.clone();
    for _ in 0..m {
        let (c, d, h, w) = cur.dims4()?;
        let zero = Tensor::zeros(&[c, d, h, w]);
        let bands: [Tensor<T>; 8] = [
            cur,
            zero.clone(),
            zero.clone(),
            zero.clone(),
            zero.clone(),
            zero.clone(),
            zero.clone(),
            zero,
        ];
        cur = idwt3d(&SubbandSet3D { bands }, filter)?;
    }
    Ok(cur)
}
