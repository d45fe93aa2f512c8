//! Batched series, labels, image-like tensors and the series <-> image reshaping
//! used to feed the 2D reconstructors.
//!
//! Layout: each channel's `L` samples are followed by `pad_len` zeros and the
//! resulting `H * W` vector is written row-major into an `H x W` plane. Channel
//! `i` of the series becomes image channel `i`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "{what} has a non-finite entry at flat index {pos}"
        )));
    }
    Ok(())
}

/// A batch of multichannel series with shape `[B, d, L]`.
#[derive(Debug, Clone)]
pub struct TimeSeriesBatch {
    values: Tensor,
}

impl TimeSeriesBatch {
    /// Wraps a rank-3 float tensor, rejecting empty dimensions and non-finite entries.
    pub fn new(values: Tensor) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 3 || dims.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!(
                "series batch must be [B, d, L] with nonzero dims, got {dims:?}"
            )));
        }
        if !values.dtype().is_float() {
            return Err(Error::InvalidData(format!(
                "series batch must hold floats, got {:?}",
                values.dtype()
            )));
        }
        check_finite(&values, "series batch")?;
        Ok(Self { values })
    }

    pub fn from_vec(data: Vec<f32>, batch: usize, channels: usize, length: usize) -> Result<Self> {
        if data.len() != batch * channels * length {
            return Err(Error::Shape(format!(
                "{} values cannot fill [{batch}, {channels}, {length}]",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, (batch, channels, length), &Device::Cpu)?)
    }

    /// Used on tensors produced by our own finite computations, where the scan is redundant.
    pub(crate) fn from_tensor_unchecked(values: Tensor) -> Self {
        debug_assert_eq!(values.rank(), 3);
        Self { values }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn batch_size(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn length(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[1], d[2])
    }

    pub fn dtype(&self) -> DType {
        self.values.dtype()
    }

    /// Row-major `[B * d * L]` copy as `f32`.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        Ok(self.values.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(self.values.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            values: self.values.to_dtype(dtype)?,
        })
    }

    /// Gathers the instances at `indices` (in that order).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch_size();
        if let Some(&bad) = indices.iter().find(|&&i| i >= b) {
            return Err(Error::Shape(format!("index {bad} out of range for batch {b}")));
        }
        if indices.is_empty() {
            return Err(Error::Shape("cannot select an empty batch".into()));
        }
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.values.device())?;
        Ok(Self {
            values: self.values.index_select(&idx, 0)?.contiguous()?,
        })
    }
}

/// Integer class labels, each strictly below `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBatch {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidData("class count must be positive".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidData(format!(
                "label {y} at position {i} is not below K = {num_classes}"
            )));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Shape(format!("label index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Labels as a `u32` tensor, the index type the loss functions gather with.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<u32> = self.labels.iter().map(|&y| y as u32).collect();
        Ok(Tensor::from_vec(v, self.labels.len(), device)?)
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

/// An image-like batch `[B, c, H, W]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    values: Tensor,
}

impl ImageTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 4 || dims.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!(
                "image batch must be [B, c, H, W] with nonzero dims, got {dims:?}"
            )));
        }
        check_finite(&values, "image batch")?;
        Ok(Self { values })
    }

    pub(crate) fn from_tensor_unchecked(values: Tensor) -> Self {
        debug_assert_eq!(values.rank(), 4);
        Self { values }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[1], d[2], d[3])
    }
}

/// Bijective (modulo zero padding) mapping between `[d, L]` series and `[c, H, W]` images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReshapeSpec {
    pub d: usize,
    pub l: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pad_len: usize,
}

pub fn make_reshape_spec(d: usize, l: usize, h: usize, w: usize) -> Result<ReshapeSpec> {
    if d == 0 || l == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "reshape dims must be positive (d={d}, L={l}, H={h}, W={w})"
        )));
    }
    let area = h * w;
    if area < l {
        return Err(Error::Config(format!(
            "{h}x{w} = {area} cells cannot hold {l} samples without truncation"
        )));
    }
    Ok(ReshapeSpec {
        d,
        l,
        c: d,
        h,
        w,
        pad_len: area - l,
    })
}

impl ReshapeSpec {
    /// MFD-shaped series (1 x 5120) as a 1 x 64 x 80 image.
    pub fn mfd() -> Self {
        make_reshape_spec(1, 5120, 64, 80).expect("static spec")
    }

    /// SSC-shaped series (1 x 3000) as a 1 x 48 x 64 image.
    pub fn ssc() -> Self {
        make_reshape_spec(1, 3000, 48, 64).expect("static spec")
    }

    /// UCIHAR-shaped series (9 x 128) as a 9 x 64 x 64 image.
    pub fn ucihar() -> Self {
        make_reshape_spec(9, 128, 64, 64).expect("static spec")
    }

    fn check_series(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 3 || dims[1] != self.d || dims[2] != self.l {
            return Err(Error::Shape(format!(
                "series {dims:?} does not match reshape spec [*, {}, {}]",
                self.d, self.l
            )));
        }
        Ok(())
    }

    fn check_image(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 || dims[1] != self.c || dims[2] != self.h || dims[3] != self.w {
            return Err(Error::Shape(format!(
                "image {dims:?} does not match reshape spec [*, {}, {}, {}]",
                self.c, self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Differentiable tensor form of [`series_to_image`].
pub fn series_to_image_tensor(x: &Tensor, spec: &ReshapeSpec) -> Result<Tensor> {
    spec.check_series(x.dims())?;
    let b = x.dims()[0];
    let padded = if spec.pad_len > 0 {
        x.pad_with_zeros(2, 0, spec.pad_len)?
    } else {
        x.contiguous()?
    };
    Ok(padded.reshape((b, spec.c, spec.h, spec.w))?)
}

/// Differentiable tensor form of [`image_to_series`].
pub fn image_to_series_tensor(img: &Tensor, spec: &ReshapeSpec) -> Result<Tensor> {
    spec.check_image(img.dims())?;
    let b = img.dims()[0];
    let flat = img.contiguous()?.reshape((b, spec.c, spec.h * spec.w))?;
    if spec.pad_len == 0 {
        Ok(flat)
    } else {
        Ok(flat.narrow(2, 0, spec.l)?.contiguous()?)
    }
}

pub fn series_to_image(x: &TimeSeriesBatch, spec: &ReshapeSpec) -> Result<ImageTensor> {
    Ok(ImageTensor::from_tensor_unchecked(series_to_image_tensor(
        x.tensor(),
        spec,
    )?))
}

pub fn image_to_series(img: &ImageTensor, spec: &ReshapeSpec) -> Result<TimeSeriesBatch> {
    Ok(TimeSeriesBatch::from_tensor_unchecked(image_to_series_tensor(
        img.tensor(),
        spec,
    )?))
}
