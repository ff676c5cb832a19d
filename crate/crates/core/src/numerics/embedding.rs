use super::Tensor;
use crate::error::{Error, Result};

/// Sinusoidal timestep embedding: `dim / 2` sines followed by the matching
/// cosines, at frequencies `10000^(-i / (dim / 2))`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// One embedding row per timestep, `[N, dim]`.
pub fn time_embeddings(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_embedding(t, dim)?);
    }
    Tensor::new(vec![ts.len(), dim], data)
}
