//! Model files: layer stack, parameter tensors, optimizer state and RNG seed
//! in one checksummed, versioned binary.

use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};

use super::{AdamState, CnnModel, LayerParams, LayerSpec, LrSchedule, NnError};
use crate::io::{FormatError, FrameReader, FrameWriter, Stamp};
use crate::scalar::Real;

pub const MODEL_MAGIC: &[u8; 8] = b"KWSMODL\0";
pub const MODEL_VERSION: u32 = 1;

fn put_scalars<T: Real>(w: &mut FrameWriter, vs: impl Iterator<Item = T>) {
    if std::mem::size_of::<T>() == 4 {
        for v in vs {
            w.put_f32(v.to_f32().expect("f32 scalar"));
        }
    } else {
        for v in vs {
            w.put_f64(v.to_f64().expect("f64 scalar"));
        }
    }
}

fn get_scalars<T: Real>(r: &mut FrameReader, n: usize) -> Result<Vec<T>, FormatError> {
    if std::mem::size_of::<T>() == 4 {
        Ok(r.get_f32_vec(n)?.into_iter().map(|v| T::from_f64_c(v as f64)).collect())
    } else {
        Ok(r.get_f64_vec(n)?
            .into_iter()
            .map(|v| T::from_f64_c(v))
            .collect())
    }
}

fn put_tensor<T: Real>(w: &mut FrameWriter, p: &LayerParams<T>) {
    let shape = p.weights.shape();
    w.put_u8(shape.len() as u8);
    for d in shape {
        w.put_u32(*d as u32);
    }
    put_scalars(w, p.weights.iter().copied());
    w.put_u32(p.bias.len() as u32);
    put_scalars(w, p.bias.iter().copied());
}

fn get_tensor<T: Real>(r: &mut FrameReader) -> Result<LayerParams<T>, FormatError> {
    let ndim = r.get_u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.get_u32()? as usize);
    }
    let len: usize = dims.iter().product();
    let weights = ArrayD::from_shape_vec(IxDyn(&dims), get_scalars::<T>(r, len)?)
        .map_err(|e| FormatError::Invalid(format!("bad tensor shape: {e}")))?;
    let bias_len = r.get_u32()? as usize;
    let bias = Array1::from_vec(get_scalars::<T>(r, bias_len)?);
    Ok(LayerParams { weights, bias })
}

/// Write the model (and optionally its optimizer state) to `path`.
pub fn save_model<T: Real>(
    model: &CnnModel<T>,
    adam: Option<&AdamState<T>>,
    path: &Path,
    stamp: Stamp,
) -> Result<(), NnError> {
    let mut w = FrameWriter::new(MODEL_MAGIC, MODEL_VERSION, stamp);
    w.put_u8(std::mem::size_of::<T>() as u8);
    w.put_u32(model.input_dim() as u32);
    w.put_u64(model.rng_seed());
    w.put_u64(model.revision());
    let layers_json =
        serde_json::to_string(model.layers()).expect("layer specs serialize");
    w.put_str(&layers_json);
    for p in model.params() {
        match p {
            Some(p) => {
                w.put_u8(1);
                put_tensor(&mut w, p);
            }
            None => w.put_u8(0),
        }
    }
    match adam {
        Some(state) => {
            w.put_u8(1);
            w.put_u64(state.t);
            w.put_f64(state.beta1);
            w.put_f64(state.beta2);
            w.put_f64(state.epsilon);
            w.put_f64(state.schedule.lr_start);
            w.put_f64(state.schedule.lr_end);
            w.put_u64(state.schedule.total_steps);
            for moments in [&state.m, &state.v] {
                for p in moments.iter().flatten() {
                    put_tensor(&mut w, p);
                }
            }
        }
        None => w.put_u8(0),
    }
    w.finish(path).map_err(NnError::Format)
}

/// Read a model (and optimizer state, if saved) back from `path`.
///
/// The scalar type must match the one the file was written with.
pub fn load_model<T: Real>(
    path: &Path,
) -> Result<(CnnModel<T>, Option<AdamState<T>>, Stamp), NnError> {
    let mut r = FrameReader::open(path, MODEL_MAGIC, "model", MODEL_VERSION)?;
    let stamp = r.stamp;
    let dtype = r.get_u8()? as usize;
    if dtype != std::mem::size_of::<T>() {
        return Err(NnError::DtypeMismatch {
            found: dtype,
            expected: std::mem::size_of::<T>(),
        });
    }
    let input_dim = r.get_u32()? as usize;
    let rng_seed = r.get_u64()?;
    let revision = r.get_u64()?;
    let layers: Vec<LayerSpec> = serde_json::from_str(&r.get_str()?)
        .map_err(|e| FormatError::Invalid(format!("bad layer list: {e}")))?;
    let mut params = Vec::with_capacity(layers.len());
    for _ in 0..layers.len() {
        let has = r.get_u8()?;
        params.push(if has == 1 {
            Some(get_tensor::<T>(&mut r)?)
        } else {
            None
        });
    }
    let mut model = CnnModel::from_parts(input_dim, layers, params)?;
    model.set_state(rng_seed, revision);
    let adam = if r.get_u8()? == 1 {
        let t = r.get_u64()?;
        let beta1 = r.get_f64()?;
        let beta2 = r.get_f64()?;
        let epsilon = r.get_f64()?;
        let schedule = LrSchedule {
            lr_start: r.get_f64()?,
            lr_end: r.get_f64()?,
            total_steps: r.get_u64()?,
        };
        let mut state = AdamState::new(&model, schedule);
        state.t = t;
        state.beta1 = beta1;
        state.beta2 = beta2;
        state.epsilon = epsilon;
        // Ordering on disk: all m tensors, then all v tensors, param layers only.
        for i in 0..state.m.len() {
            if state.m[i].is_some() {
                state.m[i] = Some(get_tensor::<T>(&mut r)?);
            }
        }
        for i in 0..state.v.len() {
            if state.v[i].is_some() {
                state.v[i] = Some(get_tensor::<T>(&mut r)?);
            }
        }
        Some(state)
    } else {
        None
    };
    r.expect_end()?;
    Ok((model, adam, stamp))
}
