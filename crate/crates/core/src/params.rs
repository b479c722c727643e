//! Named trainable parameters, the SGD update, and binary checkpoints.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic number at the head of a checkpoint file.
const CHECKPOINT_VERSION: u32 = 1;

/// A leaf tensor registered for optimization. `decay` marks whether weight
/// decay applies; biases and per-stage scale vectors opt out.
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

/// Ordered collection of all trainable parameters of a model. Order is
/// registration order and is part of the checkpoint format contract.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique; the tensor must be a
    /// gradient-carrying leaf.
    pub fn register(&mut self, name: &str, tensor: Tensor, decay: bool) -> Tensor {
        assert!(tensor.requires_grad(), "parameter {name} must be created with with_grad");
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name: {name}"
        );
        self.params.push(Parameter { name: name.to_string(), tensor: tensor.clone(), decay });
        tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Clear all gradient buffers.
    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Flat copy of all parameter values, in registration order.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(&p.tensor.data());
        }
        out
    }

    /// One SGD step: p <- p - lr * (grad + decay_coeff * p), with the decay
    /// term applied only to parameters registered with `decay = true`.
    /// Parameters that received no gradient this step are left untouched.
    pub fn sgd_step(&self, lr: f64, weight_decay: f64) {
        for p in &self.params {
            let Some(grad) = p.tensor.grad() else { continue };
            let coeff = if p.decay { weight_decay } else { 0.0 };
            let mut data = p.tensor.data().to_vec();
            for (v, g) in data.iter_mut().zip(&grad) {
                *v -= lr * (g + coeff * *v);
            }
            p.tensor.set_data(data);
        }
    }

    /// Abort-with-context check used by the training loop: returns the name
    /// of the first parameter whose value or gradient is non-finite.
    pub fn first_non_finite(&self) -> Option<String> {
        for p in &self.params {
            if p.tensor.data().iter().any(|v| !v.is_finite()) {
                return Some(format!("{} (value)", p.name));
            }
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Some(format!("{} (gradient)", p.name));
                }
            }
        }
        None
    }

    /// Serialize all parameters to the binary checkpoint format:
    /// version, parameter count, then per parameter its name, rank,
    /// extents, and row-major f64 payload. All integers and floats are
    /// little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            let shape = p.tensor.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data().iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load a checkpoint saved by [`ParamSet::save`] into this set. Every
    /// stored parameter must match a registered one in name and shape, and
    /// vice versa; mismatches are reported by name.
    pub fn load(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = cur.u32()? as usize;
        if count != self.params.len() {
            return Err(Error::checkpoint(format!(
                "checkpoint holds {count} parameters, model has {}",
                self.params.len()
            )));
        }

        let mut seen: HashSet<String> = HashSet::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::checkpoint("parameter name is not valid utf-8"))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f64()?);
            }

            let param = self.get(&name).ok_or_else(|| {
                Error::checkpoint(format!("checkpoint parameter {name} not present in model"))
            })?;
            if param.tensor.shape() != shape.as_slice() {
                return Err(Error::checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    shape,
                    param.tensor.shape()
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::checkpoint(format!("duplicate parameter {name} in checkpoint")));
            }
            param.tensor.set_data(data);
        }
        if cur.pos != bytes.len() {
            return Err(Error::checkpoint(format!(
                "{} trailing bytes after last parameter",
                bytes.len() - cur.pos
            )));
        }
        Ok(())
    }
}

/// Minimal byte reader for the checkpoint payload.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn two_param_set() -> (ParamSet, Tensor, Tensor) {
        let mut set = ParamSet::new();
        let w = set.register("w", Tensor::with_grad(vec![1.0, -2.0], &[2]), true);
        let b = set.register("b", Tensor::with_grad(vec![0.5], &[1]), false);
        (set, w, b)
    }

    #[test]
    fn sgd_applies_decay_only_to_decaying_params() {
        let (set, w, b) = two_param_set();
        w.accumulate_grad(&[1.0, 1.0]);
        b.accumulate_grad(&[1.0]);
        set.sgd_step(0.1, 0.5);
        // w: v - 0.1*(1 + 0.5*v); b: v - 0.1*1
        let wv = w.to_vec();
        assert!((wv[0] - (1.0 - 0.1 * 1.5)).abs() < 1e-15);
        assert!((wv[1] - (-2.0 - 0.1 * 0.0)).abs() < 1e-15);
        assert!((b.item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_params_without_grads() {
        let (set, w, b) = two_param_set();
        b.accumulate_grad(&[1.0]);
        set.sgd_step(0.1, 0.5);
        assert_eq!(w.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let (set, w, _) = two_param_set();
        w.set_data(vec![std::f64::consts::PI, -0.1]);
        set.save(&path).unwrap();

        let (other, w2, b2) = two_param_set();
        other.load(&path).unwrap();
        assert_eq!(w2.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vec![
            std::f64::consts::PI.to_bits(),
            (-0.1f64).to_bits()
        ]);
        assert_eq!(b2.item(), 0.5);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let (set, _, _) = two_param_set();
        set.save(&path).unwrap();

        let mut wrong = ParamSet::new();
        wrong.register("w", Tensor::with_grad(vec![0.0; 3], &[3]), true);
        wrong.register("b", Tensor::with_grad(vec![0.0], &[1]), false);
        let err = wrong.load(&path).unwrap_err().to_string();
        assert!(err.contains("shape mismatch for w"), "{err}");
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let (set, _, _) = two_param_set();
        set.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(set.load(&path).is_err());
    }

    #[test]
    fn training_updates_survive_round_trip() {
        // A tiny optimization step, checkpointed and restored, reproduces
        // the exact same forward value.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step.bin");

        let mut set = ParamSet::new();
        let w = set.register("w", Tensor::with_grad(vec![0.3, 0.7], &[2]), true);
        let x = Tensor::new(vec![1.0, 2.0], &[2]);
        let y = ops::sum(&ops::elementwise_scale(&w, &x));
        y.backward();
        set.sgd_step(0.05, 0.0);
        set.save(&path).unwrap();
        let after_step = ops::sum(&ops::elementwise_scale(&w, &x)).item();

        let mut restored = ParamSet::new();
        let w2 = restored.register("w", Tensor::with_grad(vec![0.0, 0.0], &[2]), true);
        restored.load(&path).unwrap();
        let replay = ops::sum(&ops::elementwise_scale(&w2, &x)).item();
        assert_eq!(after_step.to_bits(), replay.to_bits());
    }
}
