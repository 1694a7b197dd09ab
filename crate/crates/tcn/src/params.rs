//! Named parameter tensors with Adam state and a binary checkpoint format.

use crate::error::{Result, TcnError};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

const PARAMS_MAGIC: &[u8; 8] = b"TCNPAR01";

pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Adam hyper-parameters. Defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    step: u64,
    has_gradients: bool,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(TcnError::Data(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.params.len();
        let shape = value.shape.clone();
        self.params.push(Param {
            name: name.to_string(),
            value: Arc::new(value),
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| self.get(i))
    }

    /// Cheap handle to the parameter tensor for tape leaves.
    pub fn value(&self, idx: usize) -> Arc<Tensor> {
        Arc::clone(&self.params[idx].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Replace a parameter's value (used for checkpoint restore).
    pub fn set_value(&mut self, idx: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[idx];
        if value.shape != p.value.shape {
            return Err(TcnError::Shape(format!(
                "parameter {} expects shape {:?}, got {:?}",
                p.name, p.value.shape, value.shape
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn accumulate(&mut self, idx: usize, grad: &Tensor) {
        let g = &mut self.params[idx].grad;
        debug_assert_eq!(g.shape, grad.shape);
        for (gi, di) in g.data.iter_mut().zip(&grad.data) {
            *gi += di;
        }
    }

    pub fn accumulate_row(&mut self, idx: usize, row: usize, grad: &Tensor) {
        let g = &mut self.params[idx].grad;
        let cols = g.cols();
        debug_assert_eq!(grad.len(), cols);
        for (gi, di) in g.data[row * cols..(row + 1) * cols].iter_mut().zip(&grad.data) {
            *gi += di;
        }
    }

    /// Flag that a backward pass deposited gradients (possibly all zero).
    pub fn mark_gradients(&mut self) {
        self.has_gradients = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.fill(0.0);
        }
        self.has_gradients = false;
    }

    /// One Adam update over every parameter, then gradients are zeroed.
    /// Errors if no backward pass ran since the last step.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.has_gradients {
            return Err(TcnError::Data(
                "adam_step without gradients: run a backward pass first".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let value = Arc::make_mut(&mut p.value);
            for i in 0..value.data.len() {
                let g = p.grad.data[i];
                p.m.data[i] = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
                p.v.data[i] = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m.data[i] / bc1;
                let v_hat = p.v.data[i] / bc2;
                value.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Snapshot of all parameter values, in declaration order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| (*p.value).clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(TcnError::Data(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (i, t) in snapshot.iter().enumerate() {
            self.set_value(i, t.clone())?;
        }
        Ok(())
    }

    // ---- binary serialization (bit-exact little-endian) ----------------

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.shape.len() as u32).to_le_bytes())?;
            for d in &p.value.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for x in &p.value.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ParamStore> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(TcnError::Data("bad parameter file magic".into()));
        }
        let count = read_u64(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TcnError::Data("non-utf8 parameter name".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
