use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learning-rate group of a parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Policy,
    Flow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named array with its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub values: Vec<S>,
    pub first_moment: Vec<S>,
    pub second_moment: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> ParamArray<S> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zeroes the optimizer moments and step counter.
    pub fn clear_optimizer_state(&mut self) {
        self.first_moment.iter_mut().for_each(|m| *m = S::zero());
        self.second_moment.iter_mut().for_each(|v| *v = S::zero());
        self.step = 0;
    }

    /// Row `r` of a 2-D array.
    pub fn row(&self, r: usize) -> &[S] {
        let cols = self.shape.last().copied().unwrap_or(1);
        &self.values[r * cols..(r + 1) * cols]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    arrays: Vec<ParamArray<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { arrays: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], group: ParamGroup, values: Vec<S>) -> Result<ParamId> {
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::Shape(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!("`{name}`: shape {shape:?} needs {n} values, got {}", values.len())));
        }
        self.arrays.push(ParamArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            group,
            values,
            first_moment: vec![S::zero(); n],
            second_moment: vec![S::zero(); n],
            step: 0,
        });
        Ok(ParamId(self.arrays.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &ParamArray<S> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamArray<S> {
        &mut self.arrays[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.arrays.iter().position(|a| a.name == name).map(ParamId)
    }

    pub fn arrays(&self) -> &[ParamArray<S>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ParamArray<S>] {
        &mut self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count.
    pub fn parameter_count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<S> {
        Gradients {
            grads: self.arrays.iter().map(|a| vec![S::zero(); a.len()]).collect(),
            touched: vec![false; self.arrays.len()],
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for a in &self.arrays {
            if a.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "value", name: a.name.clone() });
            }
        }
        Ok(())
    }

    /// Flat copy of every value, in array order.
    pub fn flat_values(&self) -> Vec<S> {
        self.arrays.iter().flat_map(|a| a.values.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!("expected {} values, got {}", self.parameter_count(), flat.len())));
        }
        let mut offset = 0;
        for a in &mut self.arrays {
            let n = a.values.len();
            a.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`]. Arrays no recorded op read stay untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub grads: Vec<Vec<S>>,
    pub touched: Vec<bool>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.grads[id.0]
    }

    pub fn flat(&self) -> Vec<S> {
        self.grads.iter().flat_map(|g| g.iter().copied()).collect()
    }

    pub(crate) fn slot(&mut self, id: ParamId) -> &mut [S] {
        self.touched[id.0] = true;
        &mut self.grads[id.0]
    }

    pub fn check_finite(&self, store: &ParamStore<S>) -> Result<()> {
        for (g, a) in self.grads.iter().zip(store.arrays()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "gradient", name: a.name.clone() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update on every touched array. `lr` maps a group to its rate.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &Gradients<S>,
    lr: impl Fn(ParamGroup) -> f64,
    cfg: &AdamConfig,
) -> Result<()> {
    grads.check_finite(store)?;
    let (b1, b2, eps) = (S::of(cfg.beta1), S::of(cfg.beta2), S::of(cfg.eps));
    let one = S::one();
    for (i, array) in store.arrays_mut().iter_mut().enumerate() {
        if !grads.touched[i] {
            continue;
        }
        array.step += 1;
        let t = array.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let rate = S::of(lr(array.group));
        let g = &grads.grads[i];
        let moments = array.first_moment.iter_mut().zip(array.second_moment.iter_mut());
        for ((value, (m, v)), &gk) in array.values.iter_mut().zip(moments).zip(g) {
            *m = b1 * *m + (one - b1) * gk;
            *v = b2 * *v + (one - b2) * gk * gk;
            *value -= rate * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        if array.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "update", name: array.name.clone() });
        }
    }
    Ok(())
}
