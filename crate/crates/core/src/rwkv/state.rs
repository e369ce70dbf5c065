use alloc::{format, vec::Vec};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Fnv64;
use crate::tensor::{Matrix, Vector};

/// Recurrent state of one layer: one `S×S` matrix per head plus the
/// previous-token carries for both token shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub wkv: Vec<Matrix>,
    pub tm_shift: Vector,
    pub cm_shift: Vector,
}

impl LayerState {
    pub fn zeros(n_heads: usize, head_size: usize) -> Self {
        let d = n_heads * head_size;
        LayerState {
            wkv: (0..n_heads).map(|_| Matrix::zeros(head_size, head_size)).collect(),
            tm_shift: Vector::zeros(d),
            cm_shift: Vector::zeros(d),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.wkv.len()
    }

    pub fn head_size(&self) -> usize {
        self.wkv.first().map_or(0, |m| m.rows())
    }

    /// Number of stored values: `H·S² + 2·d_model`.
    pub fn value_count(&self) -> usize {
        self.wkv.iter().map(|m| m.data().len()).sum::<usize>() + self.tm_shift.dim() + self.cm_shift.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.wkv.iter().all(Matrix::is_finite) && self.tm_shift.is_finite() && self.cm_shift.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.wkv.iter().fold(0.0, |m, w| f64::max(m, w.max_abs()))
    }

    /// Head matrices concatenated row-major, head by head.
    pub fn flatten_wkv(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.wkv.iter().map(|m| m.data().len()).sum());
        for m in &self.wkv {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn wkv_checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        for x in self.flatten_wkv() {
            h.write_u64(x.to_bits());
        }
        h.finish()
    }

    fn matches(&self, n_heads: usize, head_size: usize) -> bool {
        let d = n_heads * head_size;
        self.wkv.len() == n_heads
            && self.wkv.iter().all(|m| m.shape() == (head_size, head_size))
            && self.tm_shift.dim() == d
            && self.cm_shift.dim() == d
    }
}

/// Ordered per-layer states, stamped with the fingerprint of the model that
/// produced them and the number of tokens consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct StateStack {
    n_layers: usize,
    layer_indices: Vec<usize>,
    states: Vec<LayerState>,
    fingerprint: u64,
    token_count: u64,
}

impl StateStack {
    pub fn new(
        n_layers: usize,
        layer_indices: Vec<usize>,
        states: Vec<LayerState>,
        fingerprint: u64,
        token_count: u64,
    ) -> Result<Self> {
        if layer_indices.len() != states.len() {
            return Err(Error::Shape(format!(
                "{} layer indices for {} states",
                layer_indices.len(),
                states.len()
            )));
        }
        if layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "layer indices must be strictly increasing".into(),
            ));
        }
        if layer_indices.last().is_some_and(|&l| l >= n_layers) {
            return Err(Error::InvalidArgument(format!(
                "layer index out of range for depth {n_layers}"
            )));
        }
        if let Some(first) = states.first() {
            let (h, s) = (first.n_heads(), first.head_size());
            if !states.iter().all(|st| st.matches(h, s)) {
                return Err(Error::Shape("layer states disagree in shape".into()));
            }
        }
        Ok(StateStack {
            n_layers,
            layer_indices,
            states,
            fingerprint,
            token_count,
        })
    }

    /// All-zero full-depth stack for `config`.
    pub fn zeros(config: &ModelConfig, fingerprint: u64) -> Self {
        StateStack {
            n_layers: config.n_layers,
            layer_indices: (0..config.n_layers).collect(),
            states: (0..config.n_layers)
                .map(|_| LayerState::zeros(config.n_heads, config.head_size))
                .collect(),
            fingerprint,
            token_count: 0,
        }
    }

    /// Depth of the model that produced the stack.
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn layer_indices(&self) -> &[usize] {
        &self.layer_indices
    }

    pub fn states(&self) -> &[LayerState] {
        &self.states
    }

    pub(crate) fn states_mut(&mut self) -> &mut [LayerState] {
        &mut self.states
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    pub(crate) fn set_token_count(&mut self, t: u64) {
        self.token_count = t;
    }

    pub fn is_full(&self) -> bool {
        self.layer_indices.len() == self.n_layers
    }

    pub fn state_for(&self, layer: usize) -> Option<&LayerState> {
        self.layer_indices.binary_search(&layer).ok().map(|i| &self.states[i])
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(LayerState::is_finite)
    }

    /// Stored values across all layers; independent of `token_count`.
    pub fn value_count(&self) -> usize {
        self.states.iter().map(LayerState::value_count).sum()
    }

    /// Hash of every wkv value and shift carry, in layer order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        for (i, s) in self.layer_indices.iter().zip(&self.states) {
            h.write_u64(*i as u64);
            for m in &s.wkv {
                m.data().iter().for_each(|x| h.write_u64(x.to_bits()));
            }
            s.tm_shift.iter().for_each(|x| h.write_u64(x.to_bits()));
            s.cm_shift.iter().for_each(|x| h.write_u64(x.to_bits()));
        }
        h.finish()
    }

    /// Bitwise equality of every stored value (stricter than `==` on NaN/-0).
    pub fn bit_identical(&self, other: &StateStack) -> bool {
        self.layer_indices == other.layer_indices
            && self.token_count == other.token_count
            && self.fingerprint == other.fingerprint
            && self.states.len() == other.states.len()
            && self.states.iter().zip(&other.states).all(|(a, b)| {
                let bits = |s: &LayerState| {
                    let mut v: Vec<u64> = s.flatten_wkv().iter().map(|x| x.to_bits()).collect();
                    v.extend(s.tm_shift.iter().map(|x| x.to_bits()));
                    v.extend(s.cm_shift.iter().map(|x| x.to_bits()));
                    v
                };
                bits(a) == bits(b)
            })
    }
}

/// Sub-stack holding only `layer_indices`, in stack order.
pub fn extract_states(stack: &StateStack, layer_indices: &[usize]) -> Result<StateStack> {
    if layer_indices.is_empty() {
        return Err(Error::InvalidArgument("no layers requested".into()));
    }
    let mut states = Vec::with_capacity(layer_indices.len());
    for &l in layer_indices {
        states.push(stack.state_for(l).ok_or(Error::MissingLayer(l))?.clone());
    }
    StateStack::new(
        stack.n_layers,
        layer_indices.to_vec(),
        states,
        stack.fingerprint,
        stack.token_count,
    )
}
