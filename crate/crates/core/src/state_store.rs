//! Layer selection, the shared-state ablation, memory accounting and the
//! in-memory form of a cache entry. The binary cache file lives in the
//! `staterank` crate.

use alloc::{
    format,
    string::{String, ToString},
    vec::Vec,
};
use core::fmt;

use num_rational::Ratio;

use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::rwkv::StateStack;

/// Named layer subsets: (name, model depth, layer indices).
pub const PRESETS: &[(&str, usize, &[usize])] = &[
    ("12L-top-heavy-3", 12, &[9, 10, 11]),
    ("12L-uniform-3a", 12, &[0, 5, 11]),
    ("12L-uniform-3b", 12, &[1, 6, 10]),
    ("12L-top-heavy-6", 12, &[6, 7, 8, 9, 10, 11]),
    ("12L-uniform-6", 12, &[0, 3, 5, 7, 9, 11]),
    ("12L-full", 12, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]),
    ("24L-top-heavy-1", 24, &[23]),
    ("24L-uniform-3", 24, &[1, 11, 22]),
    ("24L-top-heavy-6", 24, &[18, 19, 20, 21, 22, 23]),
    ("24L-uniform-6", 24, &[1, 6, 11, 15, 19, 22]),
    (
        "24L-full",
        24,
        &[
            0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23,
        ],
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LayerSelection {
    Preset(String),
    Explicit(Vec<usize>),
    UniformGeneric(usize),
    TopHeavy(usize),
    Full,
}

impl LayerSelection {
    /// Accepts `full`, `top-heavy:K`, `uniform:K`, a preset name, or a
    /// comma-separated index list.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let count = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad layer count '{v}'")))
        };
        if s == "full" {
            Ok(LayerSelection::Full)
        } else if let Some(k) = s.strip_prefix("top-heavy:") {
            Ok(LayerSelection::TopHeavy(count(k)?))
        } else if let Some(k) = s.strip_prefix("uniform:") {
            Ok(LayerSelection::UniformGeneric(count(k)?))
        } else if PRESETS.iter().any(|p| p.0 == s) {
            Ok(LayerSelection::Preset(s.to_string()))
        } else if !s.is_empty() && s.chars().all(|c| c.is_ascii_digit() || c == ',' || c == ' ') {
            s.split(',')
                .map(|t| count(t.trim()))
                .collect::<Result<Vec<_>>>()
                .map(LayerSelection::Explicit)
        } else {
            Err(Error::UnknownPreset(s.to_string()))
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::Preset(name) => f.write_str(name),
            LayerSelection::Explicit(ix) => {
                for (i, l) in ix.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{l}")?;
                }
                Ok(())
            }
            LayerSelection::UniformGeneric(k) => write!(f, "uniform:{k}"),
            LayerSelection::TopHeavy(k) => write!(f, "top-heavy:{k}"),
            LayerSelection::Full => f.write_str("full"),
        }
    }
}

/// Resolve `selection` against a model of depth `n_layers`. The result is
/// strictly increasing and within `[0, n_layers)`.
pub fn select_layers(n_layers: usize, selection: &LayerSelection) -> Result<Vec<usize>> {
    let check_k = |k: usize| {
        if k == 0 || k > n_layers {
            Err(Error::InvalidArgument(format!(
                "cannot select {k} of {n_layers} layers"
            )))
        } else {
            Ok(k)
        }
    };
    match selection {
        LayerSelection::Full => Ok((0..n_layers).collect()),
        LayerSelection::TopHeavy(k) => {
            let k = check_k(*k)?;
            Ok((n_layers - k..n_layers).collect())
        }
        LayerSelection::UniformGeneric(k) => Ok(uniform_stride(n_layers, check_k(*k)?)),
        LayerSelection::Preset(name) => {
            let &(_, depth, layers) = PRESETS
                .iter()
                .find(|p| p.0 == name)
                .ok_or_else(|| Error::UnknownPreset(name.clone()))?;
            if depth != n_layers {
                return Err(Error::InvalidArgument(format!(
                    "preset {name} is for {depth} layers, model has {n_layers}"
                )));
            }
            Ok(layers.to_vec())
        }
        LayerSelection::Explicit(ix) => {
            if ix.is_empty() {
                return Err(Error::InvalidArgument("empty layer list".into()));
            }
            if ix.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument("layer list must be strictly increasing".into()));
            }
            if let Some(&bad) = ix.iter().find(|&&l| l >= n_layers) {
                return Err(Error::InvalidArgument(format!(
                    "layer {bad} out of range for depth {n_layers}"
                )));
            }
            Ok(ix.clone())
        }
    }
}

/// `round(i·(L−1)/(k−1))` for `i < k`, with any collision pushed forward and
/// the tail pulled back inside the range. `k = 1` picks the last layer.
fn uniform_stride(n_layers: usize, k: usize) -> Vec<usize> {
    if k == 1 {
        return alloc::vec![n_layers - 1];
    }
    let span = (n_layers - 1) as f64;
    let mut out: Vec<usize> = (0..k)
        .map(|i| libm::round(i as f64 * span / (k - 1) as f64) as usize)
        .collect();
    for i in 1..k {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1;
        }
    }
    for i in (0..k).rev() {
        let cap = n_layers - (k - i);
        if out[i] > cap {
            out[i] = cap;
        }
    }
    out
}

/// Replace every layer's matrix state with the final layer's. Token-shift
/// carries stay per layer.
pub fn share_final_state(stack: &StateStack) -> Result<StateStack> {
    if !stack.is_full() {
        return Err(Error::PartialStack {
            have: stack.layer_indices().len(),
            need: stack.n_layers(),
        });
    }
    let last = stack
        .states()
        .last()
        .ok_or(Error::PartialStack { have: 0, need: 0 })?
        .wkv
        .clone();
    let states = stack
        .states()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.wkv = last.clone();
            s
        })
        .collect();
    StateStack::new(
        stack.n_layers(),
        stack.layer_indices().to_vec(),
        states,
        stack.fingerprint(),
        stack.token_count(),
    )
}

/// Per-document byte counts of a matrix-state cache versus a Transformer
/// KV cache of the same shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MemoryReport {
    pub n_layers: u64,
    pub n_heads: u64,
    pub head_size: u64,
    pub d_model: u64,
    pub tokens: u64,
    pub bytes_per_value: u64,
    pub selected_layers: u64,
    /// `L_sel · H · S² · b`
    pub bytes_state: u64,
    /// `L · 2 · d_model · T · b`
    pub bytes_kv: u64,
    /// Token-shift carries stored alongside each selected layer; not part
    /// of `bytes_state`.
    pub overhead_bytes: u64,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub ratio: Ratio<u64>,
}

impl MemoryReport {
    pub fn state_mb(&self) -> String {
        format_mb(self.bytes_state)
    }

    pub fn kv_mb(&self) -> String {
        format_mb(self.bytes_kv)
    }

    /// Ratio as a decimal string when it terminates within two places,
    /// otherwise as `num/den`.
    pub fn ratio_string(&self) -> String {
        let r = self.ratio;
        let scaled = r * Ratio::from_integer(100u64);
        if scaled.is_integer() {
            let h = scaled.to_integer();
            if h.is_multiple_of(100) {
                format!("{}", h / 100)
            } else if h.is_multiple_of(10) {
                format!("{}.{}", h / 100, (h % 100) / 10)
            } else {
                format!("{}.{:02}", h / 100, h % 100)
            }
        } else {
            format!("{}/{}", r.numer(), r.denom())
        }
    }
}

/// Memory footprint per document. `selected_layers` defaults to `n_layers`.
pub fn memory_report(
    n_layers: u64,
    n_heads: u64,
    head_size: u64,
    d_model: u64,
    tokens: u64,
    bytes_per_value: u64,
    selected_layers: Option<u64>,
) -> Result<MemoryReport> {
    let l_sel = selected_layers.unwrap_or(n_layers);
    if [n_layers, n_heads, head_size, d_model, tokens, bytes_per_value, l_sel].contains(&0) {
        return Err(Error::InvalidArgument("memory report inputs must be >= 1".into()));
    }
    let overflow = || Error::InvalidArgument("memory report overflows u64".into());
    let bytes_state = l_sel
        .checked_mul(n_heads)
        .and_then(|x| x.checked_mul(head_size * head_size))
        .and_then(|x| x.checked_mul(bytes_per_value))
        .ok_or_else(overflow)?;
    let bytes_kv = n_layers
        .checked_mul(2 * d_model)
        .and_then(|x| x.checked_mul(tokens))
        .and_then(|x| x.checked_mul(bytes_per_value))
        .ok_or_else(overflow)?;
    Ok(MemoryReport {
        n_layers,
        n_heads,
        head_size,
        d_model,
        tokens,
        bytes_per_value,
        selected_layers: l_sel,
        bytes_state,
        bytes_kv,
        overhead_bytes: l_sel * 2 * d_model * bytes_per_value,
        ratio: Ratio::new(bytes_kv, bytes_state),
    })
}

/// `bytes / 2^20` with two decimals, rounding exact halves to even.
pub fn format_mb(bytes: u64) -> String {
    let num = bytes as u128 * 100;
    let den = 1u128 << 20;
    let mut hundredths = num / den;
    let rem = num % den;
    if rem * 2 > den || (rem * 2 == den && hundredths % 2 == 1) {
        hundredths += 1;
    }
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Five reference model shapes for the state-vs-KV comparison:
/// (label, L, d_model, H, S) at T = 2000 and 2 bytes per value.
pub const REFERENCE_MODELS: &[(&str, u64, u64, u64, u64)] = &[
    ("0.1B", 12, 768, 12, 64),
    ("0.4B", 24, 1024, 16, 64),
    ("1.4B", 24, 2048, 32, 64),
    ("3B", 32, 2560, 40, 64),
    ("~7B", 32, 4096, 64, 64),
];
pub const REFERENCE_TOKENS: u64 = 2000;
pub const REFERENCE_BYTES: u64 = 2;

pub fn reference_models() -> Vec<(&'static str, MemoryReport)> {
    REFERENCE_MODELS
        .iter()
        .map(|&(label, l, d, h, s)| {
            let r = memory_report(l, h, s, d, REFERENCE_TOKENS, REFERENCE_BYTES, None).expect("table shapes are valid");
            (label, r)
        })
        .collect()
}

/// One cached document.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub doc_id: String,
    pub state: StateStack,
    pub embedding: Option<Embedding>,
    /// Tokens consumed to reach `state`, EOS tokens included.
    pub token_count: u64,
}

impl CacheEntry {
    pub fn new(doc_id: impl Into<String>, state: StateStack, embedding: Option<Embedding>) -> Result<Self> {
        let doc_id = doc_id.into();
        if doc_id.is_empty() {
            return Err(Error::InvalidArgument("doc_id must be non-empty".into()));
        }
        Ok(CacheEntry {
            token_count: state.token_count(),
            doc_id,
            state,
            embedding,
        })
    }
}
