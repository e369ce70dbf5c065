//! Uniform access to the flat tensors inside a weight struct.
//!
//! Serialization, checksums, finite-difference checks and SGD updates all
//! walk parameters through this trait, always in declaration order.

/// A set of named tensors visited in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    /// FNV-1a over the little-endian bit patterns of every value.
    fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        self.visit(&mut |t| {
            for x in t {
                h.write(&x.to_bits().to_le_bytes());
            }
        });
        h.finish()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }

    /// `self -= lr * grad`, tensor by tensor. `grad` must share the layout.
    fn sgd_step(&mut self, grad: &Self, lr: f64)
    where
        Self: Sized,
    {
        let mut flat = alloc::vec::Vec::with_capacity(grad.param_count());
        grad.visit(&mut |t| flat.extend_from_slice(t));
        let mut at = 0;
        self.visit_mut(&mut |t| {
            for x in t.iter_mut() {
                *x -= lr * flat[at];
                at += 1;
            }
        });
    }

    /// Copy of all parameters in visit order.
    fn flatten(&self) -> alloc::vec::Vec<f64> {
        let mut flat = alloc::vec::Vec::with_capacity(self.param_count());
        self.visit(&mut |t| flat.extend_from_slice(t));
        flat
    }

    /// Mutable access to the parameter at flat index `idx`.
    fn with_param_mut(&mut self, idx: usize, f: &mut dyn FnMut(&mut f64)) {
        let mut base = 0;
        let mut done = false;
        self.visit_mut(&mut |t| {
            if !done && idx < base + t.len() {
                f(&mut t[idx - base]);
                done = true;
            }
            base += t.len();
        });
        assert!(done, "parameter index {idx} out of range");
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Fnv64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fnv64(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn write_u64(&mut self, x: u64) {
        self.write(&x.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}
