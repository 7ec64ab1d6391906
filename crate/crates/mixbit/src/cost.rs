//! BitOps accounting: per-layer MAC counts, bit-dependent cost
//! (MACs x b_w x b_a with b_w = b_a = b), normalization for reward shaping,
//! and savings ratios.

use crate::error::{Error, Result};
use crate::quant::BitSet;
use crate::supernet::BitConfig;

/// Geometry of one convolution for MAC counting.
#[derive(Debug, Clone, Copy)]
pub struct LayerGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// `H_out * W_out * C_out * C_in * K * K`.
pub fn macs_of_layer(g: &LayerGeometry) -> u64 {
    (g.h_out * g.w_out * g.c_out * g.c_in * g.kernel * g.kernel) as u64
}

/// Immutable cost table for one network: quantizable-layer MACs plus the
/// full-precision layers tracked separately at 32x32 bit weight.
#[derive(Debug, Clone)]
pub struct CostTable {
    layer_macs: Vec<u64>,
    bits: BitSet,
    /// Normalizer: total BitOps at uniform b_max.
    z: f64,
    fp_macs: u64,
}

impl CostTable {
    pub fn new(layer_macs: Vec<u64>, bits: BitSet, fp_macs: u64) -> Result<Self> {
        if layer_macs.is_empty() || layer_macs.iter().any(|&m| m == 0) {
            return Err(Error::Domain("every quantizable layer needs a positive MAC count".into()));
        }
        let bmax = bits.max() as u64;
        let z = layer_macs.iter().map(|&m| (m * bmax * bmax) as f64).sum();
        Ok(CostTable { layer_macs, bits, z, fp_macs })
    }

    pub fn num_layers(&self) -> usize {
        self.layer_macs.len()
    }

    pub fn bits(&self) -> &BitSet {
        &self.bits
    }

    pub fn layer_macs(&self, layer: usize) -> Result<u64> {
        self.layer_macs
            .get(layer)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown layer index {layer}")))
    }

    pub fn bitops(&self, layer: usize, b: u8) -> Result<u64> {
        Ok(self.layer_macs(layer)? * (b as u64) * (b as u64))
    }

    /// `BitOps(layer, b) / Z`; sums to exactly 1 over layers at b_max.
    pub fn normalized_cost(&self, layer: usize, b: u8) -> Result<f64> {
        Ok(self.bitops(layer, b)? as f64 / self.z)
    }

    pub fn network_bitops(&self, cfg: &BitConfig) -> Result<u64> {
        if cfg.len() != self.layer_macs.len() {
            return Err(Error::Dim(format!(
                "config has {} layers, cost table has {}",
                cfg.len(),
                self.layer_macs.len()
            )));
        }
        let mut total = 0u64;
        for (layer, &b) in cfg.bits().iter().enumerate() {
            total += self.bitops(layer, b)?;
        }
        Ok(total)
    }

    pub fn uniform_bitops(&self, b: u8) -> u64 {
        self.layer_macs.iter().map(|&m| m * (b as u64) * (b as u64)).sum()
    }

    /// Normalized cost of a whole config (network_bitops / Z), the quantity
    /// an episode's cost penalties sum to.
    pub fn normalized_network_cost(&self, cfg: &BitConfig) -> Result<f64> {
        Ok(self.network_bitops(cfg)? as f64 / self.z)
    }

    /// `1 - bitops / uniform-baseline bitops`, as a percentage.
    pub fn savings_ratio(&self, bitops: f64, baseline_b: u8) -> f64 {
        100.0 * (1.0 - bitops / self.uniform_bitops(baseline_b) as f64)
    }

    /// Total including the full-precision layers at 32x32-bit weight.
    pub fn total_including_fp(&self, cfg: &BitConfig) -> Result<u64> {
        Ok(self.network_bitops(cfg)? + self.fp_macs * 32 * 32)
    }

    pub fn fp_macs(&self) -> u64 {
        self.fp_macs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> CostTable {
        // Reference-net quantizable layers.
        let macs = vec![903_168, 1_806_336, 903_168, 1_806_336];
        CostTable::new(macs, BitSet::new(&[4, 3, 2]).unwrap(), 112_896 + 640).unwrap()
    }

    #[test]
    fn macs_examples() {
        let g = LayerGeometry { c_in: 16, c_out: 32, kernel: 3, h_out: 14, w_out: 14 };
        assert_eq!(macs_of_layer(&g), 903_168);
        let unit = LayerGeometry { c_in: 1, c_out: 1, kernel: 1, h_out: 1, w_out: 1 };
        assert_eq!(macs_of_layer(&unit), 1);
        let doubled = LayerGeometry { c_out: 64, ..g };
        assert_eq!(macs_of_layer(&doubled), 2 * macs_of_layer(&g));
    }

    #[test]
    fn normalization_sums_to_one_at_bmax() {
        let t = table();
        let total: f64 = (0..t.num_layers()).map(|i| t.normalized_cost(i, 4).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_layer_bit_ratio() {
        let t = table();
        let r = t.normalized_cost(2, 2).unwrap() / t.normalized_cost(2, 4).unwrap();
        assert!((r - 0.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_bitops_is_b_squared_times_macs() {
        let t = table();
        let macs: u64 = [903_168u64, 1_806_336, 903_168, 1_806_336].iter().sum();
        for b in [2u8, 3, 4] {
            assert_eq!(t.uniform_bitops(b), macs * (b as u64).pow(2));
            let cfg = BitConfig::uniform(b, 4);
            assert_eq!(t.network_bitops(&cfg).unwrap(), t.uniform_bitops(b));
        }
    }

    #[test]
    fn raising_one_bit_strictly_increases_cost() {
        let t = table();
        let base = BitConfig::new(vec![2, 2, 2, 2]);
        let base_cost = t.network_bitops(&base).unwrap();
        for layer in 0..4 {
            let mut bits = base.bits().to_vec();
            bits[layer] = 3;
            let cost = t.network_bitops(&BitConfig::new(bits)).unwrap();
            assert!(cost > base_cost);
        }
    }

    #[test]
    fn savings_ratio_format_quantity() {
        let t = table();
        let mixed = BitConfig::new(vec![3, 2, 3, 2]);
        let bitops = t.network_bitops(&mixed).unwrap() as f64;
        let pct = 100.0 * bitops / t.uniform_bitops(3) as f64;
        assert!(pct > 0.0 && pct < 100.0);
        assert!((t.savings_ratio(bitops, 3) - (100.0 - pct)).abs() < 1e-9);
    }

    #[test]
    fn unknown_layer_rejected() {
        assert!(table().normalized_cost(9, 4).is_err());
    }
}
