//! Masks, magnitude-based mask construction, the cubic sparsity schedule,
//! the constant-magnitude (CLT) and random-sign transforms, and mask
//! enforcement during training.
//!
//! Sparsity targets are applied per layer: every prunable matrix is pruned
//! to the global target independently, so layer-wise and global sparsity
//! coincide by construction. Ties on equal magnitude are broken by pruning
//! the lower flat index first, and fractional counts round half to even.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ParamRegistry;
use crate::optim::OptimizerState;

/// Binary keep/prune map over the prunable entries of one registry.
/// Entries are exactly 0.0 (pruned) or 1.0 (kept).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: BTreeMap<String, Vec<f64>>,
}

impl MaskSet {
    /// All-ones mask covering every prunable entry of `reg`.
    pub fn all_ones(reg: &ParamRegistry) -> Self {
        let masks = reg
            .prunable_entries()
            .map(|e| (e.name.clone(), vec![1.0; e.tensor.numel()]))
            .collect();
        MaskSet { masks }
    }

    pub fn from_map(masks: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (name, m) in &masks {
            if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract(format!(
                    "mask '{name}' contains values other than 0.0 and 1.0"
                )));
            }
        }
        Ok(MaskSet { masks })
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.masks.get(name).map(|v| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Pruned fraction over all covered elements.
    pub fn sparsity(&self) -> f64 {
        let total: usize = self.masks.values().map(|m| m.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let pruned: usize = self
            .masks
            .values()
            .map(|m| m.iter().filter(|&&v| v == 0.0).count())
            .sum();
        pruned as f64 / total as f64
    }

    /// Number of kept (mask 1) entries for one parameter.
    pub fn kept_count(&self, name: &str) -> Option<usize> {
        self.masks
            .get(name)
            .map(|m| m.iter().filter(|&&v| v == 1.0).count())
    }

    /// The mask covers exactly the prunable entries of `reg`, shape for shape.
    pub fn check_covers(&self, reg: &ParamRegistry) -> Result<()> {
        let mut expected = 0usize;
        for e in reg.prunable_entries() {
            expected += 1;
            match self.masks.get(&e.name) {
                Some(m) if m.len() == e.tensor.numel() => {}
                Some(m) => {
                    return Err(Error::Contract(format!(
                        "mask '{}' has {} elements, parameter has {}",
                        e.name,
                        m.len(),
                        e.tensor.numel()
                    )))
                }
                None => {
                    return Err(Error::Contract(format!(
                        "mask missing for prunable parameter '{}'",
                        e.name
                    )))
                }
            }
        }
        if expected != self.masks.len() {
            return Err(Error::Contract(format!(
                "mask covers {} parameters but registry has {} prunable entries",
                self.masks.len(),
                expected
            )));
        }
        Ok(())
    }
}

/// Cubic ramp parameters for gradual magnitude pruning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSchedule {
    pub s0: f64,
    pub s_final: f64,
    pub ramp_steps: u64,
    pub prune_interval: u64,
}

impl PruneSchedule {
    pub fn new(s0: f64, s_final: f64, ramp_steps: u64, prune_interval: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&s0) || !(0.0..=1.0).contains(&s_final) || s0 >= s_final {
            return Err(Error::Config(format!(
                "schedule needs 0 <= s0 < s_final <= 1, got s0={s0}, s_final={s_final}"
            )));
        }
        if ramp_steps == 0 || prune_interval == 0 || prune_interval > ramp_steps {
            return Err(Error::Config(format!(
                "schedule needs 1 <= prune_interval <= ramp_steps, got interval={prune_interval}, ramp={ramp_steps}"
            )));
        }
        Ok(PruneSchedule {
            s0,
            s_final,
            ramp_steps,
            prune_interval,
        })
    }
}

/// Sparsity target at step `t`:
/// s_t = s_final + min(0, (s0 - s_final) * (1 - t/ramp)^3).
/// Equals s0 at t = 0, reaches s_final at t = ramp_steps, and stays there.
pub fn target_sparsity(t: u64, sched: &PruneSchedule) -> f64 {
    let ratio = 1.0 - t as f64 / sched.ramp_steps as f64;
    let cubic = (sched.s0 - sched.s_final) * ratio.powi(3);
    sched.s_final + cubic.min(0.0)
}

/// Per-layer magnitude criterion: keep the largest-magnitude survivors so
/// that exactly round(sparsity * n) entries are masked in each parameter.
/// Entries pruned in `prior` stay pruned; ties are pruned lowest index first.
pub fn magnitude_mask(reg: &ParamRegistry, sparsity: f64, prior: &MaskSet) -> Result<MaskSet> {
    prior.check_covers(reg)?;
    // The prior's global sparsity may exceed the request by per-layer
    // rounding (each layer masks round(s*n) entries), so the global check
    // carries a half-count-per-layer slack; the exact monotonicity check is
    // per layer below.
    let layers = reg.prunable_entries().count().max(1);
    let total = reg.prunable_params().max(1);
    let slack = 0.5 * layers as f64 / total as f64 + 1e-12;
    let prior_sparsity = prior.sparsity();
    if sparsity < prior_sparsity - slack {
        return Err(Error::MaskMonotonicity {
            requested: sparsity,
            prior: prior_sparsity,
        });
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1]")));
    }
    let mut masks = BTreeMap::new();
    for entry in reg.prunable_entries() {
        let values = entry.tensor.values();
        let prior_mask = prior.get(&entry.name).expect("coverage checked");
        let n = values.len();
        let target_masked = (sparsity * n as f64).round_ties_even() as usize;
        let already_masked = prior_mask.iter().filter(|&&m| m == 0.0).count();
        if target_masked < already_masked {
            return Err(Error::MaskMonotonicity {
                requested: sparsity,
                prior: already_masked as f64 / n as f64,
            });
        }
        let mut mask = prior_mask.to_vec();
        let extra = target_masked - already_masked;
        if extra > 0 {
            // Select the `extra` smallest surviving magnitudes, lowest index
            // first on ties, without sorting the full layer.
            let mut survivors: Vec<usize> = (0..n).filter(|&i| prior_mask[i] == 1.0).collect();
            let cmp = |&a: &usize, &b: &usize| {
                values[a]
                    .abs()
                    .partial_cmp(&values[b].abs())
                    .expect("finite weights")
                    .then(a.cmp(&b))
            };
            if extra < survivors.len() {
                survivors.select_nth_unstable_by(extra - 1, cmp);
            }
            for &i in survivors.iter().take(extra) {
                mask[i] = 0.0;
            }
        }
        masks.insert(entry.name.clone(), mask);
    }
    Ok(MaskSet { masks })
}

/// Zero every masked entry; unmasked entries are untouched bitwise.
pub fn apply_mask(reg: &mut ParamRegistry, mask: &MaskSet) -> Result<()> {
    mask.check_covers(reg)?;
    for entry in reg.entries_mut() {
        if !entry.prunable {
            continue;
        }
        let m = mask.get(&entry.name).expect("coverage checked");
        for (v, &keep) in entry.tensor.values_mut().iter_mut().zip(m) {
            if keep == 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Identical contract to [`apply_mask`]; invoked after every optimizer step
/// of a masked run so pruned weights stay exactly zero throughout training.
pub fn enforce_mask_after_step(reg: &mut ParamRegistry, mask: &MaskSet) -> Result<()> {
    apply_mask(reg, mask)
}

/// Mask application during a run also clears the adaptive moments of pruned
/// positions, so optimizer state cannot keep pushing a pruned weight away
/// from zero.
pub fn apply_mask_with_moments(
    reg: &mut ParamRegistry,
    mask: &MaskSet,
    opt: &mut OptimizerState,
) -> Result<()> {
    apply_mask(reg, mask)?;
    for idx in 0..reg.len() {
        let entry = reg.entry_at(idx);
        if !entry.prunable {
            continue;
        }
        let m = mask.get(&entry.name).expect("coverage checked");
        let zeroed: Vec<usize> = m
            .iter()
            .enumerate()
            .filter(|(_, &keep)| keep == 0.0)
            .map(|(i, _)| i)
            .collect();
        opt.zero_moments_at(idx, zeroed.into_iter());
    }
    Ok(())
}

/// Per-layer magnitude scale: alpha = sqrt(6 / (fan_in + fan_out)).
pub fn alpha_for_layer(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn sign_with_positive_zero(v: f64) -> f64 {
    // Unmasked exact zeros map to +alpha by convention.
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Replace every surviving prunable entry by sign(p) * alpha of its layer;
/// masked entries become 0, biases are untouched. Idempotent.
pub fn clt_transform(reg: &mut ParamRegistry, mask: &MaskSet) -> Result<()> {
    mask.check_covers(reg)?;
    for entry in reg.entries_mut() {
        if !entry.prunable {
            continue;
        }
        let alpha = alpha_for_layer(entry.fan_in, entry.fan_out);
        let m = mask.get(&entry.name).expect("coverage checked");
        for (v, &keep) in entry.tensor.values_mut().iter_mut().zip(m) {
            *v = if keep == 0.0 {
                0.0
            } else {
                sign_with_positive_zero(*v) * alpha
            };
        }
    }
    Ok(())
}

/// Ablation control: surviving entries get magnitude alpha with a sign drawn
/// uniformly from {-1, +1} per entry; deterministic per seed.
pub fn random_sign_transform(reg: &mut ParamRegistry, mask: &MaskSet, seed: u64) -> Result<()> {
    mask.check_covers(reg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for entry in reg.entries_mut() {
        if !entry.prunable {
            continue;
        }
        let alpha = alpha_for_layer(entry.fan_in, entry.fan_out);
        let m = mask.get(&entry.name).expect("coverage checked");
        for (v, &keep) in entry.tensor.values_mut().iter_mut().zip(m) {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            *v = if keep == 0.0 { 0.0 } else { sign * alpha };
        }
    }
    Ok(())
}

/// Iterative target sequence: 10..80% in 10-point steps, then 85/90/95/98%.
pub const LADDER_PERCENTS: [u32; 12] = [10, 20, 30, 40, 50, 60, 70, 80, 85, 90, 95, 98];

/// Ladder prefix ending at `target`; errors when `target` is off the ladder.
pub fn sparsity_ladder(target: f64) -> Result<Vec<f64>> {
    let levels: Vec<f64> = LADDER_PERCENTS.iter().map(|&p| p as f64 / 100.0).collect();
    let pos = levels.iter().position(|&l| (l - target).abs() < 1e-9);
    match pos {
        Some(i) => Ok(levels[..=i].to_vec()),
        None => Err(Error::Config(format!(
            "target sparsity {target} is not on the ladder {:?}",
            LADDER_PERCENTS.map(|p| p as f64 / 100.0)
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Registry with a single prunable row-vector layer, for mask tests.
    fn layer_reg(values: &[f64]) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.add_matrix(
            "w",
            Tensor::new(vec![1, values.len()], values.to_vec()).unwrap(),
            3,
            3,
        )
        .unwrap();
        reg
    }

    #[test]
    fn schedule_endpoints() {
        let sched = PruneSchedule::new(0.0, 0.98, 1000, 20).unwrap();
        assert_eq!(target_sparsity(0, &sched), 0.0);
        assert_eq!(target_sparsity(1000, &sched), 0.98);
        assert_eq!(target_sparsity(5000, &sched), 0.98);
    }

    #[test]
    fn schedule_midpoint_hand_values() {
        // (1 - 1/2)^3 = 0.125: 0.98 - 0.98*0.125 = 0.8575
        let sched = PruneSchedule::new(0.0, 0.98, 1000, 20).unwrap();
        assert!((target_sparsity(500, &sched) - 0.8575).abs() < 1e-12);
        // warm start at 0.6: 0.98 - 0.38*0.125 = 0.9325
        let sched = PruneSchedule::new(0.6, 0.98, 1000, 20).unwrap();
        assert!((target_sparsity(500, &sched) - 0.9325).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotone_and_clamped() {
        let sched = PruneSchedule::new(0.1, 0.9, 777, 7).unwrap();
        let mut prev = -1.0;
        for t in 0..2000 {
            let s = target_sparsity(t, &sched);
            assert!(s >= prev - 1e-15, "non-decreasing");
            assert!(s >= sched.s0 - 1e-12 && s <= sched.s_final + 1e-12);
            prev = s;
        }
    }

    #[test]
    fn magnitude_mask_brute_force_example() {
        let reg = layer_reg(&[0.1, -0.5, 0.3, -0.05]);
        let prior = MaskSet::all_ones(&reg);
        let m = magnitude_mask(&reg, 0.5, &prior).unwrap();
        assert_eq!(m.get("w").unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn magnitude_mask_zero_sparsity_is_identity() {
        let reg = layer_reg(&[0.1, -0.5, 0.3, -0.05]);
        let prior = MaskSet::all_ones(&reg);
        let m = magnitude_mask(&reg, 0.0, &prior).unwrap();
        assert_eq!(m, prior);
    }

    #[test]
    fn magnitude_mask_tie_breaks_by_lower_index() {
        let reg = layer_reg(&[0.2, -0.2, 0.7, 0.9]);
        let prior = MaskSet::all_ones(&reg);
        let m = magnitude_mask(&reg, 0.25, &prior).unwrap();
        assert_eq!(m.get("w").unwrap(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn magnitude_mask_rejects_sparsity_regression() {
        let reg = layer_reg(&[0.1, -0.5, 0.3, -0.05]);
        let prior = MaskSet::all_ones(&reg);
        let half = magnitude_mask(&reg, 0.5, &prior).unwrap();
        assert!(matches!(
            magnitude_mask(&reg, 0.25, &half),
            Err(Error::MaskMonotonicity { .. })
        ));
    }

    #[test]
    fn magnitude_mask_chains_monotonically() {
        let reg = layer_reg(&[0.4, -0.1, 0.9, -0.6, 0.05, 0.3, -0.8, 0.2]);
        let prior = MaskSet::all_ones(&reg);
        let m1 = magnitude_mask(&reg, 0.25, &prior).unwrap();
        let m2 = magnitude_mask(&reg, 0.5, &m1).unwrap();
        for (a, b) in m1.get("w").unwrap().iter().zip(m2.get("w").unwrap()) {
            assert!(b <= a, "keep-set must shrink");
        }
        assert_eq!(m2.sparsity(), 0.5);
    }

    #[test]
    fn apply_mask_zeroes_only_masked_entries() {
        let mut reg = layer_reg(&[3.5, -2.0]);
        let masks = BTreeMap::from([("w".to_string(), vec![0.0, 1.0])]);
        let m = MaskSet::from_map(masks).unwrap();
        apply_mask(&mut reg, &m).unwrap();
        let values = reg.get("w").unwrap().tensor.values();
        assert_eq!(values, &[0.0, -2.0]);
        assert_eq!(values[0].to_bits(), 0.0_f64.to_bits(), "exact +0.0");
    }

    #[test]
    fn apply_all_ones_mask_is_bitwise_identity() {
        let mut reg = layer_reg(&[3.5, -2.0]);
        let before = reg.clone();
        let m = MaskSet::all_ones(&reg);
        apply_mask(&mut reg, &m).unwrap();
        assert!(reg.bitwise_eq(&before));
    }

    #[test]
    fn apply_all_zero_mask_spares_biases() {
        let mut reg = layer_reg(&[3.5, -2.0]);
        reg.add_bias("b", Tensor::new(vec![2], vec![0.5, 0.25]).unwrap())
            .unwrap();
        let masks = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        let m = MaskSet::from_map(masks).unwrap();
        apply_mask(&mut reg, &m).unwrap();
        assert_eq!(reg.get("w").unwrap().tensor.values(), &[0.0, 0.0]);
        assert_eq!(reg.get("b").unwrap().tensor.values(), &[0.5, 0.25]);
    }

    #[test]
    fn coverage_mismatch_is_a_contract_error() {
        let mut reg = layer_reg(&[1.0, 2.0]);
        let m = MaskSet::from_map(BTreeMap::new()).unwrap();
        assert!(matches!(
            apply_mask(&mut reg, &m),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn alpha_values() {
        assert_eq!(alpha_for_layer(3, 3), 1.0);
        assert!((alpha_for_layer(4, 4) - 0.75_f64.sqrt()).abs() < 1e-12);
        assert!((alpha_for_layer(64, 256) - (6.0 / 320.0_f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn clt_transform_alpha_one_case() {
        let mut reg = layer_reg(&[0.2, -0.7]); // fans 3/3 -> alpha 1
        let m = MaskSet::all_ones(&reg);
        clt_transform(&mut reg, &m).unwrap();
        assert_eq!(reg.get("w").unwrap().tensor.values(), &[1.0, -1.0]);
    }

    #[test]
    fn clt_transform_sign_of_zero_is_positive() {
        let mut reg = layer_reg(&[0.0, -0.0]);
        let m = MaskSet::all_ones(&reg);
        clt_transform(&mut reg, &m).unwrap();
        // Exact zero keeps the +alpha convention regardless of its sign bit.
        assert_eq!(reg.get("w").unwrap().tensor.values(), &[1.0, 1.0]);
    }

    #[test]
    fn clt_transform_with_mask_and_fan_four() {
        let mut reg = ParamRegistry::new();
        reg.add_matrix(
            "w",
            Tensor::new(vec![1, 3], vec![0.2, -0.7, 0.01]).unwrap(),
            4,
            4,
        )
        .unwrap();
        let m = MaskSet::from_map(BTreeMap::from([("w".to_string(), vec![1.0, 1.0, 0.0])]))
            .unwrap();
        clt_transform(&mut reg, &m).unwrap();
        let a = 0.75_f64.sqrt();
        let got = reg.get("w").unwrap().tensor.values();
        assert!((got[0] - a).abs() < 1e-15);
        assert!((got[1] + a).abs() < 1e-15);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn clt_transform_is_idempotent() {
        let mut reg = layer_reg(&[0.2, -0.7, 0.01, -0.3]);
        let m = MaskSet::from_map(BTreeMap::from([(
            "w".to_string(),
            vec![1.0, 0.0, 1.0, 1.0],
        )]))
        .unwrap();
        clt_transform(&mut reg, &m).unwrap();
        let once = reg.clone();
        clt_transform(&mut reg, &m).unwrap();
        assert!(reg.bitwise_eq(&once));
    }

    #[test]
    fn random_sign_is_deterministic_and_constant_magnitude() {
        let base = layer_reg(&[0.2, -0.7, 0.01, -0.3]);
        let m = MaskSet::all_ones(&base);
        let mut a = base.clone();
        let mut b = base.clone();
        random_sign_transform(&mut a, &m, 99).unwrap();
        random_sign_transform(&mut b, &m, 99).unwrap();
        assert!(a.bitwise_eq(&b));
        for &v in a.get("w").unwrap().tensor.values() {
            assert_eq!(v.abs(), 1.0); // alpha = 1 for fans 3/3
        }
        let mut c = base.clone();
        random_sign_transform(&mut c, &m, 100).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn random_sign_flips_about_half_the_signs() {
        // 128x128 = 16384 entries; binomial concentration puts the flip
        // fraction within 0.5 +- 0.05 with overwhelming probability.
        let n = 128;
        let values: Vec<f64> = (0..n * n)
            .map(|i| if i % 2 == 0 { 0.5 } else { -0.5 })
            .collect();
        let mut reg = ParamRegistry::new();
        reg.add_matrix(
            "w",
            Tensor::new(vec![n, n], values.clone()).unwrap(),
            n,
            n,
        )
        .unwrap();
        let m = MaskSet::all_ones(&reg);
        random_sign_transform(&mut reg, &m, 1234).unwrap();
        let after = reg.get("w").unwrap().tensor.values();
        let flips = values
            .iter()
            .zip(after)
            .filter(|(before, after)| before.signum() != after.signum())
            .count();
        let frac = flips as f64 / (n * n) as f64;
        assert!((frac - 0.5).abs() < 0.05, "flip fraction {frac}");
    }

    #[test]
    fn ladder_prefixes() {
        let full = sparsity_ladder(0.98).unwrap();
        assert_eq!(
            full,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.98]
        );
        assert_eq!(full.len(), 12);
        assert_eq!(sparsity_ladder(0.1).unwrap(), vec![0.1]);
        assert_eq!(sparsity_ladder(0.85).unwrap().len(), 9);
        assert!(matches!(sparsity_ladder(0.93), Err(Error::Config(_))));
    }

    #[test]
    fn round_half_to_even_prune_counts() {
        // 5 elements at 0.5 -> 2.5 rounds to 2; at 0.3 -> 1.5 rounds to 2.
        let reg = layer_reg(&[0.5, 0.4, 0.3, 0.2, 0.1]);
        let prior = MaskSet::all_ones(&reg);
        let m = magnitude_mask(&reg, 0.5, &prior).unwrap();
        assert_eq!(m.get("w").unwrap(), &[1.0, 1.0, 1.0, 0.0, 0.0]);
        let m = magnitude_mask(&reg, 0.3, &prior).unwrap();
        assert_eq!(m.get("w").unwrap(), &[1.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
