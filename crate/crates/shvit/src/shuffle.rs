//! Token shuffle at the final encoder layer.
//!
//! Patch tokens are partitioned into contiguous groups which are permuted
//! uniformly at random as blocks (optionally a full per-token permutation),
//! Gaussian noise is added to the shuffled patch tokens, and whole tokens are
//! zeroed with a fixed probability — in that order, so masked tokens end up
//! exactly zero. Special tokens (class token, distillation token) are fixed
//! points of all three transforms. The final block runs twice with shared
//! weights: once on the clean sequence (feature `F_g`) and once on the
//! perturbed one (`F_n`); the fused feature is their concatenation.
//!
//! A configuration whose permutation is forced to identity with zero noise
//! and zero mask probability short-circuits to the clean branch, making the
//! whole module a structural no-op.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::vit::{FinalLayerHook, Mode, TokenSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleConfig {
    /// Tokens per contiguous group; the last group may be short. `g >= N`
    /// degenerates to a single group (identity permutation).
    pub group_size: usize,
    /// Standard deviation of the additive Gaussian noise; 0 disables it.
    pub noise_sigma: f64,
    /// Per-token probability of zeroing the whole token vector.
    pub mask_prob: f64,
    /// Apply the perturbations during evaluation too. Off by default so that
    /// retrieval descriptors are reproducible.
    pub apply_in_eval: bool,
    /// Permute individual tokens instead of groups.
    pub per_token: bool,
    /// Force the identity permutation (ablation switch).
    pub identity_perm: bool,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            noise_sigma: 0.1,
            mask_prob: 0.1,
            apply_in_eval: false,
            per_token: false,
            identity_perm: false,
        }
    }
}

impl ShuffleConfig {
    /// Configuration under which the module is a structural no-op.
    pub fn disabled() -> Self {
        Self {
            group_size: 4,
            noise_sigma: 0.0,
            mask_prob: 0.0,
            apply_in_eval: false,
            per_token: false,
            identity_perm: true,
        }
    }

    pub fn validate(&self) -> TensorResult<()> {
        if self.group_size == 0 {
            return Err(TensorError::InvalidValue {
                what: "shuffle group_size",
                value: 0.0,
            });
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TensorError::InvalidValue {
                what: "shuffle noise_sigma",
                value: self.noise_sigma,
            });
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(TensorError::InvalidValue {
                what: "shuffle mask_prob",
                value: self.mask_prob,
            });
        }
        Ok(())
    }

    /// True when every transform is the identity by construction, so the
    /// perturbed branch can reuse the clean branch outright.
    pub fn is_identity(&self) -> bool {
        self.identity_perm && self.noise_sigma == 0.0 && self.mask_prob == 0.0
    }
}

/// What one application of the shuffle module actually did.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleRecord {
    /// Sequence-level bijection: output token `i` is input token
    /// `permutation[i]`. Special-token indices are fixed points.
    pub permutation: Vec<usize>,
    pub noise_sigma: f64,
    /// Number of scalar components that received noise.
    pub noised_components: usize,
    /// Sequence-level indices of tokens zeroed by the mask.
    pub masked: Vec<usize>,
}

impl ShuffleRecord {
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.permutation.len()];
        for &p in &self.permutation {
            if p >= seen.len() || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        true
    }
}

/// Samples a patch-level permutation (indices `0..num_patches`) according to
/// the grouping rules.
pub fn sample_patch_permutation(
    num_patches: usize,
    cfg: &ShuffleConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if cfg.identity_perm {
        return (0..num_patches).collect();
    }
    if cfg.per_token {
        let mut perm: Vec<usize> = (0..num_patches).collect();
        perm.shuffle(rng);
        return perm;
    }
    let g = cfg.group_size;
    let num_groups = num_patches.div_ceil(g);
    let mut order: Vec<usize> = (0..num_groups).collect();
    order.shuffle(rng);
    let mut perm = Vec::with_capacity(num_patches);
    for group in order {
        let start = group * g;
        let end = (start + g).min(num_patches);
        perm.extend(start..end);
    }
    perm
}

fn lift_to_sequence(patch_perm: &[usize], num_special: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..num_special).collect();
    perm.extend(patch_perm.iter().map(|&p| p + num_special));
    perm
}

/// Permutes the patch tokens of a sequence (groups move as blocks; see
/// [`ShuffleConfig`]). Special tokens never move.
pub fn shuffle_tokens(
    seq: &TokenSequence,
    cfg: &ShuffleConfig,
    rng: &mut ChaCha8Rng,
) -> TensorResult<(TokenSequence, ShuffleRecord)> {
    cfg.validate()?;
    let n = seq.num_patches();
    if n == 0 {
        return Err(TensorError::EmptyInput {
            op: "shuffle_tokens",
        });
    }
    let perm = lift_to_sequence(&sample_patch_permutation(n, cfg, rng), seq.num_special());
    let d = seq.embed_dim();
    let mut data = Vec::with_capacity(seq.seq_len() * d);
    for &src in &perm {
        data.extend_from_slice(seq.tokens().row(src));
    }
    let out = TokenSequence::new(Tensor::new(vec![seq.seq_len(), d], data)?, seq.num_special())?;
    let record = ShuffleRecord {
        permutation: perm,
        noise_sigma: 0.0,
        noised_components: 0,
        masked: Vec::new(),
    };
    Ok((out, record))
}

/// Adds i.i.d. `N(0, sigma^2)` to every patch-token component. `sigma == 0`
/// returns the input bitwise; special tokens are never touched.
pub fn inject_noise(
    seq: &TokenSequence,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> TensorResult<TokenSequence> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(TensorError::InvalidValue {
            what: "noise sigma",
            value: sigma,
        });
    }
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let d = seq.embed_dim();
    let ns = seq.num_special();
    let mut data = seq.tokens().data().to_vec();
    for row in ns..seq.seq_len() {
        for j in 0..d {
            data[row * d + j] += normal.sample(rng);
        }
    }
    TokenSequence::new(Tensor::new(vec![seq.seq_len(), d], data)?, ns)
}

/// Zeroes each patch token (the whole vector) independently with probability
/// `mask_prob`. Special tokens are never masked. Returns the masked indices.
pub fn zero_mask(
    seq: &TokenSequence,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> TensorResult<(TokenSequence, Vec<usize>)> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(TensorError::InvalidValue {
            what: "mask probability",
            value: mask_prob,
        });
    }
    if mask_prob == 0.0 {
        return Ok((seq.clone(), Vec::new()));
    }
    let d = seq.embed_dim();
    let ns = seq.num_special();
    let mut data = seq.tokens().data().to_vec();
    let mut masked = Vec::new();
    for row in ns..seq.seq_len() {
        if rng.gen::<f64>() < mask_prob {
            data[row * d..(row + 1) * d].fill(0.0);
            masked.push(row);
        }
    }
    Ok((
        TokenSequence::new(Tensor::new(vec![seq.seq_len(), d], data)?, ns)?,
        masked,
    ))
}

/// Test utility: true when the multiset of patch-token vectors is unchanged
/// (exact comparison; meaningful on the noise-free, mask-free path).
pub fn multiset_preserved(before: &TokenSequence, after: &TokenSequence) -> bool {
    if before.seq_len() != after.seq_len() || before.embed_dim() != after.embed_dim() {
        return false;
    }
    let collect = |s: &TokenSequence| {
        let mut rows: Vec<Vec<u64>> = (s.num_special()..s.seq_len())
            .map(|r| s.tokens().row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows
    };
    collect(before) == collect(after)
}

/// The shuffle module as a final-layer hook. Owns its RNG stream so that two
/// identically seeded hooks replay the same perturbations.
pub struct TokenShuffle {
    pub cfg: ShuffleConfig,
    rng: ChaCha8Rng,
    /// Record of the most recent perturbed pass, for inspection in tests.
    pub last_record: Option<ShuffleRecord>,
}

impl TokenShuffle {
    pub fn new(cfg: ShuffleConfig, rng: ChaCha8Rng) -> TensorResult<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng,
            last_record: None,
        })
    }

    fn active(&self, mode: Mode) -> bool {
        mode == Mode::Train || self.cfg.apply_in_eval
    }

    /// Applies shuffle, noise, and mask to `seq` on the tape. Gradients flow
    /// through the permutation and the mask; the noise enters as a constant.
    fn perturb_on_tape(
        &mut self,
        tape: &mut Tape,
        seq: TensorId,
        num_special: usize,
    ) -> TensorResult<(TensorId, ShuffleRecord)> {
        let t = tape.value(seq);
        let (rows, d) = (t.rows(), t.cols());
        if rows <= num_special {
            return Err(TensorError::EmptyInput {
                op: "shuffle perturbation",
            });
        }
        let n = rows - num_special;
        let perm = lift_to_sequence(
            &sample_patch_permutation(n, &self.cfg, &mut self.rng),
            num_special,
        );
        let mut out = tape.permute_rows(seq, &perm)?;

        let mut noised_components = 0;
        if self.cfg.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.cfg.noise_sigma).expect("validated sigma");
            let mut noise = vec![0.0; rows * d];
            for row in num_special..rows {
                for j in 0..d {
                    noise[row * d + j] = normal.sample(&mut self.rng);
                    noised_components += 1;
                }
            }
            let nid = tape.constant(Tensor::new(vec![rows, d], noise)?);
            out = tape.add(out, nid)?;
        }

        let mut masked = Vec::new();
        if self.cfg.mask_prob > 0.0 {
            let mut mask = vec![1.0; rows * d];
            for row in num_special..rows {
                if self.rng.gen::<f64>() < self.cfg.mask_prob {
                    mask[row * d..(row + 1) * d].fill(0.0);
                    masked.push(row);
                }
            }
            if !masked.is_empty() {
                let mid = tape.constant(Tensor::new(vec![rows, d], mask)?);
                out = tape.mul(out, mid)?;
            }
        }

        Ok((
            out,
            ShuffleRecord {
                permutation: perm,
                noise_sigma: self.cfg.noise_sigma,
                noised_components,
                masked,
            },
        ))
    }
}

impl FinalLayerHook for TokenShuffle {
    fn final_layer(
        &mut self,
        tape: &mut Tape,
        seq: TensorId,
        num_special: usize,
        mode: Mode,
        run_block: &mut dyn FnMut(&mut Tape, TensorId) -> TensorResult<TensorId>,
    ) -> TensorResult<(TensorId, TensorId)> {
        let clean = run_block(tape, seq)?;
        if !self.active(mode) || self.cfg.is_identity() {
            self.last_record = None;
            return Ok((clean, clean));
        }
        let (perturbed_seq, record) = self.perturb_on_tape(tape, seq, num_special)?;
        self.last_record = Some(record);
        let perturbed = run_block(tape, perturbed_seq)?;
        Ok((clean, perturbed))
    }
}

/// Runs the final stage on the clean and perturbed sequences and fuses the
/// class-token features: returns `(F_g, F_n, concat(F_g, F_n))`.
pub fn shuffle_layer_forward(
    tape: &mut Tape,
    seq: TensorId,
    num_special: usize,
    hook: &mut dyn FinalLayerHook,
    mode: Mode,
    run_block: &mut dyn FnMut(&mut Tape, TensorId) -> TensorResult<TensorId>,
) -> TensorResult<(TensorId, TensorId, TensorId)> {
    let (clean, perturbed) = hook.final_layer(tape, seq, num_special, mode, run_block)?;
    let f_g = tape.slice_rows(clean, 0, 1)?;
    let f_n = if perturbed == clean {
        f_g
    } else {
        tape.slice_rows(perturbed, 0, 1)?
    };
    let fused = tape.concat_cols(&[f_g, f_n])?;
    Ok((f_g, f_n, fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use std::collections::HashMap;

    fn seq_from_rows(rows: &[Vec<f64>], num_special: usize) -> TokenSequence {
        TokenSequence::new(Tensor::from_rows(rows).unwrap(), num_special).unwrap()
    }

    fn arange_seq(n_tokens: usize, d: usize, num_special: usize) -> TokenSequence {
        let rows: Vec<Vec<f64>> = (0..n_tokens)
            .map(|r| (0..d).map(|j| (r * d + j) as f64).collect())
            .collect();
        seq_from_rows(&rows, num_special)
    }

    #[test]
    fn single_group_is_identity() {
        let seq = arange_seq(5, 3, 1);
        let cfg = ShuffleConfig {
            group_size: 10,
            ..ShuffleConfig::default()
        };
        let mut rng = derive_rng(1, &[]);
        let (out, record) = shuffle_tokens(&seq, &cfg, &mut rng).unwrap();
        assert_eq!(record.permutation, vec![0, 1, 2, 3, 4]);
        assert_eq!(out.tokens().data(), seq.tokens().data());
    }

    #[test]
    fn two_group_swap_moves_blocks() {
        // Patches t1..t4 in groups (t1,t2)(t3,t4); find a seed that swaps them.
        let seq = arange_seq(5, 2, 1);
        let cfg = ShuffleConfig {
            group_size: 2,
            noise_sigma: 0.0,
            mask_prob: 0.0,
            ..ShuffleConfig::default()
        };
        let mut swapped = false;
        for seed in 0..64 {
            let mut rng = derive_rng(seed, &[]);
            let (out, record) = shuffle_tokens(&seq, &cfg, &mut rng).unwrap();
            if record.permutation == vec![0, 3, 4, 1, 2] {
                // [cls, t3, t4, t1, t2]
                assert_eq!(out.tokens().row(1), seq.tokens().row(3));
                assert_eq!(out.tokens().row(2), seq.tokens().row(4));
                assert_eq!(out.tokens().row(3), seq.tokens().row(1));
                assert_eq!(out.tokens().row(4), seq.tokens().row(2));
                swapped = true;
                break;
            }
        }
        assert!(swapped, "no seed produced the swapped group order");
    }

    #[test]
    fn group_orders_are_uniform() {
        // N=8, g=2 -> 4 groups -> 24 orders, each with frequency 1/24.
        let seq = arange_seq(9, 1, 1);
        let cfg = ShuffleConfig {
            group_size: 2,
            ..ShuffleConfig::default()
        };
        let mut rng = derive_rng(42, &[7]);
        let trials = 10_000usize;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..trials {
            let (_, record) = shuffle_tokens(&seq, &cfg, &mut rng).unwrap();
            *counts.entry(record.permutation).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 24);
        // 3-sigma binomial bound around trials/24.
        let p = 1.0 / 24.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (&ref order, &count) in &counts {
            assert!(
                (count as f64 - mean).abs() < 3.0 * sigma,
                "order {order:?} occurred {count} times (expected {mean:.1} +- {:.1})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn noise_zero_sigma_is_bitwise_identity() {
        let seq = arange_seq(4, 3, 1);
        let mut rng = derive_rng(2, &[]);
        let out = inject_noise(&seq, 0.0, &mut rng).unwrap();
        assert_eq!(out.tokens().data(), seq.tokens().data());
    }

    #[test]
    fn noise_never_touches_special_tokens() {
        let seq = arange_seq(6, 4, 2);
        for seed in 0..20 {
            let mut rng = derive_rng(seed, &[]);
            let out = inject_noise(&seq, 2.0, &mut rng).unwrap();
            assert_eq!(out.tokens().row(0), seq.tokens().row(0));
            assert_eq!(out.tokens().row(1), seq.tokens().row(1));
        }
    }

    #[test]
    fn noise_moments_match_sigma() {
        let d = 100;
        let rows = 1001;
        let seq = TokenSequence::new(Tensor::zeros(vec![rows, d]), 1).unwrap();
        let mut rng = derive_rng(9, &[1]);
        let out = inject_noise(&seq, 0.5, &mut rng).unwrap();
        let samples: Vec<f64> = out.tokens().data()[d..].to_vec();
        assert_eq!(samples.len(), 100_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / samples.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 0.25).abs() < 0.0025, "var {var}");
    }

    #[test]
    fn mask_boundaries() {
        let seq = arange_seq(5, 3, 1);
        let mut rng = derive_rng(3, &[]);
        let (out, masked) = zero_mask(&seq, 0.0, &mut rng).unwrap();
        assert!(masked.is_empty());
        assert_eq!(out.tokens().data(), seq.tokens().data());

        let (out, masked) = zero_mask(&seq, 1.0, &mut rng).unwrap();
        assert_eq!(masked, vec![1, 2, 3, 4]);
        assert_eq!(out.tokens().row(0), seq.tokens().row(0));
        for r in 1..5 {
            assert!(out.tokens().row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mask_counts_follow_binomial() {
        let seq = TokenSequence::new(Tensor::zeros(vec![101, 2]), 1).unwrap();
        let mut rng = derive_rng(4, &[2]);
        let trials = 1000;
        let mut total = 0usize;
        for _ in 0..trials {
            let (_, masked) = zero_mask(&seq, 0.3, &mut rng).unwrap();
            total += masked.len();
        }
        let mean_count = total as f64 / trials as f64;
        // Binomial(100, 0.3): sd of the mean over 1000 trials.
        let sd = (100.0 * 0.3 * 0.7f64).sqrt() / (trials as f64).sqrt();
        assert!(
            (mean_count - 30.0).abs() < 3.0 * sd,
            "mean masked count {mean_count}"
        );
    }

    #[test]
    fn record_inverse_restores_input_bitwise() {
        let seq = arange_seq(9, 4, 1);
        let cfg = ShuffleConfig {
            group_size: 2,
            noise_sigma: 0.0,
            mask_prob: 0.0,
            ..ShuffleConfig::default()
        };
        for seed in 0..50 {
            let mut rng = derive_rng(seed, &[3]);
            let (out, record) = shuffle_tokens(&seq, &cfg, &mut rng).unwrap();
            assert!(record.is_bijection());
            let inv = record.inverse_permutation();
            let d = seq.embed_dim();
            let mut restored = Vec::with_capacity(seq.seq_len() * d);
            for &src in &inv {
                restored.extend_from_slice(out.tokens().row(src));
            }
            assert_eq!(restored, seq.tokens().data());
        }
    }

    #[test]
    fn multiset_preserved_on_pure_shuffles() {
        for seed in 0..100u64 {
            for shape in 0..10usize {
                let n = 2 + shape;
                let d = 1 + (shape % 4);
                let rows: Vec<Vec<f64>> = (0..n + 1)
                    .map(|r| (0..d).map(|j| ((r * 31 + j * 7 + shape) as f64).sin()).collect())
                    .collect();
                let seq = seq_from_rows(&rows, 1);
                let cfg = ShuffleConfig {
                    group_size: 1 + (seed as usize % 3),
                    per_token: seed % 2 == 0,
                    noise_sigma: 0.0,
                    mask_prob: 0.0,
                    identity_perm: false,
                    apply_in_eval: false,
                };
                let mut rng = derive_rng(seed, &[shape as u64]);
                let (out, _) = shuffle_tokens(&seq, &cfg, &mut rng).unwrap();
                assert!(multiset_preserved(&seq, &out));
            }
        }
    }

    #[test]
    fn multiset_broken_by_noise() {
        let seq = arange_seq(5, 3, 1);
        let mut rng = derive_rng(11, &[]);
        let noised = inject_noise(&seq, 0.7, &mut rng).unwrap();
        assert!(!multiset_preserved(&seq, &noised));
    }

    #[test]
    fn empty_patch_sequence_is_rejected() {
        let seq = TokenSequence::new(Tensor::zeros(vec![2, 3]), 1).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::zeros(vec![1, 3]));
        let mut hook = TokenShuffle::new(ShuffleConfig::default(), derive_rng(0, &[])).unwrap();
        let err = hook.perturb_on_tape(&mut tape, id, 1).unwrap_err();
        assert!(matches!(err, TensorError::EmptyInput { .. }));
        // while the value-level op also rejects a sequence with zero patches
        let cfg = ShuffleConfig::default();
        let mut rng = derive_rng(0, &[]);
        drop(seq); // two-token sequence with one special token still has one patch
        let one_patch = TokenSequence::new(Tensor::zeros(vec![2, 3]), 1).unwrap();
        assert!(shuffle_tokens(&one_patch, &cfg, &mut rng).is_ok());
    }
}
