//! Weight, activation, and gradient quantizers with straight-through
//! backward rules.
//!
//! Weights go to one or two bits via sign or a symmetric threshold;
//! dataflows (inputs and gradients) are quantized with the k-bit linear
//! map on the σ(k) grid, σ(k) = 2^(1−k).

use crate::config::{QuantScheme, WeightMode};
use crate::error::{Error, Result};
use crate::graph::{compile, compile_full, ComputeGraph};

/// q(x) = sign(clip(x, −1, 1)), with sign(0) = +1.
pub fn binarize(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            node: "binarize".into(),
        });
    }
    Ok(x.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect())
}

/// Ternary threshold δ ≈ (0.7/n)·Σ|w_i|.
pub fn ternary_delta(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArg("ternarize on an empty array".into()));
    }
    Ok(0.7 * w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64)
}

/// w_i → sign(w_i) if |w_i| > δ else 0 (strict comparison).
pub fn ternarize(w: &[f64]) -> Result<(Vec<f64>, f64)> {
    let delta = ternary_delta(w)?;
    let q = w
        .iter()
        .map(|&v| {
            if v.abs() > delta {
                v.signum()
            } else {
                0.0
            }
        })
        .collect();
    Ok((q, delta))
}

/// Unit grid distance of the k-bit linear map: σ(k) = 1/2^(k−1).
pub fn sigma(k: u32) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArg("sigma requires k ≥ 1".into()));
    }
    Ok((2.0f64).powi(1 - k as i32))
}

/// k-bit linear map: clip(σ·round(x/σ), −1+σ, 1−σ).
/// Rounding is half-away-from-zero, preserving odd symmetry.
pub fn quantize_linear(x: &[f64], k: u32) -> Result<Vec<f64>> {
    let s = sigma(k)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            node: "quantize_linear".into(),
        });
    }
    let lim = 1.0 - s;
    Ok(x.iter()
        .map(|&v| (s * (v / s).round()).clamp(-lim, lim))
        .collect())
}

/// XNOR-style per-layer scaling factor: α = mean(|w_i|).
pub fn scale_alpha(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArg("scale_alpha on an empty array".into()));
    }
    Ok(w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64)
}

/// Gradient quantization: max-normalize into [−1, 1], apply the k-bit
/// linear map, rescale. A zero gradient passes through unchanged.
pub fn quantize_gradient(g: &[f64], k: u32) -> Result<Vec<f64>> {
    let s = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s == 0.0 {
        return Ok(g.to_vec());
    }
    let scaled: Vec<f64> = g.iter().map(|&v| v / s).collect();
    let q = quantize_linear(&scaled, k)?;
    Ok(q.into_iter().map(|v| v * s).collect())
}

/// Quantize a weight tensor according to the scheme's weight mode.
pub fn quantize_weights(w: &[f64], mode: WeightMode) -> Result<Vec<f64>> {
    match mode {
        WeightMode::Binary => binarize(w),
        WeightMode::BinaryAlpha => {
            let alpha = scale_alpha(w)?;
            Ok(binarize(w)?.into_iter().map(|v| v * alpha).collect())
        }
        WeightMode::Ternary => Ok(ternarize(w)?.0),
    }
}

/// Straight-through estimator: identity inside the clip range |x| ≤ 1,
/// zero outside. Applied to binarize/ternarize/round in backward.
pub fn ste_mask(x: &[f64], upstream: &mut [f64]) {
    for (g, &v) in upstream.iter_mut().zip(x) {
        if v.abs() > 1.0 {
            *g = 0.0;
        }
    }
}

/// Re-attach a quantization scheme to a compiled graph: weight quantizers
/// on every conv except the stem and head layers (when `skip_first_last`),
/// a dataflow quantizer after each block output, and gradient quantization
/// on the matching backward edges. A full-precision scheme yields a graph
/// identical to the unquantized compile.
pub fn attach(graph: &ComputeGraph, scheme: QuantScheme) -> Result<ComputeGraph> {
    scheme.validate()?;
    let mut cfg = graph.config.clone();
    cfg.quant = scheme;
    if graph.iterative_wrapped {
        compile_full(&cfg)
    } else {
        compile(&cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DUNetConfig;
    use crate::graph::{OpKind, ParamKind};
    use proptest::prelude::*;

    #[test]
    fn binarize_sign_clip_and_tie_break() {
        assert_eq!(binarize(&[0.5, -2.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(binarize(&[0.0]).unwrap(), vec![1.0], "sign(0) = +1");
        let x = vec![-1.0, 1.0, -1.0];
        assert_eq!(binarize(&binarize(&x).unwrap()).unwrap(), x, "idempotent on ±1");
        assert!(binarize(&[f64::NAN]).is_err());
    }

    #[test]
    fn ternary_threshold_formula() {
        let w = [0.4, -0.8, 0.2, 1.0];
        let (q, delta) = ternarize(&w).unwrap();
        assert!((delta - 0.42).abs() < 1e-12);
        assert_eq!(q, vec![0.0, -1.0, 0.0, 1.0]);

        let zeros = [0.0; 4];
        let (q0, d0) = ternarize(&zeros).unwrap();
        assert_eq!(d0, 0.0);
        assert_eq!(q0, vec![0.0; 4], "|w| > δ is strict");

        assert!(ternarize(&[]).is_err());
    }

    #[test]
    fn ternary_pattern_scale_invariant() {
        let w = [0.4, -0.8, 0.2, 1.0, -0.05];
        let (q1, d1) = ternarize(&w).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * 3.5).collect();
        let (q2, d2) = ternarize(&scaled).unwrap();
        assert!((d2 - 3.5 * d1).abs() < 1e-12);
        assert_eq!(q1, q2);
    }

    #[test]
    fn sigma_values() {
        assert_eq!(sigma(1).unwrap(), 1.0);
        assert_eq!(sigma(2).unwrap(), 0.5);
        assert_eq!(sigma(8).unwrap(), 0.0078125);
        assert!(sigma(0).is_err());
    }

    #[test]
    fn linear_map_hand_cases() {
        // x=0 → 0 for all k
        for k in 1..=8 {
            assert_eq!(quantize_linear(&[0.0], k).unwrap()[0], 0.0);
        }
        // x=0.3, k=2 → round(0.6)·0.5 = 0.5, clipped to ±0.5 → 0.5
        assert_eq!(quantize_linear(&[0.3], 2).unwrap()[0], 0.5);
        // x=0.99, k=8 → grid-round then ceiling at 1−σ(8)
        let q = quantize_linear(&[0.99], 8).unwrap()[0];
        assert_eq!(q, 0.9921875);
        assert!(quantize_linear(&[f64::INFINITY], 4).is_err());
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(scale_alpha(&[1.0, -1.0, 1.0, -1.0]).unwrap(), 1.0);
        let w = [0.5, -0.5];
        let a = scale_alpha(&w).unwrap();
        assert_eq!(a, 0.5);
        let q = quantize_weights(&w, WeightMode::BinaryAlpha).unwrap();
        assert_eq!(q, vec![0.5, -0.5]);
        // homogeneity
        let w2: Vec<f64> = w.iter().map(|v| v * 3.0).collect();
        assert_eq!(scale_alpha(&w2).unwrap(), 3.0 * a);
        assert!(scale_alpha(&[]).is_err());
    }

    #[test]
    fn gradient_quantization_bounds() {
        assert_eq!(quantize_gradient(&[0.0, 0.0], 4).unwrap(), vec![0.0, 0.0]);
        // max |g| = 1 → identical to quantize_linear
        let g = [0.3, -1.0, 0.7];
        assert_eq!(
            quantize_gradient(&g, 3).unwrap(),
            quantize_linear(&g, 3).unwrap()
        );
        // |q−g|∞ ≤ s·σ/2 away from the clip boundary
        for k in 2..=6 {
            let s = 3.7;
            let sig = sigma(k).unwrap();
            let g: Vec<f64> = (0..200).map(|i| s * (i as f64 / 100.0 - 1.0)).collect();
            let q = quantize_gradient(&g, k).unwrap();
            for (qi, gi) in q.iter().zip(&g) {
                if gi.abs() <= s * (1.0 - sig) {
                    assert!(
                        (qi - gi).abs() <= s * sig / 2.0 + 1e-12,
                        "k={k} g={gi} q={qi}"
                    );
                }
            }
        }
    }

    /// Brute-force oracle: nearest grid point {m·σ} with half-away-from-zero
    /// ties, then clip to ±(1−σ).
    fn nearest_grid_oracle(x: f64, k: u32) -> f64 {
        let s = sigma(k).unwrap();
        let lim = 1.0 - s;
        let mut best = -lim;
        let mut bd = f64::INFINITY;
        let m_max = (1.0 / s) as i64;
        for m in -m_max..=m_max {
            let g = (m as f64 * s).clamp(-lim, lim);
            let d = (x - g).abs();
            // prefer larger magnitude on exact ties        (half away from zero)
            if d < bd - 1e-15 || (d < bd + 1e-15 && g.abs() > best.abs()) {
                bd = d;
                best = g;
            }
        }
        best
    }

    #[test]
    fn exhaustive_small_bit_widths_match_oracle() {
        for k in 1..=4u32 {
            let mut x = -2.0;
            while x <= 2.0 {
                let got = quantize_linear(&[x], k).unwrap()[0];
                let want = nearest_grid_oracle(x, k);
                assert_eq!(got, want, "k={k} x={x}");
                x += 0.001;
            }
        }
    }

    proptest! {
        #[test]
        fn linear_map_idempotent_range_grid(v in -4.0f64..4.0, k in 1u32..=8) {
            let q = quantize_linear(&[v], k).unwrap()[0];
            let qq = quantize_linear(&[q], k).unwrap()[0];
            prop_assert_eq!(q, qq, "idempotence must be exact");
            let s = sigma(k).unwrap();
            prop_assert!(q >= -1.0 + s - 1e-15 && q <= 1.0 - s + 1e-15);
            // grid membership: q is an integer multiple of σ (σ is a power
            // of two, so the division is exact)
            let m = q / s;
            prop_assert_eq!(m.round(), m);
        }

        #[test]
        fn quantizers_are_monotone_and_symmetric(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            k in 1u32..=8,
            delta in 0.0f64..2.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(
                quantize_linear(&[lo], k).unwrap()[0] <= quantize_linear(&[hi], k).unwrap()[0]
            );
            prop_assert!(binarize(&[lo]).unwrap()[0] <= binarize(&[hi]).unwrap()[0]);
            // ternarize as a scalar map at fixed δ
            let tern = |x: f64| if x.abs() > delta { x.signum() } else { 0.0 };
            prop_assert!(tern(lo) <= tern(hi));

            // odd symmetry (binarize: except the tie at exactly 0)
            prop_assert_eq!(
                quantize_linear(&[-a], k).unwrap()[0],
                -quantize_linear(&[a], k).unwrap()[0]
            );
            if a != 0.0 {
                prop_assert_eq!(binarize(&[-a]).unwrap()[0], -binarize(&[a]).unwrap()[0]);
            }
        }

        #[test]
        fn binarize_and_ternarize_codomains(vs in proptest::collection::vec(-3.0f64..3.0, 1..40)) {
            for v in binarize(&vs).unwrap() {
                prop_assert!(v == 1.0 || v == -1.0);
            }
            for v in ternarize(&vs).unwrap().0 {
                prop_assert!(v == 1.0 || v == 0.0 || v == -1.0);
            }
        }
    }

    fn small_cfg() -> DUNetConfig {
        DUNetConfig {
            num_unets: 2,
            levels: 2,
            order: 1,
            input_resolution: 8,
            num_landmarks: 4,
            stem_channels: 16,
            compress_channels: 16,
            growth_channels: 8,
            ..DUNetConfig::default()
        }
    }

    #[test]
    fn attach_full_precision_is_identity() {
        let g = compile(&small_cfg()).unwrap();
        let q = attach(&g, QuantScheme::default()).unwrap();
        assert_eq!(g.ops.len(), q.ops.len());
        assert_eq!(g.params.len(), q.params.len());
        assert_eq!(g.dump(), q.dump());
    }

    #[test]
    fn attach_binary_marks_non_exempt_convs() {
        let g = compile(&small_cfg()).unwrap();
        let q = attach(&g, QuantScheme::parse_compact("32/1/32:binary").unwrap()).unwrap();
        for p in &q.params {
            if p.kind != ParamKind::ConvWeight {
                assert!(p.wquant.is_none());
                continue;
            }
            let exempt = p.name == "stem.conv" || p.name.contains("head.");
            assert_eq!(
                p.wquant.is_none(),
                exempt,
                "param {} quantized={:?}",
                p.name,
                p.wquant
            );
        }
        // QIG schemes insert dataflow quantizers at block outputs
        let qig = attach(&g, QuantScheme::parse_compact("8/1/8:binary").unwrap()).unwrap();
        let cuts = qig
            .ops
            .iter()
            .filter(|o| matches!(o.kind, OpKind::QuantAct { .. }))
            .count();
        assert_eq!(cuts, 2 * 2 * 2, "one per block: N=2 × 2L=4");
    }

    #[test]
    fn attach_rejects_invalid_scheme() {
        let g = compile(&small_cfg()).unwrap();
        let bad = QuantScheme {
            bit_i: crate::config::BitWidth::Bits(8),
            bit_w: crate::config::BitWidth::Bits(1),
            bit_g: crate::config::BitWidth::Bits(6),
            weight_mode: Some(WeightMode::Binary),
            skip_first_last: true,
        };
        assert!(attach(&g, bad).is_err());
    }
}
