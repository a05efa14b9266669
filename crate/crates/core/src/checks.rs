//! Executable decomposition identities.
//!
//! Each check evaluates two computation routes of the same quantity and
//! reports the error between them:
//!
//! - gate linearity: an affine gate W a + U b + bias over summed parts equals
//!   the double sum of per-part gates with parts scaled by the opposite
//!   list's count (bias added once);
//! - bilinear expansion: a score product over summed parts equals the sum of
//!   all pairwise part products;
//! - four-part scores: with shared bias-free q/k projections, the pre-softmax
//!   score matrix of previous+incremental against itself equals the sum of
//!   the four block score matrices (softmax is outside the identity and is
//!   deliberately excluded);
//! - distribution law: a generic probe for whether a candidate pairing
//!   function distributes over part sums, with the affine offset f(0,0)
//!   counted once.
//!
//! Relative error is the inf-norm of the difference over the inf-norm of the
//! reference route, which stays meaningful when individual entries cancel to
//! zero.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::json::Json;
use crate::rng::SplitMix64;
use crate::tensor::{matvec, max_abs_diff, rel_error, Precision, ShapeError, Tensor};

/// Tolerance for exact algebraic identities in 64-bit arithmetic.
pub const TOL_F64: f64 = 1e-10;
/// Tolerance when emulating 32-bit arithmetic.
pub const TOL_F32: f64 = 1e-5;

pub fn tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => TOL_F64,
        Precision::F32 => TOL_F32,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub claim: String,
    pub instance: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl DecompositionReport {
    fn from_routes(claim: &str, instance: String, got: &[f64], want: &[f64], tol: f64) -> Self {
        let max_abs_error = max_abs_diff(got, want);
        let max_rel_error = rel_error(got, want);
        DecompositionReport {
            claim: claim.to_string(),
            instance,
            max_abs_error,
            max_rel_error,
            tolerance: tol,
            pass: max_rel_error <= tol,
        }
    }

    pub fn to_json(&self) -> String {
        Json::object()
            .str("claim", &self.claim)
            .str("instance", &self.instance)
            .num("max_abs_error", self.max_abs_error)
            .num("max_rel_error", self.max_rel_error)
            .num("tolerance", self.tolerance)
            .bool("pass", self.pass)
            .finish()
    }
}

pub fn reports_to_json(reports: &[DecompositionReport]) -> String {
    let mut arr = Json::array();
    for r in reports {
        arr = arr.item(&r.to_json());
    }
    arr.finish()
}

fn quantize(p: Precision, mut v: Vec<f64>) -> Vec<f64> {
    p.quantize(&mut v);
    v
}

fn sum_parts(parts: &[Tensor], p: Precision) -> Vec<f64> {
    let mut acc = vec![0.0; parts[0].numel()];
    for part in parts {
        for (a, &x) in acc.iter_mut().zip(part.data()) {
            *a += x;
        }
        p.quantize(&mut acc);
    }
    acc
}

fn check_vector_parts(op: &'static str, parts: &[Tensor], dim: usize) -> Result<(), ShapeError> {
    if parts.is_empty() {
        return Err(ShapeError::new(op, "empty part list".into()));
    }
    for part in parts {
        if part.shape() != [dim] {
            return Err(ShapeError::new(
                op,
                format!("part shape {:?}, expected [{dim}]", part.shape()),
            ));
        }
    }
    Ok(())
}

/// Gate linearity: W (sum a_i) + U (sum b_j) + bias equals
/// sum_i sum_j (W a_i / m + U b_j / n) + bias, with n = |parts_a|,
/// m = |parts_b|.
pub fn check_gate_linearity(
    w: &Tensor,
    u: &Tensor,
    bias: &Tensor,
    parts_a: &[Tensor],
    parts_b: &[Tensor],
    precision: Precision,
) -> Result<DecompositionReport, ShapeError> {
    let (d, d2) = w.dims2();
    if d != d2 || u.shape() != w.shape() || bias.shape() != [d] {
        return Err(ShapeError::new(
            "gate_linearity",
            "W and U must be square with a matching bias".into(),
        ));
    }
    check_vector_parts("gate_linearity", parts_a, d)?;
    check_vector_parts("gate_linearity", parts_b, d)?;
    let n = parts_a.len();
    let m = parts_b.len();
    let tol = tolerance(precision);

    let ra = sum_parts(parts_a, precision);
    let rb = sum_parts(parts_b, precision);
    let mut lhs = quantize(precision, matvec(w.data(), &ra, d, d));
    let ub = quantize(precision, matvec(u.data(), &rb, d, d));
    for ((l, &x), &b) in lhs.iter_mut().zip(ub.iter()).zip(bias.data()) {
        *l += x + b;
    }
    precision.quantize(&mut lhs);

    let mut rhs = vec![0.0; d];
    for a_part in parts_a {
        for b_part in parts_b {
            let sa: Vec<f64> = a_part.data().iter().map(|x| x / m as f64).collect();
            let sb: Vec<f64> = b_part.data().iter().map(|x| x / n as f64).collect();
            let wa = quantize(precision, matvec(w.data(), &quantize(precision, sa), d, d));
            let ub = quantize(precision, matvec(u.data(), &quantize(precision, sb), d, d));
            for ((r, &x), &y) in rhs.iter_mut().zip(wa.iter()).zip(ub.iter()) {
                *r += x + y;
            }
            precision.quantize(&mut rhs);
        }
    }
    for (r, &b) in rhs.iter_mut().zip(bias.data()) {
        *r += b;
    }
    precision.quantize(&mut rhs);

    Ok(DecompositionReport::from_routes(
        "gate-linearity",
        format!("d={d} n={n} m={m}"),
        &lhs,
        &rhs,
        tol,
    ))
}

fn outer_products(
    parts_a: &[Tensor],
    parts_b: &[Tensor],
    precision: Precision,
) -> Result<(Vec<f64>, Vec<f64>, usize, usize), ShapeError> {
    if parts_a.is_empty() || parts_b.is_empty() {
        return Err(ShapeError::new("bilinear_expansion", "empty part list".into()));
    }
    let (la, d) = parts_a[0].dims2();
    let (lb, d2) = parts_b[0].dims2();
    if d != d2 {
        return Err(ShapeError::new(
            "bilinear_expansion",
            format!("width mismatch: {d} vs {d2}"),
        ));
    }
    for p in parts_a.iter().chain(parts_b.iter()) {
        let (_, w) = p.dims2();
        if w != d {
            return Err(ShapeError::new(
                "bilinear_expansion",
                format!("part width {w}, expected {d}"),
            ));
        }
    }
    let ra = sum_parts(parts_a, precision);
    let rb = sum_parts(parts_b, precision);
    let mut lhs = vec![0.0; la * lb];
    crate::tensor::matmul_nt(&ra, &rb, la, d, lb, &mut lhs);
    precision.quantize(&mut lhs);

    let mut rhs = vec![0.0; la * lb];
    for pa in parts_a {
        for pb in parts_b {
            let mut term = vec![0.0; la * lb];
            crate::tensor::matmul_nt(pa.data(), pb.data(), la, d, lb, &mut term);
            precision.quantize(&mut term);
            for (r, &t) in rhs.iter_mut().zip(term.iter()) {
                *r += t;
            }
            precision.quantize(&mut rhs);
        }
    }
    Ok((lhs, rhs, la, lb))
}

/// Bilinear expansion: (sum a_i)(sum b_j)^T equals sum_ij a_i b_j^T.
pub fn check_bilinear_expansion(
    parts_a: &[Tensor],
    parts_b: &[Tensor],
    precision: Precision,
) -> Result<DecompositionReport, ShapeError> {
    let (lhs, rhs, la, lb) = outer_products(parts_a, parts_b, precision)?;
    Ok(DecompositionReport::from_routes(
        "bilinear-expansion",
        format!(
            "n={} m={} score={la}x{lb}",
            parts_a.len(),
            parts_b.len()
        ),
        &lhs,
        &rhs,
        tolerance(precision),
    ))
}

/// Four-part score split: with shared bias-free projections wq/wk, the score
/// matrix of (prev + incr) against itself equals the sum of the four block
/// score matrices. Checked pre-softmax only.
pub fn check_four_part(
    prev: &Tensor,
    incr: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    precision: Precision,
) -> Result<DecompositionReport, ShapeError> {
    if prev.shape() != incr.shape() {
        return Err(ShapeError::new(
            "four_part",
            format!("shape mismatch {:?} vs {:?}", prev.shape(), incr.shape()),
        ));
    }
    let (l, d) = prev.dims2();
    let (dq, da) = wq.dims2();
    let (dk, da2) = wk.dims2();
    if dq != d || dk != d || da != da2 {
        return Err(ShapeError::new(
            "four_part",
            "projection shapes do not match the representations".into(),
        ));
    }
    let full: Vec<f64> = prev
        .data()
        .iter()
        .zip(incr.data())
        .map(|(a, b)| a + b)
        .collect();
    let full = quantize(precision, full);
    let project = |x: &[f64], w: &Tensor| {
        let mut out = vec![0.0; l * da];
        crate::tensor::matmul_nn(x, w.data(), l, d, da, &mut out);
        quantize(precision, out)
    };
    let score = |a: &[f64], b: &[f64]| {
        let qa = project(a, wq);
        let kb = project(b, wk);
        let mut s = vec![0.0; l * l];
        crate::tensor::matmul_nt(&qa, &kb, l, da, l, &mut s);
        quantize(precision, s)
    };
    let lhs = score(&full, &full);
    let blocks = [
        score(prev.data(), prev.data()),
        score(prev.data(), incr.data()),
        score(incr.data(), prev.data()),
        score(incr.data(), incr.data()),
    ];
    let mut rhs = vec![0.0; l * l];
    for b in &blocks {
        for (r, &x) in rhs.iter_mut().zip(b.iter()) {
            *r += x;
        }
        precision.quantize(&mut rhs);
    }
    Ok(DecompositionReport::from_routes(
        "four-part-scores",
        format!("l={l} d={d} d_attn={da}"),
        &lhs,
        &rhs,
        tolerance(precision),
    ))
}

/// Part scaling applied to the pairwise terms of the distribution-law probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartScaling {
    /// f(a_i, b_j) as-is; right for multiplicative (bilinear) candidates.
    None,
    /// f(a_i / m, b_j / n); right for additive (affine gate) candidates.
    ByCounts,
}

/// Distribution-law probe for an arbitrary pairing function: compares
/// f(sum a_i, sum b_j) with sum_ij w_ij (f(a_i', b_j') - f(0,0)) + f(0,0).
/// The f(0,0) offset makes an affine candidate's constant term count once,
/// and vanishes for candidates with f(0,0) = 0.
pub fn check_distribution_law<F>(
    f: F,
    name: &str,
    parts_a: &[Tensor],
    parts_b: &[Tensor],
    weights: Option<&[f64]>,
    scaling: PartScaling,
    precision: Precision,
) -> Result<DecompositionReport, ShapeError>
where
    F: Fn(&Tensor, &Tensor) -> Tensor,
{
    if parts_a.is_empty() || parts_b.is_empty() {
        return Err(ShapeError::new("distribution_law", "empty part list".into()));
    }
    let n = parts_a.len();
    let m = parts_b.len();
    if let Some(w) = weights {
        if w.len() != n * m {
            return Err(ShapeError::new(
                "distribution_law",
                format!("{} weights for {n}x{m} pairs", w.len()),
            ));
        }
    }
    let shape_a = parts_a[0].shape().to_vec();
    let shape_b = parts_b[0].shape().to_vec();
    let ra = Tensor::new(shape_a.clone(), sum_parts(parts_a, precision)).unwrap();
    let rb = Tensor::new(shape_b.clone(), sum_parts(parts_b, precision)).unwrap();
    let lhs = quantize(precision, f(&ra, &rb).into_data());

    let zero_a = Tensor::zeros(shape_a);
    let zero_b = Tensor::zeros(shape_b);
    let offset = quantize(precision, f(&zero_a, &zero_b).into_data());

    let mut rhs = offset.clone();
    for (i, pa) in parts_a.iter().enumerate() {
        for (j, pb) in parts_b.iter().enumerate() {
            let (sa, sb) = match scaling {
                PartScaling::None => (pa.clone(), pb.clone()),
                PartScaling::ByCounts => {
                    let a = Tensor::new(
                        pa.shape().to_vec(),
                        quantize(
                            precision,
                            pa.data().iter().map(|x| x / m as f64).collect(),
                        ),
                    )
                    .unwrap();
                    let b = Tensor::new(
                        pb.shape().to_vec(),
                        quantize(
                            precision,
                            pb.data().iter().map(|x| x / n as f64).collect(),
                        ),
                    )
                    .unwrap();
                    (a, b)
                }
            };
            let term = quantize(precision, f(&sa, &sb).into_data());
            let wij = weights.map(|w| w[i * m + j]).unwrap_or(1.0);
            for ((r, &t), &o) in rhs.iter_mut().zip(term.iter()).zip(offset.iter()) {
                *r += wij * (t - o);
            }
            precision.quantize(&mut rhs);
        }
    }

    Ok(DecompositionReport::from_routes(
        "distribution-law",
        format!("f={name} n={n} m={m} scaling={scaling:?}"),
        &lhs,
        &rhs,
        tolerance(precision),
    ))
}

/// True when f(a, b) and f(b, a) agree within tolerance on the given inputs;
/// a pairing function suitable for directed relationships should return false.
pub fn satisfies_exchange_law<F>(f: F, a: &Tensor, b: &Tensor, precision: Precision) -> bool
where
    F: Fn(&Tensor, &Tensor) -> Tensor,
{
    let fwd = f(a, b);
    let rev = f(b, a);
    rel_error(fwd.data(), rev.data()) <= tolerance(precision)
}

// ---- witness suite ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckSuite {
    GateLinearity,
    BilinearExpansion,
    FourPartScores,
    DistributionLaw,
    All,
}

impl CheckSuite {
    /// Canonical names plus the aliases used by external callers.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gate" | "eq10" => Some(CheckSuite::GateLinearity),
            "bilinear" | "eq13" => Some(CheckSuite::BilinearExpansion),
            "fourpart" | "eq14" => Some(CheckSuite::FourPartScores),
            "distlaw" => Some(CheckSuite::DistributionLaw),
            "all" => Some(CheckSuite::All),
            _ => None,
        }
    }
}

fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn rand_parts(rng: &mut SplitMix64, count: usize, shape: Vec<usize>) -> Vec<Tensor> {
    (0..count).map(|_| rand_tensor(rng, shape.clone())).collect()
}

/// Run a check suite over `seeds` random instances, including the degenerate
/// zero-part cases. The tanh candidate in the distribution-law suite is a
/// deliberate counterexample: it passes when the probe detects the violation.
pub fn run_suite(suite: CheckSuite, seeds: u64, precision: Precision) -> Vec<DecompositionReport> {
    let mut reports = Vec::new();
    let d = 8;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
        if matches!(suite, CheckSuite::GateLinearity | CheckSuite::All) {
            let w = rand_tensor(&mut rng, vec![d, d]);
            let u = rand_tensor(&mut rng, vec![d, d]);
            let b = rand_tensor(&mut rng, vec![d]);
            let pa = rand_parts(&mut rng, 2, vec![d]);
            let pb = rand_parts(&mut rng, 3, vec![d]);
            reports.push(check_gate_linearity(&w, &u, &b, &pa, &pb, precision).unwrap());
            // Single-part case: both routes coincide by construction.
            reports.push(
                check_gate_linearity(&w, &u, &b, &pa[..1], &pb[..1], precision).unwrap(),
            );
            // All-zero parts with zero bias: both routes vanish.
            let zb = Tensor::zeros(vec![d]);
            let zp = vec![Tensor::zeros(vec![d]); 2];
            reports.push(check_gate_linearity(&w, &u, &zb, &zp, &zp, precision).unwrap());
        }
        if matches!(suite, CheckSuite::BilinearExpansion | CheckSuite::All) {
            let pa = rand_parts(&mut rng, 3, vec![4, d]);
            let pb = rand_parts(&mut rng, 2, vec![4, d]);
            reports.push(check_bilinear_expansion(&pa, &pb, precision).unwrap());
        }
        if matches!(suite, CheckSuite::FourPartScores | CheckSuite::All) {
            let wq = rand_tensor(&mut rng, vec![d, d]);
            let wk = rand_tensor(&mut rng, vec![d, d]);
            let prev = rand_tensor(&mut rng, vec![5, d]);
            let incr = rand_tensor(&mut rng, vec![5, d]);
            reports.push(check_four_part(&prev, &incr, &wq, &wk, precision).unwrap());
            // Degenerate splits: one side all zero.
            let zero = Tensor::zeros(vec![5, d]);
            reports.push(check_four_part(&zero, &incr, &wq, &wk, precision).unwrap());
            reports.push(check_four_part(&prev, &zero, &wq, &wk, precision).unwrap());
        }
        if matches!(suite, CheckSuite::DistributionLaw | CheckSuite::All) {
            let w = rand_tensor(&mut rng, vec![d, d]);
            let u = rand_tensor(&mut rng, vec![d, d]);
            let b = rand_tensor(&mut rng, vec![d]);
            let pa = rand_parts(&mut rng, 2, vec![d]);
            let pb = rand_parts(&mut rng, 3, vec![d]);
            let gate = |a: &Tensor, bb: &Tensor| {
                let mut out = matvec(w.data(), a.data(), d, d);
                let ub = matvec(u.data(), bb.data(), d, d);
                for ((o, &x), &bv) in out.iter_mut().zip(ub.iter()).zip(b.data()) {
                    *o += x + bv;
                }
                Tensor::vector(out)
            };
            reports.push(
                check_distribution_law(
                    gate,
                    "gate",
                    &pa,
                    &pb,
                    None,
                    PartScaling::ByCounts,
                    precision,
                )
                .unwrap(),
            );
            assert!(!satisfies_exchange_law(gate, &pa[0], &pb[0], precision));

            let dot = |a: &Tensor, bb: &Tensor| {
                let (la, dd) = a.dims2();
                let (lb, _) = bb.dims2();
                let mut out = vec![0.0; la * lb];
                crate::tensor::matmul_nt(a.data(), bb.data(), la, dd, lb, &mut out);
                Tensor::matrix(la, lb, out).unwrap()
            };
            let ma = rand_parts(&mut rng, 2, vec![3, d]);
            let mb = rand_parts(&mut rng, 2, vec![3, d]);
            reports.push(
                check_distribution_law(
                    dot,
                    "dot-product",
                    &ma,
                    &mb,
                    None,
                    PartScaling::None,
                    precision,
                )
                .unwrap(),
            );

            // Nonlinearity witness: elementwise tanh(a + b) must fail to
            // distribute; flip the verdict so a detected violation reports
            // as a pass of the separation test.
            let tanh_sum = |a: &Tensor, bb: &Tensor| {
                Tensor::new(
                    a.shape().to_vec(),
                    a.data()
                        .iter()
                        .zip(bb.data())
                        .map(|(x, y)| crate::fmath::tanh(x + y))
                        .collect(),
                )
                .unwrap()
            };
            let mut counter = check_distribution_law(
                tanh_sum,
                "tanh-sum (counterexample)",
                &pa,
                &pb,
                None,
                PartScaling::ByCounts,
                precision,
            )
            .unwrap();
            counter.pass = counter.max_rel_error > counter.tolerance;
            reports.push(counter);
        }
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_linearity_single_parts_identity() {
        let mut rng = SplitMix64::new(1);
        let d = 4;
        let w = rand_tensor(&mut rng, vec![d, d]);
        let u = rand_tensor(&mut rng, vec![d, d]);
        let b = rand_tensor(&mut rng, vec![d]);
        let pa = rand_parts(&mut rng, 1, vec![d]);
        let pb = rand_parts(&mut rng, 1, vec![d]);
        let r = check_gate_linearity(&w, &u, &b, &pa, &pb, Precision::F64).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn gate_linearity_random_parts() {
        let mut rng = SplitMix64::new(2);
        let d = 8;
        let w = rand_tensor(&mut rng, vec![d, d]);
        let u = rand_tensor(&mut rng, vec![d, d]);
        let b = rand_tensor(&mut rng, vec![d]);
        let pa = rand_parts(&mut rng, 2, vec![d]);
        let pb = rand_parts(&mut rng, 3, vec![d]);
        let r = check_gate_linearity(&w, &u, &b, &pa, &pb, Precision::F64).unwrap();
        assert!(r.pass && r.max_rel_error < 1e-12, "{r:?}");
    }

    #[test]
    fn gate_linearity_rejects_empty_parts() {
        let mut rng = SplitMix64::new(3);
        let d = 4;
        let w = rand_tensor(&mut rng, vec![d, d]);
        let u = rand_tensor(&mut rng, vec![d, d]);
        let b = rand_tensor(&mut rng, vec![d]);
        let pa = rand_parts(&mut rng, 1, vec![d]);
        assert!(check_gate_linearity(&w, &u, &b, &[], &pa, Precision::F64).is_err());
    }

    #[test]
    fn bilinear_width_mismatch_rejected() {
        let mut rng = SplitMix64::new(4);
        let pa = rand_parts(&mut rng, 1, vec![2, 4]);
        let pb = rand_parts(&mut rng, 1, vec![2, 5]);
        assert!(check_bilinear_expansion(&pa, &pb, Precision::F64).is_err());
    }

    #[test]
    fn four_part_degenerate_zero_sides() {
        let mut rng = SplitMix64::new(5);
        let d = 8;
        let wq = rand_tensor(&mut rng, vec![d, d]);
        let wk = rand_tensor(&mut rng, vec![d, d]);
        let x = rand_tensor(&mut rng, vec![4, d]);
        let zero = Tensor::zeros(vec![4, d]);
        let r1 = check_four_part(&zero, &x, &wq, &wk, Precision::F64).unwrap();
        let r2 = check_four_part(&x, &zero, &wq, &wk, Precision::F64).unwrap();
        assert!(r1.pass && r1.max_abs_error == 0.0);
        assert!(r2.pass && r2.max_abs_error == 0.0);
    }

    #[test]
    fn suite_passes_in_both_precisions() {
        for precision in [Precision::F64, Precision::F32] {
            let reports = run_suite(CheckSuite::All, 5, precision);
            for r in &reports {
                assert!(r.pass, "{precision:?}: {r:?}");
            }
        }
    }

    #[test]
    fn distribution_law_separates_candidates() {
        let reports = run_suite(CheckSuite::DistributionLaw, 3, Precision::F64);
        let gates: Vec<_> = reports
            .iter()
            .filter(|r| r.instance.starts_with("f=gate"))
            .collect();
        let tanhs: Vec<_> = reports
            .iter()
            .filter(|r| r.instance.starts_with("f=tanh"))
            .collect();
        assert!(!gates.is_empty() && gates.iter().all(|r| r.max_rel_error < 1e-10));
        // The counterexample candidate genuinely violates the identity.
        assert!(!tanhs.is_empty() && tanhs.iter().all(|r| r.max_rel_error > 1e-3));
    }

    #[test]
    fn report_json_shape() {
        let reports = run_suite(CheckSuite::BilinearExpansion, 1, Precision::F64);
        let json = reports_to_json(&reports);
        assert!(json.starts_with('['));
        assert!(json.contains("\"claim\":\"bilinear-expansion\""));
        assert!(json.contains("\"pass\":true"));
    }
}
