//! Independent reference implementations used as test oracles, plus
//! synthetic fixture builders. Nothing here calls into the kernels under test.
#![allow(dead_code)]

use esmem_core::{DialogueTurn, EmbeddingVector, MemoryUnit};

// ---------------------------------------------------------------------------
// Mock embedding
// ---------------------------------------------------------------------------

/// Recomputes the documented hash projection from scratch: FNV-1a seeds a
/// splitmix64 stream, each draw maps to [-1, 1), then L2-normalize.
pub fn oracle_mock_embedding(text: &str, seed: u64, dim: usize) -> Vec<f64> {
    const FNV_OFFSET: u64 = 14695981039346656037;
    const FNV_PRIME: u64 = 1099511628211;
    const GAMMA: u64 = 0x9E3779B97F4A7C15;
    let mut h = FNV_OFFSET;
    for &b in text.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    let mut state = h ^ seed.wrapping_mul(GAMMA);
    let mut raw = Vec::with_capacity(dim);
    for _ in 0..dim {
        state = state.wrapping_add(GAMMA);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        let unit = (z >> 11) as f64 * (1.0 / 9007199254740992.0);
        raw.push(2.0 * unit - 1.0);
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| v / norm).collect()
}

// ---------------------------------------------------------------------------
// Pearson / MI
// ---------------------------------------------------------------------------

/// Textbook two-pass Pearson (sample form; the n-1 factors cancel) and the
/// Gaussian MI with the clamp and zero-variance rules.
pub fn oracle_pearson_mi(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let vx = sxx / (n - 1.0);
    let vy = syy / (n - 1.0);
    let (pop_vx, pop_vy) = (sxx / n, syy / n);
    if pop_vx < 1e-12 || pop_vy < 1e-12 {
        return (0.0, 0.0);
    }
    let rho = (sxy / (n - 1.0)) / (vx * vy).sqrt();
    let rho = rho.clamp(-1.0, 1.0);
    let one_minus = f64::max(1.0 - rho * rho, 1e-12);
    (rho, -0.5 * one_minus.ln())
}

// ---------------------------------------------------------------------------
// Nearest-rank quantile
// ---------------------------------------------------------------------------

/// `q` given in hundredths so the rank `ceil(q·n)` is computed exactly in
/// integers. Returns the threshold and all 1-based positions at or below it.
pub fn oracle_candidates(mi: &[f64], q_hundredths: usize) -> (f64, Vec<usize>) {
    let n = mi.len();
    let rank = (q_hundredths * n).div_ceil(100).clamp(1, n);
    let mut sorted = mi.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = sorted[rank - 1];
    let positions = (0..n).filter(|&i| mi[i] <= threshold).map(|i| i + 1).collect();
    (threshold, positions)
}

// ---------------------------------------------------------------------------
// Segmentation metrics
// ---------------------------------------------------------------------------

/// Segment label of every turn (0-based turns) given break positions.
pub fn labels(positions: &[usize], total: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(total);
    let mut seg = 0;
    for turn in 1..=total {
        out.push(seg);
        if positions.contains(&turn) {
            seg += 1;
        }
    }
    out
}

/// Textbook Pk over label arrays: probe pairs `(i, i + k)`, count
/// same-segment disagreements.
pub fn oracle_pk(reference: &[usize], hypothesis: &[usize], total: usize, k: usize) -> f64 {
    let r = labels(reference, total);
    let h = labels(hypothesis, total);
    let windows = total - k;
    let mut miss = 0;
    for i in 0..windows {
        if (r[i] == r[i + k]) != (h[i] == h[i + k]) {
            miss += 1;
        }
    }
    miss as f64 / windows as f64
}

/// Textbook WindowDiff: number of segment changes between probe ends.
pub fn oracle_wd(reference: &[usize], hypothesis: &[usize], total: usize, k: usize) -> f64 {
    let r = labels(reference, total);
    let h = labels(hypothesis, total);
    let windows = total - k;
    let mut miss = 0;
    for i in 0..windows {
        if r[i + k] - r[i] != h[i + k] - h[i] {
            miss += 1;
        }
    }
    miss as f64 / windows as f64
}

pub fn oracle_f1(reference: &[usize], hypothesis: &[usize]) -> f64 {
    if reference.is_empty() && hypothesis.is_empty() {
        return 1.0;
    }
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let hits = hypothesis.iter().filter(|p| reference.contains(p)).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let p = hits / hypothesis.len() as f64;
    let r = hits / reference.len() as f64;
    2.0 * p * r / (p + r)
}

// ---------------------------------------------------------------------------
// Synthetic repositories and brute-force retrieval
// ---------------------------------------------------------------------------

/// `n` units whose boundary/summary texts are drawn from a vocabulary of
/// `vocab` strings, so small vocabularies force exact score ties.
pub fn synthetic_units(n: usize, dim: usize, seed: u64, vocab: usize, salt: u64) -> Vec<MemoryUnit> {
    (1..=n)
        .map(|i| {
            let pick = |tag: &str, k: u64| {
                let slot = (i as u64).wrapping_mul(2654435761).wrapping_add(salt.wrapping_mul(k)) % vocab as u64;
                format!("{tag} text {slot}")
            };
            let b = pick("boundary", 7);
            let s = pick("summary", 13);
            MemoryUnit {
                event_index: i,
                session_id: "synthetic".into(),
                turn_start: i,
                turn_end: i,
                e_bnd: EmbeddingVector::from_normalized(oracle_mock_embedding(&b, seed, dim)).unwrap(),
                e_sum: EmbeddingVector::from_normalized(oracle_mock_embedding(&s, seed, dim)).unwrap(),
                refined_boundary: b,
                boundary_generated: true,
                summary: s,
                raw_context: vec![DialogueTurn::new(1, "user", format!("turn of event {i}"))],
                timestamp: format!("day {i}"),
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Sorts `(event, score)` descending by score, ascending event on ties.
fn rank(v: &mut [(usize, f64)]) {
    v.sort_by(|x, y| match y.1.partial_cmp(&x.1).unwrap() {
        std::cmp::Ordering::Equal => x.0.cmp(&y.0),
        o => o,
    });
}

/// Direct evaluation of anchor scan, interval expansion, context score and
/// fusion. Returns the selected events in rank order.
pub fn oracle_retrieve(
    q: &[f64],
    units: &[MemoryUnit],
    anchor_k: usize,
    w: usize,
    alpha: f64,
    final_k: usize,
) -> Vec<usize> {
    let n = units.len();
    let mut bnd: Vec<(usize, f64)> = units
        .iter()
        .map(|u| (u.event_index, dot(q, u.e_bnd.values())))
        .collect();
    rank(&mut bnd);
    let anchors = &bnd[..anchor_k.min(n)];
    let mut scored = Vec::new();
    for j in 1..=n {
        let covering: Vec<f64> = anchors
            .iter()
            .filter(|(a, _)| (*a as i64 - j as i64).unsigned_abs() as usize <= w)
            .map(|(_, s)| *s)
            .collect();
        if covering.is_empty() {
            continue;
        }
        let s_ctx = covering.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s_sum = dot(q, units[j - 1].e_sum.values());
        scored.push((j, alpha * s_sum + (1.0 - alpha) * s_ctx));
    }
    rank(&mut scored);
    scored.into_iter().take(final_k).map(|(j, _)| j).collect()
}

/// Global fused ranking when the window covers every event: each event's
/// context score is the single best boundary score.
pub fn oracle_global_fused(q: &[f64], units: &[MemoryUnit], alpha: f64, final_k: usize) -> Vec<usize> {
    let mut bnd: Vec<(usize, f64)> = units
        .iter()
        .map(|u| (u.event_index, dot(q, u.e_bnd.values())))
        .collect();
    rank(&mut bnd);
    let best = bnd[0].1;
    let mut scored: Vec<(usize, f64)> = units
        .iter()
        .map(|u| (u.event_index, alpha * dot(q, u.e_sum.values()) + (1.0 - alpha) * best))
        .collect();
    rank(&mut scored);
    scored.into_iter().take(final_k).map(|(j, _)| j).collect()
}
