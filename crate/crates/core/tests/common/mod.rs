#![allow(dead_code)]

use pointjem::diffcore::{check_gradients, DiffError, NumericArray, Tape, Var};
use pointjem::jemloss::{build_loss, LossError, LossWeights, SegmentScores};
use pointjem::model::{encode_on_tape, init_parameters, project_on_tape, EncoderConfig, ParameterStore, SegmentLayout};
use pointjem::seed::rng_for;
use rand::Rng;

/// Multiplication in GF(2^r) for r = 1, 2, 3.
fn gf_mul(a: usize, b: usize, m: usize) -> usize {
    let modulus = match m {
        2 => 0b11,
        4 => 0b111,
        8 => 0b1011,
        _ => panic!("unsupported field size {m}"),
    };
    let (mut a, mut b, mut out) = (a, b, 0);
    while b > 0 {
        if b & 1 == 1 {
            out ^= a;
        }
        b >>= 1;
        a <<= 1;
        if a & m != 0 {
            a ^= modulus;
        }
    }
    out
}

/// One-hot scores whose K segments are pairwise independent and uniform
/// over the samples: segment k of sample v is f_k . v for distinct
/// normalized linear functionals f_k over GF(M)^d. Returns the smallest
/// such batch, with d = 2 (N = M^2) whenever K <= M + 1.
pub fn independent_one_hot(k: usize, m: usize) -> SegmentScores {
    let d = if k <= m + 1 { 2 } else { 3 };
    let n = m.pow(d as u32);
    let coords = |i: usize| -> Vec<usize> { (0..d).map(|j| (i / m.pow(j as u32)) % m).collect() };
    let functionals: Vec<Vec<usize>> = (1..n)
        .map(coords)
        .filter(|f| f.iter().find(|&&c| c != 0) == Some(&1))
        .take(k)
        .collect();
    assert_eq!(functionals.len(), k);
    let mut data = vec![0.0; n * k * m];
    for i in 0..n {
        let v = coords(i);
        for (s, f) in functionals.iter().enumerate() {
            let code = f.iter().zip(&v).fold(0, |acc, (&a, &b)| acc ^ gf_mul(a, b, m));
            data[(i * k + s) * m + code] = 1.0;
        }
    }
    SegmentScores::new(NumericArray::new(vec![n, k, m], data).unwrap()).unwrap()
}

/// Segment scores from logits of random magnitude, including near one-hot rows.
pub fn random_scores(rng: &mut impl Rng, n: usize, k: usize, m: usize) -> SegmentScores {
    let scale = [0.01, 1.0, 5.0, 40.0][rng.random_range(0..4)];
    let logits: Vec<f64> = (0..n * k * m).map(|_| rng.random_range(-scale..scale)).collect();
    scores_from_logits(&logits, n, k, m)
}

pub fn scores_from_logits(logits: &[f64], n: usize, k: usize, m: usize) -> SegmentScores {
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.chunks(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    SegmentScores::new(NumericArray::new(vec![n, k, m], data).unwrap()).unwrap()
}

pub fn loss_graph<'a>(
    store: &'a ParameterStore,
    points: &'a NumericArray,
    weights: &LossWeights,
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + 'a {
    let weights = weights.clone();
    move |tape, vars| {
        let model = store.bound_from_vars(vars.to_vec());
        let n = points.shape()[0] / 2;
        let x = tape.constant(points.clone());
        let h = encode_on_tape(tape, &model, x)?;
        let z = project_on_tape(tape, &model, h)?;
        let z1 = tape.slice(z, 0, 0, n)?;
        let z2 = tape.slice(z, 0, n, n)?;
        let vars = build_loss(tape, z1, z2, store.layout(), &weights).map_err(|e| match e {
            LossError::Diff(d) => d,
            other => panic!("{other}"),
        })?;
        Ok(vars.total)
    }
}

/// Smallest distance of any relu input or max-pool runner-up from a kink,
/// computed with a plain forward pass.
pub fn kink_margin(store: &ParameterStore, points: &NumericArray) -> f64 {
    let layer = |prefix: &str, i: usize| {
        let w = store.get(&format!("{prefix}.{i}.weight")).unwrap();
        let b = store.get(&format!("{prefix}.{i}.bias")).unwrap();
        (w.shape()[0], w.shape()[1], w.data().to_vec(), b.data().to_vec())
    };
    let affine = |x: &[f64], (fi, fo, w, b): &(usize, usize, Vec<f64>, Vec<f64>)| -> Vec<f64> {
        let (fi, fo) = (*fi, *fo);
        (0..fo)
            .map(|o| b[o] + (0..fi).map(|i| x[i] * w[i * fo + o]).sum::<f64>())
            .collect()
    };
    let (n, p) = (points.shape()[0], points.shape()[1]);
    let enc_layers = store.encoder_config().widths.len();
    let proj_layers = store.proj_hidden().len() + 1;
    let mut margin = f64::INFINITY;
    for c in 0..n {
        let mut feats = Vec::new();
        for j in 0..p {
            let mut x = points.data()[(c * p + j) * 3..(c * p + j + 1) * 3].to_vec();
            for l in 0..enc_layers {
                x = affine(&x, &layer("encoder", l));
                margin = x.iter().fold(margin, |m, v| m.min(v.abs()));
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            feats.push(x);
        }
        let d = feats[0].len();
        let mut h = vec![0.0; d];
        for (ch, hv) in h.iter_mut().enumerate() {
            let mut col: Vec<f64> = feats.iter().map(|f| f[ch]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            if col[0] > 0.0 {
                margin = margin.min(col[0] - col[1]);
            }
            *hv = col[0];
        }
        let mut x = h;
        for l in 0..proj_layers - 1 {
            x = affine(&x, &layer("projector", l));
            margin = x.iter().fold(margin, |m, v| m.min(v.abs()));
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    margin
}

pub fn random_points(seed: u64, clouds: usize, per: usize) -> NumericArray {
    let mut rng = rng_for(seed, &[99]);
    let data = (0..clouds * per * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    NumericArray::new(vec![clouds, per, 3], data).unwrap()
}

/// Minimum distance from a relu or max-pool kink for an instance to count.
pub const KINK_MARGIN: f64 = 1e-4;

/// Gradient check of the full model loss on instance `seed` (N=4, K=3,
/// M=4), or `None` when a finite-difference stencil could straddle a kink.
pub fn gradient_instance(seed: u64) -> Option<f64> {
    let layout = SegmentLayout::new(3, 4).unwrap();
    let enc = EncoderConfig { widths: vec![8, 8, 8] };
    let mut store = init_parameters(&enc, layout, &[16], seed).unwrap();
    let mut rng = rng_for(seed, &[7]);
    for (name, a) in store.values_mut() {
        if name.ends_with("bias") {
            a.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let points = random_points(seed, 8, 8);
    if kink_margin(&store, &points) < KINK_MARGIN {
        return None;
    }
    let params: Vec<NumericArray> = store.values().cloned().collect();
    let weights = LossWeights::with_lambda(0.5 + seed as f64 * 0.1);
    let report = check_gradients(loss_graph(&store, &points, &weights), &params, 1e-5).unwrap();
    Some(report.max_relative_error)
}
