//! Direct loop-based reference implementations used as test oracles.

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Returns the attention weights `[M][N]` and outputs `[M][d]`.
pub fn fg_attend(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    doc_ids: &[usize],
    query_ids: &[usize],
    u: &[f64],
    b1: f64,
    b2: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = u.len();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for i in 0..p.len() {
        let mut inter = Vec::new();
        let mut logits = Vec::new();
        for j in 0..q.len() {
            let mut v = vec![0.0; d];
            let mut logit = 0.0;
            for k in 0..d {
                v[k] = (p[i][k] * q[j][k]).tanh();
                logit += u[k] * v[k];
            }
            if doc_ids[i] == query_ids[j] {
                logit += b1;
            }
            logits.push(logit + b2);
            inter.push(v);
        }
        let w = softmax(&logits);
        let mut h = vec![0.0; d];
        for j in 0..q.len() {
            for k in 0..d {
                h[k] += w[j] * inter[j][k];
            }
        }
        weights.push(w);
        out.push(h);
    }
    (weights, out)
}

pub fn ga_attend(p: &[Vec<f64>], q: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = p[0].len();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for pi in p {
        let scores: Vec<f64> = q.iter().map(|qj| (0..d).map(|k| pi[k] * qj[k]).sum()).collect();
        let w = softmax(&scores);
        let mut h = vec![0.0; d];
        for (j, qj) in q.iter().enumerate() {
            for k in 0..d {
                h[k] += w[j] * qj[k];
            }
        }
        for k in 0..d {
            h[k] *= pi[k];
        }
        weights.push(w);
        out.push(h);
    }
    (weights, out)
}

/// Enumerates every allowed span and keeps the first strict maximum.
pub fn best_span(start: &[f64], end: &[f64], max_len: usize) -> (usize, usize) {
    let mut spans = Vec::new();
    for s in 0..start.len() {
        for e in 0..end.len() {
            if s <= e && e - s < max_len {
                spans.push((s, e, start[s] * end[e]));
            }
        }
    }
    let mut best = spans[0];
    for &c in &spans[1..] {
        if c.2 > best.2 {
            best = c;
        }
    }
    (best.0, best.1)
}

/// Token-overlap F1 with multiset counting.
pub fn token_f1(pred: &[&str], gold: &[&str]) -> f64 {
    let mut remaining: Vec<&str> = gold.to_vec();
    let mut common = 0usize;
    for t in pred {
        if let Some(i) = remaining.iter().position(|g| g == t) {
            remaining.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}
