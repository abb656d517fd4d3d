//! Straight-line transcription of the selection rules, 1-based like the
//! rule text: `h[t]`, `roec[t]` and `cm[t]` for `t = 1..=T`, slot 0 unused.

pub struct Curve {
    pub t_max: usize,
    pub roec: Vec<f64>,
    pub cm: Vec<f64>,
}

impl Curve {
    pub fn new(entropy: &[f64], inv_margin: &[f64]) -> Self {
        let t_max = entropy.len();
        let mut h = vec![0.0];
        h.extend_from_slice(entropy);
        let mut cm = vec![0.0];
        cm.extend_from_slice(inv_margin);
        let mut roec = vec![0.0; t_max + 1];
        for t in 2..=t_max {
            roec[t] = (h[t] - h[t - 1]).abs();
        }
        Self { t_max, roec, cm }
    }

    fn mean_std(&self) -> (f64, f64) {
        let mut sum = 0.0;
        for t in 1..=self.t_max {
            sum += self.roec[t];
        }
        let mu = sum / self.t_max as f64;
        let mut sq = 0.0;
        for t in 1..=self.t_max {
            sq += (self.roec[t] - mu) * (self.roec[t] - mu);
        }
        (mu, (sq / self.t_max as f64).sqrt())
    }
}

pub fn uniform(t_max: usize, n: usize) -> Vec<usize> {
    let mut b = Vec::new();
    for i in 0..=n {
        let v = i * t_max / n;
        if !b.contains(&v) {
            b.push(v);
        }
    }
    b
}

fn valid(b: isize, t_max: usize) -> bool {
    b >= 1 && b <= t_max as isize - 1
}

fn close(mut s: Vec<usize>, t_max: usize) -> Vec<usize> {
    s.sort();
    s.dedup();
    let mut out = vec![0];
    out.extend(s);
    out.push(t_max);
    out
}

/// Stage 0 and stage 1. `None` is the even-partition fallback.
fn stage_one(c: &Curve, n: usize) -> Option<Vec<usize>> {
    let (mu, sigma) = c.mean_std();
    if c.t_max < 2 * n || sigma < 1e-9 {
        return None;
    }
    let mut s: Vec<usize> = Vec::new();
    for t in 1..=c.t_max {
        if s.len() == n - 1 {
            break;
        }
        if c.roec[t] > mu + sigma {
            let b = t as isize - 1;
            if valid(b, c.t_max) && !s.contains(&(b as usize)) {
                s.push(b as usize);
            }
        }
    }
    Some(s)
}

/// Repeatedly takes the largest remaining `cm[t]` (smaller `t` on ties).
fn take_by_cm(c: &Curve, n: usize, s: &mut Vec<usize>, masked: &[bool]) {
    let mut left: Vec<usize> = (1..=c.t_max).filter(|&t| !masked[t]).collect();
    while s.len() < n - 1 && !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if c.cm[left[k]] > c.cm[left[best]] {
                best = k;
            }
        }
        let t = left.remove(best);
        let b = t as isize - 1;
        if valid(b, c.t_max) && !s.contains(&(b as usize)) {
            s.push(b as usize);
        }
    }
}

pub fn hybrid(c: &Curve, n: usize) -> Vec<usize> {
    let Some(mut s) = stage_one(c, n) else {
        return uniform(c.t_max, n);
    };
    if s.len() < n - 1 {
        let mut masked = vec![false; c.t_max + 1];
        for t in 1..=c.t_max {
            if s.contains(&(t - 1)) {
                masked[t] = true;
            }
        }
        take_by_cm(c, n, &mut s, &masked);
    }
    close(s, c.t_max)
}

pub fn roec_only(c: &Curve, n: usize) -> Vec<usize> {
    let Some(mut s) = stage_one(c, n) else {
        return uniform(c.t_max, n);
    };
    let even = uniform(c.t_max, n);
    for &b in &even {
        if s.len() == n - 1 {
            break;
        }
        if valid(b as isize, c.t_max) && !s.contains(&b) {
            s.push(b);
        }
    }
    close(s, c.t_max)
}

pub fn cm_only(c: &Curve, n: usize) -> Vec<usize> {
    let mut s = Vec::new();
    take_by_cm(c, n, &mut s, &vec![false; c.t_max + 1]);
    close(s, c.t_max)
}
