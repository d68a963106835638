//! Independent reference implementations used as test oracles. Nothing here
//! calls the library's numerical code; it only reads parameter buffers.

#![allow(dead_code)]

use prefinfer::policy::{PolicyParams, PolicyShape};
use prefinfer::rng;
use prefinfer::symlang::Token;

pub const REJECTED: usize = 8;
pub const POS: usize = 10;
pub const NEG: usize = 11;
pub const FIRST_DIM: usize = 12;

pub fn ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|t| t.0 as usize).collect()
}

/// Random parameters of the given shape, uniform in `[-scale, scale]`.
pub fn random_params(shape: PolicyShape, scale: f64, seed: u64) -> PolicyParams {
    PolicyParams::init(shape, scale, &mut rng::stream(seed, &[77]))
}

pub fn tiny_shape() -> PolicyShape {
    PolicyShape {
        vocab: 6,
        embed: 4,
        window: 2,
        hidden: 8,
    }
}

/// Pooling coefficient of each prompt position, computed by scanning back to
/// the most recent segment marker.
pub fn ref_signs(prompt: &[usize]) -> Vec<f64> {
    (0..prompt.len())
        .map(|i| {
            let t = prompt[i];
            // BOS, THINK_OPEN, SIG_SEP, CHOSEN, UGC, REJECTED
            if [0, 2, 6, 7, 9, REJECTED].contains(&t) {
                return 1.0;
            }
            let mut seg = 1.0;
            for &prev in prompt[..i].iter().rev() {
                if prev == REJECTED {
                    seg = -1.0;
                    break;
                }
                if [0, 2, 6, 7, 9].contains(&prev) {
                    break;
                }
            }
            if t >= FIRST_DIM {
                match prompt.get(i + 1) {
                    Some(&POS) => seg,
                    Some(&NEG) => -seg,
                    _ => seg,
                }
            } else {
                seg
            }
        })
        .collect()
}

/// Straightforward model evaluation on a flat parameter vector.
pub struct RefModel<'a> {
    pub s: PolicyShape,
    pub d: &'a [f64],
}

impl<'a> RefModel<'a> {
    pub fn new(p: &'a PolicyParams) -> Self {
        RefModel { s: p.shape, d: &p.data }
    }

    fn off_w1(&self) -> usize {
        self.s.vocab * self.s.embed
    }
    fn off_b1(&self) -> usize {
        self.off_w1() + self.s.embed * (self.s.window + 1) * self.s.hidden
    }
    fn off_w2(&self) -> usize {
        self.off_b1() + self.s.hidden
    }
    fn off_b2(&self) -> usize {
        self.off_w2() + self.s.hidden * self.s.vocab
    }
    pub fn emb(&self, t: usize, c: usize) -> f64 {
        self.d[t * self.s.embed + c]
    }
    pub fn w1(&self, i: usize, j: usize) -> f64 {
        self.d[self.off_w1() + i * self.s.hidden + j]
    }
    pub fn b1(&self, j: usize) -> f64 {
        self.d[self.off_b1() + j]
    }
    pub fn w2(&self, j: usize, v: usize) -> f64 {
        self.d[self.off_w2() + j * self.s.vocab + v]
    }
    pub fn b2(&self, v: usize) -> f64 {
        self.d[self.off_b2() + v]
    }

    pub fn summary(&self, prompt: &[usize]) -> Vec<f64> {
        let signs = ref_signs(prompt);
        (0..self.s.embed)
            .map(|c| prompt.iter().zip(&signs).map(|(&t, s)| s * self.emb(t, c)).sum::<f64>() / prompt.len() as f64)
            .collect()
    }

    pub fn window(&self, prefix: &[usize]) -> Vec<usize> {
        let k = self.s.window;
        (0..k)
            .map(|slot| {
                let back = k - slot;
                if prefix.len() >= back {
                    prefix[prefix.len() - back]
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn input(&self, summary: &[f64], window: &[usize]) -> Vec<f64> {
        let mut x = summary.to_vec();
        for &t in window {
            x.extend((0..self.s.embed).map(|c| self.emb(t, c)));
        }
        x
    }

    /// (input, hidden activations, logits)
    pub fn step(&self, summary: &[f64], window: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = self.input(summary, window);
        let h: Vec<f64> = (0..self.s.hidden)
            .map(|j| (self.b1(j) + (0..x.len()).map(|i| x[i] * self.w1(i, j)).sum::<f64>()).tanh())
            .collect();
        let logits = (0..self.s.vocab)
            .map(|v| self.b2(v) + (0..self.s.hidden).map(|j| h[j] * self.w2(j, v)).sum::<f64>())
            .collect();
        (x, h, logits)
    }

    pub fn token_logprobs(&self, prompt: &[usize], output: &[usize]) -> Vec<f64> {
        let summary = self.summary(prompt);
        (0..output.len())
            .map(|t| {
                let (_, _, logits) = self.step(&summary, &self.window(&output[..t]));
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                logits[output[t]] - m - z.ln()
            })
            .collect()
    }

    /// Gradient of `Σ_t w_t log p(output_t)` in the flat layout.
    pub fn grad_weighted_logprob(&self, prompt: &[usize], output: &[usize], w: &[f64]) -> Vec<f64> {
        let s = self.s;
        let mut g = vec![0.0; self.d.len()];
        let summary = self.summary(prompt);
        let mut dsum = vec![0.0; s.embed];
        for t in 0..output.len() {
            let win = self.window(&output[..t]);
            let (x, h, logits) = self.step(&summary, &win);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let dl: Vec<f64> = (0..s.vocab)
                .map(|v| w[t] * ((v == output[t]) as u8 as f64 - (logits[v] - m).exp() / z))
                .collect();
            for v in 0..s.vocab {
                g[self.off_b2() + v] += dl[v];
            }
            let mut dpre = vec![0.0; s.hidden];
            for j in 0..s.hidden {
                let mut dh = 0.0;
                for v in 0..s.vocab {
                    g[self.off_w2() + j * s.vocab + v] += h[j] * dl[v];
                    dh += self.w2(j, v) * dl[v];
                }
                dpre[j] = dh * (1.0 - h[j] * h[j]);
                g[self.off_b1() + j] += dpre[j];
            }
            for i in 0..x.len() {
                let mut dx = 0.0;
                for j in 0..s.hidden {
                    g[self.off_w1() + i * s.hidden + j] += x[i] * dpre[j];
                    dx += self.w1(i, j) * dpre[j];
                }
                if i < s.embed {
                    dsum[i] += dx;
                } else {
                    let slot = i / s.embed - 1;
                    let c = i % s.embed;
                    g[win[slot] * s.embed + c] += dx;
                }
            }
        }
        let signs = ref_signs(prompt);
        for (&t, sg) in prompt.iter().zip(&signs) {
            for c in 0..s.embed {
                g[t * s.embed + c] += sg / prompt.len() as f64 * dsum[c];
            }
        }
        g
    }
}

/// Central finite-difference gradient of `f` at `p`.
pub fn finite_diff(p: &PolicyParams, step: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.data.len())
        .map(|i| {
            let orig = q.data[i];
            q.data[i] = orig + step;
            let up = f(&q);
            q.data[i] = orig - step;
            let down = f(&q);
            q.data[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest coordinate-wise relative error, with an absolute floor so that
/// coordinates whose true value is zero are judged on absolute error.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Advantages from first principles.
pub fn ref_advantages(r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if r.iter().all(|&x| x == r[0]) {
        vec![0.0; r.len()]
    } else {
        r.iter().map(|x| (x - mean) / sd).collect()
    }
}

/// Every attribute vector in `{-1,0,1}^d` with its probability at density `rho`.
pub fn all_attrs(d: usize, rho: f64) -> Vec<(Vec<i8>, f64)> {
    let n = 3usize.pow(d as u32);
    (0..n)
        .map(|mut code| {
            let mut a = Vec::with_capacity(d);
            let mut w = 1.0;
            for _ in 0..d {
                let v = (code % 3) as i8 - 1;
                code /= 3;
                w *= if v == 0 { 1.0 - rho } else { rho / 2.0 };
                a.push(v);
            }
            (a, w)
        })
        .collect()
}

pub fn dot(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// The noiseless pair distribution for user `p`: every ordered
/// (chosen, rejected) with its probability.
pub fn pair_distribution(p: &[i8], rho: f64) -> Vec<(Vec<i8>, Vec<i8>, f64)> {
    let attrs = all_attrs(p.len(), rho);
    let mut out = Vec::new();
    let mut mass = 0.0;
    for (a, wa) in &attrs {
        for (b, wb) in &attrs {
            let (sa, sb) = (dot(p, a), dot(p, b));
            if sa == sb {
                continue;
            }
            mass += wa * wb;
            if sa > sb {
                out.push((a.clone(), b.clone(), wa * wb));
            } else {
                out.push((b.clone(), a.clone(), wa * wb));
            }
        }
    }
    out.iter_mut().for_each(|x| x.2 /= mass);
    out
}

/// All users with exactly `k` nonzero entries.
pub fn all_users(d: usize, k: usize) -> Vec<Vec<i8>> {
    all_attrs(d, 0.5)
        .into_iter()
        .map(|(a, _)| a)
        .filter(|a| a.iter().filter(|&&v| v != 0).count() == k)
        .collect()
}
