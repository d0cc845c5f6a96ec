use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{KeyedRng, Purpose};

pub const MAX_N: usize = 4;
pub const DEFAULT_RESAMPLES: usize = 1000;

/// Additive n-gram statistics of one or more sentence pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_N],
    pub totals: [usize; MAX_N],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_N {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngrams<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w.to_vec()).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram counts of a whitespace-tokenized pair.
pub fn sentence_stats(hyp: &str, reference: &str) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut s = BleuStats {
        hyp_len: h.len(),
        ref_len: r.len(),
        ..Default::default()
    };
    for n in 1..=MAX_N {
        let hc = ngrams(&h, n);
        let rc = ngrams(&r, n);
        s.totals[n - 1] = h.len().saturating_sub(n - 1);
        s.matches[n - 1] = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

impl BleuStats {
    /// BLEU in `[0, 100]`. A zero match count at order `n` is replaced by
    /// `1 / 2^k` matches, `k` counting the zero orders seen so far. Orders
    /// with no hypothesis n-grams at all are left out of the mean.
    pub fn score(&self) -> f64 {
        let order = self.totals.iter().take_while(|&&t| t > 0).count();
        if order == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut k = 1.0;
        for n in 0..order {
            let p = if self.matches[n] == 0 {
                k *= 2.0;
                1.0 / (k * self.totals[n] as f64)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        (100.0 * bp * (log_sum / order as f64).exp()).clamp(0.0, 100.0)
    }
}

fn check_sizes(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} hypotheses for {b} references")));
    }
    Ok(())
}

/// Corpus BLEU over whitespace tokens.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R]) -> Result<f64> {
    check_sizes(hyps.len(), refs.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total += sentence_stats(h.as_ref(), r.as_ref());
    }
    Ok(total.score())
}

/// Sentence indices of resample `r`, drawn with replacement.
pub fn bootstrap_indices(m: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = KeyedRng::new(seed).stream(Purpose::Bootstrap, r as u64);
    (0..m).map(|_| rng.gen_range(0..m)).collect()
}

/// Fraction of resamples in which system A does not beat system B.
pub fn paired_bootstrap<S: AsRef<str>, R: AsRef<str>>(
    hyps_a: &[S],
    hyps_b: &[S],
    refs: &[R],
    n_resamples: usize,
    seed: u64,
) -> Result<f64> {
    check_sizes(hyps_a.len(), refs.len())?;
    check_sizes(hyps_b.len(), refs.len())?;
    if refs.is_empty() || n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs sentences and resamples"));
    }
    let stats = |h: &[S]| -> Vec<BleuStats> {
        h.iter()
            .zip(refs)
            .map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref()))
            .collect()
    };
    let (sa, sb) = (stats(hyps_a), stats(hyps_b));
    let mut not_better = 0usize;
    for r in 0..n_resamples {
        let (mut a, mut b) = (BleuStats::default(), BleuStats::default());
        for i in bootstrap_indices(refs.len(), seed, r) {
            a += sa[i];
            b += sb[i];
        }
        if a.score() <= b.score() {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / n_resamples as f64)
}
