//! Brute-force metric scorers and shared fixtures.

/// Brute-force scorers written independently of the library: n-grams are
/// space-joined strings, LCS is a memoized recursion, CIDEr vectors are
/// dense over an explicit n-gram list.
pub mod oracle {
    use std::collections::HashMap;

    pub fn toks(s: &str) -> Vec<String> {
        s.to_lowercase()
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect::<String>()
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }

    pub fn grams(t: &[String], n: usize) -> Vec<String> {
        if t.len() < n {
            return vec![];
        }
        (0..=t.len() - n).map(|i| t[i..i + n].join(" ")).collect()
    }

    fn count(v: &[String]) -> HashMap<String, usize> {
        let mut m = HashMap::new();
        for g in v {
            *m.entry(g.clone()).or_default() += 1;
        }
        m
    }

    pub fn bleu(c: &[&str], r: &[Vec<&str>]) -> [f64; 4] {
        let mut num = [0usize; 4];
        let mut den = [0usize; 4];
        let mut clen = 0;
        let mut rlen = 0;
        for (cand, refs) in c.iter().zip(r) {
            let ct = toks(cand);
            let rt: Vec<Vec<String>> = refs.iter().map(|x| toks(x)).collect();
            clen += ct.len();
            let mut best = usize::MAX;
            let mut best_diff = usize::MAX;
            for x in &rt {
                let d = (x.len() as i64 - ct.len() as i64).unsigned_abs() as usize;
                if d < best_diff || (d == best_diff && x.len() < best) {
                    best_diff = d;
                    best = x.len();
                }
            }
            rlen += best;
            for n in 1..=4 {
                let cc = count(&grams(&ct, n));
                for (g, k) in &cc {
                    let mx = rt.iter().map(|x| count(&grams(x, n)).get(g).copied().unwrap_or(0)).max().unwrap();
                    num[n - 1] += (*k).min(mx);
                    den[n - 1] += k;
                }
            }
        }
        if clen == 0 {
            return [0.0; 4];
        }
        let bp = if clen >= rlen { 1.0 } else { (1.0 - rlen as f64 / clen as f64).exp() };
        let mut out = [0.0; 4];
        for n in 1..=4 {
            let mut prod = 1.0f64;
            for k in 0..n {
                let p = if num[k] == 0 { 1e-9 } else { num[k] as f64 / den[k] as f64 };
                prod *= p;
            }
            out[n - 1] = bp * prod.powf(1.0 / n as f64);
        }
        out
    }

    fn lcs(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = if a[0] == b[0] {
            1 + lcs(&a[1..], &b[1..], memo)
        } else {
            lcs(&a[1..], b, memo).max(lcs(a, &b[1..], memo))
        };
        memo.insert((a.len(), b.len()), v);
        v
    }

    pub fn rouge(c: &[&str], r: &[Vec<&str>]) -> f64 {
        let mut tot = 0.0;
        for (cand, refs) in c.iter().zip(r) {
            let ct = toks(cand);
            let mut best = 0.0f64;
            for x in refs {
                let rt = toks(x);
                let l = lcs(&ct, &rt, &mut HashMap::new()) as f64;
                if l > 0.0 {
                    let p = l / ct.len() as f64;
                    let rc = l / rt.len() as f64;
                    let f = (1.0 + 1.44) * p * rc / (rc + 1.44 * p);
                    best = best.max(f);
                }
            }
            tot += best;
        }
        tot / c.len() as f64
    }

    pub fn cider(c: &[&str], r: &[Vec<&str>], sigma: f64) -> f64 {
        let n_docs = r.len() as f64;
        let mut score = 0.0;
        for (cand, refs) in c.iter().zip(r) {
            let ct = toks(cand);
            let mut acc = 0.0;
            for x in refs {
                let rt = toks(x);
                let mut orders = 0.0;
                for n in 1..=4 {
                    let mut universe: Vec<String> = grams(&ct, n);
                    universe.extend(grams(&rt, n));
                    universe.sort();
                    universe.dedup();
                    let idf = |g: &String| {
                        let df = r
                            .iter()
                            .filter(|doc| doc.iter().any(|d| grams(&toks(d), n).contains(g)))
                            .count()
                            .max(1);
                        n_docs.ln() - (df as f64).ln()
                    };
                    let vc: Vec<f64> = universe
                        .iter()
                        .map(|g| grams(&ct, n).iter().filter(|h| *h == g).count() as f64 * idf(g))
                        .collect();
                    let vr: Vec<f64> = universe
                        .iter()
                        .map(|g| grams(&rt, n).iter().filter(|h| *h == g).count() as f64 * idf(g))
                        .collect();
                    let nc = vc.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nr = vr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nc == 0.0 || nr == 0.0 {
                        continue;
                    }
                    let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                    let d = ct.len() as f64 - rt.len() as f64;
                    orders += dot / (nc * nr) * (-d * d / (2.0 * sigma * sigma)).exp();
                }
                acc += orders / 4.0;
            }
            score += acc / refs.len() as f64 * 10.0;
        }
        score / c.len() as f64
    }
}

pub type Fixture = (Vec<&'static str>, Vec<Vec<&'static str>>);

pub fn fixtures() -> Vec<Fixture> {
    vec![
        (vec!["the cat sat", "a dog ran"], vec![vec!["the cat ran"], vec!["a dog ran"]]),
        (vec!["a b c", "x y"], vec![vec!["a c"], vec!["p q"]]),
        (
            vec!["the square is red", "the circle is blue"],
            vec![vec!["the square is red"], vec!["the circle is blue"]],
        ),
        (
            vec!["the the the the", "red red blue"],
            vec![vec!["the cat is on the mat", "there is a cat"], vec!["red blue red"]],
        ),
        (vec!["", "a"], vec![vec!["a b"], vec!["a"]]),
        (
            vec!["there is no red circle in the image", "the red object is a square", "the square left of the circle is green"],
            vec![
                vec!["there is no red circle in the image"],
                vec!["the red object is a triangle", "the red object is a square"],
                vec!["the square to the left of the circle is green"],
            ],
        ),
        (vec!["a a a b", "b b", "c"], vec![vec!["a b a b"], vec!["b"], vec!["c c c"]]),
        (
            vec!["Red, square!", "blue circle."],
            vec![vec!["red square"], vec!["the blue circle"]],
        ),
        (
            vec!["one two three four five six", "one two", "seven eight nine"],
            vec![vec!["one two three four five six seven eight"], vec!["one two three"], vec!["nine eight seven"]],
        ),
        (
            vec!["the triangle is yellow", "the triangle is yellow", "there is a blue square in the image", "the circle is green"],
            vec![
                vec!["the triangle is yellow"],
                vec!["the triangle is red"],
                vec!["there is a blue square in the image"],
                vec!["the circle above the square is green", "the circle is green"],
            ],
        ),
    ]
}

pub fn owned(f: &Fixture) -> (Vec<String>, Vec<Vec<String>>) {
    (
        f.0.iter().map(|s| s.to_string()).collect(),
        f.1.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
    )
}
