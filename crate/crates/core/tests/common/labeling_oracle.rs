//! Brute-force labeling oracle and random instances for it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sfmamba_core::labeling::*;
use sfmamba_core::Tensor;

/// Straight-from-the-definitions reimplementation used as the oracle.
pub mod brute {
    pub struct Out {
        pub y1: Vec<usize>,
        pub y2: Vec<usize>,
        pub refined: Vec<usize>,
        pub confidence: Vec<f64>,
        pub selected: Vec<bool>,
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    fn first_max(v: &[f64]) -> usize {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter().position(|&x| x == m).unwrap()
    }

    fn nearest(x: &[f64], mu: &[Vec<f64>]) -> usize {
        let sims: Vec<f64> = mu.iter().map(|m| cos(x, m)).collect();
        first_max(&sims)
    }

    pub fn run(f: &[Vec<f64>], p: &[Vec<f64>], k: usize, iters: usize, beta: f64) -> Out {
        let n = f.len();
        let c = p[0].len();
        let d = f[0].len();
        let mut mu1 = vec![vec![0.0; d]; c];
        for (class, m) in mu1.iter_mut().enumerate() {
            let mut w = 0.0;
            for i in 0..n {
                w += p[i][class];
                for j in 0..d {
                    m[j] += p[i][class] * f[i][j];
                }
            }
            for v in m.iter_mut() {
                *v /= w;
            }
        }
        let y1: Vec<usize> = f.iter().map(|x| nearest(x, &mu1)).collect();
        let mut mu2 = mu1.clone();
        for (class, m) in mu2.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| y1[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            *m = vec![0.0; d];
            for &i in &members {
                for j in 0..d {
                    m[j] += f[i][j];
                }
            }
            for v in m.iter_mut() {
                *v /= members.len() as f64;
            }
        }
        let y2: Vec<usize> = f.iter().map(|x| nearest(x, &mu2)).collect();

        // neighbor sets: repeatedly take the most similar unused other index
        let nbrs: Vec<Vec<usize>> = (0..n)
            .map(|t| {
                let mut chosen = Vec::new();
                for _ in 0..k {
                    let mut best: Option<usize> = None;
                    for j in 0..n {
                        if j == t || chosen.contains(&j) {
                            continue;
                        }
                        match best {
                            Some(b) if cos(&f[t], &f[j]) <= cos(&f[t], &f[b]) => {}
                            _ => best = Some(j),
                        }
                    }
                    chosen.push(best.unwrap());
                }
                chosen
            })
            .collect();

        let mut lab = y2.clone();
        for _ in 0..iters {
            let next: Vec<usize> = (0..n)
                .map(|t| {
                    let mut post = vec![0.0; c];
                    for &j in &nbrs[t] {
                        post[lab[j]] += cos(&f[t], &f[j]) / k as f64;
                    }
                    first_max(&post)
                })
                .collect();
            lab = next;
        }

        let confidence: Vec<f64> = (0..n)
            .map(|t| {
                let cons: Vec<f64> = nbrs[t]
                    .iter()
                    .filter(|&&j| lab[j] == lab[t])
                    .map(|&j| cos(&f[t], &f[j]))
                    .collect();
                if cons.is_empty() {
                    -1.0
                } else {
                    cons.iter().sum::<f64>() / cons.len() as f64
                }
            })
            .collect();

        // a member is kept when fewer than quota members of its class rank ahead
        let mut selected = vec![false; n];
        for t in 0..n {
            let size = (0..n).filter(|&j| lab[j] == lab[t]).count();
            let quota = (beta * size as f64 - 1e-9).ceil().max(0.0) as usize;
            let ahead = (0..n)
                .filter(|&j| {
                    lab[j] == lab[t]
                        && (confidence[j] > confidence[t]
                            || (confidence[j] == confidence[t] && j < t))
                })
                .count();
            selected[t] = ahead < quota;
        }
        Out {
            y1,
            y2,
            refined: lab,
            confidence,
            selected,
        }
    }
}

pub struct Instance {
    pub f: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub k: usize,
    pub beta: f64,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(5..=20);
    let c = rng.random_range(2..=4);
    let d = rng.random_range(2..=5);
    let mut f: Vec<Vec<f64>> = Vec::new();
    while f.len() < n {
        // small integers make exact cosine ties and duplicates common
        if !f.is_empty() && rng.random_bool(0.2) {
            let j = rng.random_range(0..f.len());
            f.push(f[j].clone());
            continue;
        }
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2..=2) as f64).collect();
        if v.iter().any(|&x| x != 0.0) {
            f.push(v);
        }
    }
    let p = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(1..=5) as f64).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        })
        .collect();
    let k = rng.random_range(1..=4.min(n - 1));
    let beta = [0.3, 0.5, 0.6, 0.75, 1.0][rng.random_range(0..5)];
    Instance { f, p, k, beta }
}

pub fn bank_of(f: &[Vec<f64>], p: &[Vec<f64>]) -> FeatureBank {
    let n = f.len();
    FeatureBank::new(
        Tensor::new(vec![n, f[0].len()], f.concat()).unwrap(),
        Tensor::new(vec![n, p[0].len()], p.concat()).unwrap(),
    )
    .unwrap()
}

/// Runs the library pipeline and the oracle on one instance; `Err` names the
/// first disagreement.
pub fn compare(inst: &Instance) -> Result<(), String> {
    let bank = bank_of(&inst.f, &inst.p);
    let mu1 = soft_centroids(&bank).map_err(|e| e.to_string())?;
    let y1 = assign_by_cosine(bank.features(), &mu1).map_err(|e| e.to_string())?;
    let (_, y2) =
        hard_centroids_and_labels(bank.features(), &y1, &mu1).map_err(|e| e.to_string())?;
    let cfg = LabelingConfig {
        k: inst.k,
        iters: 2,
        beta: inst.beta,
    };
    let table = label_target(&bank, &cfg).map_err(|e| e.to_string())?;
    let want = brute::run(&inst.f, &inst.p, inst.k, 2, inst.beta);
    if y1 != want.y1 {
        return Err("first pass".into());
    }
    if y2 != want.y2 || table.rows.iter().map(|r| r.label).collect::<Vec<_>>() != want.y2 {
        return Err("second pass".into());
    }
    if table.refined() != want.refined {
        return Err("refined labels".into());
    }
    if table
        .rows
        .iter()
        .zip(&want.confidence)
        .any(|(r, q)| (r.confidence - q).abs() >= 1e-12)
    {
        return Err("confidence".into());
    }
    if table.selected() != want.selected {
        return Err("selection".into());
    }
    Ok(())
}
