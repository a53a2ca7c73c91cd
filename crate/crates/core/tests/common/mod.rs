//! Independent loop-based reference implementations shared by the oracle
//! tests and the acceptance suite. Nothing here calls into the library's
//! numeric code, only its plain data types.

#![allow(dead_code)]

use rand::Rng;
use stprompt::feature_io::Rect;
use stprompt::temporal_adapter::AdapterLayerParams;
use stprompt::tensor::Matrix;

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn get(m: &Matrix, r: usize, c: usize) -> f64 {
    m.as_slice()[r * m.cols() + c]
}

/// Motion-weighted top-K aggregation. `patches` is `(T·P)×D`, frame-major.
pub fn sa2(patches: &Matrix, frames: usize, per_frame: usize, k: usize) -> Matrix {
    let d = patches.cols();
    let row = |t: usize, p: usize| t * per_frame + p;
    let mut out = Matrix::zeros(frames, d);
    for t in 0..frames {
        let prev = if t == 0 { 0 } else { t - 1 };
        let next = if t + 1 == frames { t } else { t + 1 };
        let mut motion = Vec::new();
        for p in 0..per_frame {
            let mut s = 0.0;
            for c in 0..d {
                let v = 2.0 * get(patches, row(t, p), c)
                    - get(patches, row(prev, p), c)
                    - get(patches, row(next, p), c);
                s += v * v;
            }
            motion.push((p, s.sqrt()));
        }
        // Largest first, ties to the lower patch index.
        motion.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let kept = &motion[..k];
        let top = kept[0].1;
        let z: f64 = kept.iter().map(|(_, m)| (m - top).exp()).sum();
        for &(p, m) in kept {
            let w = (m - top).exp() / z;
            for c in 0..d {
                out.as_mut_slice()[t * d + c] += w * get(patches, row(t, p), c);
            }
        }
    }
    out
}

pub fn adjacency(frames: usize, sigma: f64) -> Matrix {
    let mut a = Matrix::zeros(frames, frames);
    for i in 0..frames {
        let mut z = 0.0;
        for j in 0..frames {
            z += (-(i as f64 - j as f64).abs() / sigma).exp();
        }
        for j in 0..frames {
            a.as_mut_slice()[i * frames + j] = (-(i as f64 - j as f64).abs() / sigma).exp() / z;
        }
    }
    a
}

fn layer_norm_row(x: &[f64], gain: &Matrix, bias: &Matrix) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / sd * gain.as_slice()[i] + bias.as_slice()[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// One adapter layer; returns `(x_TM, x_TA)`.
pub fn adapter_layer(x: &Matrix, sigma: f64, p: &AdapterLayerParams) -> (Matrix, Matrix) {
    let (t, d) = x.shape();
    let h = p.w1.cols();
    let a = adjacency(t, sigma);
    let mut x_tm = Matrix::zeros(t, d);
    let mut x_ta = Matrix::zeros(t, d);
    for i in 0..t {
        let mut mixed = vec![0.0; d];
        for j in 0..t {
            for c in 0..d {
                mixed[c] += get(&a, i, j) * get(x, j, c);
            }
        }
        let tm = layer_norm_row(&mixed, &p.ln1_gain, &p.ln1_bias);
        let mut hidden = vec![0.0; h];
        for (k, hk) in hidden.iter_mut().enumerate() {
            let mut s = p.b1.as_slice()[k];
            for c in 0..d {
                s += tm[c] * get(&p.w1, c, k);
            }
            *hk = gelu(s);
        }
        let mut res = vec![0.0; d];
        for c in 0..d {
            let mut s = p.b2.as_slice()[c];
            for (k, hk) in hidden.iter().enumerate() {
                s += hk * get(&p.w2, k, c);
            }
            res[c] = s + tm[c];
        }
        let ta = layer_norm_row(&res, &p.ln2_gain, &p.ln2_bias);
        x_tm.row_mut(i).copy_from_slice(&tm);
        x_ta.row_mut(i).copy_from_slice(&ta);
    }
    (x_tm, x_ta)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `M[t,i] = cos(x_clip[t] + x_ta[t], prompts[i])`.
pub fn alignment(x_clip: &Matrix, x_ta: &Matrix, prompts: &Matrix) -> Matrix {
    let (t, d) = x_clip.shape();
    let mut m = Matrix::zeros(t, prompts.rows());
    for r in 0..t {
        let f: Vec<f64> = (0..d).map(|c| get(x_clip, r, c) + get(x_ta, r, c)).collect();
        for i in 0..prompts.rows() {
            m.as_mut_slice()[r * prompts.rows() + i] = cos(&f, prompts.row(i));
        }
    }
    m
}

fn top_k_mean(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = k.min(v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

pub fn class_loss(confidence: &[f64], y: u8, k: usize) -> f64 {
    let p = top_k_mean(confidence, k).clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn align_loss(m: &Matrix, category: usize, k: usize, tau: f64) -> f64 {
    let s: Vec<f64> = (0..m.cols())
        .map(|c| top_k_mean(&(0..m.rows()).map(|r| get(m, r, c)).collect::<Vec<_>>(), k) / tau)
        .collect();
    let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + s.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    lse - s[category]
}

pub fn contrastive_loss(prompts: &Matrix) -> f64 {
    let n = prompts.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += cos(prompts.row(i), prompts.row(j)).max(0.0);
            }
        }
    }
    s
}

/// Abnormal softmax mass per patch over all normalized queries.
pub fn retrieval(patches: &Matrix, normal: &Matrix, abnormal: &Matrix, tau: f64) -> Vec<f64> {
    (0..patches.rows())
        .map(|p| {
            let x = patches.row(p);
            let en: Vec<f64> = (0..normal.rows()).map(|i| (cos(x, normal.row(i)) / tau).exp()).collect();
            let ea: Vec<f64> = (0..abnormal.rows())
                .map(|i| (cos(x, abnormal.row(i)) / tau).exp())
                .collect();
            let za: f64 = ea.iter().sum();
            za / (za + en.iter().sum::<f64>())
        })
        .collect()
}

/// Component boxes by repeated minimum-label propagation, ordered by each
/// component's first pixel in row-major order. Returns `(rect, max value)`.
pub fn component_boxes(heat: &Matrix, threshold: f64, min_area: usize) -> Vec<(Rect, f64)> {
    let (rows, cols) = heat.shape();
    let on = |p: usize| heat.as_slice()[p] >= threshold;
    let mut label: Vec<usize> = (0..rows * cols).map(|p| if on(p) { p + 1 } else { 0 }).collect();
    loop {
        let mut changed = false;
        for r in 0..rows {
            for c in 0..cols {
                let p = r * cols + c;
                if label[p] == 0 {
                    continue;
                }
                let mut best = label[p];
                let mut consider = |q: usize| {
                    if label[q] != 0 && label[q] < best {
                        best = label[q];
                    }
                };
                if r > 0 {
                    consider(p - cols);
                }
                if r + 1 < rows {
                    consider(p + cols);
                }
                if c > 0 {
                    consider(p - 1);
                }
                if c + 1 < cols {
                    consider(p + 1);
                }
                if best != label[p] {
                    label[p] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut ids: Vec<usize> = label.iter().cloned().filter(|&l| l != 0).collect();
    ids.sort();
    ids.dedup();
    let mut out = Vec::new();
    for id in ids {
        let pixels: Vec<usize> = (0..rows * cols).filter(|&p| label[p] == id).collect();
        if pixels.len() < min_area.max(1) {
            continue;
        }
        let r0 = pixels.iter().map(|p| p / cols).min().unwrap();
        let r1 = pixels.iter().map(|p| p / cols).max().unwrap();
        let c0 = pixels.iter().map(|p| p % cols).min().unwrap();
        let c1 = pixels.iter().map(|p| p % cols).max().unwrap();
        let top = pixels.iter().map(|&p| heat.as_slice()[p]).fold(f64::NEG_INFINITY, f64::max);
        out.push((
            Rect::new(c0 as f64, r0 as f64, (c1 - c0 + 1) as f64, (r1 - r0 + 1) as f64),
            top,
        ));
    }
    out
}

/// AUC as the fraction of positive/negative pairs ordered correctly, ties
/// counting one half.
pub fn pairwise_auc(scores: &[f64], flags: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if flags[i] == 1 && flags[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Worst absolute deviation between each library routine and its loop
/// reference over `cases` random inputs.
pub fn oracle_errors(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use stprompt::{dual_branch, losses, prompt_bank, sa2 as lib_sa2, spatial_localizer, temporal_adapter};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 9];
    for _ in 0..cases {
        let frames = rng.random_range(1..=12);
        let d = rng.random_range(2..=10);
        let grid = (rng.random_range(1..=4), rng.random_range(1..=4));
        let per_frame = grid.0 * grid.1;
        let k = rng.random_range(1..=per_frame);

        // Spatial aggregation.
        let patches = random_matrix(frames * per_frame, d, &mut rng);
        let pf = lib_sa2::PatchFeatures::new(frames, grid, patches.clone()).unwrap();
        let got = lib_sa2::spatial_aggregate(&pf, k).unwrap().features;
        worst[0] = worst[0].max(max_abs_diff(&got, &sa2(&patches, frames, per_frame, k)));

        // Adjacency and the adapter stack.
        let sigma = rng.random_range(0.3..3.0);
        let adj = temporal_adapter::distance_adjacency(frames, sigma).unwrap();
        worst[1] = worst[1].max(max_abs_diff(&adj, &adjacency(frames, sigma)));
        let layers = rng.random_range(1..=2);
        let mut params = temporal_adapter::AdapterParams::init(d, 2 * d, layers, sigma, &mut rng);
        for l in &mut params.layers {
            l.b1 = random_matrix(1, 2 * d, &mut rng);
            l.b2 = random_matrix(1, d, &mut rng);
            l.ln1_gain = random_matrix(1, d, &mut rng);
            l.ln1_bias = random_matrix(1, d, &mut rng);
            l.ln2_gain = random_matrix(1, d, &mut rng);
            l.ln2_bias = random_matrix(1, d, &mut rng);
        }
        let x_clip = random_matrix(frames, d, &mut rng);
        let x_as = random_matrix(frames, d, &mut rng);
        let out = temporal_adapter::adapter_forward(&x_clip, &x_as, &params).unwrap();
        let mut x = x_clip.zip_map(&x_as, |a, b| a + b);
        let mut x_tm = x.clone();
        for l in &params.layers {
            let (tm, ta) = adapter_layer(&x, sigma, l);
            x_tm = tm;
            x = ta;
        }
        worst[2] = worst[2].max(max_abs_diff(&out.x_ta, &x).max(max_abs_diff(&out.x_tm, &x_tm)));

        // Alignment matrix.
        let classes = rng.random_range(2..=4);
        let prompts = random_matrix(classes, d, &mut rng);
        let m = dual_branch::align(&x_clip, &out.x_ta, &prompt_bank::PromptMatrix(prompts.clone())).unwrap();
        worst[3] = worst[3].max(max_abs_diff(&m, &alignment(&x_clip, &out.x_ta, &prompts)));

        // Losses.
        let conf: Vec<f64> = (0..frames).map(|_| rng.random_range(0.0..1.0)).collect();
        let kk = rng.random_range(1..=frames + 2);
        let y = rng.random_range(0..=1u8);
        let e_class = (losses::topk_class_loss(&conf, y, kk) - class_loss(&conf, y, kk)).abs();
        let cat = rng.random_range(0..classes);
        let tau = rng.random_range(0.05..1.0);
        let e_align = (losses::mil_align_loss(&m, cat, kk, tau).unwrap() - align_loss(&m, cat, kk, tau)).abs();
        let e_const = (losses::prompt_contrastive_loss(&prompts).unwrap() - contrastive_loss(&prompts)).abs();
        worst[4] = worst[4].max(e_class);
        worst[5] = worst[5].max(e_align);
        worst[6] = worst[6].max(e_const);

        // Patch-vs-query retrieval.
        let normal = random_matrix(rng.random_range(1..=3), d, &mut rng);
        let abnormal = random_matrix(rng.random_range(1..=3), d, &mut rng);
        let q = prompt_bank::QuerySet::new(normal.clone(), abnormal.clone(), vec![], vec![]).unwrap();
        let fine = random_matrix(per_frame, d, &mut rng);
        let grid_feats = spatial_localizer::PatchGrid::new(grid.0, grid.1, spatial_localizer::ScaleSpec::FINE, fine.clone()).unwrap();
        let heat = spatial_localizer::retrieve(&grid_feats, &q, tau).unwrap();
        let want = retrieval(&fine, &normal, &abnormal, tau);
        let e = heat
            .values
            .as_slice()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst[7] = worst[7].max(e);

        // Connected-component boxes.
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let heat = Matrix::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect());
        let thr = rng.random_range(0.3..0.8);
        let min_area = rng.random_range(1..=3);
        let got = spatial_localizer::extract_boxes(&heat, thr, min_area);
        let want = component_boxes(&heat, thr, min_area);
        let e = if got.len() != want.len() {
            f64::INFINITY
        } else {
            got.iter()
                .zip(&want)
                .map(|(g, (r, c))| {
                    let dr = (g.rect.x - r.x).abs() + (g.rect.y - r.y).abs() + (g.rect.w - r.w).abs() + (g.rect.h - r.h).abs();
                    dr.max((g.confidence - c).abs())
                })
                .fold(0.0, f64::max)
        };
        worst[8] = worst[8].max(e);
    }
    vec![
        ("spatial aggregation", worst[0]),
        ("adjacency", worst[1]),
        ("temporal adapter", worst[2]),
        ("alignment matrix", worst[3]),
        ("top-k class loss", worst[4]),
        ("MIL-Align loss", worst[5]),
        ("prompt contrastive loss", worst[6]),
        ("query retrieval", worst[7]),
        ("component boxes", worst[8]),
    ]
}
