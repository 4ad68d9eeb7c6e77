// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::fixtures::{self, random_image, tiny_config, tiny_random, tiny_random_weights};
use crate::rng::Rng;

/// Naive ViT forward straight from the weight container.
fn reference_logits(w: &WeightFile, image: &Tensor) -> Vec<f64> {
    let cfg: ModelConfig = serde_json::from_str(&w.config_json).unwrap();
    let get = |n: &str| -> Vec<f64> { w.get(n).unwrap().data.iter().map(|&v| v as f64).collect() };
    let (d, p, s) = (cfg.width, cfg.patch_size, cfg.image_size);
    let g = s / p;
    let t = 1 + g * g;
    let lin = |x: &[Vec<f64>], wt: &[f64], b: &[f64], dout: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..dout)
                    .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * wt[i * dout + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let ln = |x: &[Vec<f64>], gamma: &[f64], beta: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + cfg.ln_eps).sqrt() * gamma[j] + beta[j])
                    .collect()
            })
            .collect()
    };
    let act = |v: f64| v * cfg.activation.gate(v);

    let (proj, pb, pos, cls) = (get("patch.proj"), get("patch.bias"), get("patch.pos"), get("patch.cls"));
    let mut x = vec![vec![0.0; d]; t];
    for j in 0..d {
        x[0][j] = cls[j] + pos[j];
    }
    for pr in 0..g {
        for pc in 0..g {
            let n = pr * g + pc;
            for j in 0..d {
                let mut acc = pb[j];
                for c in 0..3 {
                    for i in 0..p {
                        for k in 0..p {
                            let r = (c * p + i) * p + k;
                            acc += image.get3(c, pr * p + i, pc * p + k) * proj[r * d + j];
                        }
                    }
                }
                x[1 + n][j] = acc + pos[(1 + n) * d + j];
            }
        }
    }
    let heads = cfg.heads;
    let dh = d / heads;
    let hidden = cfg.mlp_hidden();
    for b in 0..cfg.depth {
        let name = |s: &str| format!("blocks.{b}.{s}");
        let z = ln(&x, &get(&name("ln1.gamma")), &get(&name("ln1.beta")));
        let zeros = vec![0.0; d];
        let q = lin(&z, &get(&name("attn.wq")), &zeros, d);
        let k = lin(&z, &get(&name("attn.wk")), &zeros, d);
        let v = lin(&z, &get(&name("attn.wv")), &zeros, d);
        let mut o = vec![vec![0.0; d]; t];
        for h in 0..heads {
            for i in 0..t {
                let sc: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|l| q[i][h * dh + l] * k[j][h * dh + l]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = sc.iter().map(|s| (s - m).exp()).collect();
                let zsum: f64 = e.iter().sum();
                for j in 0..t {
                    for l in 0..dh {
                        o[i][h * dh + l] += e[j] / zsum * v[j][h * dh + l];
                    }
                }
            }
        }
        let a = lin(&o, &get(&name("attn.wo")), &get(&name("attn.bo")), d);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += a[i][j];
            }
        }
        let z = ln(&x, &get(&name("ln2.gamma")), &get(&name("ln2.beta")));
        let hmid: Vec<Vec<f64>> = lin(&z, &get(&name("mlp.w1")), &get(&name("mlp.b1")), hidden)
            .into_iter()
            .map(|r| r.into_iter().map(act).collect())
            .collect();
        let m = lin(&hmid, &get(&name("mlp.w2")), &get(&name("mlp.b2")), d);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += m[i][j];
            }
        }
    }
    let z = ln(&x[..1], &get("final.ln.gamma"), &get("final.ln.beta"));
    lin(&z, &get("head.w"), &get("head.b"), cfg.num_classes).remove(0)
}

#[test]
fn matches_straight_line_reference() {
    for seed in 0..3 {
        let w = tiny_random_weights(seed);
        let m = Model::from_weights(w.clone()).unwrap();
        let x = random_image(seed + 100, 32);
        let logits = m.forward_logits(&x).unwrap();
        let reference = reference_logits(&w, &x);
        for (a, b) in logits.data().iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn variants_match_reference() {
    for (i, cfg) in fixtures::config_variants().iter().enumerate() {
        let w = fixtures::random_weights(cfg, 40 + i as u64);
        let m = Model::from_weights(w.clone()).unwrap();
        let x = random_image(i as u64, 32);
        let logits = m.forward_logits(&x).unwrap();
        for (a, b) in logits.data().iter().zip(reference_logits(&w, &x)) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn forward_is_pure_and_finite_on_zero_image() {
    let m = tiny_random(1);
    let z = Tensor::zeros(&m.input_shape());
    let a = m.forward_logits(&z).unwrap();
    assert!(a.all_finite());
    assert_eq!(a, m.forward_logits(&z).unwrap());
    let x = random_image(2, 32);
    assert_eq!(m.forward_logits(&x).unwrap(), m.forward_logits(&x).unwrap());
}

#[test]
fn conditioned_logits_equal_standard() {
    let m = tiny_random(3);
    let x = random_image(4, 32);
    let (logits, caches) = m.condition(&x).unwrap();
    assert_eq!(logits, m.forward_logits(&x).unwrap());
    assert_eq!(m.apply_frozen(&caches, &x).unwrap(), logits);
}

#[test]
fn reconstruction_identity() {
    for seed in 0..3 {
        let m = tiny_random(seed);
        for i in 0..5 {
            let x = random_image(10 * seed + i, 32);
            let logits = m.forward_logits(&x).unwrap();
            for k in 0..4 {
                let r = m.effective_row(&x, k).unwrap();
                let recon = r.row.dot(&x).unwrap() + r.frozen_offset;
                let l = logits.data()[k];
                assert!((recon - l).abs() / (l.abs() + 1e-9) <= 1e-6, "{recon} vs {l}");
            }
        }
    }
}

#[test]
fn frozen_map_is_affine_in_the_image() {
    let m = tiny_random(5);
    let x = random_image(6, 32);
    let (_, caches) = m.condition(&x).unwrap();
    let r = m.effective_row(&x, 2).unwrap();
    let g = |x: &Tensor| m.apply_frozen(&caches, x).unwrap().data()[2];
    let diff = g(&x.scale(2.0)) - g(&x);
    assert!((diff - r.row.dot(&x).unwrap()).abs() <= 1e-8);
}

#[test]
fn row_matches_fd_of_frozen_map() {
    let m = tiny_random(7);
    let x = random_image(8, 32);
    let (_, caches) = m.condition(&x).unwrap();
    let r = m.effective_row(&x, 1).unwrap();
    let g = |x: &Tensor| m.apply_frozen(&caches, x).unwrap().data()[1];
    let mut s = Rng::new(9).substream(0);
    let h = 1e-4;
    for _ in 0..50 {
        let i = (s.next_u64() % x.len() as u64) as usize;
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut q = x.clone();
        q.data_mut()[i] -= h;
        let fd = (g(&p) - g(&q)) / (2.0 * h);
        let an = r.row.data()[i];
        assert!((fd - an).abs() / an.abs().max(1e-3) <= 1e-5, "pixel {i}: {an} vs {fd}");
    }
}

#[test]
fn row_is_homogeneous_in_the_cogradient() {
    let m = tiny_random(10);
    let x = random_image(11, 32);
    let (row, _) = m.effective_backward(&x, &[0.0, 1.0, 0.0, 0.0]).unwrap();
    for scale in [2.0, 0.25, -4.0] {
        let (scaled, _) = m.effective_backward(&x, &[0.0, scale, 0.0, 0.0]).unwrap();
        assert_eq!(scaled, row.scale(scale));
    }
    let (mix, _) = m.effective_backward(&x, &[1.0, 0.5, 0.0, 0.0]).unwrap();
    let (r0, _) = m.effective_backward(&x, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(mix.sub(&r0.add(&row.scale(0.5)).unwrap()).unwrap().max_abs() <= 1e-12);
}

#[test]
fn analytic_gradient_matches_fd() {
    let m = tiny_random(12);
    let x = random_image(13, 32);
    for k in [0, 3] {
        let an = m.input_gradient(&x, k).unwrap();
        let fd = m.input_gradient_fd(&x, k, 1e-5).unwrap();
        let err = an.sub(&fd).unwrap().max_abs() / fd.max_abs();
        assert!(err <= 1e-6, "class {k}: {err}");
    }
}

#[test]
fn fixed_mixing_gradient_is_the_effective_row() {
    let m = fixtures::fixed_mixing(14);
    let x = random_image(15, 32);
    for k in 0..4 {
        let g = m.input_gradient(&x, k).unwrap();
        let r = m.effective_row(&x, k).unwrap().row;
        assert!(g.sub(&r).unwrap().max_abs() <= 1e-8);
        let fd = m.input_gradient_fd(&x, k, 1e-4).unwrap();
        assert!(g.sub(&fd).unwrap().max_abs() <= 1e-8);
    }
    assert!(matches!(m.save(std::env::temp_dir().join("never-written")), Err(DaveError::Contract(_))));
}

#[test]
fn zero_head_has_zero_gradient() {
    let mut w = tiny_random_weights(16);
    for t in w.tensors.iter_mut().filter(|t| t.name == "head.w") {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let m = Model::from_weights(w).unwrap();
    let x = random_image(17, 32);
    assert_eq!(m.input_gradient(&x, 0).unwrap().max_abs(), 0.0);
    assert_eq!(m.effective_row(&x, 0).unwrap().row.max_abs(), 0.0);
}

#[test]
fn one_block_gradient_decomposes() {
    // FD gradient along a direction == effective part + operator variation.
    let cfg = ModelConfig {
        depth: 1,
        ..tiny_config()
    };
    let m = Model::from_weights(fixtures::random_weights(&cfg, 18)).unwrap();
    let x = random_image(19, 32);
    let h = 1e-4;
    for r in 0..5 {
        let dir = Rng::new(20).substream(r).gaussian(x.shape());
        let fd = m
            .forward_logits(&x.add(&dir.scale(h)).unwrap())
            .unwrap()
            .sub(&m.forward_logits(&x.sub(&dir.scale(h)).unwrap()).unwrap())
            .unwrap()
            .scale(0.5 / h);
        let var = m.directional_operator_variation(&x, &dir, h).unwrap();
        for k in 0..4 {
            let eff = m.effective_row(&x, k).unwrap().row.dot(&dir).unwrap();
            let total = eff + var.data()[k];
            let f = fd.data()[k];
            assert!((total - f).abs() / f.abs().max(1e-3) <= 1e-4, "dir {r} class {k}: {total} vs {f}");
        }
    }
}

#[test]
fn save_after_load_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.dwt");
    tiny_random_weights(21).save(&path).unwrap();
    let m = Model::load(&path).unwrap();
    let again = dir.path().join("again.dwt");
    m.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn bad_magic_is_a_format_error() {
    let mut bytes = tiny_random_weights(22).to_bytes().unwrap();
    bytes[..8].copy_from_slice(b"XXXXXXXX");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.dwt");
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(Model::load(&path), Err(DaveError::Format(_))));
}

#[test]
fn schema_errors_name_the_tensor() {
    let mut w = tiny_random_weights(23);
    w.tensors.retain(|t| t.name != "blocks.1.attn.wk");
    let err = Model::from_weights(w).unwrap_err();
    assert!(matches!(&err, DaveError::Schema(m) if m.contains("blocks.1.attn.wk")), "{err}");

    let mut w = tiny_random_weights(23);
    let t = w.tensors.iter_mut().find(|t| t.name == "head.b").unwrap();
    t.dims = vec![5];
    t.data.push(0.0);
    let err = Model::from_weights(w).unwrap_err();
    assert!(matches!(&err, DaveError::Schema(m) if m.contains("head.b")), "{err}");

    let mut w = tiny_random_weights(23);
    w.tensors.push(NamedTensor::new("blocks.9.extra", &[1], vec![0.0]));
    assert!(matches!(Model::from_weights(w), Err(DaveError::Schema(m)) if m.contains("blocks.9.extra")));

    let mut w = tiny_random_weights(23);
    w.config_json = w.config_json.replace("\"patch_size\":8", "\"patch_size\":5");
    assert!(matches!(Model::from_weights(w), Err(DaveError::Schema(_))));
}

#[test]
fn schema_has_thirteen_tensors_per_block() {
    let cfg = tiny_config();
    assert_eq!(cfg.tensor_schema().len(), 4 + 13 * cfg.depth + 2 + 2);
    assert_eq!(tiny_random_weights(0).tensors.len(), cfg.tensor_schema().len());
}

#[test]
fn standardization_round_trips() {
    let cfg = tiny_config();
    let unit = fixtures::uniform_tensor(1, 0, &[3, 4, 4], 0.0, 1.0);
    let x = cfg.standardize(&unit);
    assert!((x.get3(1, 0, 0) - (unit.get3(1, 0, 0) - cfg.norm_mean[1]) / cfg.norm_std[1]).abs() <= 1e-15);
    assert!(cfg.unstandardize(&x).sub(&unit).unwrap().max_abs() <= 1e-15);
}

#[test]
fn rejects_bad_inputs() {
    let m = tiny_random(24);
    assert!(matches!(m.forward_logits(&Tensor::zeros(&[3, 16, 16])), Err(DaveError::Shape { .. })));
    assert!(matches!(m.effective_row(&random_image(1, 32), 4), Err(DaveError::Param(_))));
}

#[test]
fn detector_picks_the_bright_quadrant() {
    let model = fixtures::detector();
    let argmax = |x: &Tensor| {
        let l = model.forward_logits(x).unwrap();
        (0..4).max_by(|&a, &b| l.data()[a].total_cmp(&l.data()[b])).unwrap()
    };
    for seed in 0..40 {
        let sq = fixtures::square_image(seed, 32);
        assert_eq!(argmax(&sq.image), sq.quadrant, "seed {seed}");
    }
    // Every ordering of four quadrant brightness levels.
    let levels = [0.1, 0.35, 0.6, 0.85];
    let mut perm = [0usize, 1, 2, 3];
    let mut checked = 0;
    loop {
        let x = Tensor::from_fn(&[3, 32, 32], |idx| {
            let (i, j) = ((idx % 1024) / 32, idx % 32);
            levels[perm[2 * usize::from(i >= 16) + usize::from(j >= 16)]]
        });
        let brightest = (0..4).position(|q| perm[q] == 3).unwrap();
        assert_eq!(argmax(&x), brightest, "levels {perm:?}");
        checked += 1;
        // Next lexicographic permutation.
        let Some(i) = (0..3).rev().find(|&i| perm[i] < perm[i + 1]) else { break };
        let j = (i + 1..4).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    assert_eq!(checked, 24);
}
